//! Uniform input representation: scalar projection + fixed positional
//! encoding + learnable global time-stamp embeddings.

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Error, Result};
use crate::tensor::{Padding, Rng, Scalar, Tensor};

/// Sampling interval of a series; controls which stamp features exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Hourly,
    QuarterHourly,
}

impl Granularity {
    pub fn step_seconds(&self) -> i64 {
        match self {
            Granularity::Hourly => 3600,
            Granularity::QuarterHourly => 900,
        }
    }
}

pub const MONTH_VOCAB: usize = 12;
pub const DAY_VOCAB: usize = 31;
pub const WEEKDAY_VOCAB: usize = 7;
pub const HOUR_VOCAB: usize = 24;
pub const QUARTER_VOCAB: usize = 4;

/// Calendar indices of one timestamp, all zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StampVector {
    pub month: usize,
    pub day: usize,
    pub weekday: usize,
    pub hour: usize,
    /// Quarter of the hour; present only at 15-minute granularity.
    pub quarter: Option<usize>,
}

/// Deterministic index extraction from a calendar timestamp. Weekday 0
/// is Monday.
pub fn stamp_features(ts: NaiveDateTime, granularity: Granularity) -> StampVector {
    StampVector {
        month: ts.month0() as usize,
        day: ts.day0() as usize,
        weekday: ts.weekday().num_days_from_monday() as usize,
        hour: ts.hour() as usize,
        quarter: match granularity {
            Granularity::Hourly => None,
            Granularity::QuarterHourly => Some((ts.minute() / 15) as usize),
        },
    }
}

/// Fixed sinusoidal position table over a window of length `l_x`:
/// `PE[pos, 2j] = sin(pos / (2 l_x)^(2j / d_model))` and the cosine of the
/// same argument at `2j + 1`. The window length itself sets the frequency
/// base, so the table is a pure function of `(l_x, d_model)`.
pub fn positional_encoding<S: Scalar>(l_x: usize, d_model: usize) -> Result<Tensor<S>> {
    if l_x == 0 {
        return Err(Error::Dim("positional_encoding: zero-length window".into()));
    }
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Dim(format!(
            "positional_encoding: d_model {d_model} must be positive and even"
        )));
    }
    let base = 2.0 * l_x as f64;
    let mut data = vec![S::zero(); l_x * d_model];
    for pos in 0..l_x {
        for j in 0..d_model / 2 {
            let denom = base.powf(2.0 * j as f64 / d_model as f64);
            let arg = pos as f64 / denom;
            data[pos * d_model + 2 * j] = S::from_f64(arg.sin());
            data[pos * d_model + 2 * j + 1] = S::from_f64(arg.cos());
        }
    }
    Tensor::from_vec(&[l_x, d_model], data)
}

/// One learnable embedding table per stamp type.
#[derive(Clone, Debug)]
pub struct StampTables<S: Scalar> {
    pub month: Tensor<S>,
    pub day: Tensor<S>,
    pub weekday: Tensor<S>,
    pub hour: Tensor<S>,
    pub quarter: Option<Tensor<S>>,
}

fn stamp_table<S: Scalar>(vocab: usize, d_model: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    let data = (0..vocab * d_model)
        .map(|_| S::from_f64(rng.uniform(-0.1, 0.1)))
        .collect();
    Tensor::param(&[vocab, d_model], data)
}

impl<S: Scalar> StampTables<S> {
    pub fn init(d_model: usize, granularity: Granularity, rng: &mut Rng) -> Result<Self> {
        Ok(StampTables {
            month: stamp_table(MONTH_VOCAB, d_model, rng)?,
            day: stamp_table(DAY_VOCAB, d_model, rng)?,
            weekday: stamp_table(WEEKDAY_VOCAB, d_model, rng)?,
            hour: stamp_table(HOUR_VOCAB, d_model, rng)?,
            quarter: match granularity {
                Granularity::Hourly => None,
                Granularity::QuarterHourly => Some(stamp_table(QUARTER_VOCAB, d_model, rng)?),
            },
        })
    }

    /// Zero-initialized tables (tests).
    pub fn zeros(d_model: usize, granularity: Granularity) -> Result<Self> {
        let zero =
            |vocab: usize| Tensor::param(&[vocab, d_model], vec![S::zero(); vocab * d_model]);
        Ok(StampTables {
            month: zero(MONTH_VOCAB)?,
            day: zero(DAY_VOCAB)?,
            weekday: zero(WEEKDAY_VOCAB)?,
            hour: zero(HOUR_VOCAB)?,
            quarter: match granularity {
                Granularity::Hourly => None,
                Granularity::QuarterHourly => Some(zero(QUARTER_VOCAB)?),
            },
        })
    }

    /// Sum of the per-type embeddings for a stamp sequence.
    fn lookup_sum(&self, stamps: &[StampVector]) -> Result<Tensor<S>> {
        let take = |idx: Vec<usize>, table: &Tensor<S>| table.gather_rows(&idx);
        let mut total = take(stamps.iter().map(|s| s.month).collect(), &self.month)?;
        total = total.add(&take(stamps.iter().map(|s| s.day).collect(), &self.day)?)?;
        total = total.add(&take(
            stamps.iter().map(|s| s.weekday).collect(),
            &self.weekday,
        )?)?;
        total = total.add(&take(stamps.iter().map(|s| s.hour).collect(), &self.hour)?)?;
        if let Some(quarter_table) = &self.quarter {
            let idx: Result<Vec<usize>> = stamps
                .iter()
                .map(|s| {
                    s.quarter.ok_or_else(|| {
                        Error::Contract(
                            "quarter-hourly embedding got a stamp without a quarter index".into(),
                        )
                    })
                })
                .collect();
            total = total.add(&take(idx?, quarter_table)?)?;
        }
        Ok(total)
    }
}

/// Scalar projection kernel, stamp tables and the balance factor of the
/// input representation.
#[derive(Clone, Debug)]
pub struct EmbeddingParams<S: Scalar> {
    /// Width-3 conv kernel `[3, d_x, d_model]`, bias-free so the
    /// projection stays linear in the input.
    pub projection: Tensor<S>,
    pub tables: StampTables<S>,
    /// Balance factor between the scalar projection and the embeddings;
    /// 1 for normalized inputs.
    pub alpha: S,
}

impl<S: Scalar> EmbeddingParams<S> {
    pub fn init(
        d_x: usize,
        d_model: usize,
        granularity: Granularity,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan = (3 * d_x + 3 * d_model) as f64;
        let limit = (6.0 / fan).sqrt();
        let data = (0..3 * d_x * d_model)
            .map(|_| S::from_f64(rng.uniform(-limit, limit)))
            .collect();
        Ok(EmbeddingParams {
            projection: Tensor::param(&[3, d_x, d_model], data)?,
            tables: StampTables::init(d_model, granularity, rng)?,
            alpha: S::one(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.projection.shape()[2]
    }

    /// The projection component alone: `alpha * conv(x)`.
    pub fn project(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.conv1d(&self.projection, None, Padding::Replicate)?
            .scale(self.alpha))
    }
}

/// Feeding vector of a window: `alpha * conv(x) + PE + sum of stamp
/// embeddings`, with the position index local to the window.
pub fn embed_input<S: Scalar>(
    x: &Tensor<S>,
    stamps: &[StampVector],
    params: &EmbeddingParams<S>,
) -> Result<Tensor<S>> {
    if x.shape().len() != 2 {
        return Err(Error::Dim("embed_input: x must be [L, d_x]".into()));
    }
    let l = x.shape()[0];
    if stamps.len() != l {
        return Err(Error::Dim(format!(
            "embed_input: {l} rows but {} stamps",
            stamps.len()
        )));
    }
    let proj = params.project(x)?;
    let pe = positional_encoding::<S>(l, params.d_model())?;
    let se = params.tables.lookup_sum(stamps)?;
    proj.add(&pe)?.add(&se)
}
