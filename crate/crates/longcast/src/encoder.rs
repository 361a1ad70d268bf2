//! Encoder: attention blocks with self-attention distilling and the
//! pyramid of halved-input stack replicas.

use crate::attention::{multihead, AttentionKind, AttentionSpec, MultiheadParams};
use crate::error::{Error, Result};
use crate::model::ForwardCtx;
use crate::tensor::{Padding, Rng, Scalar, Tensor};

/// One encoder stack: `layers` attention blocks over the most recent
/// `1/fraction_den` slice of the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub layers: usize,
    /// Denominator of the input fraction (1, 2, 4, ...).
    pub fraction_den: usize,
}

impl StackSpec {
    pub fn new(layers: usize, fraction_den: usize) -> Self {
        StackSpec {
            layers,
            fraction_den,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("stack layer_count must be positive".into()));
        }
        if self.fraction_den == 0 || !self.fraction_den.is_power_of_two() {
            return Err(Error::Config(format!(
                "stack input fraction denominator {} must be a power of two",
                self.fraction_den
            )));
        }
        Ok(())
    }

    /// Slice length this stack consumes from a window of length `l_x`.
    pub fn input_len(&self, l_x: usize) -> Result<usize> {
        if !l_x.is_multiple_of(self.fraction_den) || l_x == 0 {
            return Err(Error::Config(format!(
                "window length {l_x} is not divisible by stack fraction 1/{}",
                self.fraction_den
            )));
        }
        Ok(l_x / self.fraction_den)
    }

    /// Time lengths entering each of the stack's attention blocks.
    pub fn activation_lengths(&self, l_x: usize, distilling: bool) -> Result<Vec<usize>> {
        let mut l = self.input_len(l_x)?;
        let mut lengths = Vec::with_capacity(self.layers);
        for _ in 0..self.layers {
            lengths.push(l);
            if distilling {
                l = l.div_ceil(2);
            }
        }
        Ok(lengths)
    }

    /// Output length after `layers - 1` distill halvings.
    pub fn output_len(&self, l_x: usize, distilling: bool) -> Result<usize> {
        let lengths = self.activation_lengths(l_x, distilling)?;
        Ok(*lengths.last().unwrap())
    }
}

/// Position-wise feed-forward network `d_model -> d_ffn -> d_model`.
#[derive(Clone, Debug)]
pub struct FfnParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.uniform(-limit, limit)))
        .collect();
    Tensor::param(&[rows, cols], data)
}

impl<S: Scalar> FfnParams<S> {
    pub fn init(d_model: usize, d_ffn: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FfnParams {
            w1: glorot(d_model, d_ffn, rng)?,
            b1: Tensor::param(&[d_ffn], vec![S::zero(); d_ffn])?,
            w2: glorot(d_ffn, d_model, rng)?,
            b2: Tensor::param(&[d_model], vec![S::zero(); d_model])?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.w1)?
            .add_bias_row(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_bias_row(&self.b2)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<S: Scalar> {
    pub gain: Tensor<S>,
    pub offset: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn init(d_model: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: Tensor::param(&[d_model], vec![S::one(); d_model])?,
            offset: Tensor::param(&[d_model], vec![S::zero(); d_model])?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layernorm(&self.gain, &self.offset)
    }
}

/// Parameters of one encoder attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams<S: Scalar> {
    pub mha: MultiheadParams<S>,
    pub attn: AttentionSpec,
    pub ln1: LayerNormParams<S>,
    pub ln2: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
}

impl<S: Scalar> EncoderBlockParams<S> {
    pub fn init(
        d_model: usize,
        d_ffn: usize,
        heads: usize,
        head_dim: usize,
        sampling_factor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let attn = AttentionSpec::new(heads, head_dim)
            .with_factor(sampling_factor)
            .with_seed(rng.next_seed());
        Ok(EncoderBlockParams {
            mha: MultiheadParams::init(d_model, heads, head_dim, rng)?,
            attn,
            ln1: LayerNormParams::init(d_model)?,
            ln2: LayerNormParams::init(d_model)?,
            ffn: FfnParams::init(d_model, d_ffn, rng)?,
        })
    }
}

/// Self-attention block: residual attention then residual FFN, each
/// followed by layer normalization. Length-preserving.
pub fn attention_block<S: Scalar>(
    x: &Tensor<S>,
    params: &EncoderBlockParams<S>,
    kind: AttentionKind,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let attn = multihead(x, x, &params.mha, &params.attn, kind)?;
    let attn = attn.dropout(ctx.dropout, ctx.training, &mut ctx.rng)?;
    let x1 = params.ln1.forward(&x.add(&attn)?)?;
    let ffn = params.ffn.forward(&x1)?;
    let ffn = ffn.dropout(ctx.dropout, ctx.training, &mut ctx.rng)?;
    params.ln2.forward(&x1.add(&ffn)?)
}

/// Distilling convolution between consecutive blocks.
#[derive(Clone, Debug)]
pub struct DistillParams<S: Scalar> {
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
}

impl<S: Scalar> DistillParams<S> {
    pub fn init(d_model: usize, rng: &mut Rng) -> Result<Self> {
        let fan = (3 * d_model + 3 * d_model) as f64;
        let limit = (6.0 / fan).sqrt();
        let data = (0..3 * d_model * d_model)
            .map(|_| S::from_f64(rng.uniform(-limit, limit)))
            .collect();
        Ok(DistillParams {
            conv_w: Tensor::param(&[3, d_model, d_model], data)?,
            conv_b: Tensor::param(&[d_model], vec![S::zero(); d_model])?,
        })
    }
}

/// Halve the time axis: width-3 convolution, ELU, then stride-2 max
/// pooling (kernel 3, padding 1).
pub fn distill<S: Scalar>(x: &Tensor<S>, params: &DistillParams<S>) -> Result<Tensor<S>> {
    if x.shape().len() != 2 || x.shape()[0] < 2 {
        return Err(Error::Dim(format!(
            "distill: input must have at least 2 time steps, got shape {:?}",
            x.shape()
        )));
    }
    x.conv1d(&params.conv_w, Some(&params.conv_b), Padding::Replicate)?
        .elu()
        .maxpool1d(3, 2, 1)
}

/// Parameters of one stack: `layers` blocks and `layers - 1` distills.
#[derive(Clone, Debug)]
pub struct StackParams<S: Scalar> {
    pub blocks: Vec<EncoderBlockParams<S>>,
    pub distills: Vec<DistillParams<S>>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<S: Scalar> {
    pub stacks: Vec<StackParams<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        specs: &[StackSpec],
        d_model: usize,
        d_ffn: usize,
        heads: usize,
        head_dim: usize,
        sampling_factor: f64,
        distilling: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut stacks = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let blocks = (0..spec.layers)
                .map(|_| {
                    EncoderBlockParams::init(d_model, d_ffn, heads, head_dim, sampling_factor, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let n_distills = if distilling { spec.layers - 1 } else { 0 };
            let distills = (0..n_distills)
                .map(|_| DistillParams::init(d_model, rng))
                .collect::<Result<Vec<_>>>()?;
            stacks.push(StackParams { blocks, distills });
        }
        Ok(EncoderParams { stacks })
    }
}

/// Check that every stack produces the same output length so the
/// concatenation is well-formed; returns that common length.
pub fn check_stack_alignment(specs: &[StackSpec], l_x: usize, distilling: bool) -> Result<usize> {
    if specs.is_empty() {
        return Err(Error::Config("encoder needs at least one stack".into()));
    }
    let mut out: Option<usize> = None;
    for spec in specs {
        spec.validate()?;
        let len = spec.output_len(l_x, distilling)?;
        match out {
            None => out = Some(len),
            Some(prev) if distilling && prev != len => {
                return Err(Error::Config(format!(
                    "misaligned stack output lengths: {prev} vs {len} \
                     (layers {}, fraction 1/{})",
                    spec.layers, spec.fraction_den
                )));
            }
            _ => {}
        }
    }
    Ok(out.unwrap())
}

/// Run every stack over its slice of the feed and concatenate the stack
/// outputs along the time axis, in stack order. Each stack consumes the
/// most recent `fraction * L_x` steps.
pub fn encode<S: Scalar>(
    x_feed: &Tensor<S>,
    specs: &[StackSpec],
    params: &EncoderParams<S>,
    kind: AttentionKind,
    distilling: bool,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    if specs.len() != params.stacks.len() {
        return Err(Error::Config(format!(
            "{} stack specs but {} stack parameter sets",
            specs.len(),
            params.stacks.len()
        )));
    }
    let l_x = x_feed.shape()[0];
    if distilling {
        check_stack_alignment(specs, l_x, distilling)?;
    }
    let mut outputs = Vec::with_capacity(specs.len());
    for (spec, stack) in specs.iter().zip(&params.stacks) {
        let l_in = spec.input_len(l_x)?;
        let mut h = x_feed.slice_rows(l_x - l_in, l_x)?;
        for (i, block) in stack.blocks.iter().enumerate() {
            h = attention_block(&h, block, kind, ctx)?;
            if distilling && i + 1 < stack.blocks.len() {
                h = distill(&h, &stack.distills[i])?;
            }
        }
        outputs.push(h);
    }
    let refs: Vec<&Tensor<S>> = outputs.iter().collect();
    Tensor::concat_rows(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradCheck};

    fn randt(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.standard_normal() * 0.5).collect()).unwrap()
    }

    fn eval_ctx() -> ForwardCtx {
        ForwardCtx::eval()
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = Rng::seeded(1);
        let params = EncoderBlockParams::<f64>::init(8, 16, 2, 4, 5.0, &mut rng).unwrap();
        for &l in &[24usize, 96, 336] {
            let x = randt(&[l, 8], &mut rng);
            let y = attention_block(&x, &params, AttentionKind::ProbSparse, &mut eval_ctx())
                .unwrap();
            assert_eq!(y.shape(), &[l, 8]);
        }
    }

    #[test]
    fn block_is_deterministic_in_eval_mode() {
        let mut rng = Rng::seeded(2);
        let params = EncoderBlockParams::<f64>::init(8, 16, 2, 4, 5.0, &mut rng).unwrap();
        let x = randt(&[32, 8], &mut rng);
        let a = attention_block(&x, &params, AttentionKind::ProbSparse, &mut eval_ctx()).unwrap();
        let b = attention_block(&x, &params, AttentionKind::ProbSparse, &mut eval_ctx()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distill_length_and_hand_oracle() {
        let mut rng = Rng::seeded(3);
        let params = DistillParams::<f64>::init(2, &mut rng).unwrap();
        for &(l, want) in &[(4usize, 2usize), (96, 48), (7, 4)] {
            let x = randt(&[l, 2], &mut rng);
            assert_eq!(distill(&x, &params).unwrap().rows(), want);
        }
        assert!(distill(&randt(&[1, 2], &mut rng), &params).is_err());

        // constant input through an identity kernel stays constant
        let mut w = vec![0.0; 3 * 2 * 2];
        for c in 0..2 {
            w[2 * 2 + c * 2 + c] = 1.0; // center tap, diagonal
        }
        let id = DistillParams {
            conv_w: Tensor::param(&[3, 2, 2], w).unwrap(),
            conv_b: Tensor::param(&[2], vec![0.0; 2]).unwrap(),
        };
        let c = Tensor::full(&[8, 2], 1.5);
        let y = distill(&c, &id).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));

        // hand-computed conv/ELU/pool on L=6, d=2
        let x = Tensor::from_vec(
            &[6, 2],
            vec![0.5, -1.0, 1.0, 0.25, -0.5, 2.0, 0.0, -2.0, 1.5, 0.75, -1.0, 0.5],
        )
        .unwrap();
        let params = DistillParams::<f64>::init(2, &mut rng).unwrap();
        let y = distill(&x, &params).unwrap();
        // independent evaluation with plain loops
        let w = params.conv_w.data();
        let b = params.conv_b.data();
        let mut conv = [0.0; 6 * 2];
        for t in 0..6i64 {
            for o in 0..2 {
                let mut acc = b[o];
                for tap in 0..3i64 {
                    let at = (t + tap - 1).clamp(0, 5) as usize;
                    for c in 0..2 {
                        acc += x.at(at, c) * w[(tap as usize) * 4 + c * 2 + o];
                    }
                }
                conv[t as usize * 2 + o] = if acc > 0.0 { acc } else { acc.exp() - 1.0 };
            }
        }
        for t in 0..3usize {
            for o in 0..2 {
                let lo = 2 * t as i64 - 1;
                let mut best = f64::NEG_INFINITY;
                for tap in 0..3 {
                    let at = lo + tap;
                    if (0..6).contains(&at) {
                        best = best.max(conv[at as usize * 2 + o]);
                    }
                }
                assert!((y.at(t, o) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_length_arithmetic() {
        let mut rng = Rng::seeded(4);
        let specs = [StackSpec::new(3, 1), StackSpec::new(1, 4)];
        let params = EncoderParams::<f64>::init(&specs, 8, 16, 2, 4, 5.0, true, &mut rng).unwrap();
        let x = randt(&[96, 8], &mut rng);
        let out = encode(&x, &specs, &params, AttentionKind::ProbSparse, true, &mut eval_ctx())
            .unwrap();
        // main stack 96 -> 48 -> 24, replica 24 -> 24, concat = 48
        assert_eq!(out.shape(), &[48, 8]);

        assert_eq!(
            specs[0].activation_lengths(96, true).unwrap(),
            vec![96, 48, 24]
        );
        let total: usize = specs[0].activation_lengths(96, true).unwrap().iter().sum();
        assert_eq!(total, 168);
        assert!(total < 2 * 96);
    }

    #[test]
    fn single_trivial_stack_is_one_block() {
        let mut rng = Rng::seeded(5);
        let specs = [StackSpec::new(1, 1)];
        let params = EncoderParams::<f64>::init(&specs, 8, 16, 2, 4, 5.0, true, &mut rng).unwrap();
        let x = randt(&[16, 8], &mut rng);
        let out = encode(&x, &specs, &params, AttentionKind::Full, true, &mut eval_ctx()).unwrap();
        let direct =
            attention_block(&x, &params.stacks[0].blocks[0], AttentionKind::Full, &mut eval_ctx())
                .unwrap();
        assert_eq!(out.data(), direct.data());
    }

    #[test]
    fn stack_activation_sums_stay_under_twice_input() {
        for (spec, l, want) in [
            (StackSpec::new(3, 1), 96usize, vec![96, 48, 24]),
            (StackSpec::new(1, 1), 64, vec![64]),
            (StackSpec::new(4, 1), 64, vec![64, 32, 16, 8]),
        ] {
            let lengths = spec.activation_lengths(l, true).unwrap();
            assert_eq!(lengths, want);
            let sum: usize = lengths.iter().sum();
            assert!(sum < 2 * spec.input_len(l).unwrap());
        }
    }

    #[test]
    fn misaligned_stacks_rejected() {
        // (2,1) ends at L/2 while (1,1) ends at L: misaligned under distilling
        let specs = [StackSpec::new(2, 1), StackSpec::new(1, 1)];
        assert!(matches!(
            check_stack_alignment(&specs, 32, true),
            Err(Error::Config(_))
        ));
        // aligned example from the defaults
        let specs = [StackSpec::new(3, 1), StackSpec::new(1, 4)];
        assert_eq!(check_stack_alignment(&specs, 96, true).unwrap(), 24);
        // without distilling there is no alignment requirement
        assert!(check_stack_alignment(&[StackSpec::new(2, 1), StackSpec::new(1, 1)], 32, false).is_ok());
    }

    #[test]
    fn indivisible_fraction_rejected() {
        let spec = StackSpec::new(1, 4);
        assert!(spec.input_len(30).is_err());
        assert!(StackSpec::new(1, 3).validate().is_err());
        assert!(StackSpec::new(0, 1).validate().is_err());
    }

    #[test]
    fn gradient_through_block_matches_finite_differences() {
        let mut rng = Rng::seeded(6);
        let block = EncoderBlockParams::<f64>::init(4, 6, 1, 4, 5.0, &mut rng).unwrap();
        let x = randt(&[5, 4], &mut rng);
        let weights = randt(&[5, 4], &mut rng);
        let params = vec![
            ("wq".into(), block.mha.wq.clone()),
            ("wo".into(), block.mha.wo.clone()),
            ("ffn.w1".into(), block.ffn.w1.clone()),
            ("ffn.b1".into(), block.ffn.b1.clone()),
            ("ln1.gain".into(), block.ln1.gain.clone()),
            ("ln2.offset".into(), block.ln2.offset.clone()),
        ];
        let report = check(GradCheck::default(), &params, |ps| {
            let mut b = block.clone();
            b.mha.wq = ps[0].1.clone();
            b.mha.wo = ps[1].1.clone();
            b.ffn.w1 = ps[2].1.clone();
            b.ffn.b1 = ps[3].1.clone();
            b.ln1.gain = ps[4].1.clone();
            b.ln2.offset = ps[5].1.clone();
            Ok(
                attention_block(&x, &b, AttentionKind::ProbSparse, &mut ForwardCtx::eval())?
                    .mul(&weights)?
                    .sum_all(),
            )
        })
        .unwrap();
        assert!(report.passes(1e-4), "worst {:?}", report.worst);
    }

    #[test]
    fn gradients_reach_every_stack() {
        // Monte Carlo over 20 seeds: count parameters that receive a
        // nonzero gradient. The loss is a randomly weighted sum; a plain
        // sum is blind through unit-gain layernorm (each normalized row
        // sums to a constant) and would measure nothing.
        let specs = [StackSpec::new(2, 1), StackSpec::new(1, 2)];
        let mut nonzero = 0usize;
        let mut total = 0usize;
        for seed in 0..20u64 {
            let mut rng = Rng::seeded(100 + seed);
            let params =
                EncoderParams::<f64>::init(&specs, 4, 6, 1, 4, 5.0, true, &mut rng).unwrap();
            let x = randt(&[8, 4], &mut rng);
            let weights = randt(&[8, 4], &mut rng);
            let mut ctx = ForwardCtx::eval();
            let out = encode(&x, &specs, &params, AttentionKind::ProbSparse, true, &mut ctx)
                .unwrap();
            out.mul(&weights).unwrap().sum_all().backward().unwrap();
            for stack in &params.stacks {
                for block in &stack.blocks {
                    for t in [
                        &block.mha.wq,
                        &block.mha.wk,
                        &block.mha.wv,
                        &block.mha.wo,
                        &block.ffn.w1,
                        &block.ffn.w2,
                        &block.ln1.gain,
                        &block.ln2.gain,
                    ] {
                        total += 1;
                        if t.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false) {
                            nonzero += 1;
                        }
                    }
                }
                for d in &stack.distills {
                    total += 1;
                    if d.conv_w.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false) {
                        nonzero += 1;
                    }
                }
            }
        }
        let frac = nonzero as f64 / total as f64;
        assert!(frac >= 0.99, "grad coverage {frac}");
    }
}
