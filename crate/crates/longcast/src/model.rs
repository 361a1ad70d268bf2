//! The assembled forecaster: embedding + encoder + decoder, with loss,
//! checkpointing and configuration defaults.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use crate::attention::AttentionKind;
use crate::data::{FeatureMode, WindowSample, WindowSpec};
use crate::decoder::{build_decoder_input, decode_dynamic, decode_generative, DecoderParams};
use crate::embedding::{embed_input, EmbeddingParams, Granularity, StampTables};
use crate::encoder::{check_stack_alignment, encode, EncoderParams, StackSpec};
use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Rng, Scalar, Tensor};

/// Mutable per-forward state: training flag, dropout probability, and
/// the RNG stream feeding the dropout masks.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    pub rng: Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng: Rng::seeded(0),
        }
    }

    pub fn train(dropout: f64, rng: Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            rng,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Generative,
    Dynamic,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(DecodeMode::Generative),
            "dynamic" => Ok(DecodeMode::Dynamic),
            _ => Err(Error::Config(format!(
                "unknown decode mode {s:?} (expected generative or dynamic)"
            ))),
        }
    }
}

/// Full model configuration. The defaults are the reference network:
/// 512-wide embedding, (3-layer, 1-layer @ 1/4) encoder stacks with
/// distilling, 2 decoder layers, 16x32 encoder heads, 8x64 decoder
/// heads, 2048-wide FFN, dropout 0.1, sampling factor 5.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub sampling_factor: f64,
    pub enc_heads: usize,
    pub enc_head_dim: usize,
    pub dec_heads: usize,
    pub dec_head_dim: usize,
    pub dec_layers: usize,
    pub stacks: Vec<StackSpec>,
    pub window: WindowSpec,
    pub features: FeatureMode,
    pub d_x: usize,
    pub d_y: usize,
    pub attention: AttentionKind,
    pub distilling: bool,
    pub granularity: Granularity,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            d_ffn: 2048,
            dropout: 0.1,
            sampling_factor: 5.0,
            enc_heads: 16,
            enc_head_dim: 32,
            dec_heads: 8,
            dec_head_dim: 64,
            dec_layers: 2,
            stacks: vec![StackSpec::new(3, 1), StackSpec::new(1, 4)],
            window: WindowSpec::new(96, 48, 24),
            features: FeatureMode::Univariate,
            d_x: 1,
            d_y: 1,
            attention: AttentionKind::ProbSparse,
            distilling: true,
            granularity: Granularity::Hourly,
            alpha: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_heads * self.enc_head_dim != self.d_model {
            return Err(Error::Config(format!(
                "enc_heads ({}) * enc_head_dim ({}) must equal d_model ({})",
                self.enc_heads, self.enc_head_dim, self.d_model
            )));
        }
        if self.dec_heads * self.dec_head_dim != self.d_model {
            return Err(Error::Config(format!(
                "dec_heads ({}) * dec_head_dim ({}) must equal d_model ({})",
                self.dec_heads, self.dec_head_dim, self.d_model
            )));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model ({}) must be positive and even",
                self.d_model
            )));
        }
        if self.d_ffn == 0 || self.dec_layers == 0 || self.d_x == 0 || self.d_y == 0 {
            return Err(Error::Config(
                "d_ffn, dec_layers, d_x and d_y must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout ({}) must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.sampling_factor <= 0.0 {
            return Err(Error::Config(format!(
                "sampling_factor ({}) must be positive",
                self.sampling_factor
            )));
        }
        self.window.validate()?;
        match self.features {
            FeatureMode::Univariate => {
                if self.d_x != 1 || self.d_y != 1 {
                    return Err(Error::Config(format!(
                        "univariate mode requires d_x = d_y = 1, got {} / {}",
                        self.d_x, self.d_y
                    )));
                }
            }
            FeatureMode::Multivariate => {
                if self.d_x != self.d_y {
                    return Err(Error::Config(format!(
                        "multivariate mode predicts every channel: d_x ({}) must equal d_y ({})",
                        self.d_x, self.d_y
                    )));
                }
            }
        }
        check_stack_alignment(&self.stacks, self.window.seq_len, self.distilling)?;
        Ok(())
    }

    /// Flat `key=value` lines mirroring the field names.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let stacks = self
            .stacks
            .iter()
            .map(|s| {
                if s.fraction_den == 1 {
                    format!("{}@1", s.layers)
                } else {
                    format!("{}@1/{}", s.layers, s.fraction_den)
                }
            })
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("d_ffn".into(), self.d_ffn.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("factor".into(), self.sampling_factor.to_string()),
            ("enc_heads".into(), self.enc_heads.to_string()),
            ("enc_head_dim".into(), self.enc_head_dim.to_string()),
            ("dec_heads".into(), self.dec_heads.to_string()),
            ("dec_head_dim".into(), self.dec_head_dim.to_string()),
            ("dec_layers".into(), self.dec_layers.to_string()),
            ("stacks".into(), stacks),
            ("seq_len".into(), self.window.seq_len.to_string()),
            ("label_len".into(), self.window.label_len.to_string()),
            ("pred_len".into(), self.window.pred_len.to_string()),
            ("features".into(), self.features.flag().to_string()),
            ("d_x".into(), self.d_x.to_string()),
            ("d_y".into(), self.d_y.to_string()),
            (
                "attention".into(),
                match self.attention {
                    AttentionKind::ProbSparse => "probsparse".into(),
                    AttentionKind::Full => "full".into(),
                },
            ),
            ("distill".into(), self.distilling.to_string()),
            (
                "granularity".into(),
                match self.granularity {
                    Granularity::Hourly => "hourly".into(),
                    Granularity::QuarterHourly => "quarter-hourly".into(),
                },
            ),
            ("alpha".into(), self.alpha.to_string()),
        ]
    }

    /// Apply one `key=value` setting.
    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
        };
        let real = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
        };
        match key {
            "d_model" => self.d_model = int(value)?,
            "d_ffn" => self.d_ffn = int(value)?,
            "dropout" => self.dropout = real(value)?,
            "factor" => self.sampling_factor = real(value)?,
            "enc_heads" => self.enc_heads = int(value)?,
            "enc_head_dim" => self.enc_head_dim = int(value)?,
            "dec_heads" => self.dec_heads = int(value)?,
            "dec_head_dim" => self.dec_head_dim = int(value)?,
            "dec_layers" => self.dec_layers = int(value)?,
            "stacks" => self.stacks = parse_stacks(value)?,
            "seq_len" => self.window.seq_len = int(value)?,
            "label_len" => self.window.label_len = int(value)?,
            "pred_len" => self.window.pred_len = int(value)?,
            "features" => self.features = FeatureMode::parse(value)?,
            "d_x" => self.d_x = int(value)?,
            "d_y" => self.d_y = int(value)?,
            "attention" => {
                self.attention = match value {
                    "probsparse" => AttentionKind::ProbSparse,
                    "full" => AttentionKind::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "attention: expected probsparse or full, got {value:?}"
                        )))
                    }
                }
            }
            "distill" => {
                self.distilling = value.parse().map_err(|_| {
                    Error::Config(format!("distill: expected true/false, got {value:?}"))
                })?
            }
            "granularity" => {
                self.granularity = match value {
                    "hourly" => Granularity::Hourly,
                    "quarter-hourly" => Granularity::QuarterHourly,
                    _ => {
                        return Err(Error::Config(format!(
                            "granularity: expected hourly or quarter-hourly, got {value:?}"
                        )))
                    }
                }
            }
            "alpha" => self.alpha = real(value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

/// Parse a stack list like `3@1,1@1/4`.
pub fn parse_stacks(s: &str) -> Result<Vec<StackSpec>> {
    let mut stacks = Vec::new();
    for part in s.split(',') {
        let (layers, fraction) = part.trim().split_once('@').ok_or_else(|| {
            Error::Config(format!("stack {part:?} must look like layers@fraction"))
        })?;
        let layers: usize = layers
            .parse()
            .map_err(|_| Error::Config(format!("stack layer count {layers:?} invalid")))?;
        let den = match fraction {
            "1" => 1,
            f => {
                let rest = f.strip_prefix("1/").ok_or_else(|| {
                    Error::Config(format!("stack fraction {f:?} must be 1 or 1/<power of two>"))
                })?;
                rest.parse::<usize>()
                    .map_err(|_| Error::Config(format!("stack fraction {f:?} invalid")))?
            }
        };
        let spec = StackSpec::new(layers, den);
        spec.validate()?;
        stacks.push(spec);
    }
    if stacks.is_empty() {
        return Err(Error::Config("empty stack list".into()));
    }
    Ok(stacks)
}

/// The assembled forecaster. Parameters are reference-counted tensors;
/// cloning shares them.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    stamp_tables: StampTables<S>,
    enc_projection: Tensor<S>,
    dec_projection: Tensor<S>,
    pub encoder: EncoderParams<S>,
    pub decoder: DecoderParams<S>,
}

impl<S: Scalar> Model<S> {
    /// Allocate and deterministically initialize all parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(seed);
        // The stamp tables are shared between the encoder and decoder
        // embeddings; each side owns its projection kernel.
        let stamp_tables = StampTables::init(config.d_model, config.granularity, &mut rng)?;
        let enc_embed =
            EmbeddingParams::<S>::init(config.d_x, config.d_model, config.granularity, &mut rng)?;
        let dec_embed =
            EmbeddingParams::<S>::init(config.d_x, config.d_model, config.granularity, &mut rng)?;
        let encoder = EncoderParams::init(
            &config.stacks,
            config.d_model,
            config.d_ffn,
            config.enc_heads,
            config.enc_head_dim,
            config.sampling_factor,
            config.distilling,
            &mut rng,
        )?;
        let decoder = DecoderParams::init(
            config.dec_layers,
            config.d_model,
            config.d_ffn,
            config.dec_heads,
            config.dec_head_dim,
            config.sampling_factor,
            config.d_y,
            &mut rng,
        )?;
        Ok(Model {
            config,
            seed,
            stamp_tables,
            enc_projection: enc_embed.projection,
            dec_projection: dec_embed.projection,
            encoder,
            decoder,
        })
    }

    pub fn enc_embedding(&self) -> EmbeddingParams<S> {
        EmbeddingParams {
            projection: self.enc_projection.clone(),
            tables: self.stamp_tables.clone(),
            alpha: S::from_f64(self.config.alpha),
        }
    }

    pub fn dec_embedding(&self) -> EmbeddingParams<S> {
        EmbeddingParams {
            projection: self.dec_projection.clone(),
            tables: self.stamp_tables.clone(),
            alpha: S::from_f64(self.config.alpha),
        }
    }

    fn check_sample(&self, sample: &WindowSample<S>) -> Result<()> {
        let w = &self.config.window;
        if sample.enc_x.rows() != w.seq_len
            || sample.enc_x.cols() != self.config.d_x
            || sample.dec_stamps.len() != w.decoder_len()
        {
            return Err(Error::Contract(format!(
                "sample does not match the window spec: enc {:?}, {} decoder stamps \
                 (expected {}x{}, {})",
                sample.enc_x.shape(),
                sample.dec_stamps.len(),
                w.seq_len,
                self.config.d_x,
                w.decoder_len()
            )));
        }
        Ok(())
    }

    /// Embed and encode the window, producing the attention memory.
    pub fn encode_window(&self, sample: &WindowSample<S>, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        let feed = embed_input(&sample.enc_x, &sample.enc_stamps, &self.enc_embedding())?;
        encode(
            &feed,
            &self.config.stacks,
            &self.encoder,
            self.config.attention,
            self.config.distilling,
            ctx,
        )
    }

    /// One-shot generative forward pass.
    pub fn forward(&self, sample: &WindowSample<S>, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        self.forward_with(sample, DecodeMode::Generative, ctx)
    }

    pub fn forward_with(
        &self,
        sample: &WindowSample<S>,
        mode: DecodeMode,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<S>> {
        self.check_sample(sample)?;
        let memory = self.encode_window(sample, ctx)?;
        let dec_in = build_decoder_input(sample, &self.dec_embedding())?;
        match mode {
            DecodeMode::Generative => decode_generative(
                &dec_in,
                &memory,
                &self.decoder,
                self.config.attention,
                ctx,
            ),
            DecodeMode::Dynamic => decode_dynamic(
                &dec_in,
                &memory,
                &self.decoder,
                &self.dec_embedding(),
                self.config.attention,
                ctx,
            ),
        }
    }

    /// Walk every unique parameter slot in a stable order.
    fn visit_slots(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("embed.tables.month".into(), &mut self.stamp_tables.month);
        f("embed.tables.day".into(), &mut self.stamp_tables.day);
        f("embed.tables.weekday".into(), &mut self.stamp_tables.weekday);
        f("embed.tables.hour".into(), &mut self.stamp_tables.hour);
        if let Some(q) = self.stamp_tables.quarter.as_mut() {
            f("embed.tables.quarter".into(), q);
        }
        f("embed.enc.projection".into(), &mut self.enc_projection);
        f("embed.dec.projection".into(), &mut self.dec_projection);
        for (si, stack) in self.encoder.stacks.iter_mut().enumerate() {
            for (bi, block) in stack.blocks.iter_mut().enumerate() {
                let p = format!("encoder.stack{si}.block{bi}");
                for (n, t) in [
                    ("mha.wq", &mut block.mha.wq),
                    ("mha.bq", &mut block.mha.bq),
                    ("mha.wk", &mut block.mha.wk),
                    ("mha.bk", &mut block.mha.bk),
                    ("mha.wv", &mut block.mha.wv),
                    ("mha.bv", &mut block.mha.bv),
                    ("mha.wo", &mut block.mha.wo),
                    ("mha.bo", &mut block.mha.bo),
                    ("ln1.gain", &mut block.ln1.gain),
                    ("ln1.offset", &mut block.ln1.offset),
                    ("ln2.gain", &mut block.ln2.gain),
                    ("ln2.offset", &mut block.ln2.offset),
                    ("ffn.w1", &mut block.ffn.w1),
                    ("ffn.b1", &mut block.ffn.b1),
                    ("ffn.w2", &mut block.ffn.w2),
                    ("ffn.b2", &mut block.ffn.b2),
                ] {
                    f(format!("{p}.{n}"), t);
                }
            }
            for (di, distill) in stack.distills.iter_mut().enumerate() {
                f(format!("encoder.stack{si}.distill{di}.conv_w"), &mut distill.conv_w);
                f(format!("encoder.stack{si}.distill{di}.conv_b"), &mut distill.conv_b);
            }
        }
        for (li, layer) in self.decoder.layers.iter_mut().enumerate() {
            let p = format!("decoder.layer{li}");
            for (n, t) in [
                ("self_mha.wq", &mut layer.self_mha.wq),
                ("self_mha.bq", &mut layer.self_mha.bq),
                ("self_mha.wk", &mut layer.self_mha.wk),
                ("self_mha.bk", &mut layer.self_mha.bk),
                ("self_mha.wv", &mut layer.self_mha.wv),
                ("self_mha.bv", &mut layer.self_mha.bv),
                ("self_mha.wo", &mut layer.self_mha.wo),
                ("self_mha.bo", &mut layer.self_mha.bo),
                ("cross_mha.wq", &mut layer.cross_mha.wq),
                ("cross_mha.bq", &mut layer.cross_mha.bq),
                ("cross_mha.wk", &mut layer.cross_mha.wk),
                ("cross_mha.bk", &mut layer.cross_mha.bk),
                ("cross_mha.wv", &mut layer.cross_mha.wv),
                ("cross_mha.bv", &mut layer.cross_mha.bv),
                ("cross_mha.wo", &mut layer.cross_mha.wo),
                ("cross_mha.bo", &mut layer.cross_mha.bo),
                ("ln1.gain", &mut layer.ln1.gain),
                ("ln1.offset", &mut layer.ln1.offset),
                ("ln2.gain", &mut layer.ln2.gain),
                ("ln2.offset", &mut layer.ln2.offset),
                ("ln3.gain", &mut layer.ln3.gain),
                ("ln3.offset", &mut layer.ln3.offset),
                ("ffn.w1", &mut layer.ffn.w1),
                ("ffn.b1", &mut layer.ffn.b1),
                ("ffn.w2", &mut layer.ffn.w2),
                ("ffn.b2", &mut layer.ffn.b2),
            ] {
                f(format!("{p}.{n}"), t);
            }
        }
        f("decoder.proj_w".into(), &mut self.decoder.proj_w);
        f("decoder.proj_b".into(), &mut self.decoder.proj_b);
    }

    /// Every unique trainable parameter, in a stable order. The returned
    /// tensors share storage with the model.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut clone = self.clone();
        let mut out = Vec::new();
        clone.visit_slots(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Replace parameters by name; shapes must match. Returns how many
    /// slots were updated.
    pub fn set_parameters(&mut self, new: &HashMap<String, Tensor<S>>) -> Result<usize> {
        let mut err: Option<Error> = None;
        let mut applied = 0usize;
        self.visit_slots(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            if let Some(t) = new.get(&name) {
                if t.shape() != slot.shape() {
                    err = Some(Error::Config(format!(
                        "parameter {name}: shape {:?} does not match expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                    return;
                }
                *slot = t.clone();
                applied += 1;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(applied),
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.len()).sum()
    }

    /// Deep copy of parameter values (for best-checkpoint restore).
    pub fn snapshot(&self) -> Vec<(String, Vec<S>)> {
        self.named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.data().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Vec<S>)]) -> Result<()> {
        let mut map = HashMap::new();
        for (name, data) in snapshot {
            let current = self
                .named_parameters()
                .into_iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("snapshot has unknown parameter {name}")))?;
            map.insert(name.clone(), Tensor::param(current.1.shape(), data.clone())?);
        }
        self.set_parameters(&map)?;
        Ok(())
    }

    /// Write a self-describing text checkpoint. Floats use the shortest
    /// round-trip decimal form, so reload is bit-exact at this precision.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "precision={}", S::NAME).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "[config]").unwrap();
        for (k, v) in self.config.to_key_values() {
            writeln!(out, "{k}={v}").unwrap();
        }
        writeln!(out, "[params]").unwrap();
        for (name, p) in self.named_parameters() {
            let dims = p
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(out, "param {name} {dims}").unwrap();
            let mut line = String::with_capacity(p.len() * 12);
            for (i, v) in p.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        file.write_all(out.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`] at the same precision.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut lines = BufReader::new(file).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Parse("checkpoint truncated".into()))
        };

        let header = next()?;
        let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
        if header != expected {
            return Err(Error::Parse(format!(
                "checkpoint version mismatch: got {header:?}, this build reads {expected:?}"
            )));
        }
        let precision = next()?;
        let precision = precision
            .strip_prefix("precision=")
            .ok_or_else(|| Error::Parse("missing precision line".into()))?
            .to_string();
        if precision != S::NAME {
            return Err(Error::Parse(format!(
                "checkpoint stores {precision} values, loader is {}",
                S::NAME
            )));
        }
        let seed_line = next()?;
        let seed: u64 = seed_line
            .strip_prefix("seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad seed line {seed_line:?}")))?;
        if next()? != "[config]" {
            return Err(Error::Parse("missing [config] section".into()));
        }
        let mut config = ModelConfig::default();
        loop {
            let line = next()?;
            if line == "[params]" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad config line {line:?}")))?;
            config.apply_key_value(k, v)?;
        }

        // Rebuild with the stored seed (restoring the attention sampling
        // seeds), then overwrite every parameter from the file.
        let mut model = Model::build(config, seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec()))
            .collect();
        let mut map = HashMap::new();
        for (name, shape) in &expected {
            let head = next()?;
            let mut parts = head.split(' ');
            if parts.next() != Some("param") {
                return Err(Error::Parse(format!("expected a param line, got {head:?}")));
            }
            let got_name = parts
                .next()
                .ok_or_else(|| Error::Parse("param line missing name".into()))?;
            if got_name != name {
                return Err(Error::Parse(format!(
                    "config mismatch: expected parameter {name}, file has {got_name}"
                )));
            }
            let dims_txt = parts
                .next()
                .ok_or_else(|| Error::Parse("param line missing shape".into()))?;
            let dims: Vec<usize> = dims_txt
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::Parse(format!("bad shape {dims_txt:?}")))
                })
                .collect::<Result<_>>()?;
            if &dims != shape {
                return Err(Error::Parse(format!(
                    "config mismatch: parameter {name} has shape {dims:?}, expected {shape:?}"
                )));
            }
            let values_line = next()?;
            let mut data = Vec::with_capacity(shape.iter().product());
            for tok in values_line.split(' ') {
                let v = S::parse(tok)
                    .ok_or_else(|| Error::Parse(format!("bad value {tok:?} in {name}")))?;
                data.push(v);
            }
            let n: usize = shape.iter().product();
            if data.len() != n {
                return Err(Error::Parse(format!(
                    "parameter {name}: {} values for shape {shape:?}",
                    data.len()
                )));
            }
            map.insert(name.clone(), Tensor::param(shape, data)?);
        }
        model.set_parameters(&map)?;
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &str = "longcast-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Mean of squared elementwise differences over all entries.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(pred, target, "mse_loss")?;
    let diff = pred.sub(target)?;
    Ok(diff.mul(&diff)?.mean_all())
}
