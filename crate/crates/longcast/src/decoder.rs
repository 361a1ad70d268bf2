//! Decoder: masked sparse self-attention, full cross-attention against
//! the encoder memory, and one-forward-pass generative inference (plus a
//! step-by-step dynamic mode for ablations).

use crate::attention::{multihead, AttentionKind, AttentionSpec, MultiheadParams};
use crate::data::WindowSample;
use crate::embedding::{embed_input, EmbeddingParams, StampVector};
use crate::encoder::{FfnParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::model::ForwardCtx;
use crate::probe;
use crate::tensor::{Rng, Scalar, Tensor};

/// Decoder feed: a start token of known history concatenated with a
/// placeholder block whose scalar channel is zero but whose time-stamp
/// embeddings are real.
#[derive(Clone, Debug)]
pub struct DecoderInput<S: Scalar> {
    /// Embedded `[l_token + l_y, d_model]` sequence.
    embedded: Tensor<S>,
    pub l_token: usize,
    pub l_y: usize,
    /// Raw scalar channels; the last `l_y` rows are identically zero.
    raw_values: Tensor<S>,
    stamps: Vec<StampVector>,
}

impl<S: Scalar> DecoderInput<S> {
    /// Embedded start-token block, when the token is non-empty.
    pub fn token(&self) -> Result<Option<Tensor<S>>> {
        if self.l_token == 0 {
            return Ok(None);
        }
        Ok(Some(self.embedded.slice_rows(0, self.l_token)?))
    }

    /// Embedded placeholder block.
    pub fn placeholder(&self) -> Result<Tensor<S>> {
        self.embedded
            .slice_rows(self.l_token, self.l_token + self.l_y)
    }

    pub fn embedded(&self) -> &Tensor<S> {
        &self.embedded
    }

    pub fn raw_values(&self) -> &Tensor<S> {
        &self.raw_values
    }

    /// Test/diagnostic constructor from a pre-built embedding.
    pub fn from_embedded(
        embedded: Tensor<S>,
        l_token: usize,
        l_y: usize,
        raw_values: Tensor<S>,
        stamps: Vec<StampVector>,
    ) -> Result<Self> {
        if embedded.rows() != l_token + l_y || stamps.len() != l_token + l_y {
            return Err(Error::Dim(format!(
                "decoder input: {} embedded rows / {} stamps for l_token {l_token} + l_y {l_y}",
                embedded.rows(),
                stamps.len()
            )));
        }
        Ok(DecoderInput {
            embedded,
            l_token,
            l_y,
            raw_values,
            stamps,
        })
    }
}

/// Assemble and embed the decoder feed of one window sample. The
/// placeholder scalar channel is zero by construction, so target values
/// can never leak into the decoder input.
pub fn build_decoder_input<S: Scalar>(
    sample: &WindowSample<S>,
    embed: &EmbeddingParams<S>,
) -> Result<DecoderInput<S>> {
    let l_y = sample.target.rows();
    let (l_token, d_x) = match &sample.token_x {
        Some(t) => (t.rows(), t.cols()),
        None => (0, sample.enc_x.cols()),
    };
    if sample.dec_stamps.len() != l_token + l_y {
        return Err(Error::Dim(format!(
            "decoder stamps length {} does not match l_token {l_token} + l_y {l_y}",
            sample.dec_stamps.len()
        )));
    }
    let mut raw = Vec::with_capacity((l_token + l_y) * d_x);
    if let Some(t) = &sample.token_x {
        raw.extend_from_slice(t.data());
    }
    raw.extend(std::iter::repeat_n(S::zero(), l_y * d_x));
    let raw_values = Tensor::from_vec(&[l_token + l_y, d_x], raw)?;
    let embedded = embed_input(&raw_values, &sample.dec_stamps, embed)?;
    Ok(DecoderInput {
        embedded,
        l_token,
        l_y,
        raw_values,
        stamps: sample.dec_stamps.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams<S: Scalar> {
    pub self_mha: MultiheadParams<S>,
    pub self_attn: AttentionSpec,
    pub cross_mha: MultiheadParams<S>,
    pub cross_attn: AttentionSpec,
    pub ln1: LayerNormParams<S>,
    pub ln2: LayerNormParams<S>,
    pub ln3: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
}

impl<S: Scalar> DecoderLayerParams<S> {
    pub fn init(
        d_model: usize,
        d_ffn: usize,
        heads: usize,
        head_dim: usize,
        sampling_factor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_mha: MultiheadParams::init(d_model, heads, head_dim, rng)?,
            self_attn: AttentionSpec::new(heads, head_dim)
                .with_factor(sampling_factor)
                .with_seed(rng.next_seed())
                .masked(true),
            cross_mha: MultiheadParams::init(d_model, heads, head_dim, rng)?,
            cross_attn: AttentionSpec::new(heads, head_dim)
                .with_factor(sampling_factor)
                .with_seed(rng.next_seed()),
            ln1: LayerNormParams::init(d_model)?,
            ln2: LayerNormParams::init(d_model)?,
            ln3: LayerNormParams::init(d_model)?,
            ffn: FfnParams::init(d_model, d_ffn, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams<S: Scalar> {
    pub layers: Vec<DecoderLayerParams<S>>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
}

impl<S: Scalar> DecoderParams<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        n_layers: usize,
        d_model: usize,
        d_ffn: usize,
        heads: usize,
        head_dim: usize,
        sampling_factor: f64,
        d_y: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|_| DecoderLayerParams::init(d_model, d_ffn, heads, head_dim, sampling_factor, rng))
            .collect::<Result<Vec<_>>>()?;
        let limit = (6.0 / (d_model + d_y) as f64).sqrt();
        let w = (0..d_model * d_y)
            .map(|_| S::from_f64(rng.uniform(-limit, limit)))
            .collect();
        Ok(DecoderParams {
            layers,
            proj_w: Tensor::param(&[d_model, d_y], w)?,
            proj_b: Tensor::param(&[d_y], vec![S::zero(); d_y])?,
        })
    }
}

/// One decoder pass over the whole feed; returns the projected outputs
/// at every decoder position. Each invocation bumps the decoder forward
/// counter.
fn decode_core<S: Scalar>(
    x: &Tensor<S>,
    memory: &Tensor<S>,
    params: &DecoderParams<S>,
    kind: AttentionKind,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    if memory.shape().len() != 2 || memory.rows() == 0 {
        return Err(Error::Dim("decoder memory must be a non-empty 2-D tensor".into()));
    }
    probe::add_decoder_forward();
    let mut h = x.clone();
    for layer in &params.layers {
        let sa = multihead(&h, &h, &layer.self_mha, &layer.self_attn, kind)?;
        let sa = sa.dropout(ctx.dropout, ctx.training, &mut ctx.rng)?;
        let a = layer.ln1.forward(&h.add(&sa)?)?;

        let cross = multihead(&a, memory, &layer.cross_mha, &layer.cross_attn, AttentionKind::Full)?;
        let cross = cross.dropout(ctx.dropout, ctx.training, &mut ctx.rng)?;
        let b = layer.ln2.forward(&a.add(&cross)?)?;

        let f = layer.ffn.forward(&b)?;
        let f = f.dropout(ctx.dropout, ctx.training, &mut ctx.rng)?;
        h = layer.ln3.forward(&b.add(&f)?)?;
    }
    h.matmul(&params.proj_w)?.add_bias_row(&params.proj_b)
}

/// Predict all `l_y` outputs in a single decoder forward pass.
pub fn decode_generative<S: Scalar>(
    input: &DecoderInput<S>,
    memory: &Tensor<S>,
    params: &DecoderParams<S>,
    kind: AttentionKind,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let out = decode_core(&input.embedded, memory, params, kind, ctx)?;
    out.slice_rows(input.l_token, input.l_token + input.l_y)
}

/// Step-by-step decoding: `l_y` sequential passes, each writing its
/// one-step prediction into the placeholder values before the next pass.
/// Requires the prediction width to match the input channel count.
pub fn decode_dynamic<S: Scalar>(
    input: &DecoderInput<S>,
    memory: &Tensor<S>,
    params: &DecoderParams<S>,
    embed: &EmbeddingParams<S>,
    kind: AttentionKind,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let d_x = input.raw_values.cols();
    let d_y = params.proj_w.shape()[1];
    if d_x != d_y {
        return Err(Error::Contract(format!(
            "dynamic decoding writes predictions back into the input; needs d_y {d_y} == d_x {d_x}"
        )));
    }
    let l_de = input.l_token + input.l_y;
    let mut values = input.raw_values.data().to_vec();
    let mut out = Vec::with_capacity(input.l_y * d_y);
    for k in 0..input.l_y {
        let raw = Tensor::from_vec(&[l_de, d_x], values.clone())?;
        let emb = embed_input(&raw, &input.stamps, embed)?;
        let step = decode_core(&emb, memory, params, kind, ctx)?;
        let row = input.l_token + k;
        let pred = &step.data()[row * d_y..(row + 1) * d_y];
        out.extend_from_slice(pred);
        values[row * d_x..(row + 1) * d_x].copy_from_slice(pred);
    }
    Tensor::from_vec(&[input.l_y, d_y], out)
}
