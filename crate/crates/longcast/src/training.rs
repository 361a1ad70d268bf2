//! Adam optimization with epoch halving, early stopping, and MSE/MAE
//! evaluation.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mse_loss, ForwardCtx, Model};
use crate::tensor::{no_grad, Rng, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Optional max-norm gradient clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 8,
            batch_size: 32,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "lr must be non-negative; epochs and batch_size positive".into(),
            ));
        }
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate halved at every epoch boundary (epoch 0 runs the base
/// rate).
pub fn lr_schedule(base: f64, epoch: usize) -> f64 {
    base * 0.5f64.powi(epoch as i32)
}

/// Per-parameter first/second moment estimates.
pub struct AdamState<S: Scalar> {
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamState {
            moments: HashMap::new(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update over named parameters. Parameters
/// without an entry in `grads` are treated as zero-gradient. Returns the
/// updated parameter tensors keyed by name.
pub fn adam_step<S: Scalar>(
    params: &[(String, Tensor<S>)],
    grads: &HashMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<HashMap<String, Tensor<S>>> {
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let eps = S::from_f64(state.eps);
    let lr = S::from_f64(lr);
    let corr1 = S::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = S::from_f64(1.0 - state.beta2.powi(t));
    let one = S::one();

    let mut updated = HashMap::with_capacity(params.len());
    for (name, p) in params {
        let zero;
        let g: &[S] = match grads.get(name) {
            Some(g) => {
                if g.len() != p.len() {
                    return Err(Error::Dim(format!(
                        "gradient for {name} has {} entries, parameter has {}",
                        g.len(),
                        p.len()
                    )));
                }
                g
            }
            None => {
                zero = vec![S::zero(); p.len()];
                &zero
            }
        };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![S::zero(); p.len()], vec![S::zero(); p.len()]));
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        updated.insert(name.clone(), Tensor::param(p.shape(), data)?);
    }
    Ok(updated)
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainHistory {
    /// Line-delimited records: `epoch train_loss val_mse lr`.
    pub fn to_lines(&self) -> String {
        let mut out = String::from("epoch train_loss val_mse lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{} {} {} {}\n",
                r.epoch, r.train_loss, r.val_mse, r.lr
            ));
        }
        out
    }
}

/// MSE/MAE over every element of every window, plus a per-horizon
/// breakdown.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// (mse, mae) per prediction step.
    pub per_horizon: Vec<(f64, f64)>,
    pub windows: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "windows {}\nmse {}\nmae {}\n",
            self.windows, self.mse, self.mae
        );
        for (h, (mse, mae)) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!("horizon {h} mse {mse} mae {mae}\n"));
        }
        out
    }
}

/// Evaluate with dropout off and no gradient recording. The model is
/// untouched: parameters are bit-identical before and after.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluate: empty window set".into()));
    }
    let pred_len = data.spec.pred_len;
    let mut se = 0.0f64;
    let mut ae = 0.0f64;
    let mut count = 0usize;
    let mut h_se = vec![0.0f64; pred_len];
    let mut h_ae = vec![0.0f64; pred_len];
    let mut h_count = vec![0usize; pred_len];
    no_grad(|| -> Result<()> {
        let mut ctx = ForwardCtx::eval();
        for i in 0..data.len() {
            let sample = data.sample::<S>(i)?;
            let pred = model.forward(&sample, &mut ctx)?;
            let d_y = pred.cols();
            for r in 0..pred_len {
                for c in 0..d_y {
                    let diff = (pred.at(r, c) - sample.target.at(r, c)).as_f64();
                    se += diff * diff;
                    ae += diff.abs();
                    h_se[r] += diff * diff;
                    h_ae[r] += diff.abs();
                    h_count[r] += 1;
                    count += 1;
                }
            }
        }
        Ok(())
    })?;
    let per_horizon = (0..pred_len)
        .map(|r| {
            let n = h_count[r] as f64;
            (h_se[r] / n, h_ae[r] / n)
        })
        .collect();
    Ok(MetricsReport {
        mse: se / count as f64,
        mae: ae / count as f64,
        per_horizon,
        windows: data.len(),
    })
}

/// Epoch loop of seeded shuffled mini-batches with Adam updates,
/// validation MSE tracking, early stopping, and best-parameter restore.
/// Training only ever touches the train and validation datasets.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Data("train: empty train or validation split".into()));
    }
    let mut shuffle_rng = Rng::seeded(cfg.seed);
    let mut ctx = ForwardCtx::train(model.config.dropout, Rng::seeded(cfg.seed).stream(1));
    let mut state = AdamState::new(cfg);
    let mut history = TrainHistory {
        best_val_mse: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best: Option<Vec<(String, Vec<S>)>> = None;
    let mut since_best = 0usize;

    let mut indices: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, epoch);
        shuffle_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            for &wi in batch {
                let sample = train_data.sample::<S>(wi)?;
                let pred = model.forward(&sample, &mut ctx)?;
                let loss = mse_loss(&pred, &sample.target)?;
                let value = loss.item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_idx}, lr {lr}"
                    )));
                }
                epoch_loss += value;
                seen += 1;
                loss.backward()?;
            }
            let params = model.named_parameters();
            let inv = S::from_f64(1.0 / batch.len() as f64);
            let mut grads: HashMap<String, Vec<S>> = HashMap::new();
            for (name, p) in &params {
                if let Some(mut g) = p.grad() {
                    for v in g.iter_mut() {
                        *v *= inv;
                    }
                    grads.insert(name.clone(), g);
                }
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            let updated = adam_step(&params, &grads, &mut state, lr)?;
            model.set_parameters(&updated)?;
        }
        let val = evaluate(model, val_data)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / seen as f64,
            val_mse: val.mse,
            lr,
        });
        if val.mse < history.best_val_mse {
            history.best_val_mse = val.mse;
            history.best_epoch = epoch;
            best = Some(model.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    if let Some(snapshot) = best {
        model.restore(&snapshot)?;
    }
    Ok(history)
}

fn clip_gradients<S: Scalar>(grads: &mut HashMap<String, Vec<S>>, max_norm: f64) {
    let mut total = 0.0f64;
    for g in grads.values() {
        for v in g {
            total += v.as_f64() * v.as_f64();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}
