use std::path::{Path, PathBuf};

use clap::Args;

use longcast::attention::AttentionKind;
use longcast::bench;
use longcast::data::{
    load_csv, split_chronological, synth_series, write_csv, Dataset, FeatureMode, Normalizer,
    SeriesFrame, SplitFrames, SplitRule, SynthKind, WindowSpec,
};
use longcast::embedding::Granularity;
use longcast::model::{parse_stacks, DecodeMode, ForwardCtx, Model, ModelConfig};
use longcast::training::{evaluate, train, TrainConfig};
use longcast::{Error, Result};

use crate::manifest::{file_fingerprint, Manifest};

/// `LONGCAST_SEED` overrides the `--seed` flag everywhere.
fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var("LONGCAST_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("LONGCAST_SEED={v:?} is not a u64"))),
        Err(_) => Ok(flag),
    }
}

fn parse_granularity(s: &str) -> Result<Granularity> {
    match s {
        "hourly" => Ok(Granularity::Hourly),
        "quarter-hourly" => Ok(Granularity::QuarterHourly),
        _ => Err(Error::Config(format!(
            "granularity {s:?} not recognized (expected hourly or quarter-hourly)"
        ))),
    }
}

/// `0.7/0.1/0.2` (row ratios) or `months:12/4/4` (calendar months).
fn parse_split(s: &str) -> Result<SplitRule> {
    let parse3 = |body: &str, what: &str| -> Result<(f64, f64, f64)> {
        let parts: Vec<&str> = body.split('/').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "split {s:?} must have three {what} separated by '/'"
            )));
        }
        let mut vals = [0.0; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .parse()
                .map_err(|_| Error::Config(format!("split component {p:?} is not a number")))?;
        }
        Ok((vals[0], vals[1], vals[2]))
    };
    if let Some(body) = s.strip_prefix("months:") {
        let (a, b, c) = parse3(body, "month counts")?;
        Ok(SplitRule::Months(a as u32, b as u32, c as u32))
    } else {
        let (a, b, c) = parse3(s, "ratios")?;
        Ok(SplitRule::Ratios(a, b, c))
    }
}

fn parse_attention(s: &str) -> Result<AttentionKind> {
    match s {
        "probsparse" => Ok(AttentionKind::ProbSparse),
        "full" => Ok(AttentionKind::Full),
        _ => Err(Error::Config(format!(
            "attention {s:?} not recognized (expected probsparse or full)"
        ))),
    }
}

/// Predicted peak activation footprint (time steps entering attention
/// layers x d_model) against the element budget; mirrors the
/// out-of-memory behaviour of over-long undistilled runs.
fn memory_guard(config: &ModelConfig, budget: usize) -> Result<()> {
    let lengths =
        bench::memory_accounting(&config.stacks, config.window.seq_len, config.distilling)?;
    let elems: usize =
        lengths.iter().flat_map(|s| s.iter()).sum::<usize>() * config.d_model;
    if elems > budget {
        return Err(Error::Resource(format!(
            "activation footprint {elems} elements exceeds the memory budget {budget}; \
             shorten --seq-len, enable distilling, or raise --memory-budget"
        )));
    }
    Ok(())
}

struct Prepared {
    raw: SeriesFrame,
    splits: SplitFrames,
    normalizer: Normalizer,
}

fn prepare(data: &Path, target: &str, granularity: Granularity, split: SplitRule) -> Result<Prepared> {
    let raw = load_csv(data, target, granularity)?;
    let splits = split_chronological(&raw, split)?;
    let normalizer = Normalizer::fit(&splits)?;
    let norm = SplitFrames {
        train: normalizer.apply(&splits.train)?,
        val: normalizer.apply(&splits.val)?,
        test: normalizer.apply(&splits.test)?,
    };
    Ok(Prepared {
        raw,
        splits: norm,
        normalizer,
    })
}

/// Flags shared by every command that builds a model over a dataset.
#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    /// Optional key=value config file (same keys as the checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder window length L_x.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Decoder start-token length (must not exceed --seq-len).
    #[arg(long)]
    pub label_len: Option<usize>,
    /// Prediction horizon L_y.
    #[arg(long)]
    pub pred_len: Option<usize>,
    /// Query sampling factor c.
    #[arg(long)]
    pub factor: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    /// Encoder stacks, e.g. `3@1,1@1/4`.
    #[arg(long)]
    pub stacks: Option<String>,
    /// Attention kind: probsparse | full.
    #[arg(long)]
    pub attention: Option<String>,
    /// Enable/disable the distilling halvings between encoder layers.
    #[arg(long)]
    pub distill: Option<bool>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub enc_heads: Option<usize>,
    #[arg(long)]
    pub enc_head_dim: Option<usize>,
    #[arg(long)]
    pub dec_heads: Option<usize>,
    #[arg(long)]
    pub dec_head_dim: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, config: &mut ModelConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad config line {line:?}")))?;
                config.apply_key_value(k.trim(), v.trim())?;
            }
        }
        if let Some(v) = self.seq_len {
            config.window.seq_len = v;
        }
        if let Some(v) = self.label_len {
            config.window.label_len = v;
        }
        if let Some(v) = self.pred_len {
            config.window.pred_len = v;
        }
        if let Some(v) = self.factor {
            config.sampling_factor = v;
        }
        if let Some(v) = self.d_model {
            config.d_model = v;
        }
        if let Some(v) = self.d_ffn {
            config.d_ffn = v;
        }
        if let Some(s) = &self.stacks {
            config.stacks = parse_stacks(s)?;
        }
        if let Some(s) = &self.attention {
            config.attention = parse_attention(s)?;
        }
        if let Some(v) = self.distill {
            config.distilling = v;
        }
        if let Some(v) = self.dropout {
            config.dropout = v;
        }
        if let Some(v) = self.enc_heads {
            config.enc_heads = v;
        }
        if let Some(v) = self.enc_head_dim {
            config.enc_head_dim = v;
        }
        if let Some(v) = self.dec_heads {
            config.dec_heads = v;
        }
        if let Some(v) = self.dec_head_dim {
            config.dec_head_dim = v;
        }
        if let Some(v) = self.dec_layers {
            config.dec_layers = v;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// CSV series: `date` column plus numeric columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column name.
    #[arg(long, default_value = "OT")]
    pub target: String,
    /// Sampling interval: hourly | quarter-hourly.
    #[arg(long, default_value = "hourly")]
    pub granularity: String,
    /// Univariate (S, target only) or multivariate (M, all columns).
    #[arg(long, default_value = "S")]
    pub features: String,
    /// train/val/test split: `0.7/0.1/0.2` or `months:12/4/4`.
    #[arg(long, default_value = "0.7/0.1/0.2")]
    pub split: String,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Activation-element budget guarding undistilled long windows.
    #[arg(long, default_value_t = 1 << 22)]
    pub memory_budget: usize,
    /// Output directory (checkpoint.ckpt, history.log, metrics.txt, manifest.txt).
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn assemble_config(
    flags: &ModelFlags,
    features: FeatureMode,
    granularity: Granularity,
    frame_width: usize,
) -> Result<ModelConfig> {
    let mut config = ModelConfig {
        features,
        granularity,
        ..ModelConfig::default()
    };
    flags.apply(&mut config)?;
    match features {
        FeatureMode::Univariate => {
            config.d_x = 1;
            config.d_y = 1;
        }
        FeatureMode::Multivariate => {
            config.d_x = frame_width;
            config.d_y = frame_width;
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let granularity = parse_granularity(&args.granularity)?;
    let features = FeatureMode::parse(&args.features)?;
    let split = parse_split(&args.split)?;
    let prepared = prepare(&args.data, &args.target, granularity, split)?;
    let config = assemble_config(&args.model, features, granularity, prepared.raw.width())?;
    memory_guard(&config, args.memory_budget)?;

    let train_d = Dataset::new(prepared.splits.train.clone(), config.window, features)?;
    let val_d = Dataset::new(prepared.splits.val.clone(), config.window, features)?;

    let mut model = Model::<f32>::build(config.clone(), seed)?;
    let train_cfg = TrainConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        patience: args.patience.min(args.epochs),
        seed,
        ..TrainConfig::default()
    };
    println!(
        "training on {} windows (val {}), {} parameters",
        train_d.len(),
        val_d.len(),
        model.parameter_count()
    );
    let history = train(&mut model, &train_d, &val_d, &train_cfg)?;
    for r in &history.epochs {
        println!(
            "epoch {} train_loss {:.6} val_mse {:.6} lr {:.3e}",
            r.epoch, r.train_loss, r.val_mse, r.lr
        );
    }

    std::fs::create_dir_all(&args.out_dir)?;
    model.save(args.out_dir.join("checkpoint.ckpt"))?;
    std::fs::write(args.out_dir.join("history.log"), history.to_lines())?;

    let mut metrics = String::new();
    let val_report = evaluate(&model, &val_d)?;
    metrics.push_str("[val]\n");
    metrics.push_str(&val_report.to_text());
    if !prepared.splits.test.is_empty() {
        if let Ok(test_d) = Dataset::new(prepared.splits.test.clone(), config.window, features) {
            let test_report = evaluate(&model, &test_d)?;
            metrics.push_str("[test]\n");
            metrics.push_str(&test_report.to_text());
            println!("test mse {:.6} mae {:.6}", test_report.mse, test_report.mae);
        }
    }
    std::fs::write(args.out_dir.join("metrics.txt"), metrics)?;

    Manifest {
        command: "train",
        seed,
        dataset_fingerprint: Some(file_fingerprint(&args.data)?),
        config: Some(&config),
        extra: vec![
            ("epochs".into(), train_cfg.epochs.to_string()),
            ("batch_size".into(), train_cfg.batch_size.to_string()),
            ("lr".into(), train_cfg.lr.to_string()),
            ("patience".into(), train_cfg.patience.to_string()),
            ("split".into(), args.split.clone()),
            ("best_val_mse".into(), history.best_val_mse.to_string()),
        ],
    }
    .write(&args.out_dir)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "OT")]
    pub target: String,
    #[arg(long, default_value = "hourly")]
    pub granularity: String,
    #[arg(long, default_value = "0.7/0.1/0.2")]
    pub split: String,
    /// Which split to roll over: train | val | test | all.
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Decoding mode: generative | dynamic.
    #[arg(long, default_value = "generative")]
    pub decode: String,
    /// Window stride; defaults to the prediction length (contiguous forecasts).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn pick_subset<'a>(splits: &'a SplitFrames, raw: &'a SeriesFrame, subset: &str) -> Result<SeriesFrame> {
    match subset {
        "train" => Ok(splits.train.clone()),
        "val" => Ok(splits.val.clone()),
        "test" => Ok(splits.test.clone()),
        "all" => {
            // normalized view of the full frame
            let _ = raw;
            Err(Error::Config(
                "subset all: use train/val/test, or split 1/0/0 to cover the whole series".into(),
            ))
        }
        _ => Err(Error::Config(format!(
            "subset {subset:?} not recognized (expected train, val or test)"
        ))),
    }
}

pub fn cmd_predict(args: PredictArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let granularity = parse_granularity(&args.granularity)?;
    let decode = DecodeMode::parse(&args.decode)?;
    let split = parse_split(&args.split)?;
    let model = Model::<f32>::load(&args.checkpoint)?;
    let features = model.config.features;
    let prepared = prepare(&args.data, &args.target, granularity, split)?;
    if model.config.granularity != granularity {
        return Err(Error::Config(
            "checkpoint granularity differs from --granularity".into(),
        ));
    }
    let frame = pick_subset(&prepared.splits, &prepared.raw, &args.subset)?;
    let mut spec = model.config.window;
    spec.stride = args.stride.unwrap_or(spec.pred_len).max(1);
    let ds = Dataset::new(frame, spec, features)?;

    // column layout: univariate -> prediction/truth; multivariate -> one
    // pair of columns per channel
    let columns = &ds.frame.columns;
    let mut header = vec!["date".to_string()];
    match features {
        FeatureMode::Univariate => {
            header.push("prediction".into());
            header.push("truth".into());
        }
        FeatureMode::Multivariate => {
            for c in columns {
                header.push(format!("pred_{c}"));
            }
            for c in columns {
                header.push(format!("true_{c}"));
            }
        }
    }
    let mut lines = vec![header.join(",")];
    let mut ctx = ForwardCtx::eval();
    longcast::tensor::no_grad(|| -> Result<()> {
        for i in 0..ds.len() {
            let sample = ds.sample::<f32>(i)?;
            let pred = model.forward_with(&sample, decode, &mut ctx)?;
            for r in 0..spec.pred_len {
                let mut row = vec![sample.target_times[r]
                    .format(longcast::data::TIMESTAMP_FORMAT)
                    .to_string()];
                let denorm = |col: usize, v: f64| prepared.normalizer.denormalize_value(col, v);
                match features {
                    FeatureMode::Univariate => {
                        let t = ds.frame.target;
                        row.push(denorm(t, pred.at(r, 0) as f64).to_string());
                        row.push(denorm(t, sample.target.at(r, 0) as f64).to_string());
                    }
                    FeatureMode::Multivariate => {
                        for c in 0..pred.cols() {
                            row.push(denorm(c, pred.at(r, c) as f64).to_string());
                        }
                        for c in 0..pred.cols() {
                            row.push(denorm(c, sample.target.at(r, c) as f64).to_string());
                        }
                    }
                }
                lines.push(row.join(","));
            }
        }
        Ok(())
    })?;

    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("predictions.csv"), lines.join("\n") + "\n")?;
    Manifest {
        command: "predict",
        seed,
        dataset_fingerprint: Some(file_fingerprint(&args.data)?),
        config: Some(&model.config),
        extra: vec![
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("decode".into(), args.decode.clone()),
            ("subset".into(), args.subset.clone()),
            ("stride".into(), spec.stride.to_string()),
        ],
    }
    .write(&args.out_dir)?;
    println!(
        "wrote {} ({} windows x {} rows)",
        args.out_dir.join("predictions.csv").display(),
        ds.len(),
        spec.pred_len
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "OT")]
    pub target: String,
    #[arg(long, default_value = "hourly")]
    pub granularity: String,
    #[arg(long, default_value = "0.7/0.1/0.2")]
    pub split: String,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let granularity = parse_granularity(&args.granularity)?;
    let split = parse_split(&args.split)?;
    let model = Model::<f32>::load(&args.checkpoint)?;
    let prepared = prepare(&args.data, &args.target, granularity, split)?;
    let frame = pick_subset(&prepared.splits, &prepared.raw, &args.subset)?;
    let ds = Dataset::new(frame, model.config.window, model.config.features)?;
    let report = evaluate(&model, &ds)?;
    print!("{}", report.to_text());
    if let Some(out_dir) = &args.out_dir {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("metrics.txt"), report.to_text())?;
        Manifest {
            command: "eval",
            seed,
            dataset_fingerprint: Some(file_fingerprint(&args.data)?),
            config: Some(&model.config),
            extra: vec![("subset".into(), args.subset.clone())],
        }
        .write(out_dir)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence lengths to measure, comma-separated.
    #[arg(long, default_value = "96,336,720")]
    pub l_grid: String,
    /// Per-head dimension of the measured attention calls.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 5.0)]
    pub factor: f64,
    /// Stacks used for the activation-memory accounting lines.
    #[arg(long, default_value = "3@1,1@1/4")]
    pub stacks: String,
    /// Trials for the measurement-ranking agreement test (0 to skip).
    #[arg(long, default_value_t = 1000)]
    pub prop1_trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_bench(args: BenchArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let grid: Vec<usize> = args
        .l_grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad length {s:?} in --l-grid")))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Config("--l-grid needs at least one length".into()));
    }
    let stacks = parse_stacks(&args.stacks)?;
    let mut lines = Vec::new();
    for &l in &grid {
        for mode in [AttentionKind::Full, AttentionKind::ProbSparse] {
            let report = bench::count_dot_products::<f64>(mode, l, args.d, args.factor, seed)?;
            lines.push(report.to_line());
        }
        if stacks.iter().all(|s| l % s.fraction_den == 0) {
            let lengths = bench::memory_accounting(&stacks, l, true)?;
            let sums: Vec<String> = lengths
                .iter()
                .map(|s| format!("{}={}", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+"), s.iter().sum::<usize>()))
                .collect();
            lines.push(format!("memory L={l} stacks {}", sums.join(" ")));
        }
    }
    if args.prop1_trials > 0 {
        let rate = bench::prop1_agreement(64, 16, args.prop1_trials, seed)?;
        lines.push(format!(
            "ranking-agreement L_K=64 d=16 trials={} rate={rate:.4}",
            args.prop1_trials
        ));
    }
    for line in &lines {
        println!("{line}");
    }
    if let Some(out_dir) = &args.out_dir {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("bench.txt"), lines.join("\n") + "\n")?;
        Manifest {
            command: "bench",
            seed,
            dataset_fingerprint: None,
            config: None,
            extra: vec![
                ("l_grid".into(), args.l_grid.clone()),
                ("d".into(), args.d.to_string()),
                ("factor".into(), args.factor.to_string()),
            ],
        }
        .write(out_dir)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Rows of the synthetic series the grid trains on.
    #[arg(long, default_value_t = 1200)]
    pub rows: usize,
    #[arg(long, default_value_t = 48)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 24)]
    pub label_len: usize,
    #[arg(long, default_value_t = 12)]
    pub pred_len: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = 1 << 22)]
    pub memory_budget: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let frame = synth_series(SynthKind::Multisine, args.rows, 1, seed)?;
    let split = split_chronological(&frame, SplitRule::Ratios(0.7, 0.1, 0.2))?;
    let normalizer = Normalizer::fit(&split)?;
    let spec = WindowSpec::new(args.seq_len, args.label_len, args.pred_len);
    let grid_config = |attention: AttentionKind, distilling: bool| ModelConfig {
        d_model: args.d_model,
        d_ffn: 2 * args.d_model,
        enc_heads: 4,
        enc_head_dim: args.d_model / 4,
        dec_heads: 4,
        dec_head_dim: args.d_model / 4,
        dec_layers: 1,
        stacks: vec![
            longcast::encoder::StackSpec::new(2, 1),
            longcast::encoder::StackSpec::new(1, 2),
        ],
        window: spec,
        attention,
        distilling,
        ..ModelConfig::default()
    };
    // The undistilled legs are the expensive ones; refuse the whole grid
    // up front if they would blow the budget.
    for distilling in [true, false] {
        memory_guard(&grid_config(AttentionKind::ProbSparse, distilling), args.memory_budget)?;
    }

    let train_d = Dataset::new(normalizer.apply(&split.train)?, spec, FeatureMode::Univariate)?;
    let val_d = Dataset::new(normalizer.apply(&split.val)?, spec, FeatureMode::Univariate)?;
    let test_d = Dataset::new(normalizer.apply(&split.test)?, spec, FeatureMode::Univariate)?;

    let mut lines = vec!["attention distill decode mse mae".to_string()];
    for attention in [AttentionKind::ProbSparse, AttentionKind::Full] {
        for distilling in [true, false] {
            let config = grid_config(attention, distilling);
            let mut model = Model::<f32>::build(config, seed)?;
            let cfg = TrainConfig {
                lr: 1e-3,
                epochs: args.epochs,
                batch_size: 32,
                patience: args.epochs,
                seed,
                ..TrainConfig::default()
            };
            train(&mut model, &train_d, &val_d, &cfg)?;
            for decode in [DecodeMode::Generative, DecodeMode::Dynamic] {
                let (mse, mae) = eval_with_mode(&model, &test_d, decode)?;
                let att = match attention {
                    AttentionKind::ProbSparse => "probsparse",
                    AttentionKind::Full => "full",
                };
                let dec = match decode {
                    DecodeMode::Generative => "generative",
                    DecodeMode::Dynamic => "dynamic",
                };
                let line = format!("{att} {distilling} {dec} {mse:.6} {mae:.6}");
                println!("{line}");
                lines.push(line);
            }
        }
    }
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("ablate.txt"), lines.join("\n") + "\n")?;
    Manifest {
        command: "ablate",
        seed,
        dataset_fingerprint: None,
        config: None,
        extra: vec![
            ("rows".into(), args.rows.to_string()),
            ("seq_len".into(), args.seq_len.to_string()),
            ("label_len".into(), args.label_len.to_string()),
            ("pred_len".into(), args.pred_len.to_string()),
            ("epochs".into(), args.epochs.to_string()),
        ],
    }
    .write(&args.out_dir)?;
    Ok(())
}

/// Test-set MSE/MAE under an explicit decode mode (the evaluation loop
/// itself always uses one generative pass; this variant feeds the
/// ablation table).
fn eval_with_mode(model: &Model<f32>, data: &Dataset, mode: DecodeMode) -> Result<(f64, f64)> {
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    longcast::tensor::no_grad(|| -> Result<()> {
        let mut ctx = ForwardCtx::eval();
        for i in 0..data.len() {
            let sample = data.sample::<f32>(i)?;
            let pred = model.forward_with(&sample, mode, &mut ctx)?;
            for (p, t) in pred.data().iter().zip(sample.target.data()) {
                let d = (*p - *t) as f64;
                se += d * d;
                ae += d.abs();
                n += 1;
            }
        }
        Ok(())
    })?;
    Ok((se / n as f64, ae / n as f64))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// multisine | trend-noise
    #[arg(long, default_value = "multisine")]
    pub kind: String,
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
    #[arg(long, default_value_t = 1)]
    pub cols: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let kind = SynthKind::parse(&args.kind)?;
    let frame = synth_series(kind, args.rows, args.cols, seed)?;
    write_csv(&frame, &args.out)?;
    println!(
        "wrote {} ({} rows x {} columns, target {})",
        args.out.display(),
        frame.len(),
        frame.width(),
        frame.target_name()
    );
    Ok(())
}
