//! `kfc` command line: train, eval, analyze, bench.
//!
//! Exit codes: 0 success, 1 config/validation/load failure, 2 runtime
//! failure (non-finite loss). Structured output (JSON/CSV) goes to stdout
//! or the requested file; progress logs go to stderr.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use kfc_core::ctc::argmax_frame_labels;
use kfc_core::data::{generate_synthetic, load_dataset, save_dataset, split, Dataset, SyntheticTaskSpec};
use kfc_core::keyframe::{
    check_ctc_feasible, extract_key_frames, select_kfds_frames, Feasibility, KfsaMode,
};
use kfc_core::model::{
    evaluate_parallel, load_checkpoint, save_checkpoint, EpochMetrics, EvalMetrics, Model,
    ModelConfig, ModelMode, RunMode, Trainer, METRICS_CSV_HEADER,
};
use kfc_core::nn::{reset_attention_mult_count, attention_mult_count, scaled_dot_attention};
use kfc_core::tensor::randn;

#[derive(Parser)]
#[command(name = "kfc", about = "Key-frame guided Conformer CTC experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints JSON metrics to stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// dense | kfsa | kfds (defaults to the training-time mode)
        #[arg(long)]
        mode: Option<ModelMode>,
        #[arg(long)]
        w: Option<usize>,
        /// window_plus_k | window_only | k_only | dense
        #[arg(long)]
        kfsa_mode: Option<KfsaMode>,
    },
    /// Per-utterance key-frame statistics as CSV.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Dense-vs-shortened attention multiply counts and wall time.
    Bench {
        #[arg(long, default_value_t = 1024)]
        t: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0.4)]
        keep_fraction: f64,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
    },
}

/// One JSON document holding everything a run needs. Unknown keys are
/// rejected; the copy persisted next to the checkpoint has all defaults
/// materialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    data: SyntheticTaskSpec,
    /// Fraction of utterances used for training; the rest is heldout.
    train_fraction: f64,
    /// Load this dataset file instead of generating synthetic data.
    data_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: SyntheticTaskSpec::default(),
            // 2200 generated utterances -> 2000 train / 200 heldout.
            train_fraction: 10.0 / 11.0,
            data_path: None,
        }
    }
}

enum CliError {
    /// Bad input: config, arguments, missing files. Exit 1.
    Validation(String),
    /// Failure during computation (non-finite loss). Exit 2.
    Runtime(String),
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn worker_threads() -> usize {
    std::env::var("KFC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Cmd::Eval {
            ckpt,
            data,
            mode,
            w,
            kfsa_mode,
        } => cmd_eval(&ckpt, &data, mode, w, kfsa_mode),
        Cmd::Analyze { ckpt, data, w, emit } => cmd_analyze(&ckpt, &data, w, &emit),
        Cmd::Bench {
            t,
            d,
            heads,
            keep_fraction,
            repeat,
        } => cmd_bench(t, d, heads, keep_fraction, repeat),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| validation(format!("config parse error: {e}")))?;
    cfg.model.validate().map_err(validation)?;
    cfg.data.validate().map_err(validation)?;
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(validation(format!(
            "train_fraction must be in (0,1), got {}",
            cfg.train_fraction
        )));
    }
    Ok(cfg)
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data_path {
        Some(p) => load_dataset(p, Some(cfg.data.feat_dim))
            .map_err(|e| validation(format!("dataset load failed: {e}"))),
        None => Ok(generate_synthetic(&cfg.data)),
    }
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = read_run_config(config_path)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    std::fs::create_dir_all(out)
        .map_err(|e| validation(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )
    .map_err(|e| validation(format!("cannot write config.json: {e}")))?;

    let full = load_or_generate(&cfg)?;
    let (train, heldout) = split(&full, cfg.train_fraction, cfg.model.seed);
    eprintln!(
        "dataset: {} train / {} heldout utterances, feat_dim {}",
        train.utterances.len(),
        heldout.utterances.len(),
        train.feat_dim
    );
    save_dataset(&heldout, &out.join("heldout.bin"))
        .map_err(|e| validation(format!("cannot write heldout.bin: {e}")))?;

    let mut trainer = Trainer::new(Model::init(&cfg.model));
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    let threads = worker_threads();
    let started = Instant::now();
    for epoch in 0..cfg.model.epochs {
        let m = trainer
            .train_epoch(&train, epoch)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        csv.push_str(&m.csv_row());
        csv.push('\n');
        // Heldout metrics under the same mechanism state as this epoch.
        let enabled = epoch >= cfg.model.warmup_epochs;
        let mut run = RunMode::from_config(&cfg.model);
        if !enabled {
            run.mode = ModelMode::Dense;
        }
        let ev = evaluate_parallel(&trainer.model, &heldout, run, threads);
        let hm = EpochMetrics {
            epoch,
            split: "heldout".into(),
            loss_ctc1: ev.loss_ctc1,
            loss_ctc2: ev.loss_ctc2,
            loss_joint: ev.loss_joint,
            ter: ev.ter,
            drop_ratio_mean: ev.drop_ratio_mean,
            fallback_count: ev.fallback_count,
        };
        csv.push_str(&hm.csv_row());
        csv.push('\n');
        eprintln!(
            "epoch {epoch}: train loss {:.4} ter {:.4} | heldout ter {:.4} drop {:.3} ({:.1}s)",
            m.loss_joint,
            m.ter,
            ev.ter,
            ev.drop_ratio_mean,
            started.elapsed().as_secs_f64()
        );
        // Key-frame modes must not stop before the mechanism activates.
        if let Some(stop) = cfg.model.early_stop_ter {
            if ev.ter <= stop && (enabled || cfg.model.mode == ModelMode::Dense) {
                eprintln!("early stop: heldout TER {:.4} <= {stop}", ev.ter);
                break;
            }
        }
    }
    std::fs::write(out.join("metrics.csv"), csv)
        .map_err(|e| validation(format!("cannot write metrics.csv: {e}")))?;
    save_checkpoint(&trainer.model, out)
        .map_err(|e| validation(format!("checkpoint save failed: {e}")))?;
    eprintln!("done in {:.1}s; artifacts in {}", started.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn load_ckpt_model(ckpt: &Path) -> Result<(Model, RunConfig), CliError> {
    let cfg_path = ckpt.join("config.json");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| validation(format!("cannot read {}: {e}", cfg_path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| validation(format!("config parse error: {e}")))?;
    cfg.model.validate().map_err(validation)?;
    let model = load_checkpoint(ckpt, &cfg.model)
        .map_err(|e| validation(format!("checkpoint load failed: {e}")))?;
    Ok((model, cfg))
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    mode: Option<ModelMode>,
    w: Option<usize>,
    kfsa_mode: Option<KfsaMode>,
) -> Result<(), CliError> {
    let (model, cfg) = load_ckpt_model(ckpt)?;
    let dataset = load_dataset(data, Some(cfg.data.feat_dim))
        .map_err(|e| validation(format!("dataset load failed: {e}")))?;
    let mut run = RunMode::from_config(&cfg.model);
    if let Some(m) = mode {
        if m != run.mode {
            eprintln!("warning: eval mode {m} differs from training mode {}", run.mode);
        }
        run.mode = m;
    }
    if let Some(w) = w {
        if w != run.w {
            eprintln!("warning: eval w {w} differs from training w {}", run.w);
        }
        run.w = w;
    }
    if let Some(km) = kfsa_mode {
        run.kfsa_mode = km;
    }
    let ev: EvalMetrics = evaluate_parallel(&model, &dataset, run, worker_threads());
    #[derive(Serialize)]
    struct EvalReport {
        ter: f64,
        drop_ratio_mean: f64,
        fallback_count: usize,
        t_prime_mean: f64,
    }
    let report = EvalReport {
        ter: ev.ter,
        drop_ratio_mean: ev.drop_ratio_mean,
        fallback_count: ev.fallback_count,
        t_prime_mean: ev.t_prime_mean,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

const ANALYZE_CSV_HEADER: &str = "utt_id,T,U,|P|,w,mode,|kept|,drop_ratio,fallback";

fn cmd_analyze(ckpt: &Path, data: &Path, w: usize, emit: &Path) -> Result<(), CliError> {
    let (model, cfg) = load_ckpt_model(ckpt)?;
    let dataset = load_dataset(data, Some(cfg.data.feat_dim))
        .map_err(|e| validation(format!("dataset load failed: {e}")))?;
    let mode = cfg.model.mode;
    let mut out = String::from(ANALYZE_CSV_HEADER);
    out.push('\n');
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); // T, U, |P|, |kept|, drop
    let mut fallbacks = 0usize;
    let run = RunMode {
        mode: ModelMode::Dense,
        ..RunMode::from_config(&cfg.model)
    };
    for utt in &dataset.utterances {
        let feats = utt.feature_tensor(dataset.feat_dim);
        // Dense forward just to obtain intermediate posteriors.
        let fw = model.forward(&feats, None, false, run);
        let t = fw.interctc.t;
        let ids = argmax_frame_labels(&fw.interctc);
        let p = extract_key_frames(&ids, fw.interctc.blank_id);
        let sel = select_kfds_frames(&p, t, w);
        let infeasible =
            sel.fallback || check_ctc_feasible(&sel, utt.labels.len()) == Feasibility::FallbackNeeded;
        let (kept, drop) = if infeasible { (t, 0.0) } else { (sel.kept.len(), sel.drop_ratio) };
        if infeasible {
            fallbacks += 1;
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{}\n",
            utt.id,
            t,
            utt.labels.len(),
            p.positions.len(),
            w,
            mode,
            kept,
            drop,
            infeasible as u8
        ));
        sums.0 += t as f64;
        sums.1 += utt.labels.len() as f64;
        sums.2 += p.positions.len() as f64;
        sums.3 += kept as f64;
        sums.4 += drop;
    }
    let n = dataset.utterances.len().max(1) as f64;
    out.push_str(&format!(
        "summary,{:.3},{:.3},{:.3},{},{},{:.3},{:.6},{}\n",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        w,
        mode,
        sums.3 / n,
        sums.4 / n,
        fallbacks
    ));
    std::fs::write(emit, &out)
        .map_err(|e| validation(format!("cannot write {}: {e}", emit.display())))?;
    eprintln!(
        "analyzed {} utterances -> {} (mean drop {:.3}, {} fallbacks)",
        dataset.utterances.len(),
        emit.display(),
        sums.4 / n,
        fallbacks
    );
    Ok(())
}

fn cmd_bench(t: usize, d: usize, heads: usize, keep_fraction: f64, repeat: usize) -> Result<(), CliError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(validation(format!(
            "keep-fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(validation(format!("d {d} must be a positive multiple of heads {heads}")));
    }
    if t == 0 || repeat == 0 {
        return Err(validation("t and repeat must be positive".to_string()));
    }
    let d_head = d / heads;
    let t_short = ((t as f64) * keep_fraction).ceil() as usize;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mk = |len: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        (0..heads)
            .map(|_| {
                (
                    randn(&[len, d_head], 1.0, rng),
                    randn(&[len, d_head], 1.0, rng),
                    randn(&[len, d_head], 1.0, rng),
                )
            })
            .collect::<Vec<_>>()
    };
    let dense_in = mk(t, &mut rng);
    let short_in = mk(t_short, &mut rng);
    let run_pass = |inputs: &[(kfc_core::Tensor, kfc_core::Tensor, kfc_core::Tensor)]| {
        for (q, k, v) in inputs {
            let _ = scaled_dot_attention(q, k, v, None);
        }
    };
    let time_median = |inputs: &[(kfc_core::Tensor, kfc_core::Tensor, kfc_core::Tensor)]| {
        let mut samples: Vec<f64> = (0..repeat)
            .map(|_| {
                let t0 = Instant::now();
                run_pass(inputs);
                t0.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        samples[samples.len() / 2]
    };

    reset_attention_mult_count();
    run_pass(&dense_in);
    let dense_mults = attention_mult_count();
    reset_attention_mult_count();
    run_pass(&short_in);
    let sparse_mults = attention_mult_count();
    let dense_ms = time_median(&dense_in);
    let sparse_ms = time_median(&short_in);

    #[derive(Serialize)]
    struct BenchReport {
        dense_mults: u64,
        sparse_mults: u64,
        /// Count-formula ratio (keep_fraction squared); the raw count
        /// quotient differs slightly whenever ceil(F*T) != F*T.
        ratio: f64,
        dense_ms: f64,
        sparse_ms: f64,
    }
    // keep_fraction arrives as a short decimal literal; round its square
    // back to 12 decimals so e.g. 0.4 reports 0.16, not 0.16000000000000003.
    let ratio = (keep_fraction * keep_fraction * 1e12).round() / 1e12;
    let report = BenchReport {
        dense_mults,
        sparse_mults,
        ratio,
        dense_ms,
        sparse_ms,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    let _ = std::io::stdout().flush();
    Ok(())
}
