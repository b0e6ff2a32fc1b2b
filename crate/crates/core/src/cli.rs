//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration, 3 divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, LambdaMode};
use crate::error::{DagamError, Result};
use crate::features::FeatureSample;
use crate::io::checkpoint::{save_checkpoint, CheckpointHeader};
use crate::io::dataset::{
    atomic_write, load_dataset, read_text, write_features_dataset, DataKind, LoadedDataset,
};
use crate::io::report::{
    emit_confusion, hash_files, sha256_file, Payload, ResultsFile, DOMAIN_LOSS_NOTE,
    RESULTS_VERSION,
};
use crate::io::synth::{generate_synthetic, SyntheticSpec};
use crate::train::{
    ablate, default_k_grid, graph_context, loocv, sweep_k, train_fold, FeatureDataset,
};

pub const SEED_ENV: &str = "DAGAM_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "dagam",
    version,
    about = "Domain adversarial graph attention model for EEG emotion recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic recordings dataset.
    GenData(GenArgs),
    /// Turn a recordings dataset into a differential-entropy features dataset.
    Features(DataArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation.
    Loocv(DataArgs),
    /// Leave-one-subject-out over a grid of pooling ratios.
    SweepK(SweepArgs),
    /// The four ablation variants.
    Ablate(DataArgs),
    /// Print a results file, optionally re-checking its inputs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; flags below override it
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    trial_s: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_lambda_mode)]
    lambda_mode: Option<LambdaMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    gcn_width: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: DataArgs,
    /// held-out subject whose features are used without labels
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: DataArgs,
    /// `start:stop:step` or a comma list
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    verify: bool,
    /// also write the confusion heatmap (loocv results only)
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn parse_lambda_mode(s: &str) -> std::result::Result<LambdaMode, String> {
    match s {
        "constant" => Ok(LambdaMode::Constant),
        "schedule" => Ok(LambdaMode::Schedule),
        "off" => Ok(LambdaMode::Off),
        _ => Err(format!("expected constant, schedule or off, got {s}")),
    }
}

/// `0.1:0.9:0.1` or `0.3,0.5`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| DagamError::Config(format!("bad number {s:?} in grid {text:?}")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(DagamError::Config(format!("grid {text:?} is empty")));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize + 1;
            // round away the accumulated binary error of a + i·step
            (0..count)
                .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
                .collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(DagamError::Config(format!("cannot parse grid {text:?}"))),
    };
    if let Some(k) = grid.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(DagamError::Config(format!("grid value {k} outside (0, 1]")));
    }
    Ok(grid)
}

/// Defaults, then the config file, then the seed variable, then flags.
fn resolve_config(
    path: Option<&Path>,
    env_seed: Option<&str>,
    o: &Overrides,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text)
                .map_err(|e| DagamError::load(p, Some(e.line()), e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s.trim().parse().map_err(|_| {
            DagamError::Config(format!("{SEED_ENV}={s:?} is not a 64-bit unsigned integer"))
        })?;
    }
    macro_rules! apply {
        ($($field:ident),*) => { $(if let Some(v) = o.$field.clone() { cfg.$field = v; })* };
    }
    apply!(
        seed,
        epochs,
        k,
        lr,
        lambda,
        lambda_mode,
        batch_size,
        sigma,
        gcn_width
    );
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    cfg: ExperimentConfig,
    loaded: LoadedDataset,
    ds: FeatureDataset,
    inputs: Vec<PathBuf>,
}

fn prepare(args: &DataArgs, env_seed: Option<&str>) -> Result<Prepared> {
    let cfg = resolve_config(args.config.as_deref(), env_seed, &args.overrides)?;
    let loaded = load_dataset(&args.data)?;
    let ds = loaded.feature_dataset(&cfg.features)?;
    let mut inputs = loaded.files();
    inputs.extend(args.config.iter().cloned());
    Ok(Prepared {
        cfg,
        loaded,
        ds,
        inputs,
    })
}

fn results(command: &str, p: &Prepared, result: Payload) -> Result<ResultsFile> {
    let mut notes = vec![DOMAIN_LOSS_NOTE.to_string()];
    if p.loaded.manifest.kind == DataKind::Recordings {
        notes.push(
            "features computed from raw recordings with the configured feature parameters".into(),
        );
    }
    Ok(ResultsFile {
        version: RESULTS_VERSION,
        command: command.into(),
        seed: p.cfg.seed,
        config: p.cfg.clone(),
        classes: p.ds.classes.clone(),
        notes,
        provenance: hash_files(&p.inputs)?,
        result,
    })
}

fn finish(out: &Path, file: &ResultsFile) -> Result<()> {
    file.write(&out.join("results.json"))?;
    let text = file.text_report();
    atomic_write(&out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text)
                .map_err(|e| DagamError::load(p, Some(e.line()), e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    apply!(subjects => subjects, classes => classes, channels => channels, delta => delta, tau => tau,
        seed => seed, trials => trials_per_class, trial_s => trial_s);
    let manifest = generate_synthetic(&spec, &a.out)?;
    let recordings: usize = manifest.subjects.iter().map(|s| s.recordings.len()).sum();
    println!(
        "wrote {} subjects, {recordings} recordings to {}",
        manifest.subjects.len(),
        a.out.display()
    );
    Ok(())
}

fn features(a: &DataArgs, env_seed: Option<&str>) -> Result<()> {
    let p = prepare(a, env_seed)?;
    let m = write_features_dataset(&a.out, &p.ds, &p.cfg.features)?;
    println!(
        "wrote {} feature windows for {} subjects to {}",
        p.ds.samples.len(),
        m.subjects.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, env_seed: Option<&str>) -> Result<()> {
    let p = prepare(&a.common, env_seed)?;
    if let Some(t) = &a.target {
        if !p.ds.subjects.contains(t) {
            return Err(DagamError::Config(format!("unknown target subject {t}")));
        }
    }
    let is_target = |s: &FeatureSample| Some(&s.subject) == a.target.as_ref();
    let source: Vec<&FeatureSample> = p.ds.samples.iter().filter(|s| !is_target(s)).collect();
    let target: Vec<_> =
        p.ds.samples
            .iter()
            .filter(|s| is_target(s))
            .map(|s| &s.x)
            .collect();
    let ctx = graph_context(&p.ds.layout, &p.cfg)?;
    let outcome = train_fold(
        &source,
        &target,
        &ctx,
        p.ds.classes.len(),
        &p.cfg,
        p.cfg.seed,
    )?;
    let ckpt = a.common.out.join("model.ckpt");
    let header = CheckpointHeader {
        architecture: outcome.params.arch.clone(),
        classes: p.ds.classes.clone(),
        config: p.cfg.clone(),
    };
    save_checkpoint(&ckpt, &header, &outcome.params)?;
    let payload = Payload::Train {
        target: a.target.clone(),
        history: outcome.history,
        checkpoint: "model.ckpt".into(),
        checkpoint_sha256: sha256_file(&ckpt)?,
    };
    finish(&a.common.out, &results("train", &p, payload)?)
}

fn run_loocv(a: &DataArgs, env_seed: Option<&str>) -> Result<()> {
    let p = prepare(a, env_seed)?;
    let r = loocv(&p.ds, &p.cfg)?;
    emit_confusion(&r.confusion, &p.ds.classes, &a.out.join("confusion.svg"))?;
    finish(&a.out, &results("loocv", &p, Payload::Loocv(r))?)
}

fn run_sweep(a: &SweepArgs, env_seed: Option<&str>) -> Result<()> {
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => default_k_grid(),
    };
    let p = prepare(&a.common, env_seed)?;
    let rows = sweep_k(&p.ds, &p.cfg, &grid)?;
    finish(
        &a.common.out,
        &results("sweep-k", &p, Payload::SweepK(rows))?,
    )
}

fn run_ablate(a: &DataArgs, env_seed: Option<&str>) -> Result<()> {
    let p = prepare(a, env_seed)?;
    let rows = ablate(&p.ds, &p.cfg)?;
    finish(&a.out, &results("ablate", &p, Payload::Ablation(rows))?)
}

fn report(a: &ReportArgs) -> Result<()> {
    let file = ResultsFile::read(&a.results)?;
    print!("{}", file.text_report());
    if let Some(svg) = &a.svg {
        match &file.result {
            Payload::Loocv(r) => emit_confusion(&r.confusion, &file.classes, svg)?,
            _ => {
                return Err(DagamError::Config(
                    "only loocv results carry a confusion matrix".into(),
                ))
            }
        }
    }
    if a.verify {
        let bad = file.verify()?;
        if !bad.is_empty() {
            return Err(DagamError::Data(format!(
                "provenance check failed: {}",
                bad.join("; ")
            )));
        }
        println!(
            "provenance verified: {} inputs unchanged",
            file.provenance.len()
        );
    }
    Ok(())
}

/// Run with an explicit value for the seed variable.
pub fn run_cli_with_env<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Features(a) => features(a, env_seed),
        Command::Train(a) => train(a, env_seed),
        Command::Loocv(a) => run_loocv(a, env_seed),
        Command::SweepK(a) => run_sweep(a, env_seed),
        Command::Ablate(a) => run_ablate(a, env_seed),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run with `DAGAM_SEED` read from the process environment.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = std::env::var(SEED_ENV).ok();
    run_cli_with_env(argv, env.as_deref())
}
