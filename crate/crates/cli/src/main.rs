use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use manatee_core::dataset::{self, DatasetManifest, Registry, Split};
use manatee_core::feedback::{self, ExperimentConfig, FeedbackReport, MineOptions, ReviewStore};
use manatee_core::model::{self, ModelConfig};
use manatee_core::synth::{self, SynthConfig};
use manatee_core::traineval::{self, Metrics, TrainRecipe};
use manatee_core::write_atomic;
use manatee_server::ServerConfig;

#[derive(Parser)]
#[command(name = "manatee", version, about = "Manatee call detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic session registry (WAV + CSV + hidden sidecar per session)
    Synth(SynthArgs),
    /// Window and label a registry into a split, normalized manifest
    Build(BuildArgs),
    /// Train a model on a manifest's train split
    Train(TrainArgs),
    /// Score a split and report metrics and the precision-recall curve
    Eval(EvalArgs),
    /// Add confidently scored negatives to a review store
    Mine(MineArgs),
    /// Serve the review queue over HTTP
    Serve(ServeArgs),
    /// Fold confirmed review decisions into a new manifest
    Apply(ApplyArgs),
    /// End-to-end experiments on synthetic data
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthesis parameters; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (must not exist or be empty)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    sessions: usize,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = dataset::DEFAULT_TRAIN_FRACTION)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    /// 64 wide, 2 layers, 4 heads
    Desk,
    /// 768 wide, 12 layers, 12 heads
    Paper,
    /// 16 wide, 1 layer, 2 heads
    Tiny,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history (JSON lines)
    #[arg(long)]
    history: Option<PathBuf>,
    /// Session directory; defaults to the one recorded in the manifest
    #[arg(long)]
    registry: Option<PathBuf>,
    /// TOML file with recipe fields; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    model: ModelPreset,
    /// TOML file with a full model configuration (overrides --model)
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Order-fixed gradient reduction (bitwise reproducible)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// CSV of (threshold, precision, recall) points
    #[arg(long)]
    pr_out: Option<PathBuf>,
    /// Metrics as JSON
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Review store (created if missing)
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    limit: Option<usize>,
    /// Re-surface candidates that were already rejected
    #[arg(long)]
    include_rejected: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "MANATEE_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "MANATEE_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "MANATEE_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Defaults to the directory recorded in the manifest
    #[arg(long, env = "MANATEE_REGISTRY")]
    registry: Option<PathBuf>,
    #[arg(long, env = "MANATEE_STORE")]
    store: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Train on visible labels, mine, confirm against hidden labels, retrain
    Feedback(FeedbackArgs),
}

#[derive(Args)]
struct FeedbackArgs {
    /// TOML experiment configuration (synth, model, recipe sections)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    withhold: Option<f64>,
    /// Report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_toml_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn registry_dir(flag: Option<PathBuf>, manifest: &DatasetManifest) -> Result<PathBuf> {
    match flag.or_else(|| manifest.registry.clone()) {
        Some(p) => Ok(p),
        None => bail!("manifest records no registry directory; pass --registry"),
    }
}

fn load_registry(flag: Option<PathBuf>, manifest: &DatasetManifest) -> Result<Registry> {
    let dir = registry_dir(flag, manifest)?;
    Registry::load(&dir).with_context(|| format!("loading registry {}", dir.display()))
}

/// SHA-256 over file names and contents, in name order.
fn directory_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = fs::read_dir(dir)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        h.update(name.as_encoded_bytes());
        h.update(fs::read(dir.join(&name))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.sessions == 0 {
        bail!("--sessions must be at least 1");
    }
    let cfg: SynthConfig = read_toml_or_default(a.config.as_deref())?;
    cfg.validate()?;
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        bail!("output directory {} is not empty", a.out.display());
    }
    let corpus = synth::synth_corpus(&cfg, a.sessions, a.seed)?;
    let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".synth.tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    synth::write_registry(&tmp, &corpus)?;
    if a.out.exists() {
        fs::remove_dir(&a.out)?;
    }
    fs::rename(&tmp, &a.out)?;

    let visible: usize = corpus.iter().map(|s| s.session.annotations.len()).sum();
    let hidden: usize = corpus.iter().map(|s| s.hidden.len()).sum();
    let distractors: usize = corpus.iter().map(|s| s.distractors.len()).sum();
    println!("sessions       {}", corpus.len());
    println!("duration       {:.1} s", corpus.iter().map(|s| s.session.duration_s()).sum::<f64>());
    println!("calls          {} ({visible} annotated, {hidden} withheld)", visible + hidden);
    println!("distractors    {distractors}");
    println!("registry hash  {}", directory_hash(&a.out)?);
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let registry = Registry::load(&a.registry).with_context(|| format!("loading registry {}", a.registry.display()))?;
    if registry.sessions.is_empty() {
        bail!("registry {} holds no sessions", a.registry.display());
    }
    let unsplit = DatasetManifest::from_sessions(registry.sessions.values(), a.seed);
    let mut manifest = dataset::split_train_test(&unsplit, a.train_frac, a.seed, &registry)?;
    manifest.registry = Some(fs::canonicalize(&a.registry)?);
    dataset::save_manifest(&a.out, &manifest)?;

    let c = manifest.counts();
    let total = manifest.total_counts();
    println!("sessions       {}", registry.sessions.len());
    println!("windows        {}", manifest.samples.len());
    println!("positives      {} ({:.2}%)", total.n_pos, 100.0 * total.positive_rate());
    println!("train          {} pos / {} neg", c.train.n_pos, c.train.n_neg);
    println!("test           {} pos / {} neg", c.test.n_pos, c.test.n_neg);
    if let Some(s) = manifest.norm_stats {
        println!("norm stats     mean {:.4}  std {:.4}", s.mean, s.std);
    }
    for w in &manifest.warnings {
        println!("warning        {w}");
    }
    Ok(())
}

fn recipe_from(a: &TrainArgs) -> Result<TrainRecipe> {
    let mut r: TrainRecipe = read_toml_or_default(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        r.epochs = v;
    }
    if let Some(v) = a.batch_size {
        r.batch_size = v;
    }
    if let Some(v) = a.lr {
        r.base_lr = v;
    }
    if let Some(v) = a.weight_decay {
        r.weight_decay = v;
    }
    if let Some(v) = a.snr_db {
        r.snr_db = v;
    }
    if let Some(v) = a.seed {
        r.seed = v;
    }
    if let Some(v) = a.deterministic {
        r.deterministic = v;
    }
    r.validate()?;
    Ok(r)
}

fn model_from(a: &TrainArgs) -> Result<ModelConfig> {
    let cfg = match &a.model_config {
        Some(p) => read_toml(p)?,
        None => match a.model {
            ModelPreset::Desk => ModelConfig::desk(),
            ModelPreset::Paper => ModelConfig::paper(),
            ModelPreset::Tiny => ModelConfig::tiny(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let recipe = recipe_from(&a)?;
    let config = model_from(&a)?;
    let manifest = dataset::load_manifest(&a.manifest)?;
    let registry = load_registry(a.registry.clone(), &manifest)?;
    println!(
        "model          {} parameters (embed {}, {} layers, {} heads)",
        config.param_count(),
        config.embed_dim,
        config.n_layers,
        config.n_heads
    );
    let out = traineval::train(&manifest, &registry, &config, &recipe)?;
    model::save_checkpoint(&a.out, &out.checkpoint)?;
    if let Some(h) = &a.history {
        traineval::save_history(h, &out.history)?;
    }
    println!("initial loss   {:.4}", out.history.initial_loss);
    println!("{:>5}  {:>9}  {:>8}  {:>6}  {:>6}  {:>6}", "epoch", "lr", "loss", "P", "R", "F1");
    for r in &out.history.epochs {
        match r.test {
            Some(m) => println!(
                "{:>5}  {:>9.3e}  {:>8.4}  {:>6.3}  {:>6.3}  {:>6.3}",
                r.epoch, r.lr, r.train_loss, m.precision, m.recall, m.f1
            ),
            None => println!("{:>5}  {:>9.3e}  {:>8.4}", r.epoch, r.lr, r.train_loss),
        }
    }
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("threshold      {:.3}", m.threshold);
    println!("tp fp fn tn    {} {} {} {}", m.tp, m.fp, m.fn_, m.tn);
    println!("precision      {:.4}", m.precision);
    println!("recall         {:.4}", m.recall);
    println!("f1             {:.4}", m.f1);
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = model::load_checkpoint(&a.checkpoint)?;
    let manifest = dataset::load_manifest(&a.manifest)?;
    let registry = load_registry(a.registry, &manifest)?;
    let (scores, labels) = traineval::split_scores(&ckpt, &manifest, &registry, a.split)?;
    let m = Metrics::from_scores(&scores, &labels, a.threshold);
    println!("split          {} ({} windows, {} positive)", a.split, labels.len(), labels.iter().filter(|&&y| y).count());
    print_metrics(&m);
    if labels.iter().any(|&y| y) {
        let curve = traineval::pr_curve(&scores, &labels)?;
        println!("avg precision  {:.4}", curve.average_precision);
        if let Some(p) = &a.pr_out {
            traineval::save_pr_curve(p, &curve)?;
        }
    } else if a.pr_out.is_some() {
        bail!("{} split has no positive samples; no precision-recall curve", a.split);
    }
    if let Some(p) = &a.metrics_out {
        write_json(p, &m)?;
    }
    Ok(())
}

fn cmd_mine(a: MineArgs) -> Result<()> {
    let ckpt = model::load_checkpoint(&a.checkpoint)?;
    let manifest = dataset::load_manifest(&a.manifest)?;
    let registry = load_registry(a.registry, &manifest)?;
    let mut store = ReviewStore::open(&a.store)?;
    let opts = MineOptions {
        threshold: a.threshold,
        limit: a.limit,
        include_rejected: a.include_rejected,
    };
    let candidates = feedback::mine_candidates(&ckpt, &manifest, &registry, &opts, Some(&store))?;
    let added = store.add_candidates(&candidates)?;
    println!("candidates     {} (score >= {:.3})", candidates.len(), a.threshold);
    println!("newly queued   {added}");
    println!("store          {} total, {} pending", store.len(), store.count(feedback::Status::Pending));
    for c in candidates.iter().take(10) {
        println!("  {:<24} {:.4}", c.id, c.score);
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let registry = match a.registry {
        Some(r) => r,
        None => registry_dir(None, &dataset::load_manifest(&a.manifest)?)?,
    };
    let cfg = ServerConfig {
        bind: a.bind,
        manifest: a.manifest,
        checkpoint: a.checkpoint,
        registry,
        store: a.store,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(manatee_server::serve(&cfg, |addr| {
        println!("listening on {addr}");
        let _ = std::io::Write::flush(&mut std::io::stdout());
    }))?;
    Ok(())
}

fn counts_row(name: &str, m: &DatasetManifest) -> String {
    let t = m.total_counts();
    let c = m.counts();
    format!(
        "{:<16}{:>10}{:>11}{:>15}{:>17}",
        name,
        t.n_pos,
        t.n_neg,
        format!("{:.2}%", 100.0 * t.positive_rate()),
        c.train.n_pos
    )
}

fn cmd_apply(a: ApplyArgs) -> Result<()> {
    let manifest = dataset::load_manifest(&a.manifest)?;
    let store = ReviewStore::open(&a.store)?;
    let revised = feedback::apply_decisions(&manifest, &store)?;
    dataset::save_manifest(&a.out, &revised)?;
    println!("{:<16}{:>10}{:>11}{:>15}{:>17}", "Dataset", "Positives", "Negatives", "Positive rate", "Train positives");
    println!("{}", counts_row("Original", &manifest));
    println!("{}", counts_row("Human feedback", &revised));
    println!("revision       {}", revised.revision);
    Ok(())
}

fn cmd_feedback(a: FeedbackArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_toml_or_default(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.recipe.epochs = v;
    }
    if let Some(v) = a.sessions {
        cfg.n_sessions = v;
    }
    if let Some(v) = a.withhold {
        cfg.synth.withhold_fraction = v;
    }
    cfg.synth.validate()?;
    cfg.recipe.validate()?;
    cfg.model.validate()?;
    if a.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let mut reports: Vec<FeedbackReport> = Vec::new();
    println!(
        "{:>5}  {:>10}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
        "seed", "candidates", "confirmed", "recovered", "F1 before", "F1 after", "truth F1"
    );
    for &seed in &a.seeds {
        let r = feedback::feedback_experiment(&cfg, seed)?;
        println!(
            "{:>5}  {:>10}  {:>9}  {:>8.1}%  {:>9.3}  {:>9.3}  {:.3}->{:.3}",
            seed,
            r.n_candidates,
            r.n_confirmed,
            100.0 * r.recovered_fraction,
            r.before.f1,
            r.after.f1,
            r.before_truth.f1,
            r.after_truth.f1
        );
        reports.push(r);
    }
    if reports.len() >= 2 {
        let before: Vec<Metrics> = reports.iter().map(|r| r.before).collect();
        let after: Vec<Metrics> = reports.iter().map(|r| r.after).collect();
        let cmp = traineval::compare_runs(("Original", &before), ("Human feedback", &after))?;
        println!();
        print!("{}", traineval::format_comparison(&cmp));
    }
    if let Some(p) = &a.out {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Build(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Experiment(ExperimentCommand::Feedback(a)) => cmd_feedback(a),
    }
}
