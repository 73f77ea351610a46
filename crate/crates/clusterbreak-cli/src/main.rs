//! Command-line driver: dataset/model preparation, attacks, norm sweeps,
//! transfer matrices, defenses, the mock album-clustering service, and report
//! rendering.
//!
//! Every subcommand takes `--config` (flat key=value file) plus flags; flags
//! override file values and the merged snapshot is embedded in the emitted
//! report. Outputs land under `--out`, defaulting to `$CLUSTERBREAK_OUT` or
//! `./out`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clusterbreak::attack::{
    epsilon_sweep, evaluate_attack, train_attack, AttackConfig, TrainedGenerator,
};
use clusterbreak::clustering::{
    kmeans_baseline, load_model_checkpoint, save_model_checkpoint, train_toy_clusterer,
    victim_from_checkpoint, ClusterModel, KmeansModel, ModelCheckpoint, ToyDeepClusterer,
    TrainerConfig,
};
use clusterbreak::data::{make_synthetic_image_dataset, Dataset};
use clusterbreak::defense::{
    adversarial_retrain, calibrate_threshold, fit_detector, injection_experiment, pca_overlap,
    RetrainConfig,
};
use clusterbreak::error::{Error, Result};
use clusterbreak::mlaas::{
    spawn_http_server, AlbumClusteringClient, HttpAlbumClient, InProcessClient, MlaasService,
    ServiceConfig,
};
use clusterbreak::report::{render_tables, RunConfig, RunReport};
use clusterbreak::transfer::{surrogate_attack, transfer_matrix, SurrogateAttackConfig};

#[derive(Parser)]
#[command(name = "clusterbreak", version, about = "Adversarial attacks on clustering models, end to end")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) a dataset and train a victim clusterer checkpoint
    TrainClusterer(TrainClustererArgs),
    /// Train a perturbation generator against a victim and report metrics
    Attack(AttackArgs),
    /// Run one attack per epsilon and tabulate metrics vs. perturbation norm
    SweepEpsilon(SweepArgs),
    /// Cross-evaluate generators against victims on a shared eval set
    Transfer(TransferArgs),
    /// Defender-side checks: anomaly detection, adversarial retraining, PCA
    Defend(DefendArgs),
    /// Serve the mock album-clustering HTTP API
    ServeMlaas(ServeArgs),
    /// Attack a label-only album-clustering target through a surrogate
    AttackMlaas(AttackMlaasArgs),
    /// Render aggregate CSV tables from a directory of run reports
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; CLI flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $CLUSTERBREAK_OUT, then ./out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config file's `seed`
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os("CLUSTERBREAK_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            rc.set("seed", seed.to_string());
        }
        Ok(rc)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum ModelKind {
    Toy,
    Kmeans,
}

#[derive(Args)]
struct TrainClustererArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "toy")]
    model: ModelKind,
    /// Existing dataset file; omitted = generate a synthetic one
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Victim model checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha_a: Option<f64>,
    #[arg(long)]
    alpha_c: Option<f64>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Target cluster index for the targeted variant
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated, strictly ascending epsilon values
    #[arg(long)]
    epsilons: String,
    #[arg(long)]
    max_batches: Option<usize>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    /// Victim checkpoints (repeat; order must match --generator)
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Generator checkpoints, one per victim
    #[arg(long = "generator", required = true)]
    generators: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum DefendMode {
    Anomaly,
    Retrain,
    Pca,
}

#[derive(Args)]
struct DefendArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: DefendMode,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    /// Anomaly mode: target false-positive rate for calibration
    #[arg(long)]
    fpr: Option<f64>,
    /// Anomaly mode: number of injection trials
    #[arg(long)]
    trials: Option<usize>,
    /// Retrain mode: fine-tuning epochs
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    port: u16,
    #[arg(long, default_value_t = 0)]
    backend_seed: u64,
    /// Requests per second; omitted = unthrottled
    #[arg(long)]
    rate_limit: Option<f64>,
    /// Album persistence directory; omitted = in-memory only
    #[arg(long)]
    storage_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AttackMlaasArgs {
    #[command(flatten)]
    common: Common,
    /// Base URL of the target service; omitted = in-process mock backend
    #[arg(long)]
    target_url: Option<String>,
    /// Surrogate victim checkpoint the generator trains against
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    images_per_identity: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_batches: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding *.report.json files
    #[arg(long)]
    dir: PathBuf,
}

/// Builds the attack hyperparameters from the merged config; missing keys
/// fall back to the library defaults.
fn attack_config(rc: &RunConfig) -> Result<AttackConfig> {
    let d = AttackConfig::default();
    Ok(AttackConfig {
        alpha_a: rc.require_positive_f64("alpha_a")?.unwrap_or(d.alpha_a),
        alpha_c: rc.require_positive_f64("alpha_c")?.unwrap_or(d.alpha_c),
        epsilon: rc.require_positive_f64("epsilon")?.unwrap_or(d.epsilon),
        batch_size: rc.get_usize("batch_size")?.unwrap_or(d.batch_size),
        max_batches: rc.get_usize("max_batches")?.unwrap_or(d.max_batches),
        lr_g: rc.require_positive_f64("lr_g")?.unwrap_or(d.lr_g),
        lr_d: rc.require_positive_f64("lr_d")?.unwrap_or(d.lr_d),
        window: rc.get_usize("window")?.unwrap_or(d.window),
        tau: rc.require_positive_f64("tau")?.unwrap_or(d.tau),
        seed: rc.get_u64("seed")?.unwrap_or(d.seed),
        target: rc.get_usize("target")?,
        cache_clean: rc
            .get("cache_clean")
            .map(|v| v == "true" || v == "1")
            .unwrap_or(d.cache_clean),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string()
}

enum LoadedModel {
    Toy(ToyDeepClusterer),
    Kmeans(KmeansModel),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<LoadedModel> {
        match load_model_checkpoint(path)?.model {
            ModelCheckpoint::Toy(snap) => Ok(LoadedModel::Toy(ToyDeepClusterer::from_snapshot(&snap)?)),
            ModelCheckpoint::Kmeans(snap) => Ok(LoadedModel::Kmeans(KmeansModel::from_snapshot(&snap)?)),
        }
    }

    fn as_cluster(&self) -> &dyn ClusterModel {
        match self {
            LoadedModel::Toy(m) => m,
            LoadedModel::Kmeans(m) => m,
        }
    }
}

fn load_or_make_dataset(rc: &RunConfig, path: Option<&Path>, out: &Path) -> Result<(Dataset, String)> {
    if let Some(path) = path {
        return Ok((Dataset::load(path)?, stem(path)));
    }
    let ds = make_synthetic_image_dataset(
        rc.get_usize("n_per_class")?.unwrap_or(40),
        rc.get_usize("k")?.unwrap_or(3),
        rc.get_usize("channels")?.unwrap_or(1),
        rc.get_usize("height")?.unwrap_or(8),
        rc.get_usize("width")?.unwrap_or(8),
        rc.require_positive_f64("separation")?.unwrap_or(4.0),
        rc.get_u64("seed")?.unwrap_or(0),
    )?;
    let path = out.join("dataset.json");
    ds.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok((ds, "synthetic".to_string()))
}

fn cmd_train_clusterer(args: &TrainClustererArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let rc = args.common.run_config()?;
    let (ds, _) = load_or_make_dataset(&rc, args.dataset.as_deref(), &out)?;
    let k = rc.get_usize("k")?.unwrap_or(ds.k_true());
    let seed = rc.get_u64("seed")?.unwrap_or(0);
    let (ckpt, name) = match args.model {
        ModelKind::Toy => {
            let td = TrainerConfig::default();
            let config = TrainerConfig {
                embed_dim: rc.get_usize("embed_dim")?.unwrap_or(td.embed_dim),
                recon_epochs: rc.get_usize("recon_epochs")?.unwrap_or(td.recon_epochs),
                refine_epochs: rc.get_usize("refine_epochs")?.unwrap_or(td.refine_epochs),
                batch_size: rc.get_usize("batch_size")?.unwrap_or(td.batch_size),
                lr: rc.require_positive_f64("lr")?.unwrap_or(td.lr),
                temperature: rc.require_positive_f64("temperature")?.unwrap_or(td.temperature),
                seed,
            };
            let model = train_toy_clusterer(&ds, k, &config)?;
            (ModelCheckpoint::Toy(model.snapshot()), "toy")
        }
        ModelKind::Kmeans => {
            let model = kmeans_baseline(&ds, k, seed)?;
            (ModelCheckpoint::Kmeans(model.snapshot()), "kmeans")
        }
    };
    let path = out.join(format!("{name}.ckpt.json"));
    save_model_checkpoint(&path, ckpt)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let started = Instant::now();
    let out = args.common.out_dir()?;
    let mut rc = args.common.run_config()?;
    for (key, value) in [
        ("epsilon", args.epsilon.map(|v| v.to_string())),
        ("alpha_a", args.alpha_a.map(|v| v.to_string())),
        ("alpha_c", args.alpha_c.map(|v| v.to_string())),
        ("max_batches", args.max_batches.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("target", args.target.map(|v| v.to_string())),
    ] {
        if let Some(value) = value {
            rc.set(key, value);
        }
    }
    let config = attack_config(&rc)?;
    let victim = victim_from_checkpoint(&args.model)?;
    let dataset = Dataset::load(&args.dataset)?;

    let outcome = train_attack(&*victim, &dataset, &config)?;
    let eval = evaluate_attack(&*victim as &dyn ClusterModel, &outcome.generator, &dataset)?;

    let generator_path = out.join("generator.json");
    outcome.generator.save(&generator_path)?;

    let mut report = RunReport::new("attack", &stem(&args.model), &stem(&args.dataset), &rc);
    report.pre = Some(eval.pre.clone());
    report.post = Some(eval.post.clone());
    report.ledger = Some(outcome.ledger.clone());
    report.delta_stats = Some(eval.delta_stats.clone());
    if !outcome.converged {
        report.warnings.push(format!(
            "attack stopped at the {}-batch cap without meeting the convergence tolerance",
            outcome.batches_run
        ));
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    report.record_artifact(&generator_path)?;
    let report_path = out.join("attack.report.json");
    report.save(&report_path)?;

    println!(
        "pre  nmi={:.4} ari={:.4} acc={:.4}",
        eval.pre.nmi, eval.pre.ari, eval.pre.acc
    );
    println!(
        "post nmi={:.4} ari={:.4} acc={:.4}",
        eval.post.nmi, eval.post.ari, eval.post.acc
    );
    println!(
        "queries: {} batches of {} ({} cache hits); mean |delta| {:.4}",
        outcome.ledger.batch_queries,
        outcome.ledger.batch_size,
        outcome.ledger.cache_hits,
        eval.delta_stats.mean
    );
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut rc = args.common.run_config()?;
    if let Some(v) = args.max_batches {
        rc.set("max_batches", v.to_string());
    }
    let config = attack_config(&rc)?;
    let victim = victim_from_checkpoint(&args.model)?;
    let dataset = Dataset::load(&args.dataset)?;
    let epsilons: Vec<f64> = args
        .epsilons
        .split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| Error::Config {
                field: "epsilons".into(),
                reason: format!("`{s}` is not a number"),
            })
        })
        .collect::<Result<_>>()?;

    let points = epsilon_sweep(&*victim, &dataset, &dataset, &config, &epsilons)?;
    let mut csv = String::from("epsilon,mean_delta_norm,nmi,ari,acc,batch_queries,converged\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            p.epsilon, p.mean_delta_norm, p.nmi, p.ari, p.acc, p.batch_queries, p.converged
        ));
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    if args.models.len() != args.generators.len() {
        return Err(Error::invalid(
            "generator",
            "need exactly one --generator per --model, in the same order",
        ));
    }
    let dataset = Dataset::load(&args.dataset)?;
    let loaded: Vec<(String, LoadedModel)> = args
        .models
        .iter()
        .map(|p| Ok((stem(p), LoadedModel::load(p)?)))
        .collect::<Result<_>>()?;
    let generators: Vec<TrainedGenerator> = args
        .generators
        .iter()
        .map(|p| TrainedGenerator::load(p))
        .collect::<Result<_>>()?;
    let victims: Vec<(&str, &dyn ClusterModel)> = loaded
        .iter()
        .map(|(id, m)| (id.as_str(), m.as_cluster()))
        .collect();
    let generator_refs: Vec<&TrainedGenerator> = generators.iter().collect();

    let matrix = transfer_matrix(&victims, &generator_refs, &dataset)?;
    for metric in ["nmi", "ari", "acc"] {
        let path = out.join(format!("transfer_{metric}.csv"));
        std::fs::write(&path, matrix.to_csv(metric)?)?;
        println!("wrote {}", path.display());
    }
    print!("{}", matrix.to_csv("nmi")?);
    Ok(())
}

fn cmd_defend(args: &DefendArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let rc = args.common.run_config()?;
    let seed = rc.get_u64("seed")?.unwrap_or(0);
    let dataset = Dataset::load(&args.dataset)?;
    let generator = TrainedGenerator::load(&args.generator)?;
    let model = LoadedModel::load(&args.model)?;

    match args.mode {
        DefendMode::Anomaly => {
            let LoadedModel::Toy(toy) = &model else {
                return Err(Error::invalid(
                    "model",
                    "anomaly mode needs an encoder-backed checkpoint",
                ));
            };
            let components = rc.get_usize("components")?.unwrap_or(toy.k());
            let shrinkage = rc.require_positive_f64("shrinkage")?.unwrap_or(0.1);
            let fpr = args.fpr.or(rc.get_f64("fpr")?).unwrap_or(0.05);
            let trials = args.trials.or(rc.get_usize("trials")?).unwrap_or(10);
            let mut det = fit_detector(&dataset, toy.encoder(), components, shrinkage)?;
            let threshold = calibrate_threshold(&mut det, &dataset, fpr)?;
            let report = injection_experiment(&det, &dataset, &generator, trials, seed)?;
            let path = out.join("detection.report.json");
            std::fs::write(&path, serialize_pretty(&report)?)?;
            println!(
                "threshold {threshold:.4}: detection rate {:.4}, false-positive rate {:.4} over {} trials",
                report.detection_rate, report.false_positive_rate, report.trials
            );
            println!("wrote {}", path.display());
        }
        DefendMode::Retrain => {
            let LoadedModel::Toy(toy) = &model else {
                return Err(Error::invalid("model", "retrain mode needs a trainable checkpoint"));
            };
            let epochs = args.epochs.or(rc.get_usize("epochs")?).unwrap_or(5);
            let rd = RetrainConfig::default();
            let config = RetrainConfig {
                lr: rc.require_positive_f64("lr")?.unwrap_or(rd.lr),
                batch_size: rc.get_usize("batch_size")?.unwrap_or(rd.batch_size),
                consistency_weight: rc
                    .get_f64("consistency_weight")?
                    .unwrap_or(rd.consistency_weight),
                seed,
            };
            let before = evaluate_attack(toy, &generator, &dataset)?;
            let hardened = adversarial_retrain(toy, &dataset, &generator, epochs, &config)?;
            let after = evaluate_attack(&hardened, &generator, &dataset)?;
            let path = out.join("hardened.ckpt.json");
            save_model_checkpoint(&path, ModelCheckpoint::Toy(hardened.snapshot()))?;
            println!(
                "clean nmi {:.4} -> {:.4}; post-attack nmi {:.4} -> {:.4}",
                before.pre.nmi, after.pre.nmi, before.post.nmi, after.post.nmi
            );
            println!("wrote {}", path.display());
        }
        DefendMode::Pca => {
            let components = rc.get_usize("components")?.unwrap_or(3);
            let clean = dataset.full_batch();
            let (adv, _) = clusterbreak::attack::generate_adversarial(&generator, &clean)?;
            let report = pca_overlap(&clean, &adv, components)?;
            let path = out.join("pca.csv");
            std::fs::write(&path, report.to_csv())?;
            println!("nearest-neighbor composition overlap: {:.4}", report.overlap);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        storage_dir: args.storage_dir.clone(),
        backend_seed: args.backend_seed,
        rate_limit_per_sec: args.rate_limit,
        ..ServiceConfig::default()
    };
    let service = Arc::new(MlaasService::open(config)?);
    let addr = spawn_http_server(service, ([127, 0, 0, 1], args.port).into())?;
    println!("serving on http://{addr}");
    loop {
        std::thread::park();
    }
}

fn cmd_attack_mlaas(args: &AttackMlaasArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut rc = args.common.run_config()?;
    for (key, value) in [
        ("epsilon", args.epsilon.map(|v| v.to_string())),
        ("max_batches", args.max_batches.map(|v| v.to_string())),
        ("runs", args.runs.map(|v| v.to_string())),
        (
            "images_per_identity",
            args.images_per_identity.map(|v| v.to_string()),
        ),
    ] {
        if let Some(value) = value {
            rc.set(key, value);
        }
    }
    let sd = SurrogateAttackConfig::default();
    let config = SurrogateAttackConfig {
        attack: attack_config(&rc)?,
        images_per_identity: rc
            .get_usize("images_per_identity")?
            .unwrap_or(sd.images_per_identity),
        runs: rc.get_usize("runs")?.unwrap_or(sd.runs),
        seed: rc.get_u64("seed")?.unwrap_or(sd.seed),
    };
    let surrogate = victim_from_checkpoint(&args.surrogate)?;
    let dataset = Dataset::load(&args.dataset)?;

    let target: Box<dyn AlbumClusteringClient> = match &args.target_url {
        Some(url) => Box::new(HttpAlbumClient::new(url.clone())),
        None => {
            let service = ServiceConfig {
                backend_seed: rc.get_u64("backend_seed")?.unwrap_or(0),
                ..ServiceConfig::default()
            };
            Box::new(InProcessClient {
                service: Arc::new(MlaasService::open(service)?),
            })
        }
    };

    let outcome = surrogate_attack(&*target, &*surrogate, &dataset, &config)?;
    let path = out.join("surrogate.report.json");
    std::fs::write(&path, serialize_pretty(&outcome)?)?;
    println!(
        "mean nmi {:.4} -> {:.4} over {} resamplings ({} surrogate batch queries)",
        outcome.mean_pre_nmi,
        outcome.mean_post_nmi,
        outcome.runs.len(),
        outcome.surrogate_queries
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    for path in render_tables(&args.dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn serialize_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainClusterer(args) => cmd_train_clusterer(args),
        Command::Attack(args) => cmd_attack(args),
        Command::SweepEpsilon(args) => cmd_sweep(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Defend(args) => cmd_defend(args),
        Command::ServeMlaas(args) => cmd_serve(args),
        Command::AttackMlaas(args) => cmd_attack_mlaas(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
