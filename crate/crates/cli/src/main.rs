use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pan_core::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use pan_core::cim::{CimSnapshot, FixedRouter};
use pan_core::codebook::{adapt_stream, Codebook};
use pan_core::config::KvConfig;
use pan_core::corruption::{CorruptionKind, CorruptionRegistry};
use pan_core::data::store::{load_dataset, save_dataset, DiskDataset};
use pan_core::data::{procedural_shapes, read_cifar10_binary};
use pan_core::eval::{ablation_csv, layer_ablation_sweep, AblationDirection, CaTable};
use pan_core::experiment::{
    cim_routes, cim_training_set, evaluate, expected_groups, features_csv, procedural_splits, test_stream, train_cim_snapshot,
    train_source, write_evaluation, PipelineConfig, TrainingSummary,
};
use pan_core::nn::Model;
use pan_core::{PanError, Result, Tensor};

#[derive(Parser)]
#[command(name = "pan", version, about = "Prototype-guided BN statistics adaptation under image corruptions")]
struct Cli {
    /// Seed for every random stream (overrides `seed` in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Key-value configuration file (see README for the keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or inspect dataset directories.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train the downstream classifier on clean images.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Corrupt a clean dataset with every (type, severity) pair; the clean
    /// images are kept and the result is shuffled.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated corruption names.
        #[arg(long)]
        types: Option<String>,
        /// `3..5` or `1,3,5`.
        #[arg(long)]
        severities: Option<String>,
    },
    /// Train the corruption identification module on a corrupted dataset.
    TrainCim {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        /// Route to the source statistics when min(b) exceeds this value.
        #[arg(long)]
        reject_threshold: Option<f64>,
    },
    /// Adapt a fresh codebook along a test stream and save it.
    Adapt {
        #[command(flatten)]
        inputs: StreamInputs,
        #[command(flatten)]
        adapt: AdaptFlags,
    },
    /// Evaluate Source, PAN and oracle routing on a test stream.
    Eval {
        #[command(flatten)]
        inputs: StreamInputs,
        #[command(flatten)]
        adapt: AdaptFlags,
        /// Skip the layer ablation sweep.
        #[arg(long)]
        no_ablation: bool,
    },
    /// Corrupted CA as a function of how many BN layers are adapted.
    AblateLayers {
        #[command(flatten)]
        inputs: StreamInputs,
        #[command(flatten)]
        adapt: AdaptFlags,
        #[arg(long, value_enum, default_value = "from-first")]
        direction: Direction,
    },
    /// Write per-sample CIM features as CSV.
    ExportFeatures {
        #[arg(long)]
        cim: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the whole staged pipeline on the procedural corpus, reusing
    /// checkpoints already present in the output directory.
    Report,
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Procedural shapes corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Convert CIFAR-10 binary batch files.
    FromCifar {
        #[arg(long, required = true, num_args = 1..)]
        files: Vec<PathBuf>,
    },
    /// Print a dataset summary.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct StreamInputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cim: PathBuf,
    #[arg(long)]
    stream: PathBuf,
}

#[derive(Args)]
struct AdaptFlags {
    #[arg(long)]
    momentum: Option<f64>,
    /// `all`, `none`, `first:N`, `last:N` or `A..B`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    FromFirst,
    FromLast,
}

struct Context {
    kv: KvConfig,
    out: Option<PathBuf>,
}

impl Context {
    fn set<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.kv.set(key, v.to_string());
        }
    }

    fn pipeline(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_kv(&self.kv)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| PanError::Config("--out is required for this command".into()))
    }

    fn apply_adapt(&mut self, a: &AdaptFlags) {
        self.set("adapt.momentum", a.momentum);
        self.set("adapt.layers", a.layers.clone());
        self.set("adapt.batch_size", a.batch_size);
    }
}

fn load_model(path: &Path) -> Result<Model> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

fn load_cim(path: &Path) -> Result<CimSnapshot> {
    CimSnapshot::from_checkpoint(&Checkpoint::load(path)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn corrupted_kinds(ds: &DiskDataset) -> Vec<CorruptionKind> {
    ds.header.registry.iter().copied().filter(|&k| k != CorruptionKind::Clean).collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::parse(&fs::read_to_string(p)?)?,
        None => KvConfig::default(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    let mut ctx = Context { kv, out: cli.out };

    match cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Synth { n, classes } => {
                let cfg = ctx.pipeline()?;
                let images = procedural_shapes(n, classes, cfg.seed)?;
                save_dataset(ctx.out()?, &DiskDataset::from_clean(&images, classes, cfg.seed)?)?;
                println!("wrote {n} images ({classes} classes) to {}", ctx.out()?.display());
            }
            DatasetAction::FromCifar { files } => {
                let mut images = Vec::new();
                for f in &files {
                    images.extend(read_cifar10_binary(&fs::read(f)?)?);
                }
                let n = images.len();
                save_dataset(ctx.out()?, &DiskDataset::from_clean(&images, 10, 0)?)?;
                println!("wrote {n} CIFAR-10 images to {}", ctx.out()?.display());
            }
            DatasetAction::Inspect { data } => {
                let ds = load_dataset(&data)?;
                let h = &ds.header;
                println!("format      {}", h.format);
                println!("images      {} of {}x{}x{}", h.count, h.channels, h.height, h.width);
                println!("classes     {}", h.num_classes);
                println!("corruptions {}", h.registry.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
                println!("severities  {}", h.severities.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
                println!("seed        {}", h.seed);
            }
        },
        Command::TrainSource { data, epochs, lr, batch_size } => {
            ctx.set("source.epochs", epochs);
            ctx.set("source.lr", lr);
            ctx.set("source.batch_size", batch_size);
            let cfg = ctx.pipeline()?;
            let ds = load_dataset(&data)?;
            let (model, report) = train_source(&ds.labeled(), ds.header.num_classes, &cfg.source)?;
            model_checkpoint(&model)?.save(ctx.out()?)?;
            for (e, (l, a)) in report.epoch_losses.iter().zip(&report.epoch_accuracy).enumerate() {
                println!("epoch {e}: loss {l:.4} accuracy {:.2}", 100.0 * a);
            }
        }
        Command::Corrupt { data, types, severities } => {
            ctx.set("corruptions", types);
            ctx.set("severities", severities);
            let cfg = ctx.pipeline()?;
            let ds = load_dataset(&data)?;
            let clean = ds.labeled();
            let stream = test_stream(&clean, &cfg.corruptions, &cfg.severities, cfg.seed)?;
            let out = DiskDataset::from_samples(stream, ds.header.num_classes, cfg.seed)?;
            save_dataset(ctx.out()?, &out)?;
            println!("wrote {} samples to {}", out.samples.len(), ctx.out()?.display());
        }
        Command::TrainCim { data, lambda, alpha, epochs, q, reject_threshold } => {
            ctx.set("cim.lambda", lambda);
            ctx.set("cim.alpha", alpha);
            ctx.set("cim.epochs", epochs);
            ctx.set("cim.q", q);
            ctx.set("cim.reject_threshold", reject_threshold);
            let cfg = ctx.pipeline()?;
            let ds = load_dataset(&data)?;
            let registry = CorruptionRegistry::new(&corrupted_kinds(&ds));
            let (cim, report) = train_cim_snapshot(&ds.samples, &registry, &cfg.cim, cfg.reject_threshold)?;
            cim.to_checkpoint()?.save(ctx.out()?)?;
            for (e, (l, d)) in report.epoch_losses.iter().zip(&report.epoch_anchor_distance).enumerate() {
                println!("epoch {e}: loss {l:.4} mean anchor distance {d:.4}");
            }
        }
        Command::Adapt { inputs, adapt } => {
            ctx.apply_adapt(&adapt);
            let cfg = ctx.pipeline()?;
            let model = load_model(&inputs.model)?;
            let cim = load_cim(&inputs.cim)?;
            let ds = load_dataset(&inputs.stream)?;
            let images: Vec<Tensor> = ds.samples.iter().map(|s| s.image.clone()).collect();
            let mut codebook = Codebook::new(model.source_stats(), cim.registry.len())?;
            let outcome = adapt_stream(&model, &cim, &mut codebook, &images, &cfg.adapt)?;
            codebook.to_checkpoint()?.save(ctx.out()?)?;
            let table = CaTable::from_predictions(&ds.samples, &outcome.predictions, &[])?;
            print!("{}", table.to_csv());
            println!("updates per entry: {:?}", codebook.update_counts());
        }
        Command::Eval { inputs, adapt, no_ablation } => {
            ctx.apply_adapt(&adapt);
            let cfg = ctx.pipeline()?;
            let model = load_model(&inputs.model)?;
            let cim = load_cim(&inputs.cim)?;
            let ds = load_dataset(&inputs.stream)?;
            let expected = expected_groups(&corrupted_kinds(&ds), &ds.header.severities);
            let ev = evaluate(
                &model,
                &cim,
                &ds.samples,
                &cfg.adapt,
                cfg.eval_batch,
                &expected,
                !no_ablation,
                (cfg.seed, cfg.config_hash()),
            )?;
            let out = ctx.out()?;
            write_evaluation(out, &ev)?;
            ev.codebook.to_checkpoint()?.save(&out.join("codebook.ckpt"))?;
            print!("{}", ev.report.render_text());
        }
        Command::AblateLayers { inputs, adapt, direction } => {
            ctx.apply_adapt(&adapt);
            let cfg = ctx.pipeline()?;
            let model = load_model(&inputs.model)?;
            let cim = load_cim(&inputs.cim)?;
            let ds = load_dataset(&inputs.stream)?;
            let images: Vec<Tensor> = ds.samples.iter().map(|s| s.image.clone()).collect();
            let routes = cim_routes(&cim, &images, cfg.eval_batch)?;
            let fresh = Codebook::new(model.source_stats(), cim.registry.len())?;
            let dir = match direction {
                Direction::FromFirst => AblationDirection::FromFirst,
                Direction::FromLast => AblationDirection::FromLast,
            };
            let points =
                layer_ablation_sweep(&model, &FixedRouter { routes: &routes }, &fresh, &ds.samples, &cfg.adapt, dir)?;
            let csv = ablation_csv(&points);
            write_file(ctx.out()?, &csv)?;
            print!("{csv}");
        }
        Command::ExportFeatures { cim, data } => {
            let cfg = ctx.pipeline()?;
            let cim = load_cim(&cim)?;
            let ds = load_dataset(&data)?;
            write_file(ctx.out()?, &features_csv(&cim, &ds.samples, cfg.eval_batch)?)?;
            println!("wrote {} feature rows to {}", ds.samples.len(), ctx.out()?.display());
        }
        Command::Report => report(&ctx)?,
    }
    Ok(())
}

fn report(ctx: &Context) -> Result<()> {
    let cfg = ctx.pipeline()?;
    let dir = ctx.out.clone().unwrap_or_else(|| PathBuf::from("pan-report"));
    fs::create_dir_all(&dir)?;
    let registry = cfg.registry();
    let (train, test) = procedural_splits(&cfg)?;

    let model_path = dir.join("model.ckpt");
    let cim_path = dir.join("cim.ckpt");
    let mut training = None;
    let (model, source_report) = if model_path.exists() {
        eprintln!("reusing {}", model_path.display());
        (load_model(&model_path)?, None)
    } else {
        eprintln!("training source model on {} images", train.len());
        let (m, r) = train_source(&train, cfg.classes, &cfg.source)?;
        model_checkpoint(&m)?.save(&model_path)?;
        (m, Some(r))
    };
    let (cim, cim_report) = if cim_path.exists() {
        eprintln!("reusing {}", cim_path.display());
        (load_cim(&cim_path)?, None)
    } else {
        eprintln!("training CIM");
        let data = cim_training_set(&train[..cfg.cim_train_size.min(train.len())], &registry, &cfg.severities, cfg.seed)?;
        let (c, r) = train_cim_snapshot(&data, &registry, &cfg.cim, cfg.reject_threshold)?;
        c.to_checkpoint()?.save(&cim_path)?;
        (c, Some(r))
    };
    if let (Some(source), Some(cim)) = (source_report, cim_report) {
        training = Some(TrainingSummary { source, cim });
    }
    eprintln!("evaluating");
    let stream = test_stream(&test, &cfg.corruptions, &cfg.severities, cfg.seed)?;
    let ev = evaluate(
        &model,
        &cim,
        &stream,
        &cfg.adapt,
        cfg.eval_batch,
        &expected_groups(&cfg.corruptions, &cfg.severities),
        cfg.ablation,
        (cfg.seed, cfg.config_hash()),
    )?;
    write_evaluation(&dir, &ev)?;
    ev.codebook.to_checkpoint()?.save(&dir.join("codebook.ckpt"))?;
    fs::write(dir.join("config.txt"), cfg.canonical())?;
    if let Some(t) = training {
        fs::write(dir.join("training.json"), t.to_json()?)?;
    }
    print!("{}", ev.report.render_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
