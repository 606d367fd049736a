mod config;
mod topomap;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use hear_core::channel_dictionary::GlobalDictionary;
use hear_core::evaluation::{evaluate, finetune, run_protocol, split_dataset, Metrics, PatchCache};
use hear_core::gradcheck;
use hear_core::layout_scheduler::{pretrain_on_dataset, Dataset, PretrainRun};
use hear_core::model::{export_channel_activation, load_checkpoint, save_checkpoint, Model};
use hear_core::synthetic_data::{generate, SynthSpec};
use hear_core::Model32;

use config::{keys_help, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "hear", version, about = "Layout-agnostic EEG pretraining and evaluation", after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Same as `--set data_dir=DIR`.
    #[arg(long, global = true)]
    data_dir: Option<String>,
    /// Same as `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Same as `--set checkpoint=PATH`.
    #[arg(long, global = true)]
    checkpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or validate a channel dictionary.
    #[command(after_help = keys_help())]
    Dict {
        /// Print how a raw channel label resolves.
        #[arg(long)]
        lookup: Option<String>,
        /// Parse a dictionary file and report the first error.
        #[arg(long)]
        validate: Option<PathBuf>,
    },
    /// Write the synthetic hemisphere-planted dataset.
    #[command(after_help = keys_help())]
    Gen {
        /// Output directory; defaults to data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-patch pretraining; writes the checkpoint and loss log.
    #[command(after_help = keys_help())]
    Pretrain {
        /// Same as `--set steps=N`.
        #[arg(long)]
        steps: Option<String>,
    },
    /// Fine-tune a checkpoint on one seeded split.
    #[command(after_help = keys_help())]
    Finetune,
    /// Run the split/fine-tune/test protocol over all seeds.
    #[command(after_help = keys_help())]
    Eval,
    /// Compare analytic gradients against finite differences.
    #[command(after_help = keys_help())]
    Gradcheck,
    /// Export channel activation scores and a scalp plot.
    #[command(after_help = keys_help())]
    Topomap,
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
    GradCheck,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<hear_core::Error> for Failure {
    fn from(e: hear_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(v) => v,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::GradCheck) => ExitCode::from(3),
    }
}

fn resolve(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::from_env();
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    let flags = [
        ("data_dir", &common.data_dir),
        ("seed", &common.seed),
        ("checkpoint", &common.checkpoint),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let common = &cli.common;
    match cli.command {
        Command::Dict { lookup, validate } => cmd_dict(&resolve(common, &[])?, lookup, validate),
        Command::Gen { out } => cmd_gen(&resolve(common, &[])?, out),
        Command::Pretrain { steps } => cmd_pretrain(&resolve(common, &[("steps", &steps)])?),
        Command::Finetune => cmd_finetune(&resolve(common, &[])?),
        Command::Eval => cmd_eval(&resolve(common, &[])?),
        Command::Gradcheck => cmd_gradcheck(&resolve(common, &[])?),
        Command::Topomap => cmd_topomap(&resolve(common, &[])?),
    }
}

fn dictionary(cfg: &RunConfig) -> Result<GlobalDictionary, Failure> {
    match cfg.str("dictionary") {
        "" => Ok(GlobalDictionary::standard()),
        path => GlobalDictionary::load(path).map_err(|e| Failure::Config(format!("{path}: {e}"))),
    }
}

fn open_dataset(cfg: &RunConfig, dict: &GlobalDictionary) -> Result<Dataset, Failure> {
    let root = cfg.path("data_dir");
    Dataset::open(&root, dict)
        .with_context(|| format!("opening dataset {}", root.display()))
        .map_err(Failure::Runtime)
}

fn load_model(path: &Path) -> Result<Model32, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_dict(cfg: &RunConfig, lookup: Option<String>, validate: Option<PathBuf>) -> Outcome {
    if let Some(path) = validate {
        let d = GlobalDictionary::load(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        println!("{}: {} entries ok", path.display(), d.len());
        return Ok(());
    }
    let dict = dictionary(cfg)?;
    match lookup {
        Some(name) => match dict.lookup(&name) {
            Some(e) => {
                let [x, y, z] = e.position;
                println!("{} {} {x} {y} {z}", e.name, e.channel_type);
                Ok(())
            }
            None => Err(Failure::Config(format!("{name:?} not found"))),
        },
        None => {
            print!("{}", dict.to_text());
            Ok(())
        }
    }
}

fn cmd_gen(cfg: &RunConfig, out: Option<PathBuf>) -> Outcome {
    let dict = dictionary(cfg)?;
    let spec = SynthSpec {
        samples_per_layout: cfg.positive("gen_samples")?,
        classes: cfg.positive("gen_classes")?,
        duration: cfg.parse("gen_duration")?,
        noise_sigma: cfg.parse("gen_noise")?,
        sample_rate: cfg.parse("sample_rate")?,
        seed: cfg.parse("seed")?,
        window_len: cfg.positive("window_len")?,
        ..SynthSpec::default()
    };
    let root = out.unwrap_or_else(|| cfg.path("data_dir"));
    let manifest = generate(&spec, &dict, &root)?;
    for e in &manifest {
        println!("{} {} {} samples", e.subset_id, e.signature, e.num_samples);
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Outcome {
    let dict = dictionary(cfg)?;
    let model_cfg = cfg.model()?;
    let run = PretrainRun {
        steps: cfg.parse("steps")?,
        batch_size: cfg.positive("batch_size")?,
        prefetch_depth: cfg.parse("prefetch_depth")?,
        preprocess: cfg.preprocess()?,
        objective: cfg.objective()?,
    };
    let ds = open_dataset(cfg, &dict)?;
    let mut model: Model32 = Model::init(model_cfg, cfg.parse("seed")?);
    let log_path = cfg.path("log");
    let mut log = create(&log_path)?;
    let mut write_err = None;
    let records = pretrain_on_dataset(&mut model, &ds, &run, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{r}") {
                write_err = Some(e);
            }
        }
        log::info!("{r}");
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", log_path.display())).into());
    }
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    let ckpt = cfg.path("checkpoint");
    save_checkpoint(&model, &ckpt)?;
    match records.last() {
        Some(r) => println!("{} steps, final loss {:.6e}, checkpoint {}", records.len(), r.losses.total(), ckpt.display()),
        None => println!("0 steps, checkpoint {}", ckpt.display()),
    }
    Ok(())
}

fn all_ids(ds: &Dataset) -> Vec<u64> {
    (0..ds.len() as u64).collect()
}

fn cmd_finetune(cfg: &RunConfig) -> Outcome {
    let dict = dictionary(cfg)?;
    let ft = cfg.finetune()?;
    let classes = cfg.positive("classes")?;
    let seed: u64 = cfg.parse("seed")?;
    let ds = open_dataset(cfg, &dict)?;
    let base = load_model(&cfg.path("checkpoint"))?;
    let ids = all_ids(&ds);
    let (train, val, test) = split_dataset(&ids, seed)?;
    let cache = PatchCache::build(&ds, &ids, &ft.preprocess, base.config.max_time_patches)?;
    let (best, history) = finetune(&base, &ds, &cache, &train, &val, classes, &ft, seed)?;
    let log_path = cfg.path("finetune_log");
    let mut log = String::new();
    for h in &history {
        log.push_str(&format!("{}, {:.9e}, {:.9}\n", h.epoch, h.train_loss, h.val_balanced_accuracy));
    }
    write_text(&log_path, &log)?;
    save_checkpoint(&best, cfg.path("finetuned"))?;
    let (m, _) = evaluate(&best, &ds, &cache, &test, classes)?;
    for (name, v) in Metrics::NAMES.iter().zip(m.values()) {
        println!("{}, {name}, {v:.6}", cfg.str("dataset_name"));
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let dict = dictionary(cfg)?;
    let ft = cfg.finetune()?;
    let classes = cfg.positive("classes")?;
    let seeds = cfg.seeds()?;
    let ds = open_dataset(cfg, &dict)?;
    let base = load_model(&cfg.path("checkpoint"))?;
    let result = run_protocol(&base, &ds, &all_ids(&ds), cfg.str("dataset_name"), &seeds, classes, &ft)?;
    let table = result.table();
    write_text(&cfg.path("results"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Outcome {
    let seed: u64 = cfg.parse("seed")?;
    let report = gradcheck::run_suite(seed, usize::MAX)?;
    for e in &report.entries {
        println!("{} {} {:.3e}", e.name, e.checked, e.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {:e})", report.max_rel_error(), gradcheck::TOLERANCE);
    if report.passed() {
        Ok(())
    } else {
        eprintln!("gradient check failed");
        Err(Failure::GradCheck)
    }
}

fn cmd_topomap(cfg: &RunConfig) -> Outcome {
    let dict = dictionary(cfg)?;
    let pre = cfg.preprocess()?;
    let count = cfg.positive("topomap_samples")?;
    let ds = open_dataset(cfg, &dict)?;
    let model = load_model(&cfg.path("checkpoint"))?;
    let wanted = cfg.str("topomap_layout");
    let subset = if wanted.is_empty() {
        ds.manifest.first().map(|e| e.subset_id.clone()).context("dataset is empty")?
    } else {
        wanted.to_string()
    };
    let ids: Vec<u64> = all_ids(&ds)
        .into_iter()
        .filter(|&id| ds.layout_of(id).subset_id == subset)
        .take(count)
        .collect();
    if ids.is_empty() {
        return Err(Failure::Config(format!("no samples in subset {subset:?}")));
    }
    let layout = ds.layout_of(ids[0]).clone();
    let mut samples = Vec::with_capacity(ids.len());
    let mut steps = 0;
    for &id in &ids {
        let (p, s) = ds.patches::<f32>(id, &pre, model.config.max_time_patches)?;
        samples.push(p);
        steps = s;
    }
    let act = export_channel_activation(&model, &samples, &layout.coordinates, steps)?;
    let electrodes: Vec<topomap::Electrode> = layout
        .kept_names
        .iter()
        .zip(&layout.coordinates)
        .zip(act.raw.iter().zip(&act.normalized))
        .map(|((name, &position), (&raw, &normalized))| topomap::Electrode {
            name,
            position,
            raw,
            normalized,
        })
        .collect();
    let prefix = cfg.str("topomap_out");
    let (csv, svg) = (PathBuf::from(format!("{prefix}.csv")), PathBuf::from(format!("{prefix}.svg")));
    write_text(&csv, &topomap::csv(&electrodes))?;
    write_text(&svg, &topomap::svg(&electrodes))?;
    println!("{} channels from {} samples of {subset}: {} {}", electrodes.len(), ids.len(), csv.display(), svg.display());
    Ok(())
}
