use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use recal::calibration::build_calibration_set;
use recal::config::{parse_overrides, ExperimentConfig, SEED_ENV};
use recal::dataset::{read_dataset, write_dataset, EmbeddingDataset};
use recal::head::{read_head, round_to_f32, write_head, ProjectionHead};
use recal::training::{self, sweep, train_cfr, train_erm, TrainRecord};
use recal::{metrics, synthetic, ErrorKind};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Group-robust recalibration of a projection head over frozen embeddings.
///
/// Every subcommand accepts `--config FILE` and `--<key> <value>` overrides
/// for any config key (for example `--sampler.positive_mode DPS`).
#[derive(Parser, Debug)]
#[command(name = "recal", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic benchmark into an existing directory (paths.out).
    GenData(Args),
    /// Cross-entropy training of the head (paths.train, paths.val).
    Erm(Args),
    /// Export the calibration set of a head (paths.train, paths.head).
    Calibset(Args),
    /// Recalibrate a reference head (paths.train, paths.val, paths.head).
    Train(Args),
    /// Group-wise metrics of a head on a dataset (paths.head, paths.eval).
    Eval(Args),
    /// One recalibration run per value along sweep.axis.
    Sweep(Args),
    /// Write projected embeddings as TSV (paths.head, paths.eval).
    ExportEmbeddings(Args),
    /// Write a head as PRJ1, or the seeded initial head if paths.head is unset.
    ExportHead(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// `--config FILE` and `--<key> <value>` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<recal::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
                ErrorKind::MissingGroups => 5,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn resolve(args: &Args) -> anyhow::Result<ExperimentConfig> {
    let (file, pairs) = parse_overrides(&args.overrides)?;
    let text = match &file {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    Ok(ExperimentConfig::resolve(env.as_deref(), text.as_deref(), &pairs)?.seeded())
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => Err(recal::Error::Config(format!("{key} is required"))).context("config"),
    }
}

/// Fails with a config error unless every listed path key is set.
fn require(cfg: &ExperimentConfig, keys: &[&str]) -> anyhow::Result<()> {
    let p = &cfg.paths;
    for &key in keys {
        let slot = match key {
            "paths.train" => &p.train,
            "paths.val" => &p.val,
            "paths.test" => &p.test,
            "paths.eval" => &p.eval,
            "paths.head" => &p.head,
            _ => &p.out,
        };
        need(slot, key)?;
    }
    Ok(())
}

fn load(p: &Option<PathBuf>, key: &str) -> anyhow::Result<EmbeddingDataset> {
    let path = need(p, key)?;
    read_dataset(path).with_context(|| format!("dataset: reading {}", path.display()))
}

fn load_head(cfg: &ExperimentConfig) -> anyhow::Result<ProjectionHead> {
    let path = need(&cfg.paths.head, "paths.head")?;
    read_head(path).with_context(|| format!("projection-head: reading {}", path.display()))
}

/// Creates the run directory and records the resolved config and provenance.
fn run_dir(cfg: &ExperimentConfig, command: &str, create: bool) -> anyhow::Result<PathBuf> {
    let dir = need(&cfg.paths.out, "paths.out")?.to_path_buf();
    if create {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    } else if !dir.is_dir() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display())
        ));
    }
    write(&dir.join("config.txt"), &cfg.to_text())?;
    write(
        &dir.join("run.txt"),
        &format!("tool = recal\nversion = {VERSION}\ncommand = {command}\nseed = {}\n", cfg.seed),
    )?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_head(head: &ProjectionHead, path: &Path) -> anyhow::Result<()> {
    write_head(head, path).with_context(|| format!("projection-head: writing {}", path.display()))
}

fn save_record(dir: &Path, prefix: &str, rec: &TrainRecord) -> anyhow::Result<()> {
    write(&dir.join(format!("{prefix}_curve.tsv")), &rec.curve_tsv())?;
    save_head(&rec.best_head, &dir.join(format!("{prefix}_head.prj")))?;
    let mut summary = String::new();
    match rec.best_epoch {
        Some(e) => writeln!(summary, "best_epoch = {e}")?,
        None => writeln!(summary, "best_epoch = none")?,
    }
    writeln!(summary, "steps = {}", rec.steps)?;
    writeln!(summary, "holistic_only = {}", rec.holistic_only)?;
    for (i, w) in rec.warnings.iter().enumerate() {
        writeln!(summary, "warning.{i} = {w}")?;
        eprintln!("warning: {w}");
    }
    write(&dir.join(format!("{prefix}_summary.txt")), &summary)
}

/// Evaluates on `test` when it is configured and writes the report.
fn report_test(cfg: &ExperimentConfig, dir: &Path, head: &ProjectionHead) -> anyhow::Result<()> {
    if cfg.paths.test.is_none() {
        return Ok(());
    }
    let test = load(&cfg.paths.test, "paths.test")?;
    let m = metrics::evaluate(head, &test, &cfg.classifier).context("metrics")?;
    write(&dir.join("metrics.txt"), &m.report())?;
    write(&dir.join("groups.tsv"), &m.group_table())?;
    print!("{}", m.report());
    Ok(())
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.out"])?;
            let dir = run_dir(&cfg, "gen-data", false)?;
            let splits = synthetic::generate_synthetic(&cfg.data).context("synthetic")?;
            for (name, ds) in [("train", splits.train), ("val", splits.val), ("test", splits.test)] {
                let path = dir.join(format!("{name}.vle"));
                write_dataset(&ds.with_precision(cfg.precision), &path)
                    .with_context(|| format!("dataset: writing {}", path.display()))?;
            }
        }
        Cmd::Erm(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.train", "paths.val", "paths.out"])?;
            let train = load(&cfg.paths.train, "paths.train")?;
            let val = load(&cfg.paths.val, "paths.val")?;
            let dir = run_dir(&cfg, "erm", true)?;
            let head0 = match &cfg.paths.head {
                Some(_) => load_head(&cfg)?,
                None => training::initial_head(train.d_in(), train.d_out(), cfg.seed),
            };
            let rec = train_erm(&train, &val, &head0, &cfg.erm, &cfg.classifier).context("training")?;
            save_record(&dir, "erm", &rec)?;
            report_test(&cfg, &dir, &rec.best_head)?;
        }
        Cmd::Calibset(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.train", "paths.head", "paths.out"])?;
            let train = load(&cfg.paths.train, "paths.train")?;
            let head = load_head(&cfg)?;
            let dir = run_dir(&cfg, "calibset", true)?;
            let calset =
                build_calibration_set(train.training_view(), &head, &cfg.classifier).context("calibration-sampling")?;
            write(&dir.join("calibration_set.txt"), &calset.to_text())?;
            println!("anchors = {}", calset.anchors.len());
        }
        Cmd::Train(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.train", "paths.val", "paths.head", "paths.out"])?;
            let train = load(&cfg.paths.train, "paths.train")?;
            let val = load(&cfg.paths.val, "paths.val")?;
            let reference = load_head(&cfg)?;
            let dir = run_dir(&cfg, "train", true)?;
            let rec = train_cfr(&train, &val, &reference, &cfg.train, &cfg.classifier).context("training")?;
            save_record(&dir, "cfr", &rec)?;
            report_test(&cfg, &dir, &rec.best_head)?;
        }
        Cmd::Eval(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.eval", "paths.head"])?;
            let ds = load(&cfg.paths.eval, "paths.eval")?;
            let head = load_head(&cfg)?;
            let m = metrics::evaluate(&head, &ds, &cfg.classifier).context("metrics")?;
            if cfg.paths.out.is_some() {
                let dir = run_dir(&cfg, "eval", true)?;
                write(&dir.join("metrics.txt"), &m.report())?;
                write(&dir.join("groups.tsv"), &m.group_table())?;
            }
            print!("{}", m.report());
        }
        Cmd::Sweep(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.train", "paths.val", "paths.test", "paths.head", "paths.out"])?;
            let train = load(&cfg.paths.train, "paths.train")?;
            let val = load(&cfg.paths.val, "paths.val")?;
            let test = load(&cfg.paths.test, "paths.test")?;
            let reference = load_head(&cfg)?;
            let dir = run_dir(&cfg, "sweep", true)?;
            let table = sweep(
                &train,
                &val,
                &test,
                &reference,
                &cfg.train,
                &cfg.classifier,
                cfg.sweep_axis,
                &cfg.sweep_values,
            )
            .context("training")?;
            write(&dir.join("sweep.tsv"), &table.to_tsv())?;
            print!("{}", table.to_tsv());
        }
        Cmd::ExportEmbeddings(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.eval", "paths.head", "paths.out"])?;
            let ds = load(&cfg.paths.eval, "paths.eval")?;
            let head = load_head(&cfg)?;
            let dir = run_dir(&cfg, "export-embeddings", true)?;
            let path = dir.join("embeddings.tsv");
            metrics::export_embeddings(&head, &ds, &cfg.classifier, &path)
                .with_context(|| format!("metrics: writing {}", path.display()))?;
        }
        Cmd::ExportHead(a) => {
            let cfg = resolve(&a)?;
            require(&cfg, &["paths.out"])?;
            let head = match &cfg.paths.head {
                Some(_) => load_head(&cfg)?,
                None => training::initial_head(cfg.data.d_in, cfg.data.d_out, cfg.seed),
            };
            let dir = run_dir(&cfg, "export-head", true)?;
            save_head(&round_to_f32(&head), &dir.join("head.prj"))?;
        }
    }
    Ok(())
}
