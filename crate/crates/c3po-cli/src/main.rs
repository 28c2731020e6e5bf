//! `c3po` command-line front end: dataset synthesis, training, evaluation,
//! prediction, per-branch inspection and ablation sweeps.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use c3po::ablate::{run_sweep, write_table, SweepSpec};
use c3po::config::{load_datasets, synth_range, DataSource, RunConfig};
use c3po::data::io::{load_dataset, load_image, save_mask, save_rgb, write_dataset};
use c3po::data::ChangeSample;
use c3po::metrics::MetricsReport;
use c3po::mtf::Branch;
use c3po::train::{evaluate, load_model, predict, Trainer, LAST_CKPT};
use c3po::viz::{branch_maps, branch_masks, colorize_mask, overlay, render_heatmaps};

#[derive(Parser)]
#[command(name = "c3po", version, about = "Change detection on image pairs with merged temporal fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (t0/, t1/, mask/ PNGs plus manifest.json).
    Synth {
        /// Run config whose `synth` section is used; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model, evaluating after every epoch.
    Train {
        /// Run config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory, or `synth` to generate from the config.
        #[arg(long)]
        data: Option<String>,
        /// Output directory for checkpoints, log and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Override `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override `train.lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Override both `model.seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        /// Checkpoint file (its `.json` sidecar must sit next to it).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (its `test/` split when present), or `synth` for
        /// the test split of the checkpoint's own config.
        #[arg(long)]
        data: String,
        /// Report JSON path; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict a change mask for one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Earlier image.
        #[arg(long)]
        t0: PathBuf,
        /// Later image.
        #[arg(long)]
        t1: PathBuf,
        /// Output mask PNG holding class indices.
        #[arg(long)]
        out: PathBuf,
        /// Also write the mask blended over t1.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Masks from each change branch on its own (plus the info branch).
    Branches {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        t0: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these branches (appear, disappear, exchange); all
        /// configured change branches when omitted.
        #[arg(long = "branch")]
        branches: Vec<String>,
        /// Also write per-branch response heat maps at this MTF level.
        #[arg(long)]
        heatmap_level: Option<usize>,
    },
    /// Train every variant of a sweep and tabulate best/last F1.
    Ablate {
        /// Base run config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sweep file: {"variants": [{"name", "model", "train", "synth"}]}.
        #[arg(long)]
        sweep: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory or `synth`; overrides each variant's `train.data`.
        #[arg(long)]
        data: Option<String>,
        /// Keep each variant's checkpoints under this directory.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

/// An error with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<c3po::Error> for Failure {
    fn from(e: c3po::Error) -> Self {
        match e {
            c3po::Error::Config(_) | c3po::Error::Json(_) | c3po::Error::InvalidArgument(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn parse_source(arg: &str) -> CliResult<DataSource> {
    let source: DataSource = arg.parse()?;
    if let DataSource::Dir(d) = &source {
        if !d.is_dir() {
            return Err(usage(anyhow!("data directory {} does not exist", d.display())));
        }
    }
    Ok(source)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| anyhow!(e))?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{} does not exist", path.display())))
    }
}

fn cmd_synth(config: Option<&Path>, out: &Path, count: usize, seed: u64, force: bool) -> CliResult {
    let cfg = load_config(config)?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(anyhow!("{} is not empty; pass --force to write into it", out.display())));
        }
    }
    let samples = synth_range(&cfg.synth, seed, 0, count)?;
    write_dataset(out, &samples)?;
    let synth_json = serde_json::to_string(&cfg.synth).map_err(|e| anyhow!(e))?;
    let hash = Sha256::digest(synth_json.as_bytes());
    let manifest = serde_json::json!({
        "count": count,
        "seed": seed,
        "config_sha256": hash.iter().map(|b| format!("{b:02x}")).collect::<String>(),
        "synth": cfg.synth,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let metric = if r.num_classes() == 2 { "f1" } else { "miou" };
    format!(
        "{metric} {:.4} precision {:.4} recall {:.4} (epoch {})",
        r.selection_metric(),
        r.precision,
        r.recall,
        r.epoch.map_or_else(|| "-".into(), |e| e.to_string())
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: Option<&str>,
    out: &Path,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    resume: bool,
) -> CliResult {
    // A resumed run keeps the settings it was started with.
    let saved = out.join("config.json");
    let mut cfg = match config {
        None if resume && saved.is_file() => load_config(Some(&saved))?,
        _ => load_config(config)?,
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = data {
        cfg.train.data = parse_source(d)?;
    } else {
        cfg.train.data = parse_source(&String::from(cfg.train.data.clone()))?;
    }
    cfg.train.checkpoint_dir = Some(out.to_path_buf());
    cfg.validate()?;
    let data = load_datasets(&cfg, &cfg.train.data)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    if data.test.is_empty() {
        return Err(usage(anyhow!("the test split is empty")));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut trainer = if resume {
        let ckpt = out.join(LAST_CKPT);
        require_file(&ckpt)?;
        let mut t = Trainer::resume(&ckpt, &data.train)?;
        // Allow extending a finished run with a larger --epochs.
        if cfg.train.epochs != t.config.epochs {
            t.set_epochs(cfg.train.epochs, data.train.len())?;
        }
        t
    } else {
        Trainer::new(&cfg.model, &cfg.train, &data.train)?
    };
    println!(
        "training on {} samples, testing on {} ({} parameters)",
        data.train.len(),
        data.test.len(),
        trainer.params.num_elements()
    );
    let outcome = trainer.fit(&data.train, &data.test, |r| {
        let metric = r.metric.map_or_else(|| "-".into(), |m| format!("{m:.4}"));
        println!("epoch {:3}  loss {:.5}  metric {metric}  lr {:.2e}", r.epoch, r.loss, r.lr);
    })?;
    write_json(&out.join("best_metrics.json"), &outcome.best)?;
    write_json(&out.join("last_metrics.json"), &outcome.last)?;
    println!("best: {}; last: {}", summary(&outcome.best), summary(&outcome.last));
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &str, report: Option<&Path>) -> CliResult {
    require_file(ckpt)?;
    let (net, params, sidecar) = load_model(ckpt)?;
    let samples = match parse_source(data)? {
        DataSource::Synth => {
            // The generator settings live in the run's config.json, written
            // next to the checkpoint by `train`.
            let run_cfg = ckpt.parent().map(|d| d.join("config.json")).filter(|p| p.is_file());
            let synth = match run_cfg {
                Some(p) => RunConfig::load(&p)?.synth,
                None => RunConfig::default().synth,
            };
            let cfg = RunConfig {
                model: sidecar.model.clone(),
                train: sidecar.train.clone(),
                synth,
                ..RunConfig::default()
            };
            load_datasets(&cfg, &DataSource::Synth)?.test
        }
        DataSource::Dir(dir) => {
            let test = dir.join("test");
            let root = if test.is_dir() { test } else { dir };
            let loaded = load_dataset(&root, net.config.num_classes == 2)?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            loaded.samples
        }
    };
    if samples.is_empty() {
        return Err(usage(anyhow!("the dataset is empty")));
    }
    for s in &samples {
        s.validate(net.config.num_classes).map_err(|e| {
            usage(anyhow!(
                "{e} (the checkpoint was trained for {} classes)",
                net.config.num_classes
            ))
        })?;
    }
    let mut r = evaluate(&net, &params, &samples, sidecar.train.batch_size.max(16))?;
    // Label the report with the epoch the checkpoint was taken at.
    r.epoch = Some(sidecar.epoch);
    match report {
        Some(p) => {
            write_json(p, &r)?;
            println!("{}", summary(&r));
        }
        None => println!("{}", serde_json::to_string_pretty(&r).map_err(|e| anyhow!(e))?),
    }
    Ok(())
}

fn load_pair(t0: &Path, t1: &Path) -> CliResult<ChangeSample> {
    require_file(t0)?;
    require_file(t1)?;
    let (a, w, h) = load_image(t0)?;
    let (b, w1, h1) = load_image(t1)?;
    if (w, h) != (w1, h1) {
        return Err(usage(anyhow!("t0 is {w}x{h} but t1 is {w1}x{h1}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(usage(anyhow!(
            "image {w}x{h} is not divisible by 32; pad by {} columns and {} rows",
            (32 - w % 32) % 32,
            (32 - h % 32) % 32
        )));
    }
    Ok(ChangeSample {
        name: "pair".into(),
        height: h,
        width: w,
        t0: a,
        t1: b,
        mask: vec![0; w * h],
        change_types: BTreeSet::new(),
    })
}

fn cmd_predict(ckpt: &Path, t0: &Path, t1: &Path, out: &Path, overlay_path: Option<&Path>) -> CliResult {
    require_file(ckpt)?;
    let sample = load_pair(t0, t1)?;
    let (net, params, _) = load_model(ckpt)?;
    let mask = predict(&net, &params, std::slice::from_ref(&sample), 1, None)?.remove(0);
    save_mask(out, &mask, sample.width, sample.height)?;
    if let Some(p) = overlay_path {
        save_rgb(p, &overlay(&sample.t1, &mask, sample.width, sample.height))?;
    }
    let changed = mask.iter().filter(|&&m| m != 0).count();
    println!(
        "{}: {changed} of {} pixels changed ({:.2}%)",
        out.display(),
        mask.len(),
        100.0 * changed as f64 / mask.len() as f64
    );
    Ok(())
}

fn cmd_branches(
    ckpt: &Path,
    t0: &Path,
    t1: &Path,
    out: &Path,
    requested: &[String],
    heatmap_level: Option<usize>,
) -> CliResult {
    require_file(ckpt)?;
    let sample = load_pair(t0, t1)?;
    let (net, params, _) = load_model(ckpt)?;
    let configured = net.config.branches;
    let mut wanted = BTreeSet::new();
    for name in requested {
        let b: Branch = name.parse()?;
        if b == Branch::Info || !configured.contains(b) {
            return Err(usage(anyhow!("branch {name:?} is not an enabled change branch of this model ({configured})")));
        }
        wanted.insert(b.name());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, mask) in branch_masks(&net, &params, &sample)? {
        if name != "full" && !wanted.is_empty() && !wanted.contains(name.as_str()) {
            continue;
        }
        save_mask(&out.join(format!("{name}.png")), &mask, sample.width, sample.height)?;
        save_rgb(
            &out.join(format!("{name}_color.png")),
            &colorize_mask(&mask, sample.width, sample.height),
        )?;
        let changed = mask.iter().filter(|&&m| m != 0).count();
        println!("{name:>9}: {changed} changed pixels");
    }
    if let Some(level) = heatmap_level {
        let maps = branch_maps(&net, &params, &sample, level)?;
        for (map, img) in maps.iter().zip(render_heatmaps(&maps, sample.width, sample.height)) {
            save_rgb(&out.join(format!("heat_{}.png", map.branch.name())), &img)?;
        }
    }
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, sweep: &Path, out: &Path, data: Option<&str>, runs: Option<&Path>) -> CliResult {
    let base = load_config(config)?;
    require_file(sweep)?;
    let spec = SweepSpec::load(sweep)?;
    let source = data.map(parse_source).transpose()?;
    let rows = run_sweep(&base, &spec, source.as_ref(), runs, |row| match &row.error {
        None => println!(
            "{:<20} best {:.4} (epoch {})  last {:.4}",
            row.name,
            row.best_f1.unwrap_or(f64::NAN),
            row.best_epoch.unwrap_or(0),
            row.last_f1.unwrap_or(f64::NAN)
        ),
        Some(e) => println!("{:<20} error: {e}", row.name),
    });
    write_table(out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth {
            config,
            out,
            count,
            seed,
            force,
        } => cmd_synth(config.as_deref(), &out, count, seed, force),
        Command::Train {
            config,
            data,
            out,
            epochs,
            lr,
            seed,
            resume,
        } => cmd_train(config.as_deref(), data.as_deref(), &out, epochs, lr, seed, resume),
        Command::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, report.as_deref()),
        Command::Predict {
            ckpt,
            t0,
            t1,
            out,
            overlay,
        } => cmd_predict(&ckpt, &t0, &t1, &out, overlay.as_deref()),
        Command::Branches {
            ckpt,
            t0,
            t1,
            out,
            branches,
            heatmap_level,
        } => cmd_branches(&ckpt, &t0, &t1, &out, &branches, heatmap_level),
        Command::Ablate {
            config,
            sweep,
            out,
            data,
            runs,
        } => cmd_ablate(config.as_deref(), &sweep, &out, data.as_deref(), runs.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
