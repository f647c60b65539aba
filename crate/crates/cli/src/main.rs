use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hsal::bench::{
    bench_timing, default_palette, render_map, run_experiment, timing_csv, write_evaluation, ExperimentConfig,
};
use hsal::dataset::{save_hsc, synthetic_mixture, MixtureSpec};
use hsal::dbn::load_checkpoint;
use hsal::driver::evaluate;
use hsal::io::write_atomic;
use hsal::strategies::Strategy;

/// Active learning for hyperspectral pixel classification.
#[derive(Parser, Debug)]
#[command(name = "hsal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a stratified train/candidate/test split and write split.json.
    Split(Common),
    /// Run one active-learning experiment.
    Run(Common),
    /// Score a saved checkpoint on the test set of a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
    /// Color each labeled pixel by the predicted class (binary PPM).
    RenderMap {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
    /// Time the selection loop for one or more configs and write timing.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Extra configs; each is benchmarked like --config.
        #[arg(long = "with", value_name = "PATH")]
        with: Vec<PathBuf>,
        /// Run every config under each of these strategies instead of its own.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write a synthetic Gaussian-mixture cube in hsc format.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        bands: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output stem; `.json`, `.feat` and `.lab` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by the experiment subcommands; they override `--config`.
#[derive(Args, Debug, Default)]
struct Common {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Precomputed split.json.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Samples labeled per iteration.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set hidden=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        self.resolve_from(self.config.as_deref())
    }

    fn resolve_from(&self, file: Option<&Path>) -> Result<ExperimentConfig> {
        let mut cfg = match file {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got {kv:?}") };
            cfg.set(k.trim(), v)?;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(p) = &self.split {
            cfg.split = Some(p.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.sparsity {
            cfg.sparsity = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(common) => {
            let cfg = common.resolve()?;
            let cube = cfg.load_dataset()?;
            let split = hsal::dataset::stratified_split(&cube, cfg.train_pct, cfg.cand_pct, cfg.seed)?;
            ensure_dir(&cfg.out)?;
            let path = cfg.out.join("split.json");
            split.save(&path)?;
            println!(
                "train={} candidate={} test={} -> {}",
                split.train.len(),
                split.candidate.len(),
                split.test.len(),
                path.display()
            );
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let report = run_experiment(&cfg)?;
            for r in &report.records {
                println!("iteration {:>3}  labeled {:>6}  accuracy {:.4}", r.iteration, r.labeled_count, r.overall_accuracy);
            }
            println!("metrics -> {}", report.metrics.display());
            println!("model -> {}", report.checkpoint.display());
            if let Some(p) = report.map {
                println!("map -> {}", p.display());
            }
        }
        Command::Evaluate { common, model } => {
            let cfg = common.resolve()?;
            let model = load_checkpoint(&model)?;
            let cube = cfg.load_dataset()?;
            let split = cfg.load_split(&cube)?;
            let eval = evaluate(&model, &split.test, &cube)?;
            println!("overall_accuracy {}", eval.overall_accuracy);
            for (c, acc) in eval.per_class.iter().enumerate() {
                let name = &cube.class_names[c];
                match acc {
                    Some(a) => println!("class {} ({name}) {a}", c + 1),
                    None => println!("class {} ({name}) -", c + 1),
                }
            }
            if common.out.is_some() {
                ensure_dir(&cfg.out)?;
                write_evaluation(&cfg.out.join("evaluation.json"), &eval)?;
            }
        }
        Command::RenderMap { common, model } => {
            let cfg = common.resolve()?;
            let model = load_checkpoint(&model)?;
            let cube = cfg.load_dataset()?;
            let ppm = render_map(&model, &cube, &default_palette(cube.n_classes())?)?;
            let path = if cfg.out.extension().is_some_and(|e| e == "ppm") {
                cfg.out.clone()
            } else {
                ensure_dir(&cfg.out)?;
                cfg.out.join("map.ppm")
            };
            write_atomic(&path, &ppm)?;
            println!("map -> {}", path.display());
        }
        Command::Bench { common, with, strategies, repeats } => {
            let mut files: Vec<Option<PathBuf>> = common.config.iter().cloned().map(Some).collect();
            files.extend(with.into_iter().map(Some));
            if files.is_empty() {
                files.push(None);
            }
            let mut configs = Vec::new();
            for f in &files {
                let cfg = common.resolve_from(f.as_deref())?;
                if strategies.is_empty() {
                    configs.push(cfg);
                } else {
                    configs.extend(strategies.iter().map(|&s| ExperimentConfig { strategy: s, ..cfg.clone() }));
                }
            }
            let rows = bench_timing(&configs, repeats)?;
            println!("{:<20} {:<8} {:>5} {:>12} {:>12}", "dataset", "strategy", "runs", "mean_s", "std_s");
            for r in &rows {
                println!("{:<20} {:<8} {:>5} {:>12.4} {:>12.4}", r.dataset, r.strategy, r.runs, r.mean_s, r.std_s);
            }
            let out = common.out.clone().unwrap_or_else(|| configs[0].out.clone());
            ensure_dir(&out)?;
            let path = out.join("timing.csv");
            write_atomic(&path, &timing_csv(&rows)?)?;
            println!("timing -> {}", path.display());
        }
        Command::Synth { classes, bands, per_class, seed, out } => {
            let spec = MixtureSpec { classes, bands, per_class, ..MixtureSpec::default() };
            let cube = synthetic_mixture(&spec, seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            save_hsc(&cube, &out)?;
            println!("{} pixels x {} bands -> {}", cube.n_pixels(), cube.n_bands(), out.with_extension("json").display());
        }
    }
    Ok(())
}
