//! Experiment plumbing: `key=value` configs, metrics CSVs, checkpoints,
//! classification maps and timing tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_cube, normalize, stratified_split, CubeFormat, DatasetCube, Split};
use crate::dbn::{save_checkpoint, DbnModel, TrainConfig};
use crate::driver::{run, DriverConfig, Evaluation, IterationRecord};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::strategies::{Strategy, StrategyParams};

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub format: Option<CubeFormat>,
    /// Precomputed split; when absent the split is drawn from `train_pct`/`cand_pct`.
    pub split: Option<PathBuf>,
    pub train_pct: f64,
    pub cand_pct: f64,
    pub strategy: Strategy,
    pub batch: usize,
    pub iterations: usize,
    pub sparsity: usize,
    pub committee_size: usize,
    pub omega_cap: usize,
    pub seed: u64,
    /// Hidden widths below the class layer.
    pub hidden: Vec<usize>,
    pub cd_k: usize,
    pub epochs_unsup: usize,
    pub epochs_bp: usize,
    pub epochs_per_iteration: usize,
    pub learning_rate: f64,
    pub bp_learning_rate: f64,
    pub minibatch: usize,
    pub out: PathBuf,
    /// Write `map.ppm` next to the metrics.
    pub map: bool,
    /// Record wall-clock `elapsed_ms`; off keeps metrics byte-reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::for_classes(1);
        Self {
            dataset: None,
            format: None,
            split: None,
            train_pct: 0.03,
            cand_pct: 0.2,
            strategy: Strategy::Widl,
            batch: 50,
            iterations: 20,
            sparsity: 2,
            committee_size: 3,
            omega_cap: 4000,
            seed: 0,
            hidden: t.hidden_widths[..t.hidden_widths.len() - 1].to_vec(),
            cd_k: t.cd_k,
            epochs_unsup: t.epochs_unsup,
            epochs_bp: t.epochs_bp,
            epochs_per_iteration: 50,
            learning_rate: t.learning_rate,
            bp_learning_rate: t.bp_learning_rate,
            minibatch: t.minibatch,
            out: PathBuf::from("out"),
            map: false,
            timing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got {value:?}"))),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset", "format", "split", "train_pct", "cand_pct", "strategy", "batch", "iterations", "sparsity",
        "committee_size", "omega_cap", "seed", "hidden", "cd_k", "epochs_unsup", "epochs_bp",
        "epochs_per_iteration", "learning_rate", "bp_learning_rate", "minibatch", "out", "map", "timing",
    ];

    /// Sets one key. Unknown keys and unparsable values name the key in the error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "format" => self.format = Some(value.parse()?),
            "split" => self.split = Some(PathBuf::from(value)),
            "train_pct" => self.train_pct = parse_num(key, value)?,
            "cand_pct" => self.cand_pct = parse_num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "batch" => self.batch = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "sparsity" => self.sparsity = parse_num(key, value)?,
            "committee_size" => self.committee_size = parse_num(key, value)?,
            "omega_cap" => self.omega_cap = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| parse_num(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "cd_k" => self.cd_k = parse_num(key, value)?,
            "epochs_unsup" => self.epochs_unsup = parse_num(key, value)?,
            "epochs_bp" => self.epochs_bp = parse_num(key, value)?,
            "epochs_per_iteration" => self.epochs_per_iteration = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "bp_learning_rate" => self.bp_learning_rate = parse_num(key, value)?,
            "minibatch" => self.minibatch = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "map" => self.map = parse_bool(key, value)?,
            "timing" => self.timing = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Serializes back to `key=value` text that [`from_text`](Self::from_text) accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(d) = &self.dataset {
            let _ = writeln!(s, "dataset={}", d.display());
        }
        if let Some(f) = self.format {
            let _ = writeln!(s, "format={}", f.name());
        }
        if let Some(p) = &self.split {
            let _ = writeln!(s, "split={}", p.display());
        }
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        let _ = write!(
            s,
            "train_pct={}\ncand_pct={}\nstrategy={}\nbatch={}\niterations={}\nsparsity={}\ncommittee_size={}\n\
             omega_cap={}\nseed={}\nhidden={}\ncd_k={}\nepochs_unsup={}\nepochs_bp={}\nepochs_per_iteration={}\n\
             learning_rate={}\nbp_learning_rate={}\nminibatch={}\nout={}\nmap={}\ntiming={}\n",
            self.train_pct,
            self.cand_pct,
            self.strategy,
            self.batch,
            self.iterations,
            self.sparsity,
            self.committee_size,
            self.omega_cap,
            self.seed,
            hidden.join(","),
            self.cd_k,
            self.epochs_unsup,
            self.epochs_bp,
            self.epochs_per_iteration,
            self.learning_rate,
            self.bp_learning_rate,
            self.minibatch,
            self.out.display(),
            self.map,
            self.timing,
        );
        s
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            None => return Err(Error::config("dataset", "required")),
            Some(p) if !p.exists() && !p.with_extension("json").exists() => {
                return Err(Error::config("dataset", format!("{} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.split {
            if !p.exists() {
                return Err(Error::config("split", format!("{} does not exist", p.display())));
            }
        }
        for (key, v) in [("train_pct", self.train_pct), ("cand_pct", self.cand_pct)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if self.split.is_none() && self.train_pct + self.cand_pct >= 1.0 {
            return Err(Error::config("cand_pct", "train_pct + cand_pct must be < 1"));
        }
        for (key, v) in [("batch", self.batch), ("sparsity", self.sparsity), ("cd_k", self.cd_k), ("minibatch", self.minibatch)] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.strategy == Strategy::Committee && self.committee_size < 2 {
            return Err(Error::config("committee_size", "must be >= 2"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "widths must be >= 1"));
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("bp_learning_rate", self.bp_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, classes: usize) -> TrainConfig {
        let mut hidden_widths = self.hidden.clone();
        hidden_widths.push(classes);
        TrainConfig {
            cd_k: self.cd_k,
            epochs_unsup: self.epochs_unsup,
            epochs_bp: self.epochs_bp,
            learning_rate: self.learning_rate,
            bp_learning_rate: self.bp_learning_rate,
            minibatch: self.minibatch,
            hidden_widths,
            seed: self.seed,
        }
    }

    pub fn driver_config(&self, classes: usize) -> DriverConfig {
        let train = self.train_config(classes);
        DriverConfig {
            batch: self.batch,
            iterations: self.iterations,
            epochs_per_iteration: self.epochs_per_iteration,
            params: StrategyParams {
                committee_size: self.committee_size,
                sparsity: self.sparsity,
                omega_cap: self.omega_cap,
                committee_train: train.clone(),
            },
            train,
        }
    }

    /// Loads the dataset and rescales every band to `[0, 1]`.
    pub fn load_dataset(&self) -> Result<DatasetCube> {
        let path = self.dataset.as_deref().ok_or_else(|| Error::config("dataset", "required"))?;
        let format = self.format.unwrap_or_else(|| CubeFormat::guess(path));
        Ok(normalize(&load_cube(path, format)?))
    }

    pub fn load_split(&self, cube: &DatasetCube) -> Result<Split> {
        let split = match &self.split {
            Some(p) => Split::load(p)?,
            None => stratified_split(cube, self.train_pct, self.cand_pct, self.seed)?,
        };
        split.validate(cube)?;
        Ok(split)
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    pub overall_accuracy: f64,
    /// Empty cells (`None`) mark classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub elapsed_ms: u128,
}

impl MetricsRecord {
    pub fn from_iteration(r: &IterationRecord, timing: bool) -> Self {
        Self {
            iteration: r.iteration,
            labeled_count: r.labeled_count,
            overall_accuracy: r.evaluation.overall_accuracy,
            per_class: r.evaluation.per_class.clone(),
            elapsed_ms: if timing { r.elapsed_ms } else { 0 },
        }
    }
}

pub fn metrics_header(classes: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "labeled_count".into(), "overall_accuracy".into()];
    h.extend((1..=classes).map(|c| format!("acc_class_{c}")));
    h.push("elapsed_ms".into());
    h
}

pub fn metrics_csv(records: &[MetricsRecord], classes: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(metrics_header(classes))?;
    for r in records {
        if r.per_class.len() != classes {
            return Err(Error::DimensionMismatch { expected: classes, actual: r.per_class.len() });
        }
        let mut row = vec![r.iteration.to_string(), r.labeled_count.to_string(), r.overall_accuracy.to_string()];
        row.extend(r.per_class.iter().map(|a| a.map_or(String::new(), |v| v.to_string())));
        row.push(r.elapsed_ms.to_string());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::format("metrics csv", e.to_string()))
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord], classes: usize) -> Result<()> {
    write_atomic(path, &metrics_csv(records, classes)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let classes = headers.len().checked_sub(4).ok_or_else(|| Error::format("metrics csv", "too few columns"))?;
    if headers.iter().collect::<Vec<_>>() != metrics_header(classes) {
        return Err(Error::format("metrics csv", "unexpected header"));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> { parse_num("metrics csv", field(i)) };
        let per_class = (0..classes)
            .map(|c| if field(3 + c).is_empty() { Ok(None) } else { num(3 + c).map(Some) })
            .collect::<Result<_>>()?;
        out.push(MetricsRecord {
            iteration: parse_num("metrics csv", field(0))?,
            labeled_count: parse_num("metrics csv", field(1))?,
            overall_accuracy: num(2)?,
            per_class,
            elapsed_ms: parse_num("metrics csv", field(3 + classes))?,
        });
    }
    Ok(out)
}

/// Class colors, in class order; the background is black.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub const BACKGROUND: [u8; 3] = [0, 0, 0];

/// The first `classes` entries of [`PALETTE`].
pub fn default_palette(classes: usize) -> Result<Vec<[u8; 3]>> {
    if classes > PALETTE.len() {
        return Err(Error::config("palette", format!("{classes} classes exceed the {}-color palette", PALETTE.len())));
    }
    Ok(PALETTE[..classes].to_vec())
}

/// Binary PPM of the predicted class of every labeled pixel; unlabeled pixels are black.
pub fn render_map(model: &DbnModel, cube: &DatasetCube, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if palette.len() != model.n_classes() {
        return Err(Error::config("palette", format!("{} colors for {} classes", palette.len(), model.n_classes())));
    }
    let mut out = format!("P6 {} {} 255\n", cube.width, cube.height).into_bytes();
    out.reserve(cube.n_pixels() * 3);
    for i in 0..cube.n_pixels() {
        let rgb = if cube.label(i) == 0 { BACKGROUND } else { palette[model.predict(cube.pixel(i))? as usize - 1] };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn write_evaluation(path: &Path, eval: &Evaluation) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(eval)?)
}

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub split: PathBuf,
    pub map: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

/// Loads, splits, runs the loop and writes `metrics.csv`, `model.ckpt`,
/// `split.json` and optionally `map.ppm` under `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cube = config.load_dataset()?;
    let split = config.load_split(&cube)?;
    let classes = cube.n_classes();
    let outcome = run(&cube, &split, config.strategy, &config.driver_config(classes), config.seed)?;

    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let records: Vec<MetricsRecord> = outcome.history.iter().map(|r| MetricsRecord::from_iteration(r, config.timing)).collect();
    let metrics = config.out.join("metrics.csv");
    write_metrics(&metrics, &records, classes)?;
    let checkpoint = config.out.join("model.ckpt");
    save_checkpoint(&outcome.model, &checkpoint)?;
    let split_path = config.out.join("split.json");
    split.save(&split_path)?;
    let map = if config.map {
        let p = config.out.join("map.ppm");
        write_atomic(&p, &render_map(&outcome.model, &cube, &default_palette(classes)?)?)?;
        Some(p)
    } else {
        None
    };
    Ok(ExperimentReport { metrics, checkpoint, split: split_path, map, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub dataset: String,
    pub strategy: String,
    pub runs: usize,
    pub mean_s: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_s: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Wall-clock seconds of the selection loop for each config, `repeats` times,
/// run one after another. Loading and splitting are not timed.
pub fn bench_timing(configs: &[ExperimentConfig], repeats: usize) -> Result<Vec<TimingRow>> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be >= 1"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        cfg.validate()?;
        let cube = cfg.load_dataset()?;
        let split = cfg.load_split(&cube)?;
        let driver = cfg.driver_config(cube.n_classes());
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            run(&cube, &split, cfg.strategy, &driver, cfg.seed)?;
            times.push(t.elapsed().as_secs_f64());
        }
        let (mean_s, std_s) = mean_std(&times);
        let dataset = cfg
            .dataset
            .as_deref()
            .and_then(|p| p.file_stem())
            .map_or_else(|| "?".into(), |s| s.to_string_lossy().into_owned());
        rows.push(TimingRow { dataset, strategy: cfg.strategy.to_string(), runs: repeats, mean_s, std_s });
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::format("timing csv", e.to_string()))
}
