//! Labeled pixel cubes, their on-disk formats, and stratified splits.
//!
//! Two input formats are understood:
//!
//! * **hsc**: a JSON sidecar `<name>.json` with `width`, `height`, `bands`,
//!   `dtype` (`"f32"`) and `classes`, next to `<name>.feat` (little-endian
//!   `f32`, band-sequential: all pixels of band 0 in row-major order, then
//!   band 1, ...) and `<name>.lab` (little-endian `u16`, row-major, 0 for
//!   unlabeled pixels).
//! * **csv**: one sample per line, `M` feature columns then an integer label.
//!   A header line is recognised by a non-numeric first field.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCube {
    pub width: usize,
    pub height: usize,
    /// `N x M`, one row per pixel in row-major pixel order.
    pub features: Matrix,
    /// Class id per pixel; 0 is unlabeled, `1..=C` are classes.
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
}

impl DatasetCube {
    pub fn new(
        width: usize,
        height: usize,
        features: Matrix,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let cube = Self { width, height, features, labels, class_names };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.features.rows() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: self.features.rows() });
        }
        if self.labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: self.labels.len() });
        }
        let classes = self.n_classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize > classes) {
            return Err(Error::LabelOutOfRange { label: bad as usize, classes });
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_bands(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        self.features.row(index)
    }

    pub fn label(&self, index: usize) -> u16 {
        self.labels[index]
    }

    /// Indices of every labeled pixel, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n_pixels()).filter(|&i| self.labels[i] != 0).collect()
    }

    /// Labeled pixel count per class, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            if l != 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Whether every feature lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.features.data().iter().all(|x| (0.0..=1.0).contains(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeFormat {
    Hsc,
    Csv,
}

impl FromStr for CubeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hsc" => Ok(Self::Hsc),
            "csv" => Ok(Self::Csv),
            other => Err(Error::config("format", format!("unknown cube format {other:?} (expected hsc or csv)"))),
        }
    }
}

impl CubeFormat {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hsc => "hsc",
            Self::Csv => "csv",
        }
    }

    /// `csv` for `*.csv` paths, `hsc` otherwise.
    pub fn guess(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Hsc,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HscHeader {
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    classes: Vec<String>,
}

/// Loads a cube with raw (unnormalized) features.
pub fn load_cube(path: &Path, format: CubeFormat) -> Result<DatasetCube> {
    match format {
        CubeFormat::Hsc => load_hsc(path),
        CubeFormat::Csv => load_csv(path),
    }
}

fn hsc_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "json" || e == "feat" || e == "lab") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("feat"), with("lab"))
}

fn load_hsc(path: &Path) -> Result<DatasetCube> {
    let (json, feat, lab) = hsc_paths(path);
    let header: HscHeader =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if header.dtype != "f32" {
        return Err(Error::format("hsc header", format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header.width * header.height;
    let m = header.bands;

    let raw = fs::read(&feat).map_err(|e| Error::io(&feat, e))?;
    if raw.len() != n * m * 4 {
        return Err(Error::format(
            "hsc features",
            format!("header declares {n} pixels x {m} bands ({} bytes), payload has {} bytes", n * m * 4, raw.len()),
        ));
    }
    let mut data = vec![0.0; n * m];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let band = k / n;
        let pixel = k % n;
        data[pixel * m + band] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
    }

    let raw = fs::read(&lab).map_err(|e| Error::io(&lab, e))?;
    if raw.len() != n * 2 {
        return Err(Error::format(
            "hsc labels",
            format!("header declares {n} pixels ({} bytes), payload has {} bytes", n * 2, raw.len()),
        ));
    }
    let labels: Vec<u16> =
        raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2-byte chunk"))).collect();

    let features = Matrix::new(n, m, data)?;
    DatasetCube::new(header.width, header.height, features, labels, header.classes)
}

fn load_csv(path: &Path) -> Result<DatasetCube> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format("csv", format!("{other:?}")),
        })?;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.is_empty() || record.iter().all(str::is_empty) {
            continue;
        }
        if line == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::format("csv", format!("line {}: need at least one feature and a label", line + 1)));
        }
        let m = record.len() - 1;
        if *width.get_or_insert(m) != m {
            return Err(Error::format("csv", format!("line {}: expected {} features, found {m}", line + 1, width.unwrap())));
        }
        for field in record.iter().take(m) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format("csv", format!("line {}: bad feature {field:?}", line + 1)))?;
            rows.push(v);
        }
        let label_field = &record[m];
        let label: u16 = label_field
            .parse()
            .map_err(|_| Error::format("csv", format!("line {}: bad label {label_field:?}", line + 1)))?;
        labels.push(label);
    }
    let m = width.ok_or(Error::EmptyInput)?;
    let n = labels.len();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize;
    let class_names = (1..=classes).map(|c| format!("class_{c}")).collect();
    DatasetCube::new(n, 1, Matrix::new(n, m, rows)?, labels, class_names)
}

/// Writes a cube in hsc format next to `stem` (`stem.json`, `stem.feat`, `stem.lab`).
/// Features are stored as `f32`.
pub fn save_hsc(cube: &DatasetCube, stem: &Path) -> Result<()> {
    let (json, feat, lab) = hsc_paths(stem);
    let header = HscHeader {
        width: cube.width,
        height: cube.height,
        bands: cube.n_bands(),
        dtype: "f32".into(),
        classes: cube.class_names.clone(),
    };
    write_atomic(&json, &serde_json::to_vec_pretty(&header)?)?;

    let (n, m) = (cube.n_pixels(), cube.n_bands());
    let mut raw = Vec::with_capacity(n * m * 4);
    for band in 0..m {
        for pixel in 0..n {
            raw.extend_from_slice(&(cube.features.get(pixel, band) as f32).to_le_bytes());
        }
    }
    write_atomic(&feat, &raw)?;

    let raw: Vec<u8> = cube.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_atomic(&lab, &raw)
}

/// Per-band min-max scaling to `[0, 1]` over the whole cube; a constant band
/// maps to zeros.
pub fn normalize(cube: &DatasetCube) -> DatasetCube {
    let (n, m) = (cube.n_pixels(), cube.n_bands());
    let mut out = cube.clone();
    for band in 0..m {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in 0..n {
            let v = cube.features.get(p, band);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for p in 0..n {
            let v = if span > 0.0 { (cube.features.get(p, band) - lo) / span } else { 0.0 };
            out.features.set(p, band, v);
        }
    }
    out
}

/// Train/candidate/test partition of the labeled pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train_pct: f64,
    pub cand_pct: f64,
    pub train: Vec<usize>,
    pub candidate: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    /// Checks disjointness and that every index is a labeled pixel of `cube`.
    pub fn validate(&self, cube: &DatasetCube) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, set) in [("train", &self.train), ("candidate", &self.candidate), ("test", &self.test)] {
            for &i in set {
                if i >= cube.n_pixels() {
                    return Err(Error::IndexOutOfRange { index: i, len: cube.n_pixels() });
                }
                if cube.labels[i] == 0 {
                    return Err(Error::Invariant(format!("{name} index {i} is unlabeled")));
                }
                if !seen.insert(i) {
                    return Err(Error::Invariant(format!("index {i} appears in more than one set")));
                }
            }
        }
        Ok(())
    }
}

/// Per-class sizes: `round(n · pct)` (half away from zero) for train and
/// candidate, the remainder for test.
pub fn split_counts(n: usize, train_pct: f64, cand_pct: f64) -> (usize, usize, usize) {
    let train = (n as f64 * train_pct).round() as usize;
    let cand = (n as f64 * cand_pct).round() as usize;
    (train, cand, n - train - cand)
}

/// Stratified random split of the labeled pixels.
///
/// Each class is shuffled with its own substream (`split(class_id)`) of the
/// seed, so adding a class does not perturb the others. Index sets are
/// returned sorted.
pub fn stratified_split(cube: &DatasetCube, train_pct: f64, cand_pct: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&train_pct) || !(0.0..1.0).contains(&cand_pct) {
        return Err(Error::config("train_pct/cand_pct", "fractions must lie in [0, 1)"));
    }
    if train_pct + cand_pct >= 1.0 {
        return Err(Error::config("train_pct/cand_pct", "train_pct + cand_pct must be < 1"));
    }
    let c = cube.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in cube.labels.iter().enumerate() {
        if l != 0 {
            by_class[l as usize - 1].push(i);
        }
    }
    let empty: Vec<String> = by_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(k, _)| format!("{} ({})", k + 1, cube.class_names[k]))
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyClass(empty));
    }

    let root = RngStream::new(seed);
    let (mut train, mut candidate, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (k, mut members) in by_class.into_iter().enumerate() {
        let (n_train, n_cand, _) = split_counts(members.len(), train_pct, cand_pct);
        root.split(k as u64 + 1).shuffle(&mut members);
        train.extend_from_slice(&members[..n_train]);
        candidate.extend_from_slice(&members[n_train..n_train + n_cand]);
        test.extend_from_slice(&members[n_train + n_cand..]);
    }
    train.sort_unstable();
    candidate.sort_unstable();
    test.sort_unstable();
    Ok(Split { seed, train_pct, cand_pct, train, candidate, test })
}

/// Parameters of the synthetic Gaussian-mixture cube.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub classes: usize,
    pub bands: usize,
    /// Labeled pixels per class.
    pub per_class: usize,
    /// Gaussian sub-clusters per class.
    pub modes_per_class: usize,
    /// Standard deviation of the mode centres around the origin.
    pub centre_spread: f64,
    /// Within-mode standard deviation.
    pub noise: f64,
    /// Relative weight of each successive mode (geometric), so later modes are rarer.
    pub mode_decay: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { classes: 3, bands: 20, per_class: 300, modes_per_class: 2, centre_spread: 1.0, noise: 0.6, mode_decay: 0.35 }
    }
}

/// Draws a labeled Gaussian-mixture cube laid out as a `per_class · classes`
/// by 1 strip, features already normalized to `[0, 1]`.
pub fn synthetic_mixture(spec: &MixtureSpec, seed: u64) -> Result<DatasetCube> {
    if spec.classes == 0 || spec.bands == 0 || spec.per_class == 0 || spec.modes_per_class == 0 {
        return Err(Error::config("mixture", "classes, bands, per_class and modes_per_class must be >= 1"));
    }
    let mut rng = RngStream::new(seed);
    let centres: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..spec.modes_per_class)
                .map(|_| (0..spec.bands).map(|_| spec.centre_spread * rng.standard_normal()).collect())
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..spec.modes_per_class).map(|k| spec.mode_decay.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();

    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.bands);
    let mut labels = Vec::with_capacity(n);
    for (c, modes) in centres.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut u = rng.next_f64() * total;
            let mut mode = 0;
            while mode + 1 < weights.len() && u >= weights[mode] {
                u -= weights[mode];
                mode += 1;
            }
            data.extend(modes[mode].iter().map(|mu| mu + spec.noise * rng.standard_normal()));
            labels.push(c as u16 + 1);
        }
    }
    let names = (1..=spec.classes).map(|c| format!("class_{c}")).collect();
    let raw = DatasetCube::new(n, 1, Matrix::new(n, spec.bands, data)?, labels, names)?;
    Ok(normalize(&raw))
}
