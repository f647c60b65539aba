//! Entropy of predicted class distributions and uncertainty rankings.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::dataset::DatasetCube;
use crate::dbn::DbnModel;
use crate::error::{Error, Result};

/// Shannon entropy in nats, `−Σ p ln p` with `0 ln 0 = 0`.
///
/// The result is clamped to `[0, ln C]` to absorb rounding.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is negative or non-finite")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

/// Sorts `(index, score)` pairs by descending score, ties by ascending index.
pub fn rank_scores(scores: &mut [(usize, f64)]) {
    scores.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
}

/// Entropy `Φ` per sample index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UncertaintyTable {
    pub entries: BTreeMap<usize, f64>,
}

impl UncertaintyTable {
    /// Scores every pool index with the entropy of `model`'s prediction.
    pub fn score(model: &DbnModel, pool: &[usize], cube: &DatasetCube) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for &i in pool {
            if i >= cube.n_pixels() {
                return Err(Error::IndexOutOfRange { index: i, len: cube.n_pixels() });
            }
            entries.insert(i, entropy(&model.predict_proba(cube.pixel(i))?)?);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.entries.get(&index).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices from most to least uncertain.
    pub fn ranked(&self) -> Vec<usize> {
        let mut scores: Vec<(usize, f64)> = self.entries.iter().map(|(&i, &h)| (i, h)).collect();
        rank_scores(&mut scores);
        scores.into_iter().map(|(i, _)| i).collect()
    }
}

/// Pool indices ordered from most to least uncertain under `model`.
pub fn rank_by_uncertainty(model: &DbnModel, pool: &[usize], cube: &DatasetCube) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(UncertaintyTable::score(model, pool, cube)?.ranked())
}
