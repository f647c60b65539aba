//! Batch selection strategies: random (RS), maximum uncertainty (MUS),
//! query by committee (QBC) and weighted incremental dictionary learning (WI-DL).

use std::fmt;
use std::str::FromStr;

use crate::dataset::DatasetCube;
use crate::dbn::{fine_tune, pretrain_stack, DbnModel, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::sparse_coding::{AtomSource, Dictionary, ResidualSet};
use crate::uncertainty::{rank_by_uncertainty, rank_scores};
use crate::widl::{select_batch, WidlState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    MaxUncertainty,
    Committee,
    Widl,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::MaxUncertainty, Strategy::Committee, Strategy::Widl];

    /// Short CLI name.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "rs",
            Strategy::MaxUncertainty => "mus",
            Strategy::Committee => "qbc",
            Strategy::Widl => "widl",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rs" => Ok(Strategy::Random),
            "mus" => Ok(Strategy::MaxUncertainty),
            "qbc" => Ok(Strategy::Committee),
            "widl" => Ok(Strategy::Widl),
            other => Err(Error::config("strategy", format!("unknown strategy {other:?}, expected rs|mus|qbc|widl"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyParams {
    pub committee_size: usize,
    /// Sparsity `k` for WI-DL coding.
    pub sparsity: usize,
    /// Upper bound on the WI-DL candidate pool `Ω`; 0 disables the cap.
    pub omega_cap: usize,
    /// Training recipe for committee members.
    pub committee_train: TrainConfig,
}

impl StrategyParams {
    pub fn for_classes(classes: usize) -> Self {
        Self { committee_size: 3, sparsity: 2, omega_cap: 4000, committee_train: TrainConfig::for_classes(classes) }
    }
}

pub struct SelectionRequest<'a> {
    pub model: &'a DbnModel,
    pub cube: &'a DatasetCube,
    /// Labeled samples in the order they joined the training set.
    pub labeled: &'a [AtomSource],
    pub candidates: &'a [usize],
    pub m: usize,
    pub seed: u64,
    pub params: &'a StrategyParams,
}

impl SelectionRequest<'_> {
    pub fn check(&self) -> Result<()> {
        if self.m > self.candidates.len() {
            return Err(Error::PoolTooSmall { requested: self.m, available: self.candidates.len() });
        }
        let mut labeled: Vec<usize> = self.labeled.iter().map(|s| s.index()).collect();
        labeled.sort_unstable();
        if let Some(&i) = self.candidates.iter().find(|i| labeled.binary_search(i).is_ok()) {
            return Err(Error::Invariant(format!("candidate {i} is already labeled")));
        }
        let n = self.cube.n_pixels();
        if let Some(&i) = labeled.iter().chain(self.candidates).find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        Ok(())
    }

    fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|s| s.index()).collect()
    }
}

/// Selected indices plus, for WI-DL, the grown dictionary and next residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub dictionary: Option<Dictionary>,
    pub residuals: Option<ResidualSet>,
}

impl Selection {
    fn plain(indices: Vec<usize>) -> Self {
        Self { indices, dictionary: None, residuals: None }
    }
}

pub fn select(strategy: Strategy, req: &SelectionRequest) -> Result<Selection> {
    req.check()?;
    match strategy {
        Strategy::Random => rs_select(req).map(Selection::plain),
        Strategy::MaxUncertainty => mus_select(req).map(Selection::plain),
        Strategy::Committee => qbc_select(req).map(Selection::plain),
        Strategy::Widl => widl_select(req),
    }
}

/// Uniform draw without replacement.
pub fn rs_select(req: &SelectionRequest) -> Result<Vec<usize>> {
    req.check()?;
    Ok(RngStream::new(req.seed).sample(req.candidates, req.m))
}

/// The `m` candidates of highest predictive entropy.
pub fn mus_select(req: &SelectionRequest) -> Result<Vec<usize>> {
    req.check()?;
    if req.m == 0 {
        return Ok(Vec::new());
    }
    let mut ranked = rank_by_uncertainty(req.model, req.candidates, req.cube)?;
    ranked.truncate(req.m);
    Ok(ranked)
}

/// Entropy of the committee's vote histogram, in nats.
pub fn vote_entropy(votes: &[u16]) -> f64 {
    let mut counts: Vec<(u16, usize)> = Vec::new();
    for &v in votes {
        match counts.iter_mut().find(|(c, _)| *c == v) {
            Some(slot) => slot.1 += 1,
            None => counts.push((v, 1)),
        }
    }
    let n = votes.len() as f64;
    counts.iter().map(|&(_, c)| c as f64 / n).map(|p| -p * p.ln()).sum::<f64>().max(0.0)
}

/// Trains one committee member on the labeled set: pretraining followed by fine-tuning.
pub fn train_member(features: &Matrix, labels: &[u16], cfg: &TrainConfig) -> Result<DbnModel> {
    let model = pretrain_stack(features, cfg)?;
    fine_tune(&model, features, labels, cfg)
}

/// Committee members trained on the labeled set, differing only in seed.
pub fn train_committee(req: &SelectionRequest) -> Result<Vec<DbnModel>> {
    let size = req.params.committee_size;
    if size < 2 {
        return Err(Error::config("committee_size", "must be >= 2"));
    }
    let labeled = req.labeled_indices();
    let rows: Vec<&[f64]> = labeled.iter().map(|&i| req.cube.pixel(i)).collect();
    let features = Matrix::from_rows(&rows)?;
    let labels: Vec<u16> = labeled.iter().map(|&i| req.cube.label(i)).collect();
    let root = RngStream::new(req.seed);
    let configs: Vec<TrainConfig> = (0..size)
        .map(|j| TrainConfig { seed: root.split(j as u64).next_u64(), ..req.params.committee_train.clone() })
        .collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|cfg| s.spawn(|| train_member(&features, &labels, cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("committee member panicked")).collect()
    })
}

/// Vote entropy of `committee` for each candidate.
pub fn committee_disagreement(committee: &[DbnModel], cube: &DatasetCube, candidates: &[usize]) -> Result<Vec<(usize, f64)>> {
    candidates
        .iter()
        .map(|&i| {
            let x = cube.pixel(i);
            let votes = committee.iter().map(|m| m.predict(x)).collect::<Result<Vec<u16>>>()?;
            Ok((i, vote_entropy(&votes)))
        })
        .collect()
}

/// The `m` candidates on which a freshly trained committee disagrees most.
pub fn qbc_select(req: &SelectionRequest) -> Result<Vec<usize>> {
    req.check()?;
    let committee = train_committee(req)?;
    let mut scores = committee_disagreement(&committee, req.cube, req.candidates)?;
    rank_scores(&mut scores);
    Ok(scores.into_iter().take(req.m).map(|(i, _)| i).collect())
}

/// Dictionary of normalized projections of the labeled samples under `model`.
pub fn labeled_dictionary(model: &DbnModel, cube: &DatasetCube, labeled: &[AtomSource]) -> Result<Dictionary> {
    let mut dict = Dictionary::empty(model.n_classes());
    for &src in labeled {
        dict.push(&model.project(cube.pixel(src.index()))?, src)?;
    }
    Ok(dict)
}

/// Builds `D` from the labeled set, codes the candidates over it and runs a
/// WI-DL batch.
pub fn widl_select(req: &SelectionRequest) -> Result<Selection> {
    req.check()?;
    let dict = labeled_dictionary(req.model, req.cube, req.labeled)?;
    let state = WidlState::build(
        req.model,
        req.cube,
        dict,
        req.candidates,
        req.m,
        req.params.sparsity,
        req.params.omega_cap,
        req.seed,
    )?;
    if req.m == 0 {
        return Ok(Selection { indices: Vec::new(), dictionary: Some(state.dict), residuals: Some(state.residuals) });
    }
    let out = select_batch(&state)?;
    Ok(Selection { indices: out.selected, dictionary: Some(out.dictionary), residuals: Some(out.residuals) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_mixture, MixtureSpec};

    fn toy_cube(n: usize, seed: u64) -> DatasetCube {
        let spec = MixtureSpec { classes: 3, bands: 6, per_class: n / 3, ..MixtureSpec::default() };
        synthetic_mixture(&spec, seed).unwrap()
    }

    fn toy_model(seed: u64) -> DbnModel {
        DbnModel::random(6, &TrainConfig { hidden_widths: vec![5, 3], seed, ..TrainConfig::for_classes(3) }).unwrap()
    }

    fn params() -> StrategyParams {
        StrategyParams {
            committee_train: TrainConfig {
                hidden_widths: vec![5, 3],
                epochs_unsup: 2,
                epochs_bp: 5,
                ..TrainConfig::for_classes(3)
            },
            ..StrategyParams::for_classes(3)
        }
    }

    fn seeds(labeled: &[usize]) -> Vec<AtomSource> {
        labeled.iter().map(|&i| AtomSource::Seed(i)).collect()
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("svm".parse::<Strategy>().is_err());
    }

    #[test]
    fn rs_whole_pool_and_determinism() {
        let cube = toy_cube(60, 1);
        let model = toy_model(1);
        let p = params();
        let labeled = seeds(&[0, 1, 2]);
        let cands: Vec<usize> = (10..20).collect();
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &labeled, candidates: &cands, m: 10, seed: 5, params: &p };
        let mut all = rs_select(&req).unwrap();
        all.sort_unstable();
        assert_eq!(all, cands);
        let req = SelectionRequest { m: 4, ..req };
        assert_eq!(rs_select(&req).unwrap(), rs_select(&req).unwrap());
        let req = SelectionRequest { m: 11, ..req };
        assert!(matches!(rs_select(&req), Err(Error::PoolTooSmall { .. })));
    }

    #[test]
    fn rs_frequencies_are_uniform() {
        let cube = toy_cube(30, 1);
        let model = toy_model(1);
        let p = params();
        let cands = [3usize, 4, 5, 6];
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let req = SelectionRequest { model: &model, cube: &cube, labeled: &[], candidates: &cands, m: 1, seed, params: &p };
            counts[rs_select(&req).unwrap()[0] - 3] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn mus_matches_exhaustive_top_m() {
        let cube = toy_cube(150, 2);
        let model = toy_model(2);
        let p = params();
        let cands: Vec<usize> = (20..120).collect();
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &[], candidates: &cands, m: 10, seed: 0, params: &p };
        let got = mus_select(&req).unwrap();

        let mut pool: Vec<(usize, f64)> = cands
            .iter()
            .map(|&i| {
                let q = model.predict_proba(cube.pixel(i)).unwrap();
                (i, q.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum::<f64>())
            })
            .collect();
        let mut expected = Vec::new();
        for _ in 0..10 {
            let mut b = 0;
            for j in 1..pool.len() {
                if pool[j].1 > pool[b].1 || (pool[j].1 == pool[b].1 && pool[j].0 < pool[b].0) {
                    b = j;
                }
            }
            expected.push(pool.remove(b).0);
        }
        assert_eq!(got, expected);

        let mut rev = cands.clone();
        rev.reverse();
        let req = SelectionRequest { candidates: &rev, ..req };
        assert_eq!(mus_select(&req).unwrap(), expected);
    }

    #[test]
    fn vote_entropy_examples() {
        assert_eq!(vote_entropy(&[2, 2, 2]), 0.0);
        assert!((vote_entropy(&[1, 3]) - 2f64.ln()).abs() < 1e-15);
        assert!((vote_entropy(&[1, 2, 3]) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn qbc_matches_brute_force_recount() {
        let cube = toy_cube(90, 3);
        let model = toy_model(3);
        let p = params();
        let labeled = seeds(&(0..90).step_by(6).collect::<Vec<_>>());
        let cands: Vec<usize> = (1..90).step_by(6).chain((2..90).step_by(6)).chain((3..90).step_by(6)).take(50).collect();
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &labeled, candidates: &cands, m: 7, seed: 9, params: &p };
        let got = qbc_select(&req).unwrap();

        let committee = train_committee(&req).unwrap();
        assert_eq!(committee.len(), 3);
        let mut scored: Vec<(usize, f64)> = cands
            .iter()
            .map(|&i| {
                let mut hist = [0usize; 4];
                for m in &committee {
                    hist[m.predict(cube.pixel(i)).unwrap() as usize] += 1;
                }
                (i, hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / 3.0).map(|q| -q * q.ln()).sum::<f64>())
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected: Vec<usize> = scored.iter().take(7).map(|x| x.0).collect();
        assert_eq!(got, expected);
        assert_eq!(qbc_select(&req).unwrap(), got);

        let small = StrategyParams { committee_size: 1, ..p.clone() };
        let req = SelectionRequest { params: &small, ..req };
        assert!(qbc_select(&req).is_err());
    }

    #[test]
    fn widl_contract() {
        let cube = toy_cube(120, 4);
        let model = toy_model(4);
        let p = params();
        let labeled = seeds(&[0, 40, 80, 1, 41]);
        let cands: Vec<usize> = (2..40).chain(42..80).collect();
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &labeled, candidates: &cands, m: 6, seed: 3, params: &p };
        let sel = widl_select(&req).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 6);
        assert!(idx.iter().all(|i| cands.contains(i)));
        let dict = sel.dictionary.unwrap();
        assert_eq!(dict.len(), 11);
        assert!(dict.max_norm_error() < 1e-9);
        assert_eq!(sel.residuals.unwrap().len(), cands.len());
    }

    #[test]
    fn rejects_overlap() {
        let cube = toy_cube(30, 1);
        let model = toy_model(1);
        let p = params();
        let labeled = seeds(&[3]);
        let req = SelectionRequest { model: &model, cube: &cube, labeled: &labeled, candidates: &[3, 4], m: 1, seed: 0, params: &p };
        for s in Strategy::ALL {
            assert!(select(s, &req).is_err());
        }
    }
}
