//! The active-learning loop: pretrain, then repeatedly select, label, fine-tune, evaluate.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;

use crate::dataset::{DatasetCube, Split};
use crate::dbn::{fine_tune, pretrain_stack, DbnModel, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::sparse_coding::{AtomSource, Dictionary, ResidualSet};
use crate::strategies::{labeled_dictionary, select, SelectionRequest, Strategy, StrategyParams};

/// Labeling authority.
pub trait Oracle {
    fn label(&self, index: usize) -> Result<u16>;
}

/// Answers queries from the cube's ground truth.
pub struct GroundTruth<'a>(pub &'a DatasetCube);

impl Oracle for GroundTruth<'_> {
    fn label(&self, index: usize) -> Result<u16> {
        match self.0.labels.get(index) {
            None => Err(Error::IndexOutOfRange { index, len: self.0.n_pixels() }),
            Some(0) => Err(Error::Invariant(format!("oracle has no label for pixel {index}"))),
            Some(&l) => Ok(l),
        }
    }
}

/// Anything that assigns a class id `1..=C` to a feature vector.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn classify(&self, x: &[f64]) -> Result<u16>;
}

impl Classifier for DbnModel {
    fn n_classes(&self) -> usize {
        DbnModel::n_classes(self)
    }

    fn classify(&self, x: &[f64]) -> Result<u16> {
        self.predict(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub overall_accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

pub fn evaluate<M: Classifier + ?Sized>(model: &M, test: &[usize], cube: &DatasetCube) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let c = model.n_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for &i in test {
        if i >= cube.n_pixels() {
            return Err(Error::IndexOutOfRange { index: i, len: cube.n_pixels() });
        }
        let truth = cube.label(i) as usize;
        if truth == 0 || truth > c {
            return Err(Error::LabelOutOfRange { label: truth, classes: c });
        }
        let pred = model.classify(cube.pixel(i))? as usize;
        if pred == 0 || pred > c {
            return Err(Error::LabelOutOfRange { label: pred, classes: c });
        }
        confusion[truth - 1][pred - 1] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation { overall_accuracy: correct as f64 / test.len() as f64, per_class, confusion })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverConfig {
    /// Samples labeled per iteration (`m`).
    pub batch: usize,
    pub iterations: usize,
    /// Recipe for the initial model; its seed is replaced by the run seed.
    pub train: TrainConfig,
    /// Fine-tuning epochs after each batch.
    pub epochs_per_iteration: usize,
    pub params: StrategyParams,
}

impl DriverConfig {
    pub fn for_classes(classes: usize) -> Self {
        Self {
            batch: 50,
            iterations: 20,
            train: TrainConfig::for_classes(classes),
            epochs_per_iteration: 50,
            params: StrategyParams::for_classes(classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    pub evaluation: Evaluation,
    /// Wall clock since the start of the run.
    pub elapsed_ms: u128,
}

/// Everything the loop carries between iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub iteration: usize,
    /// Training set in the order samples were added.
    pub labeled: Vec<AtomSource>,
    /// Oracle labels, aligned with `labeled`.
    pub labels: Vec<u16>,
    /// Remaining candidates, ascending.
    pub candidates: Vec<usize>,
    pub test: Vec<usize>,
    pub model: DbnModel,
    /// WI-DL dictionary after the latest batch.
    pub dictionary: Option<Dictionary>,
    pub residuals: Option<ResidualSet>,
    pub history: Vec<IterationRecord>,
}

impl RunState {
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|s| s.index()).collect()
    }

    /// Disjointness of the three sets and the labeling budget.
    pub fn check_invariants(&self, initial: usize, batch: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, set) in [("labeled", self.labeled_indices()), ("candidate", self.candidates.clone()), ("test", self.test.clone())] {
            for i in set {
                if !seen.insert(i) {
                    return Err(Error::Invariant(format!("index {i} from {name} appears in two sets")));
                }
            }
        }
        let expected = initial + self.iteration * batch;
        if self.labeled.len() != expected {
            return Err(Error::Invariant(format!("labeled set has {} samples, expected {expected}", self.labeled.len())));
        }
        if let Some(d) = &self.dictionary {
            if d.len() != expected {
                return Err(Error::Invariant(format!("dictionary has {} atoms, expected {expected}", d.len())));
            }
            if d.max_norm_error() > 1e-9 {
                return Err(Error::Invariant("dictionary atom is not unit norm".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub history: Vec<IterationRecord>,
    pub model: DbnModel,
    pub state: RunState,
}

/// Seed of iteration `t`'s selection draw.
pub fn selection_seed(seed: u64, iteration: usize) -> u64 {
    RngStream::new(seed).split(0x5E1E_C7).split(iteration as u64).next_u64()
}

fn training_matrix(cube: &DatasetCube, state: &RunState) -> Result<Matrix> {
    let rows: Vec<&[f64]> = state.labeled.iter().map(|s| cube.pixel(s.index())).collect();
    Matrix::from_rows(&rows)
}

pub fn run(cube: &DatasetCube, split: &Split, strategy: Strategy, cfg: &DriverConfig, seed: u64) -> Result<RunOutcome> {
    run_observed(cube, split, strategy, cfg, seed, &GroundTruth(cube), |_| Ok(()))
}

/// [`run`] with an explicit oracle and a hook called after every iteration
/// (including the baseline).
pub fn run_observed<O, F>(
    cube: &DatasetCube,
    split: &Split,
    strategy: Strategy,
    cfg: &DriverConfig,
    seed: u64,
    oracle: &O,
    mut observe: F,
) -> Result<RunOutcome>
where
    O: Oracle + ?Sized,
    F: FnMut(&RunState) -> Result<()>,
{
    let start = Instant::now();
    split.validate(cube)?;
    if split.train.is_empty() {
        return Err(Error::config("train_pct", "initial training set is empty"));
    }
    if split.test.is_empty() {
        return Err(Error::config("train_pct/cand_pct", "test set is empty"));
    }
    if cfg.train.n_classes() != cube.n_classes() {
        return Err(Error::config("hidden_widths", format!("last layer has {} units, cube has {} classes", cfg.train.n_classes(), cube.n_classes())));
    }
    if cfg.iterations > 0 && cfg.batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    if cfg.iterations * cfg.batch > split.candidate.len() {
        return Err(Error::PoolTooSmall { requested: cfg.iterations * cfg.batch, available: split.candidate.len() });
    }

    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let labeled: Vec<AtomSource> = split.train.iter().map(|&i| AtomSource::Seed(i)).collect();
    let labels = split.train.iter().map(|&i| oracle.label(i)).collect::<Result<Vec<u16>>>()?;
    let features = Matrix::from_rows(&split.train.iter().map(|&i| cube.pixel(i)).collect::<Vec<_>>())?;
    let model = pretrain_stack(&features, &train_cfg)?;
    let model = fine_tune(&model, &features, &labels, &train_cfg)?;

    let mut candidates = split.candidate.clone();
    candidates.sort_unstable();
    let mut state = RunState {
        iteration: 0,
        labeled,
        labels,
        candidates,
        test: split.test.clone(),
        dictionary: None,
        residuals: None,
        model,
        history: Vec::new(),
    };
    if strategy == Strategy::Widl {
        state.dictionary = Some(labeled_dictionary(&state.model, cube, &state.labeled)?);
    }
    let initial = state.labeled.len();
    state.check_invariants(initial, cfg.batch)?;
    record(&mut state, cube, start)?;
    observe(&state)?;

    for t in 1..=cfg.iterations {
        let selection = {
            let req = SelectionRequest {
                model: &state.model,
                cube,
                labeled: &state.labeled,
                candidates: &state.candidates,
                m: cfg.batch,
                seed: selection_seed(seed, t),
                params: &cfg.params,
            };
            select(strategy, &req)?
        };
        let chosen: BTreeSet<usize> = selection.indices.iter().copied().collect();
        if chosen.len() != cfg.batch || !chosen.iter().all(|i| state.candidates.binary_search(i).is_ok()) {
            return Err(Error::Invariant(format!("{strategy} returned an invalid batch")));
        }
        for &i in &selection.indices {
            state.labels.push(oracle.label(i)?);
            state.labeled.push(AtomSource::Selected(i));
        }
        state.candidates.retain(|i| !chosen.contains(i));
        state.dictionary = selection.dictionary;
        state.residuals = selection.residuals;

        let features = training_matrix(cube, &state)?;
        let step_cfg = TrainConfig { epochs_bp: cfg.epochs_per_iteration, seed: RngStream::new(seed).split(t as u64).next_u64(), ..train_cfg.clone() };
        state.model = fine_tune(&state.model, &features, &state.labels, &step_cfg)?;
        state.iteration = t;
        state.check_invariants(initial, cfg.batch)?;
        record(&mut state, cube, start)?;
        observe(&state)?;
    }
    Ok(RunOutcome { history: state.history.clone(), model: state.model.clone(), state })
}

fn record(state: &mut RunState, cube: &DatasetCube, start: Instant) -> Result<()> {
    let evaluation = evaluate(&state.model, &state.test, cube)?;
    state.history.push(IterationRecord {
        iteration: state.iteration,
        labeled_count: state.labeled.len(),
        evaluation,
        elapsed_ms: start.elapsed().as_millis(),
    });
    Ok(())
}
