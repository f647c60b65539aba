//! Weighted incremental dictionary learning.
//!
//! One call to [`select_batch`] picks `m` samples to label:
//!
//! 1. the `m` most uncertain members of the candidate pool `Ω` seed a block of
//!    new atoms `E` ([`init_atoms`]);
//! 2. the residuals `R` (what the current dictionary `D` fails to explain) are
//!    coded over `E` by weighted OMP;
//! 3. each atom `a` in turn is refit ([`update_atom`]): the residuals that use
//!    it, stripped of the other new atoms' contributions, form the weighted
//!    scatter `Σ Φ r̂ r̂ᵀ`; its leading eigenvector is the most representative
//!    direction, and the pool member maximizing `Φ(h)(d̂ᵀh)²` replaces the
//!    atom and leaves `Ω`;
//! 4. `R` is recoded over the final `E` and `R' = R − E B` is returned along
//!    with `D' = [D E]`.
//!
//! `Φ` of a residual is the entropy of the sample it came from.

use crate::dataset::DatasetCube;
use crate::dbn::DbnModel;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, top_eigenpair, EigenPair, Matrix, RngStream, EIGEN_MAX_ITERS, EIGEN_TOL};
use crate::sparse_coding::{omp, residuals, weighted_omp, AtomSource, Dictionary, ResidualSet, SparseCode};
use crate::uncertainty::{entropy, rank_scores};

/// A member of the candidate pool `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub index: usize,
    /// Last-layer projection `h`.
    pub projection: Vec<f64>,
    /// Entropy of the model's prediction for this sample.
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WidlState {
    /// Current dictionary `D`.
    pub dict: Dictionary,
    /// Residuals `R` of the candidate projections after coding over `D`.
    pub residuals: ResidualSet,
    /// `Φ` of each residual's originating sample, aligned with `residuals`.
    pub residual_phi: Vec<f64>,
    /// Candidate pool `Ω`, ascending by sample index.
    pub omega: Vec<PoolEntry>,
    pub m: usize,
    pub k: usize,
}

impl WidlState {
    /// Projects and scores `candidates` under `model`, codes them over `dict`
    /// with plain OMP (sparsity `min(k, |D|)`), and draws `Ω`: all candidates,
    /// or a uniform subset of `omega_cap` of them when the pool is larger.
    pub fn build(
        model: &DbnModel,
        cube: &DatasetCube,
        dict: Dictionary,
        candidates: &[usize],
        m: usize,
        k: usize,
        omega_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        if dict.dim() != model.n_classes() {
            return Err(Error::DimensionMismatch { expected: model.n_classes(), actual: dict.dim() });
        }
        let mut candidates = candidates.to_vec();
        candidates.sort_unstable();
        candidates.dedup();

        let mut rows = Vec::with_capacity(candidates.len());
        let mut phi = Vec::with_capacity(candidates.len());
        for &i in &candidates {
            if i >= cube.n_pixels() {
                return Err(Error::IndexOutOfRange { index: i, len: cube.n_pixels() });
            }
            let x = cube.pixel(i);
            rows.push(model.project(x)?);
            phi.push(entropy(&model.predict_proba(x)?)?);
        }
        let h = if rows.is_empty() { Matrix::zeros(0, dict.dim()) } else { Matrix::from_rows(&rows)? };
        let r = if dict.is_empty() { h } else { residuals(&h, &dict, &omp(&h, &dict, k.min(dict.len()))?)? };

        let mut pool: Vec<usize> = (0..candidates.len()).collect();
        if omega_cap > 0 && pool.len() > omega_cap {
            pool = RngStream::new(seed).split(0x0E6A).sample(&pool, omega_cap);
            pool.sort_unstable();
        }
        let omega = pool
            .into_iter()
            .map(|p| PoolEntry { index: candidates[p], projection: rows[p].clone(), phi: phi[p] })
            .collect();

        Ok(Self { dict, residuals: ResidualSet::new(candidates, r)?, residual_phi: phi, omega, m, k })
    }
}

/// The block of new atoms `E` with their uncertainty weights `Φ(d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NewAtoms {
    pub atoms: Dictionary,
    pub weights: Vec<f64>,
}

/// The `m` most uncertain members of `Ω`, normalized, most uncertain first.
pub fn init_atoms(state: &WidlState) -> Result<NewAtoms> {
    if state.omega.len() < state.m {
        return Err(Error::PoolTooSmall { requested: state.m, available: state.omega.len() });
    }
    let mut scores: Vec<(usize, f64)> = state.omega.iter().enumerate().map(|(p, e)| (p, e.phi)).collect();
    rank_scores(&mut scores);
    let dim = state.dict.dim();
    let mut atoms = Dictionary::empty(dim);
    let mut weights = Vec::with_capacity(state.m);
    for &(p, phi) in scores.iter().take(state.m) {
        let entry = &state.omega[p];
        atoms.push(&entry.projection, AtomSource::Selected(entry.index))?;
        weights.push(phi);
    }
    Ok(NewAtoms { atoms, weights })
}

/// Outcome of refitting one atom.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomUpdate {
    /// Sample now backing the atom (removed from `Ω`).
    pub replacement: usize,
    /// Residual rows whose code used the atom.
    pub users: Vec<usize>,
    /// Leading eigenpair of the weighted scatter; `None` when no residual used the atom.
    pub direction: Option<EigenPair>,
}

/// `r̂_ζ`: residual row `row` minus the contributions of every new atom other than `a`.
pub fn partial_residual(state: &WidlState, e: &NewAtoms, code: &SparseCode, row: usize, a: usize) -> Vec<f64> {
    let mut r = state.residuals.row(row).to_vec();
    for (&j, &c) in code.support.iter().zip(&code.coeffs) {
        if j != a {
            axpy(-c, e.atoms.atom(j), &mut r);
        }
    }
    r
}

/// `Σ_ζ Φ_ζ r̂_ζ r̂_ζᵀ` over the given partial residuals.
pub fn weighted_scatter(partials: &[Vec<f64>], phi: &[f64], dim: usize) -> Matrix {
    let mut s = Matrix::zeros(dim, dim);
    for (r, &w) in partials.iter().zip(phi) {
        for i in 0..dim {
            for j in i..dim {
                let v = s.get(i, j) + w * r[i] * r[j];
                s.set(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            s.set(i, j, s.get(j, i));
        }
    }
    s
}

/// Position in `Ω` maximizing `Φ(h)(dᵀh)²`; the lowest sample index wins ties.
pub fn best_pool_match(omega: &[PoolEntry], direction: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (p, entry) in omega.iter().enumerate() {
        let score = entry.phi * dot(direction, &entry.projection).powi(2);
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((p, score));
        }
    }
    best.map(|(p, _)| p)
}

/// Refits atom `a` of `e` in place and refreshes its coefficients in `codes`.
///
/// If no residual uses the atom, the initial sample is kept when it is still
/// in `Ω`; otherwise (another atom already claimed it) the most uncertain
/// remaining pool member takes its place. Either way the backing sample
/// leaves `Ω`, so every atom ends up with a distinct source.
pub fn update_atom(state: &mut WidlState, e: &mut NewAtoms, codes: &mut [SparseCode], a: usize) -> Result<AtomUpdate> {
    if a >= e.atoms.len() {
        return Err(Error::IndexOutOfRange { index: a, len: e.atoms.len() });
    }
    if codes.len() != state.residuals.len() {
        return Err(Error::DimensionMismatch { expected: state.residuals.len(), actual: codes.len() });
    }
    if state.omega.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let dim = state.dict.dim();
    let users: Vec<usize> = (0..codes.len()).filter(|&i| codes[i].uses(a)).collect();

    if users.is_empty() {
        let current = e.atoms.sources()[a].index();
        let p = match state.omega.iter().position(|x| x.index == current) {
            Some(p) => p,
            None => {
                let mut scores: Vec<(usize, f64)> = state.omega.iter().enumerate().map(|(p, x)| (p, x.phi)).collect();
                rank_scores(&mut scores);
                scores[0].0
            }
        };
        let entry = state.omega.remove(p);
        e.atoms.replace(a, &entry.projection, AtomSource::Selected(entry.index))?;
        e.weights[a] = entry.phi;
        return Ok(AtomUpdate { replacement: entry.index, users, direction: None });
    }

    let partials: Vec<Vec<f64>> = users.iter().map(|&i| partial_residual(state, e, &codes[i], i, a)).collect();
    let phi: Vec<f64> = users.iter().map(|&i| state.residual_phi[i]).collect();
    let scatter = weighted_scatter(&partials, &phi, dim);
    let direction = top_eigenpair(&scatter, EIGEN_TOL, EIGEN_MAX_ITERS)?;

    let p = best_pool_match(&state.omega, &direction.vector).ok_or(Error::PoolExhausted)?;
    let entry = state.omega.remove(p);
    e.atoms.replace(a, &entry.projection, AtomSource::Selected(entry.index))?;
    e.weights[a] = entry.phi;

    let d = e.atoms.atom(a).to_vec();
    for (&i, r_hat) in users.iter().zip(&partials) {
        let nu = dot(&d, r_hat);
        let code = &mut codes[i];
        let slot = code.support.iter().position(|&j| j == a).expect("user code contains atom");
        code.coeffs[slot] = nu;
    }
    Ok(AtomUpdate { replacement: entry.index, users, direction: Some(direction) })
}

/// Result of one batch of dictionary learning.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSelection {
    /// Sample indices to send for labeling, in atom order.
    pub selected: Vec<usize>,
    /// The appended atoms `E` and their weights.
    pub new_atoms: NewAtoms,
    /// Final weighted-OMP coding of `R` over `E`.
    pub codes: Vec<SparseCode>,
    /// `D' = [D E]`.
    pub dictionary: Dictionary,
    /// `R' = R − E B`.
    pub residuals: ResidualSet,
    /// `Ω` with the selected samples removed.
    pub omega: Vec<PoolEntry>,
}

/// Runs the full batch selection on a copy of `state`. Coding over `E` uses
/// sparsity `min(k, m)`.
pub fn select_batch(state: &WidlState) -> Result<BatchSelection> {
    let mut state = state.clone();
    let k = state.k.min(state.m);
    let mut e = init_atoms(&state)?;
    let mut codes = weighted_omp(&state.residuals.residuals, &e.atoms, &e.weights, k)?;
    for a in 0..state.m {
        update_atom(&mut state, &mut e, &mut codes, a)?;
    }
    let codes = weighted_omp(&state.residuals.residuals, &e.atoms, &e.weights, k)?;
    let next = residuals(&state.residuals.residuals, &e.atoms, &codes)?;

    let selected: Vec<usize> = e.atoms.sources().iter().map(|s| s.index()).collect();
    let mut distinct = selected.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != selected.len() {
        return Err(Error::Invariant("duplicate atom source in batch".into()));
    }

    let mut dictionary = state.dict.clone();
    dictionary.extend(&e.atoms)?;
    Ok(BatchSelection {
        selected,
        new_atoms: e,
        codes,
        dictionary,
        residuals: ResidualSet::new(state.residuals.samples.clone(), next)?,
        omega: state.omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbn::TrainConfig;
    use crate::numerics::{norm2, normalized};
    use crate::sparse_coding::incremental_objective;

    fn entry(index: usize, projection: Vec<f64>, phi: f64) -> PoolEntry {
        PoolEntry { index, projection, phi }
    }

    fn state_from(residual_rows: Vec<Vec<f64>>, residual_phi: Vec<f64>, omega: Vec<PoolEntry>, m: usize, k: usize) -> WidlState {
        let dim = omega[0].projection.len();
        let samples: Vec<usize> = (1000..1000 + residual_rows.len()).collect();
        let r = if residual_rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&residual_rows).unwrap() };
        WidlState { dict: Dictionary::empty(dim), residuals: ResidualSet::new(samples, r).unwrap(), residual_phi, omega, m, k }
    }

    fn random_state(rng: &mut RngStream, dim: usize, n_res: usize, n_omega: usize, m: usize, k: usize) -> WidlState {
        let rows: Vec<Vec<f64>> = (0..n_res).map(|_| (0..dim).map(|_| rng.standard_normal()).collect()).collect();
        let phi: Vec<f64> = (0..n_res).map(|_| rng.uniform(0.05, 1.0)).collect();
        let omega: Vec<PoolEntry> =
            (0..n_omega).map(|i| entry(i, (0..dim).map(|_| rng.next_f64()).collect(), rng.uniform(0.05, 1.0))).collect();
        state_from(rows, phi, omega, m, k)
    }

    #[test]
    fn init_atoms_takes_most_uncertain() {
        let omega = vec![entry(3, vec![1.0, 0.0], 0.2), entry(8, vec![0.0, 2.0], 0.9)];
        let s = state_from(vec![vec![1.0, 1.0]], vec![0.5], omega.clone(), 1, 1);
        let e = init_atoms(&s).unwrap();
        assert_eq!(e.atoms.sources(), &[AtomSource::Selected(8)]);
        assert_eq!(e.atoms.atom(0), &[0.0, 1.0]);
        assert_eq!(e.weights, vec![0.9]);

        let s = state_from(vec![vec![1.0, 1.0]], vec![0.5], omega, 2, 1);
        let e = init_atoms(&s).unwrap();
        let src: Vec<usize> = e.atoms.sources().iter().map(|s| s.index()).collect();
        assert_eq!(src, vec![8, 3]);

        let mut s2 = s.clone();
        s2.m = 3;
        assert!(init_atoms(&s2).is_err());
    }

    #[test]
    fn init_atoms_matches_exhaustive_top_m() {
        let mut rng = RngStream::new(10);
        let s = random_state(&mut rng, 4, 5, 30, 5, 2);
        let e = init_atoms(&s).unwrap();
        let mut remaining: Vec<&PoolEntry> = s.omega.iter().collect();
        let mut expected = Vec::new();
        for _ in 0..5 {
            let mut best = 0;
            for j in 1..remaining.len() {
                if remaining[j].phi > remaining[best].phi {
                    best = j;
                }
            }
            expected.push(remaining.remove(best).index);
        }
        let got: Vec<usize> = e.atoms.sources().iter().map(|s| s.index()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn single_user_direction_is_its_residual() {
        let r = vec![0.3, -0.4, 1.2];
        let omega = vec![
            entry(0, vec![0.9, 0.1, 0.2], 0.7),
            entry(1, vec![0.2, 0.1, 0.9], 0.6),
            entry(2, vec![0.5, 0.5, 0.5], 0.9),
        ];
        let mut s = state_from(vec![r.clone()], vec![0.8], omega.clone(), 1, 1);
        let mut e = init_atoms(&s).unwrap();
        let mut codes = weighted_omp(&s.residuals.residuals, &e.atoms, &e.weights, 1).unwrap();
        let up = update_atom(&mut s, &mut e, &mut codes, 0).unwrap();
        let mut expected = normalized(&r).unwrap();
        crate::numerics::canonicalize_sign(&mut expected);
        for (x, y) in up.direction.as_ref().unwrap().vector.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-9);
        }
        let scores: Vec<f64> = omega.iter().map(|o| o.phi * dot(&expected, &o.projection).powi(2)).collect();
        let best = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(up.replacement, omega[best].index);
        assert!(s.omega.iter().all(|o| o.index != up.replacement));
        // Coefficient refreshed to dᵀr̂.
        assert!((codes[0].coeffs[0] - dot(e.atoms.atom(0), &r)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_residuals_dominant_weighted_energy_wins() {
        // Φ₁‖r₁‖² = 0.9·4 = 3.6 > Φ₂‖r₂‖² = 0.5·1 = 0.5, so d̂ ∥ r₁.
        let r1 = vec![2.0, 0.0, 0.0];
        let r2 = vec![0.0, 1.0, 0.0];
        let scatter = weighted_scatter(&[r1, r2], &[0.9, 0.5], 3);
        let e = top_eigenpair(&scatter, EIGEN_TOL, EIGEN_MAX_ITERS).unwrap();
        assert!((e.value - 3.6).abs() < 1e-10);
        assert!((e.vector[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn replacement_matches_brute_force_scan() {
        let mut rng = RngStream::new(20);
        for _ in 0..40 {
            let mut s = random_state(&mut rng, 4, 12, 20, 3, 2);
            let mut e = init_atoms(&s).unwrap();
            let mut codes = weighted_omp(&s.residuals.residuals, &e.atoms, &e.weights, 2).unwrap();
            let omega_before = s.omega.clone();
            let a = rng.below(3) as usize;
            let up = update_atom(&mut s, &mut e, &mut codes, a).unwrap();
            if let Some(dir) = up.direction {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for o in &omega_before {
                    let proj: f64 = dir.vector.iter().zip(&o.projection).map(|(x, y)| x * y).sum();
                    let score = o.phi * proj * proj;
                    if score > best.1 {
                        best = (o.index, score);
                    }
                }
                assert_eq!(up.replacement, best.0);
            }
        }
    }

    #[test]
    fn equal_phi_reduces_to_unweighted_projection() {
        let mut rng = RngStream::new(21);
        let dir = normalized(&[0.3, 0.5, -0.2]).unwrap();
        let omega: Vec<PoolEntry> = (0..15).map(|i| entry(i, (0..3).map(|_| rng.next_f64()).collect(), 0.42)).collect();
        let weighted = best_pool_match(&omega, &dir).unwrap();
        let plain = (0..15).max_by(|&a, &b| dot(&dir, &omega[a].projection).powi(2).total_cmp(&dot(&dir, &omega[b].projection).powi(2))).unwrap();
        assert_eq!(weighted, plain);
    }

    #[test]
    fn scatter_is_symmetric_psd() {
        let mut rng = RngStream::new(22);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.standard_normal()).collect()).collect();
            let phi: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
            let s = weighted_scatter(&rows, &phi, 6);
            assert!(s.asymmetry().unwrap() <= 1e-10);
            assert!(top_eigenpair(&s, EIGEN_TOL, EIGEN_MAX_ITERS).unwrap().value >= -1e-10);
        }
    }

    #[test]
    fn unused_atom_is_kept_and_consumed() {
        // Residual aligned with the second pool entry only; the first atom goes unused.
        let omega = vec![entry(0, vec![0.0, 1.0], 0.9), entry(1, vec![1.0, 0.0], 0.8), entry(2, vec![0.7, 0.7], 0.1)];
        let mut s = state_from(vec![vec![1.0, 0.0]], vec![0.5], omega, 2, 1);
        let mut e = init_atoms(&s).unwrap();
        let mut codes = weighted_omp(&s.residuals.residuals, &e.atoms, &e.weights, 1).unwrap();
        assert!(!codes[0].uses(0));
        let up = update_atom(&mut s, &mut e, &mut codes, 0).unwrap();
        assert_eq!(up.replacement, 0);
        assert!(up.direction.is_none());
        assert_eq!(s.omega.len(), 2);
    }

    #[test]
    fn select_batch_single_candidate() {
        let omega = vec![entry(5, vec![0.2, 0.6], 0.3)];
        let mut s = state_from(vec![vec![0.2, 0.6]], vec![0.3], omega, 1, 1);
        s.dict.push(&[1.0, 0.0], AtomSource::Seed(99)).unwrap();
        let out = select_batch(&s).unwrap();
        assert_eq!(out.selected, vec![5]);
        assert_eq!(out.dictionary.len(), 2);
        assert!(out.dictionary.max_norm_error() < 1e-12);
        assert!(out.omega.is_empty());
    }

    #[test]
    fn select_batch_contract_and_energy_decrease() {
        let mut rng = RngStream::new(23);
        for _ in 0..25 {
            let s = random_state(&mut rng, 5, 30, 25, 4, 2);
            let before = s.residuals.energy();
            let out = select_batch(&s).unwrap();
            let mut sel = out.selected.clone();
            sel.sort_unstable();
            sel.dedup();
            assert_eq!(sel.len(), 4);
            assert!(sel.iter().all(|i| s.omega.iter().any(|o| o.index == *i)));
            assert_eq!(out.omega.len(), 21);
            let obj = incremental_objective(&s.residuals.residuals, &out.new_atoms.atoms, &out.new_atoms.weights, &out.codes, 0.0).unwrap();
            assert!(obj <= before + 1e-9);
            assert!((out.residuals.energy() - obj).abs() < 1e-9);
            assert!(out.residuals.residuals.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn build_codes_candidates_and_caps_omega() {
        let mut rng = RngStream::new(24);
        let n = 40;
        let features = Matrix::new(n, 3, (0..n * 3).map(|_| rng.next_f64()).collect()).unwrap();
        let cube = DatasetCube::new(n, 1, features, vec![1; n], vec!["a".into(), "b".into()]).unwrap();
        let model = DbnModel::random(3, &TrainConfig { hidden_widths: vec![4, 2], ..TrainConfig::for_classes(2) }).unwrap();
        let seeds: Vec<Vec<f64>> = (0..4).map(|i| model.project(cube.pixel(i)).unwrap()).collect();
        let dict = Dictionary::from_vectors(2, &seeds, &(0..4).map(AtomSource::Seed).collect::<Vec<_>>()).unwrap();
        let cands: Vec<usize> = (4..n).collect();
        let s = WidlState::build(&model, &cube, dict, &cands, 3, 2, 10, 7).unwrap();
        assert_eq!(s.residuals.len(), 36);
        assert_eq!(s.omega.len(), 10);
        assert!(s.omega.windows(2).all(|w| w[0].index < w[1].index));
        for (row, &sample) in s.residuals.samples.iter().enumerate() {
            let h = model.project(cube.pixel(sample)).unwrap();
            assert!(norm2(s.residuals.row(row)) <= norm2(&h) + 1e-12);
        }
        let again = WidlState::build(&model, &cube, s.dict.clone(), &cands, 3, 2, 10, 7).unwrap();
        assert_eq!(again, s);
    }
}
