//! Unit-norm dictionaries, uncertainty-weighted orthogonal matching pursuit,
//! and the incremental coding objective.
//!
//! Weighted OMP codes each residual `r` against a set of atoms `d_η`, each
//! carrying a weight `Φ(d_η)` (the uncertainty of the sample the atom came
//! from). Every round picks the unused atom maximizing `Φ(d_η)·|r̂ · d_η|`,
//! then refits all chosen coefficients by least squares against the original
//! `r`, so `r̂` stays orthogonal to the span of the chosen atoms. With all
//! weights equal this is plain OMP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, least_squares, norm2, normalized, Matrix};

/// Where a dictionary atom came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomSource {
    /// Part of the initial labeled training set.
    Seed(usize),
    /// Chosen by active learning.
    Selected(usize),
}

impl AtomSource {
    pub fn index(self) -> usize {
        match self {
            AtomSource::Seed(i) | AtomSource::Selected(i) => i,
        }
    }
}

/// Unit-norm atoms of dimension `C`, stored contiguously one atom after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    dim: usize,
    atoms: Vec<f64>,
    sources: Vec<AtomSource>,
}

impl Dictionary {
    pub fn empty(dim: usize) -> Self {
        Self { dim, atoms: Vec::new(), sources: Vec::new() }
    }

    /// Normalizes and stores each vector; zero vectors are rejected.
    pub fn from_vectors<V: AsRef<[f64]>>(dim: usize, vectors: &[V], sources: &[AtomSource]) -> Result<Self> {
        if vectors.len() != sources.len() {
            return Err(Error::DimensionMismatch { expected: vectors.len(), actual: sources.len() });
        }
        let mut d = Self::empty(dim);
        for (v, &s) in vectors.iter().zip(sources) {
            d.push(v.as_ref(), s)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, vector: &[f64], source: AtomSource) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: vector.len() });
        }
        let unit = normalized(vector).ok_or(Error::DegenerateAtoms)?;
        self.atoms.extend_from_slice(&unit);
        self.sources.push(source);
        Ok(())
    }

    /// Replaces atom `j` with the normalized `vector`.
    pub fn replace(&mut self, j: usize, vector: &[f64], source: AtomSource) -> Result<()> {
        if j >= self.len() {
            return Err(Error::IndexOutOfRange { index: j, len: self.len() });
        }
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: vector.len() });
        }
        let unit = normalized(vector).ok_or(Error::DegenerateAtoms)?;
        self.atoms[j * self.dim..(j + 1) * self.dim].copy_from_slice(&unit);
        self.sources[j] = source;
        Ok(())
    }

    /// Appends every atom of `other`.
    pub fn extend(&mut self, other: &Dictionary) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: other.dim });
        }
        self.atoms.extend_from_slice(&other.atoms);
        self.sources.extend_from_slice(&other.sources);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn sources(&self) -> &[AtomSource] {
        &self.sources
    }

    /// The `C x p` matrix with atoms as columns.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.len(), self.dim, self.atoms.clone()).expect("consistent storage").transpose()
    }

    /// Largest `|‖d‖₂ − 1|` over all atoms.
    pub fn max_norm_error(&self) -> f64 {
        self.atoms().map(|a| (norm2(a) - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// A sparse coefficient vector: `support[i]` carries `coeffs[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
}

impl SparseCode {
    pub fn coeff_of(&self, atom: usize) -> Option<f64> {
        self.support.iter().position(|&a| a == atom).map(|k| self.coeffs[k])
    }

    pub fn uses(&self, atom: usize) -> bool {
        self.coeff_of(atom).is_some_and(|c| c != 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// `Σ coeff · atom` over the support.
    pub fn reconstruct(&self, dict: &Dictionary) -> Result<Vec<f64>> {
        let mut out = vec![0.0; dict.dim()];
        for (&j, &c) in self.support.iter().zip(&self.coeffs) {
            if j >= dict.len() {
                return Err(Error::IndexOutOfRange { index: j, len: dict.len() });
            }
            axpy(c, dict.atom(j), &mut out);
        }
        Ok(out)
    }
}

/// Residual vectors (rows) tagged with the sample each one came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSet {
    pub samples: Vec<usize>,
    pub residuals: Matrix,
}

impl ResidualSet {
    pub fn new(samples: Vec<usize>, residuals: Matrix) -> Result<Self> {
        if samples.len() != residuals.rows() {
            return Err(Error::DimensionMismatch { expected: samples.len(), actual: residuals.rows() });
        }
        Ok(Self { samples, residuals })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.residuals.row(i)
    }

    /// `Σ ‖r_i‖₂²`
    pub fn energy(&self) -> f64 {
        dot(self.residuals.data(), self.residuals.data())
    }
}

/// `r_i = h_i − Σ_{j ∈ support} coeff_j · atom_j` for every row of `h`.
pub fn residuals(h: &Matrix, dict: &Dictionary, codes: &[SparseCode]) -> Result<Matrix> {
    if codes.len() != h.rows() {
        return Err(Error::DimensionMismatch { expected: h.rows(), actual: codes.len() });
    }
    if h.cols() != dict.dim() {
        return Err(Error::DimensionMismatch { expected: dict.dim(), actual: h.cols() });
    }
    let mut out = h.clone();
    for (i, code) in codes.iter().enumerate() {
        for (&j, &c) in code.support.iter().zip(&code.coeffs) {
            if j >= dict.len() {
                return Err(Error::IndexOutOfRange { index: j, len: dict.len() });
            }
            axpy(-c, dict.atom(j), out.row_mut(i));
        }
    }
    Ok(out)
}

/// One greedy round of a traced coding.
#[derive(Clone, Debug, PartialEq)]
pub struct OmpStep {
    pub selected: usize,
    /// `‖r̂_j‖₂` after the least-squares refit of this round.
    pub residual_norm: f64,
}

const TINY: f64 = 1e-12;

/// Weighted OMP of a single vector, returning the code and the per-round trace.
///
/// Atoms with weight `≤ 0` are never chosen, an atom is never chosen twice,
/// and an atom whose projection onto the current residual is below
/// `1e-12 · ‖r‖` is treated as orthogonal and skipped. Coding stops early once
/// `‖r̂‖₂ ≤ 1e-12` or no eligible atom remains.
pub fn weighted_omp_traced(r: &[f64], atoms: &Dictionary, weights: &[f64], k: usize) -> Result<(SparseCode, Vec<OmpStep>)> {
    if r.len() != atoms.dim() {
        return Err(Error::DimensionMismatch { expected: atoms.dim(), actual: r.len() });
    }
    if weights.len() != atoms.len() {
        return Err(Error::DimensionMismatch { expected: atoms.len(), actual: weights.len() });
    }
    if k > atoms.len() {
        return Err(Error::PoolTooSmall { requested: k, available: atoms.len() });
    }
    let scale = norm2(r);
    let mut residual = r.to_vec();
    let mut code = SparseCode::default();
    let mut trace = Vec::with_capacity(k);
    for _ in 0..k {
        if norm2(&residual) <= TINY {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (eta, atom) in atoms.atoms().enumerate() {
            if weights[eta] <= 0.0 || code.support.contains(&eta) {
                continue;
            }
            let proj = dot(&residual, atom).abs();
            if proj <= TINY * scale {
                continue;
            }
            let score = weights[eta] * proj;
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((eta, score));
            }
        }
        let Some((eta, _)) = best else { break };
        code.support.push(eta);

        let chosen: Vec<&[f64]> = code.support.iter().map(|&j| atoms.atom(j)).collect();
        let basis = Matrix::from_columns(&chosen)?;
        code.coeffs = least_squares(&basis, r)?;
        residual = r.to_vec();
        for (&j, &c) in code.support.iter().zip(&code.coeffs) {
            axpy(-c, atoms.atom(j), &mut residual);
        }
        trace.push(OmpStep { selected: eta, residual_norm: norm2(&residual) });
    }
    Ok((code, trace))
}

/// Weighted OMP of every row of `r` against `atoms`.
pub fn weighted_omp(r: &Matrix, atoms: &Dictionary, weights: &[f64], k: usize) -> Result<Vec<SparseCode>> {
    if r.cols() != atoms.dim() {
        return Err(Error::DimensionMismatch { expected: atoms.dim(), actual: r.cols() });
    }
    (0..r.rows()).map(|i| weighted_omp_traced(r.row(i), atoms, weights, k).map(|(c, _)| c)).collect()
}

/// Plain OMP (all weights one).
pub fn omp(r: &Matrix, atoms: &Dictionary, k: usize) -> Result<Vec<SparseCode>> {
    weighted_omp(r, atoms, &vec![1.0; atoms.len()], k)
}

/// `Σ ‖r_i − E β_i‖₂² + λ · Σ ‖Γ β_i‖₀` with `Γ = diag(weights)`.
pub fn incremental_objective(r: &Matrix, atoms: &Dictionary, weights: &[f64], codes: &[SparseCode], lambda: f64) -> Result<f64> {
    if weights.len() != atoms.len() {
        return Err(Error::DimensionMismatch { expected: atoms.len(), actual: weights.len() });
    }
    let fitted = residuals(r, atoms, codes)?;
    let data_term = dot(fitted.data(), fitted.data());
    let l0: usize = codes
        .iter()
        .map(|c| c.support.iter().zip(&c.coeffs).filter(|(&j, &v)| weights[j] * v != 0.0).count())
        .sum();
    Ok(data_term + lambda * l0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn random_dict(rng: &mut RngStream, dim: usize, p: usize) -> Dictionary {
        let vecs: Vec<Vec<f64>> = (0..p).map(|_| (0..dim).map(|_| rng.standard_normal()).collect()).collect();
        let sources: Vec<AtomSource> = (0..p).map(AtomSource::Selected).collect();
        Dictionary::from_vectors(dim, &vecs, &sources).unwrap()
    }

    #[test]
    fn dictionary_atoms_are_unit_norm() {
        let d = random_dict(&mut RngStream::new(1), 4, 6);
        assert!(d.max_norm_error() < 1e-12);
        assert_eq!(d.to_matrix().rows(), 4);
        assert_eq!(d.to_matrix().cols(), 6);
        assert!(Dictionary::from_vectors(2, &[[0.0, 0.0]], &[AtomSource::Seed(0)]).is_err());
    }

    #[test]
    fn residual_examples() {
        let d = Dictionary::from_vectors(2, &[[1.0, 0.0], [0.0, 1.0]], &[AtomSource::Seed(0), AtomSource::Seed(1)]).unwrap();
        let h = Matrix::from_rows(&[[0.3, 0.4], [1.0, 0.0]]).unwrap();
        let codes = vec![SparseCode::default(), SparseCode { support: vec![0], coeffs: vec![1.0] }];
        let r = residuals(&h, &d, &codes).unwrap();
        assert_eq!(r.row(0), &[0.3, 0.4]);
        assert_eq!(r.row(1), &[0.0, 0.0]);

        let bad = vec![SparseCode::default(), SparseCode { support: vec![5], coeffs: vec![1.0] }];
        assert!(residuals(&h, &d, &bad).is_err());
    }

    #[test]
    fn residuals_match_naive_loop() {
        let mut rng = RngStream::new(2);
        let d = random_dict(&mut rng, 5, 7);
        let h = Matrix::new(6, 5, (0..30).map(|_| rng.next_f64()).collect()).unwrap();
        let codes: Vec<SparseCode> = (0..6)
            .map(|_| SparseCode { support: vec![rng.below(7) as usize], coeffs: vec![rng.uniform(-1.0, 1.0)] })
            .collect();
        let r = residuals(&h, &d, &codes).unwrap();
        for i in 0..6 {
            for c in 0..5 {
                let mut expected = h.get(i, c);
                for (&j, &v) in codes[i].support.iter().zip(&codes[i].coeffs) {
                    expected -= v * d.atom(j)[c];
                }
                assert!((r.get(i, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighting_changes_the_winner() {
        let h = 0.5f64.sqrt();
        let d = Dictionary::from_vectors(2, &[[1.0, 0.0], [h, h]], &[AtomSource::Selected(0), AtomSource::Selected(1)]).unwrap();
        let (code, trace) = weighted_omp_traced(&[1.0, 0.0], &d, &[0.1, 1.0], 1).unwrap();
        assert_eq!(trace[0].selected, 1);
        assert_eq!(code.support, vec![1]);
        // Unweighted, the exact match wins.
        let (code, _) = weighted_omp_traced(&[1.0, 0.0], &d, &[1.0, 1.0], 1).unwrap();
        assert_eq!(code.support, vec![0]);
    }

    #[test]
    fn exact_atom_codes_with_unit_coefficient() {
        let d = random_dict(&mut RngStream::new(3), 3, 4);
        let r = d.atom(2).to_vec();
        for phi in [1e-3, 0.4, 2.0] {
            let (code, trace) = weighted_omp_traced(&r, &d, &[phi; 4], 1).unwrap();
            assert_eq!(code.support, vec![2]);
            assert!((code.coeffs[0] - 1.0).abs() < 1e-12);
            assert!(trace[0].residual_norm < 1e-12);
        }
    }

    #[test]
    fn sparsity_above_atom_count_is_rejected() {
        let d = random_dict(&mut RngStream::new(4), 3, 2);
        assert!(weighted_omp_traced(&[1.0, 0.0, 0.0], &d, &[1.0, 1.0], 3).is_err());
    }

    #[test]
    fn zero_weight_atoms_are_never_selected() {
        let d = Dictionary::from_vectors(2, &[[1.0, 0.0], [0.0, 1.0]], &[AtomSource::Selected(0), AtomSource::Selected(1)]).unwrap();
        let (code, _) = weighted_omp_traced(&[1.0, 0.1], &d, &[0.0, 1.0], 2).unwrap();
        assert_eq!(code.support, vec![1]);
    }

    /// Brute-force weighted OMP following the same rules but solving the
    /// refit through explicit normal equations (Gaussian elimination).
    fn oracle_selection(r: &[f64], d: &Dictionary, w: &[f64], k: usize) -> Vec<usize> {
        let scale = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut res = r.to_vec();
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..k {
            if res.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-12 {
                break;
            }
            let mut best: Option<(usize, f64)> = None;
            for eta in 0..d.len() {
                if w[eta] <= 0.0 || chosen.contains(&eta) {
                    continue;
                }
                let p: f64 = res.iter().zip(d.atom(eta)).map(|(a, b)| a * b).sum::<f64>().abs();
                if p <= 1e-12 * scale {
                    continue;
                }
                let s = w[eta] * p;
                if best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((eta, s));
                }
            }
            let Some((eta, _)) = best else { break };
            chosen.push(eta);
            let q = chosen.len();
            let mut g = vec![vec![0.0; q + 1]; q];
            for a in 0..q {
                for b in 0..q {
                    g[a][b] = d.atom(chosen[a]).iter().zip(d.atom(chosen[b])).map(|(x, y)| x * y).sum();
                }
                g[a][q] = d.atom(chosen[a]).iter().zip(r).map(|(x, y)| x * y).sum();
            }
            for col in 0..q {
                let piv = g[col][col];
                for row in 0..q {
                    if row != col {
                        let f = g[row][col] / piv;
                        for c in col..=q {
                            g[row][c] -= f * g[col][c];
                        }
                    }
                }
            }
            res = r.to_vec();
            for a in 0..q {
                let beta = g[a][q] / g[a][a];
                for (x, y) in res.iter_mut().zip(d.atom(chosen[a])) {
                    *x -= beta * y;
                }
            }
        }
        chosen
    }

    #[test]
    fn per_step_selection_matches_brute_force() {
        let mut rng = RngStream::new(77);
        for _ in 0..100 {
            let dim = 2 + rng.below(6) as usize;
            let p = 1 + rng.below(6) as usize;
            let k = 1 + rng.below(2.min(p) as u64) as usize;
            let d = random_dict(&mut rng, dim, p);
            let w: Vec<f64> = (0..p).map(|_| rng.uniform(0.01, 2.0)).collect();
            let r: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let (code, trace) = weighted_omp_traced(&r, &d, &w, k).unwrap();
            assert_eq!(code.support, oracle_selection(&r, &d, &w, k));
            let mut prev = norm2(&r);
            for step in &trace {
                assert!(step.residual_norm <= prev + 1e-12);
                prev = step.residual_norm;
            }
        }
    }

    #[test]
    fn objective_examples() {
        let mut rng = RngStream::new(8);
        let d = random_dict(&mut rng, 3, 4);
        let w = vec![0.5; 4];
        let r = Matrix::new(2, 3, (0..6).map(|_| rng.standard_normal()).collect()).unwrap();
        let zero = vec![SparseCode::default(); 2];
        let e = incremental_objective(&r, &d, &w, &zero, 3.0).unwrap();
        assert!((e - dot(r.data(), r.data())).abs() < 1e-12);

        let exact = Matrix::from_rows(&[d.atom(1).to_vec(), d.atom(3).iter().map(|x| 2.0 * x).collect()]).unwrap();
        let codes = vec![
            SparseCode { support: vec![1], coeffs: vec![1.0] },
            SparseCode { support: vec![3], coeffs: vec![2.0] },
        ];
        assert!(incremental_objective(&exact, &d, &w, &codes, 0.0).unwrap() < 1e-24);
        assert!((incremental_objective(&exact, &d, &w, &codes, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_double_loop() {
        let mut rng = RngStream::new(9);
        let d = random_dict(&mut rng, 4, 5);
        let w: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 1.0)).collect();
        let r = Matrix::new(6, 4, (0..24).map(|_| rng.standard_normal()).collect()).unwrap();
        let codes = weighted_omp(&r, &d, &w, 2).unwrap();
        let lambda = 0.37;
        let mut expected = 0.0;
        for i in 0..6 {
            for c in 0..4 {
                let mut v = r.get(i, c);
                for (&j, &b) in codes[i].support.iter().zip(&codes[i].coeffs) {
                    v -= b * d.atom(j)[c];
                }
                expected += v * v;
            }
            for (&j, &b) in codes[i].support.iter().zip(&codes[i].coeffs) {
                if w[j] * b != 0.0 {
                    expected += lambda;
                }
            }
        }
        assert!((incremental_objective(&r, &d, &w, &codes, lambda).unwrap() - expected).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn omp_residual_orthogonal_to_support(seed in 0u64..2000) {
            let mut rng = RngStream::new(seed);
            let d = random_dict(&mut rng, 6, 8);
            let w: Vec<f64> = (0..8).map(|_| rng.uniform(0.1, 1.0)).collect();
            let r: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
            let (code, _) = weighted_omp_traced(&r, &d, &w, 3).unwrap();
            let fit = code.reconstruct(&d).unwrap();
            let res: Vec<f64> = r.iter().zip(&fit).map(|(a, b)| a - b).collect();
            let mut seen = std::collections::BTreeSet::new();
            for &j in &code.support {
                prop_assert!(seen.insert(j));
                prop_assert!(dot(&res, d.atom(j)).abs() <= 1e-9);
            }
        }

        #[test]
        fn equal_weights_reduce_to_plain_omp(seed in 0u64..2000, w in 0.01f64..5.0) {
            let mut rng = RngStream::new(seed);
            let d = random_dict(&mut rng, 5, 6);
            let r = Matrix::new(3, 5, (0..15).map(|_| rng.standard_normal()).collect()).unwrap();
            prop_assert_eq!(weighted_omp(&r, &d, &[w; 6], 2).unwrap(), omp(&r, &d, 2).unwrap());
        }
    }
}
