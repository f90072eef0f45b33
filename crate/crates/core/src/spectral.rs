//! Hermitian eigendecomposition of the master matrix with magnitude
//! ordering, mandatory residual/orthonormality gates and explained-variance
//! bookkeeping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::covariance::{hermitian_deviation, max_abs, LagSet, MasterMatrix, HERMITIAN_TOLERANCE};
use crate::error::{Error, Result};

/// Residual gate, relative to the max-row-sum norm of the input.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
/// Orthonormality gate on `|v_iᴴ v_j - δ_ij|`.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;
/// Relative gap below which neighbouring |λ| count as one degenerate cluster.
pub const DEGENERACY_GAP: f64 = 1e-10;

const DUMP_MAGIC: &[u8; 4] = b"WFSB";

/// How many eigenvectors to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modes {
    All,
    Count(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<DVector<Complex64>>,
    cumulative: Vec<f64>,
    n_turbines: usize,
    lags: LagSet,
}

/// Quality figures measured by the decomposition gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralChecks {
    pub worst_residual: f64,
    pub residual_scale: f64,
    pub worst_orthonormality: f64,
}

impl SpectralBasis {
    /// Assembles a basis from precomputed parts. Eigenvalues must already be
    /// in descending magnitude order.
    pub fn from_parts(
        eigenvalues: Vec<f64>,
        eigenvectors: Vec<DVector<Complex64>>,
        n_turbines: usize,
        lags: LagSet,
    ) -> Result<Self> {
        let dim = n_turbines * lags.len();
        if eigenvalues.len() != dim || eigenvectors.len() > dim {
            return Err(Error::Schema(format!(
                "spectral basis expects {dim} eigenvalues and at most {dim} eigenvectors"
            )));
        }
        if eigenvectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Schema(format!("eigenvectors must have {dim} components")));
        }
        if eigenvalues.windows(2).any(|w| w[0].abs() < w[1].abs()) {
            return Err(Error::argument("eigenvalues are not ordered by magnitude"));
        }
        let total: f64 = eigenvalues.iter().map(|l| l.abs()).sum();
        if total <= 0.0 {
            return Err(Error::argument("zero total variance"));
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = eigenvalues
            .iter()
            .map(|l| {
                acc += l.abs();
                (acc / total).min(1.0)
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
            cumulative,
            n_turbines,
            lags,
        })
    }

    /// All eigenvalues, descending in magnitude.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Retained eigenvectors, matching the leading eigenvalues.
    pub fn eigenvectors(&self) -> &[DVector<Complex64>] {
        &self.eigenvectors
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_retained(&self) -> usize {
        self.eigenvectors.len()
    }

    pub fn n_turbines(&self) -> usize {
        self.n_turbines
    }

    pub fn lags(&self) -> &LagSet {
        &self.lags
    }

    /// Cumulative |λ| share for orders 1..=dim.
    pub fn explained_fractions(&self) -> &[f64] {
        &self.cumulative
    }

    /// True when truncating at `q` keeps every degenerate cluster whole.
    pub fn is_admissible_order(&self, q: usize) -> bool {
        if q == 0 || q > self.dim() {
            return false;
        }
        if q == self.dim() {
            return true;
        }
        let gap = self.eigenvalues[q - 1].abs() - self.eigenvalues[q].abs();
        gap >= DEGENERACY_GAP * self.eigenvalues[0].abs()
    }

    /// Smallest admissible order `>= q`.
    pub fn admissible_order(&self, q: usize) -> usize {
        (q.max(1)..=self.dim())
            .find(|&o| self.is_admissible_order(o))
            .unwrap_or(self.dim())
    }

    /// `Σ λ_i v_i v_iᴴ` over the retained modes.
    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(dim, dim);
        for (lambda, v) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            m += v * v.adjoint() * Complex64::new(*lambda, 0.0);
        }
        m
    }

    /// Re-runs the residual and orthonormality gates against `m`.
    pub fn check_against(&self, m: &DMatrix<Complex64>) -> SpectralChecks {
        let scale = max_row_sum(m);
        let worst_residual = self
            .eigenvalues
            .iter()
            .zip(&self.eigenvectors)
            .map(|(&l, v)| (m * v - v * Complex64::new(l, 0.0)).norm())
            .fold(0.0, f64::max);
        SpectralChecks {
            worst_residual,
            residual_scale: scale,
            worst_orthonormality: orthonormality_error(&self.eigenvectors),
        }
    }
}

impl SpectralBasis {
    /// Binary dump: `WFSB`, u32 dimension, u32 retained count, 4 reserved
    /// bytes, the eigenvalues, then each retained eigenvector as interleaved
    /// `(re, im)`; all little-endian f64.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let dim = u32::try_from(self.dim()).map_err(|_| Error::argument("basis too large"))?;
        w.write_all(DUMP_MAGIC).map_err(io)?;
        w.write_all(&dim.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.n_retained() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&[0u8; 4]).map_err(io)?;
        for l in &self.eigenvalues {
            w.write_all(&l.to_le_bytes()).map_err(io)?;
        }
        for v in &self.eigenvectors {
            for c in v.iter() {
                w.write_all(&c.re.to_le_bytes()).map_err(io)?;
                w.write_all(&c.im.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_dump(path: impl AsRef<Path>, n_turbines: usize, lags: LagSet) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?)
            .read_to_end(&mut bytes)
            .map_err(io)?;
        let bad = || Error::Schema(format!("{}: not a spectral basis dump", path.display()));
        if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
            return Err(bad());
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let kept = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 8 * dim + 16 * dim * kept {
            return Err(bad());
        }
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let eigenvalues = (0..dim).map(|i| f(16 + 8 * i)).collect();
        let base = 16 + 8 * dim;
        let eigenvectors = (0..kept)
            .map(|m| {
                DVector::from_fn(dim, |i, _| {
                    let o = base + 16 * (m * dim + i);
                    Complex64::new(f(o), f(o + 8))
                })
            })
            .collect();
        Self::from_parts(eigenvalues, eigenvectors, n_turbines, lags)
    }
}

fn max_row_sum(m: &DMatrix<Complex64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn orthonormality_error(vs: &[DVector<Complex64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in vs.iter().enumerate() {
        for (j, b) in vs.iter().enumerate().skip(i) {
            let dot = a.dotc(b);
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// Rotates `v` so its largest-magnitude component is real and positive.
fn fix_phase(v: &mut DVector<Complex64>) {
    let mut best = 0;
    let mut best_norm = -1.0;
    for (i, c) in v.iter().enumerate() {
        let n = c.norm();
        if n > best_norm {
            best = i;
            best_norm = n;
        }
    }
    if best_norm > 0.0 {
        let phase = v[best].conj() / best_norm;
        *v *= phase;
        v[best] = Complex64::new(v[best].norm(), 0.0);
    }
}

/// Eigendecomposition of the master matrix, ordered by |λ| descending.
pub fn decompose(m: &MasterMatrix, modes: Modes) -> Result<SpectralBasis> {
    decompose_matrix(m.entries(), m.n_turbines(), m.lags().clone(), modes)
}

/// Same as [`decompose`] for a bare Hermitian matrix with a declared layout.
pub fn decompose_matrix(
    m: &DMatrix<Complex64>,
    n_turbines: usize,
    lags: LagSet,
    modes: Modes,
) -> Result<SpectralBasis> {
    let dim = m.nrows();
    if m.ncols() != dim || dim != n_turbines * lags.len() {
        return Err(Error::argument(format!(
            "matrix is {}x{}, expected square of dimension {}",
            dim,
            m.ncols(),
            n_turbines * lags.len()
        )));
    }
    let scale = max_abs(m);
    if scale == 0.0 {
        return Err(Error::argument("zero total variance"));
    }
    let asym = hermitian_deviation(m);
    if asym > HERMITIAN_TOLERANCE * scale {
        return Err(Error::argument(format!(
            "matrix is not Hermitian (deviation {asym:.3e} vs max entry {scale:.3e})"
        )));
    }
    let keep = match modes {
        Modes::All => dim,
        Modes::Count(n) if (1..=dim).contains(&n) => n,
        Modes::Count(n) => {
            return Err(Error::argument(format!("cannot retain {n} modes of {dim}")));
        }
    };

    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors: Vec<DVector<Complex64>> = order[..keep]
        .iter()
        .map(|&i| {
            let mut v = eig.eigenvectors.column(i).into_owned();
            let norm = v.norm();
            v /= Complex64::new(norm, 0.0);
            fix_phase(&mut v);
            v
        })
        .collect();

    let basis = SpectralBasis::from_parts(eigenvalues, eigenvectors, n_turbines, lags)?;
    let checks = basis.check_against(m);
    if checks.worst_residual > RESIDUAL_TOLERANCE * checks.residual_scale {
        return Err(Error::Numerical {
            message: "eigenpair residual above tolerance".into(),
            worst: checks.worst_residual,
        });
    }
    if checks.worst_orthonormality > ORTHONORMALITY_TOLERANCE {
        return Err(Error::Numerical {
            message: "eigenvectors are not orthonormal".into(),
            worst: checks.worst_orthonormality,
        });
    }
    Ok(basis)
}

/// `Σ_{i≤order} |λ_i| / Σ_all |λ_i|`.
pub fn explained_variance(basis: &SpectralBasis, order: usize) -> Result<f64> {
    if order == 0 || order > basis.dim() {
        return Err(Error::argument(format!(
            "order {order} outside 1..={}",
            basis.dim()
        )));
    }
    Ok(basis.cumulative[order - 1])
}

/// Component magnitudes of one eigenvector, arranged by (lag, turbine).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeProfile {
    pub mode: usize,
    pub n_turbines: usize,
    pub lags: Vec<usize>,
    /// Lag-major magnitudes, `magnitudes[k * n_turbines + j]`.
    pub magnitudes: Vec<f64>,
}

impl ModeProfile {
    pub fn get(&self, turbine: usize, lag_index: usize) -> f64 {
        self.magnitudes[lag_index * self.n_turbines + turbine]
    }

    /// Sum of squared magnitudes per turbine, over all lags.
    pub fn turbine_weights(&self) -> Vec<f64> {
        (0..self.n_turbines)
            .map(|j| (0..self.lags.len()).map(|k| self.get(j, k).powi(2)).sum())
            .collect()
    }
}

/// `|ω|` table of the given 1-based mode.
pub fn mode_profile(basis: &SpectralBasis, mode: usize) -> Result<ModeProfile> {
    if mode == 0 || mode > basis.n_retained() {
        return Err(Error::argument(format!(
            "mode {mode} outside 1..={}",
            basis.n_retained()
        )));
    }
    Ok(ModeProfile {
        mode,
        n_turbines: basis.n_turbines,
        lags: basis.lags.lags().to_vec(),
        magnitudes: basis.eigenvectors[mode - 1].iter().map(|c| c.norm()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
    }

    fn diag31() -> SpectralBasis {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            Complex64::new(3.0, 0.0),
            Complex64::new(1.0, 0.0),
        ]));
        decompose_matrix(&m, 2, LagSet::contiguous(0), Modes::All).unwrap()
    }

    #[test]
    fn diagonal_case() {
        let b = diag31();
        assert_eq!(b.eigenvalues(), &[3.0, 1.0]);
        assert_eq!(b.eigenvectors()[0][0], Complex64::new(1.0, 0.0));
        assert_eq!(b.eigenvectors()[0][1].norm(), 0.0);
        assert_eq!(b.eigenvectors()[1][1], Complex64::new(1.0, 0.0));
        assert_eq!(explained_variance(&b, 1).unwrap(), 0.75);
        assert_eq!(explained_variance(&b, 2).unwrap(), 1.0);
        assert!(explained_variance(&b, 0).is_err());
        assert!(explained_variance(&b, 3).is_err());
        assert_eq!(mode_profile(&b, 1).unwrap().magnitudes, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_matrix_rejected() {
        let m = DMatrix::zeros(3, 3);
        let err = decompose_matrix(&m, 3, LagSet::contiguous(0), Modes::All).unwrap_err();
        assert!(err.to_string().contains("zero total variance"));
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = random_hermitian(4, 1);
        m[(0, 1)] += Complex64::new(0.1, 0.0);
        assert!(matches!(
            decompose_matrix(&m, 4, LagSet::contiguous(0), Modes::All),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn random_hermitian_reconstructs() {
        for seed in 0..5 {
            let m = random_hermitian(12, seed);
            let b = decompose_matrix(&m, 4, LagSet::contiguous(2), Modes::All).unwrap();
            let dev = max_abs(&(b.reconstruct() - &m));
            assert!(dev <= 1e-8, "seed {seed}: {dev:e}");
            let c = b.check_against(&m);
            assert!(c.worst_orthonormality <= 1e-8);
            assert!(c.worst_residual <= 1e-8 * c.residual_scale);
            assert!(b.eigenvalues().windows(2).all(|w| w[0].abs() >= w[1].abs()));
            let f = b.explained_fractions();
            assert!(f.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*f.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn phase_fixed_and_unit_norm() {
        let m = random_hermitian(8, 3);
        let b = decompose_matrix(&m, 8, LagSet::contiguous(0), Modes::Count(3)).unwrap();
        assert_eq!(b.n_retained(), 3);
        for v in b.eigenvectors() {
            assert!((v.norm() - 1.0).abs() <= 1e-10);
            let big = v.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
            assert_eq!(big.im, 0.0);
            assert!(big.re > 0.0);
        }
        let p = mode_profile(&b, 2).unwrap();
        let s: f64 = p.magnitudes.iter().map(|x| x * x).sum();
        assert!((s - 1.0).abs() <= 1e-10);
        assert!(mode_profile(&b, 4).is_err());
    }

    #[test]
    fn degenerate_cluster_extends_order() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(
            [5.0, 2.0, 2.0, 1.0].map(|x| Complex64::new(x, 0.0)).to_vec(),
        ));
        let b = decompose_matrix(&m, 4, LagSet::contiguous(0), Modes::All).unwrap();
        assert!(b.is_admissible_order(1));
        assert!(!b.is_admissible_order(2));
        assert!(b.is_admissible_order(3));
        assert_eq!(b.admissible_order(2), 3);
        assert!(b.is_admissible_order(4));
    }

    #[test]
    fn dump_round_trip() {
        let m = random_hermitian(6, 2);
        let b = decompose_matrix(&m, 3, LagSet::contiguous(1), Modes::Count(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        b.write_dump(&p).unwrap();
        assert_eq!(SpectralBasis::read_dump(&p, 3, LagSet::contiguous(1)).unwrap(), b);
        assert!(SpectralBasis::read_dump(&p, 2, LagSet::contiguous(1)).is_err());
    }

    #[test]
    fn scaling_preserves_explained_variance() {
        let m = random_hermitian(6, 9);
        let a = decompose_matrix(&m, 6, LagSet::contiguous(0), Modes::All).unwrap();
        let scaled = &m * Complex64::new(4.0, 0.0);
        let b = decompose_matrix(&scaled, 6, LagSet::contiguous(0), Modes::All).unwrap();
        for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
            assert!((4.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        for (x, y) in a.explained_fractions().iter().zip(b.explained_fractions()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (u, v) in a.eigenvectors().iter().zip(b.eigenvectors()) {
            assert!((u - v).norm() <= 1e-10);
        }
    }
}
