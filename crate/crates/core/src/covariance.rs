//! Lagged covariance blocks and the block-Toeplitz master matrix.
//!
//! Flat index convention for the master matrix: `k * n_turbines + j`, with
//! `k` the position in the lag set and `j` the turbine (lag-major,
//! turbine-minor). Block `(k, l)` holds the covariance between turbine
//! velocities shifted by `τ_k` and `τ_l`; with whole-series means it only
//! depends on `τ_l - τ_k`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::timeseries::VelocityField;

/// Relative Toeplitz deviation above which a structure report warns.
pub const TOEPLITZ_WARN_RELATIVE: f64 = 1e-6;

/// Relative tolerance for the Hermitian invariant.
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;

const DUMP_MAGIC: &[u8; 4] = b"WFMM";

/// Strictly increasing step offsets starting at zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LagSet {
    lags: Vec<usize>,
}

impl LagSet {
    pub fn new(lags: Vec<usize>) -> Result<Self> {
        if lags.first() != Some(&0) {
            return Err(Error::argument("lag set must start with lag 0"));
        }
        if lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::argument("lags must be strictly increasing"));
        }
        Ok(Self { lags })
    }

    /// `{0, 1, ..., max_lag}`.
    pub fn contiguous(max_lag: usize) -> Self {
        Self {
            lags: (0..=max_lag).collect(),
        }
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn max_lag(&self) -> usize {
        *self.lags.last().expect("lag set is never empty")
    }

    /// Checks that every lag leaves an averaging window of usable length.
    pub fn check_against(&self, n_steps: usize) -> Result<()> {
        let max = self.max_lag();
        if 2 * max >= n_steps {
            return Err(Error::argument(format!(
                "largest lag {max} must be below half the series length ({n_steps} steps)"
            )));
        }
        Ok(())
    }

    /// Distinct non-negative differences `τ_l - τ_k`, ascending.
    pub fn differences(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self
            .lags
            .iter()
            .flat_map(|&a| self.lags.iter().filter(move |&&b| b >= a).map(move |&b| b - a))
            .collect();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Covariance between turbine series shifted against each other by `lag_diff`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlock {
    pub entries: DMatrix<Complex64>,
    pub lag_diff: isize,
}

impl CovarianceBlock {
    pub fn conjugate_transpose(&self) -> Self {
        Self {
            entries: self.entries.adjoint(),
            lag_diff: -self.lag_diff,
        }
    }
}

/// Turbine series with the whole-series mean removed; gap steps are zeroed.
fn centered(field: &VelocityField) -> Vec<Vec<Complex64>> {
    (0..field.n_turbines())
        .map(|n| {
            let mean = field.turbine_mean(n);
            field
                .turbine(n)
                .iter()
                .enumerate()
                .map(|(t, v)| if field.is_gap(t) { Complex64::new(0.0, 0.0) } else { v - mean })
                .collect()
        })
        .collect()
}

/// Time steps `s` such that both `s` and `s + |d|` are usable.
fn overlap_window(field: &VelocityField, abs_diff: usize) -> Vec<usize> {
    (0..field.n_steps() - abs_diff)
        .filter(|&s| !field.is_gap(s) && !field.is_gap(s + abs_diff))
        .collect()
}

fn block_from_centered(
    centered: &[Vec<Complex64>],
    window: &[usize],
    lag_diff: isize,
) -> DMatrix<Complex64> {
    let nw = centered.len();
    let shift = lag_diff.unsigned_abs();
    let norm = window.len() as f64;
    let rows = map_indexed(nw, |i| {
        let mut row = vec![Complex64::new(0.0, 0.0); nw];
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            // Sum runs over the earlier index `s` in both directions so that
            // block(-d) is the exact conjugate transpose of block(d).
            if lag_diff >= 0 {
                let (a, b) = (&centered[i], &centered[j]);
                for &s in window {
                    acc += a[s] * b[s + shift].conj();
                }
            } else {
                let (a, b) = (&centered[i], &centered[j]);
                for &s in window {
                    acc += a[s + shift] * b[s].conj();
                }
            }
            *out = acc / norm;
        }
        row
    });
    DMatrix::from_fn(nw, nw, |i, j| rows[i][j])
}

/// `C(d)[i][j] = ⟨(V_i(t) - m_i)(V_j(t + d) - m_j)*⟩` over the maximal
/// overlap, normalized by the window length, with whole-series means.
pub fn compute_block(field: &VelocityField, lag_diff: isize) -> Result<CovarianceBlock> {
    let shift = lag_diff.unsigned_abs();
    if shift + 1 >= field.n_steps() {
        return Err(Error::argument(format!(
            "lag difference {lag_diff} leaves fewer than 2 overlapping samples in {} steps",
            field.n_steps()
        )));
    }
    let window = overlap_window(field, shift);
    if window.len() < 2 {
        return Err(Error::argument(format!(
            "lag difference {lag_diff} leaves fewer than 2 gap-free overlapping samples"
        )));
    }
    let centered = centered(field);
    Ok(CovarianceBlock {
        entries: block_from_centered(&centered, &window, lag_diff),
        lag_diff,
    })
}

/// Lagged covariance matrix over all (lag, turbine) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterMatrix {
    entries: DMatrix<Complex64>,
    n_turbines: usize,
    lags: LagSet,
    blocks: BTreeMap<usize, CovarianceBlock>,
    symmetrization_removed: f64,
}

impl MasterMatrix {
    /// Wraps an already assembled matrix, re-deriving the distinct blocks.
    pub fn from_entries(
        entries: DMatrix<Complex64>,
        n_turbines: usize,
        lags: LagSet,
    ) -> Result<Self> {
        let dim = n_turbines * lags.len();
        if entries.nrows() != dim || entries.ncols() != dim {
            return Err(Error::Schema(format!(
                "master matrix is {}x{}, expected {dim}x{dim} for {n_turbines} turbines and {} lags",
                entries.nrows(),
                entries.ncols(),
                lags.len()
            )));
        }
        let mut blocks = BTreeMap::new();
        for (k, &tk) in lags.lags().iter().enumerate() {
            for (l, &tl) in lags.lags().iter().enumerate().skip(k) {
                blocks.entry(tl - tk).or_insert_with(|| CovarianceBlock {
                    entries: entries
                        .view((k * n_turbines, l * n_turbines), (n_turbines, n_turbines))
                        .into_owned(),
                    lag_diff: (tl - tk) as isize,
                });
            }
        }
        Ok(Self {
            entries,
            n_turbines,
            lags,
            blocks,
            symmetrization_removed: 0.0,
        })
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_turbines(&self) -> usize {
        self.n_turbines
    }

    pub fn lags(&self) -> &LagSet {
        &self.lags
    }

    /// Distinct blocks keyed by non-negative lag difference.
    pub fn block_cache(&self) -> &BTreeMap<usize, CovarianceBlock> {
        &self.blocks
    }

    /// Block at lag positions `(k, l)`.
    pub fn block(&self, k: usize, l: usize) -> DMatrix<Complex64> {
        let nw = self.n_turbines;
        self.entries.view((k * nw, l * nw), (nw, nw)).into_owned()
    }

    /// Largest Hermitian deviation removed by the symmetrization step.
    pub fn symmetrization_removed(&self) -> f64 {
        self.symmetrization_removed
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.entries)
    }

    /// Writes the binary dump: a 16-byte header (`WFMM`, u32 dimension,
    /// 8 reserved zero bytes), then row-major interleaved `(re, im)`
    /// little-endian f64 pairs.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let dim = u32::try_from(self.dim())
            .map_err(|_| Error::argument("master matrix too large to dump"))?;
        w.write_all(DUMP_MAGIC).map_err(io)?;
        w.write_all(&dim.to_le_bytes()).map_err(io)?;
        w.write_all(&[0u8; 8]).map_err(io)?;
        for r in 0..self.dim() {
            for c in 0..self.dim() {
                let v = self.entries[(r, c)];
                w.write_all(&v.re.to_le_bytes()).map_err(io)?;
                w.write_all(&v.im.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a dump written by [`MasterMatrix::write_dump`].
    pub fn read_dump(path: impl AsRef<Path>, n_turbines: usize, lags: LagSet) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(io)?;
        if &header[..4] != DUMP_MAGIC {
            return Err(Error::Schema(format!("{}: not a master matrix dump", path.display())));
        }
        let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; dim * dim * 16];
        r.read_exact(&mut buf).map_err(io)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::Schema(format!("{}: trailing bytes after matrix", path.display())));
        }
        let f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let entries = DMatrix::from_fn(dim, dim, |row, col| {
            let o = (row * dim + col) * 16;
            Complex64::new(f(o), f(o + 8))
        });
        Self::from_entries(entries, n_turbines, lags)
    }
}

pub(crate) fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

pub(crate) fn hermitian_deviation(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in r..n {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

fn symmetrize(m: &mut DMatrix<Complex64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in r..n {
            let avg = (m[(r, c)] + m[(c, r)].conj()) * 0.5;
            m[(r, c)] = avg;
            m[(c, r)] = avg.conj();
        }
    }
}

/// Assembles the master matrix from the distinct lag-difference blocks,
/// mirroring negative differences by conjugate transposition.
pub fn assemble_master(field: &VelocityField, lags: &LagSet) -> Result<MasterMatrix> {
    lags.check_against(field.n_steps())?;
    let nw = field.n_turbines();
    let centered = centered(field);
    let diffs = lags.differences();
    let windows: Vec<Vec<usize>> = diffs.iter().map(|&d| overlap_window(field, d)).collect();
    if let Some((d, _)) = diffs.iter().zip(&windows).find(|(_, w)| w.len() < 2) {
        return Err(Error::argument(format!(
            "lag difference {d} leaves fewer than 2 gap-free overlapping samples"
        )));
    }
    let computed = map_indexed(diffs.len(), |b| {
        block_from_centered(&centered, &windows[b], diffs[b] as isize)
    });
    let blocks: BTreeMap<usize, CovarianceBlock> = diffs
        .iter()
        .zip(computed)
        .map(|(&d, entries)| {
            (
                d,
                CovarianceBlock {
                    entries,
                    lag_diff: d as isize,
                },
            )
        })
        .collect();

    let dim = nw * lags.len();
    let mut entries = DMatrix::zeros(dim, dim);
    for (k, &tk) in lags.lags().iter().enumerate() {
        for (l, &tl) in lags.lags().iter().enumerate() {
            let mut view = entries.view_mut((k * nw, l * nw), (nw, nw));
            if tl >= tk {
                view.copy_from(&blocks[&(tl - tk)].entries);
            } else {
                view.copy_from(&blocks[&(tk - tl)].entries.adjoint());
            }
        }
    }
    let removed = hermitian_deviation(&entries);
    symmetrize(&mut entries);
    Ok(MasterMatrix {
        entries,
        n_turbines: nw,
        lags: lags.clone(),
        blocks,
        symmetrization_removed: removed,
    })
}

/// Evaluates every block position separately with shifted-window means
/// `⟨V_i(t + τ_k)⟩ = mean of V_i over [τ_k, N)`, averaging the product over
/// the steps where both shifted samples exist. No Toeplitz shortcut is
/// taken, so comparing block positions with equal lag difference measures
/// how far the data is from the stationary approximation.
pub fn assemble_master_direct(field: &VelocityField, lags: &LagSet) -> Result<MasterMatrix> {
    lags.check_against(field.n_steps())?;
    let nw = field.n_turbines();
    let n = field.n_steps();
    let nl = lags.len();
    let taus = lags.lags();

    // shifted_means[k][i]: mean of V_i over [τ_k, N), gaps excluded.
    let shifted_means: Vec<Vec<Complex64>> = taus
        .iter()
        .map(|&tau| {
            (0..nw)
                .map(|i| {
                    let (sum, count) = (tau..n)
                        .filter(|&t| !field.is_gap(t))
                        .fold((Complex64::new(0.0, 0.0), 0usize), |(s, c), t| {
                            (s + field.get(i, t), c + 1)
                        });
                    sum / count.max(1) as f64
                })
                .collect()
        })
        .collect();

    let blocks = map_indexed(nl * nl, |idx| {
        let (k, l) = (idx / nl, idx % nl);
        let (tk, tl) = (taus[k], taus[l]);
        let span = n - tk.max(tl);
        let steps: Vec<usize> = (0..span)
            .filter(|&t| !field.is_gap(t + tk) && !field.is_gap(t + tl))
            .collect();
        let norm = steps.len().max(1) as f64;
        DMatrix::from_fn(nw, nw, |i, j| {
            let (a, b) = (field.turbine(i), field.turbine(j));
            let (mi, mj) = (shifted_means[k][i], shifted_means[l][j]);
            let mut acc = Complex64::new(0.0, 0.0);
            for &t in &steps {
                acc += (a[t + tk] - mi) * (b[t + tl] - mj).conj();
            }
            acc / norm
        })
    });

    let dim = nw * nl;
    let mut entries = DMatrix::zeros(dim, dim);
    for (idx, block) in blocks.iter().enumerate() {
        let (k, l) = (idx / nl, idx % nl);
        entries.view_mut((k * nw, l * nw), (nw, nw)).copy_from(block);
    }
    let removed = hermitian_deviation(&entries);
    let mut m = MasterMatrix::from_entries(entries, nw, lags.clone())?;
    m.symmetrization_removed = removed;
    Ok(m)
}

/// Deviations of a master matrix from its two structural properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureReport {
    pub max_abs_entry: f64,
    pub hermitian_abs: f64,
    pub hermitian_rel: f64,
    /// Asymmetry present before the enforced symmetrization.
    pub pre_symmetrization_abs: f64,
    pub pre_symmetrization_rel: f64,
    pub toeplitz_abs: f64,
    pub toeplitz_rel: f64,
}

impl StructureReport {
    pub fn toeplitz_warning(&self) -> bool {
        self.toeplitz_rel > TOEPLITZ_WARN_RELATIVE
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian_rel <= HERMITIAN_TOLERANCE
    }
}

fn rel(abs: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        abs / scale
    } else {
        abs
    }
}

/// Measures Hermitian and block-Toeplitz deviations of a master matrix.
///
/// The Toeplitz figure is the largest entry difference between any block
/// and the first block sharing its lag difference.
pub fn verify_structure(m: &MasterMatrix) -> StructureReport {
    let scale = m.max_abs();
    let hermitian = hermitian_deviation(&m.entries);
    let taus = m.lags.lags();
    let mut first: BTreeMap<isize, DMatrix<Complex64>> = BTreeMap::new();
    let mut toeplitz = 0.0f64;
    for (k, &tk) in taus.iter().enumerate() {
        for (l, &tl) in taus.iter().enumerate() {
            let d = tl as isize - tk as isize;
            let block = m.block(k, l);
            match first.get(&d) {
                Some(reference) => toeplitz = toeplitz.max(max_abs(&(&block - reference))),
                None => {
                    first.insert(d, block);
                }
            }
        }
    }
    StructureReport {
        max_abs_entry: scale,
        hermitian_abs: hermitian,
        hermitian_rel: rel(hermitian, scale),
        pre_symmetrization_abs: m.symmetrization_removed,
        pre_symmetrization_rel: rel(m.symmetrization_removed, scale),
        toeplitz_abs: toeplitz,
        toeplitz_rel: rel(toeplitz, scale),
    }
}

/// Structure report for the assembled matrix, with the Toeplitz figures
/// taken from the direct shifted-window evaluation of the same data.
pub fn structure_report(
    field: &VelocityField,
    lags: &LagSet,
    master: &MasterMatrix,
) -> Result<StructureReport> {
    let mut report = verify_structure(master);
    let direct = verify_structure(&assemble_master_direct(field, lags)?);
    report.toeplitz_abs = direct.toeplitz_abs;
    report.toeplitz_rel = rel(direct.toeplitz_abs, report.max_abs_entry);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(nw: usize, nt: usize, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..nw * nt)
            .map(|_| Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        VelocityField::new(nw, nt, vals).unwrap()
    }

    /// Literal double loop over the time index for one block entry.
    fn brute_block(field: &VelocityField, d: isize) -> DMatrix<Complex64> {
        let n = field.n_steps() as isize;
        let nw = field.n_turbines();
        let means: Vec<Complex64> = (0..nw)
            .map(|i| field.turbine(i).iter().sum::<Complex64>() / n as f64)
            .collect();
        DMatrix::from_fn(nw, nw, |i, j| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut count = 0;
            for t in 0..n {
                let u = t + d;
                if (0..n).contains(&u) {
                    acc += (field.get(i, t as usize) - means[i])
                        * (field.get(j, u as usize) - means[j]).conj();
                    count += 1;
                }
            }
            acc / count as f64
        })
    }

    fn assert_close(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>, rel: f64) {
        let scale = max_abs(b).max(1e-300);
        let dev = max_abs(&(a - b));
        assert!(dev <= rel * scale, "deviation {dev:e} vs scale {scale:e}");
    }

    #[test]
    fn constant_field_gives_zero_blocks() {
        let f = VelocityField::new(2, 10, vec![Complex64::new(1.0, 0.0); 20]).unwrap();
        for d in [-3, 0, 2] {
            assert!(compute_block(&f, d).unwrap().entries.iter().all(|v| v.norm() == 0.0));
        }
        let m = assemble_master(&f, &LagSet::contiguous(2)).unwrap();
        assert_eq!(m.dim(), 6);
        assert!(m.entries().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn alternating_series() {
        let vals: Vec<Complex64> = (0..20)
            .map(|t| Complex64::new(if t % 2 == 0 { 1.0 } else { -1.0 }, 0.0))
            .collect();
        let f = VelocityField::new(1, 20, vals).unwrap();
        assert_eq!(compute_block(&f, 0).unwrap().entries[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(compute_block(&f, 1).unwrap().entries[(0, 0)], Complex64::new(-1.0, 0.0));
    }

    #[test]
    fn block_matches_brute_force() {
        let f = random_field(3, 50, 7);
        let got = compute_block(&f, 2).unwrap();
        assert_close(&got.entries, &brute_block(&f, 2), 1e-12);
        let neg = compute_block(&f, -2).unwrap();
        assert_close(&neg.entries, &brute_block(&f, -2), 1e-12);
    }

    #[test]
    fn negative_difference_is_exact_adjoint() {
        let f = random_field(4, 60, 11);
        for d in 0..5 {
            let pos = compute_block(&f, d).unwrap();
            let neg = compute_block(&f, -d).unwrap();
            assert_eq!(neg.entries, pos.entries.adjoint());
        }
    }

    #[test]
    fn degenerate_window_rejected() {
        let f = random_field(1, 5, 1);
        assert!(compute_block(&f, 3).is_ok());
        assert!(matches!(compute_block(&f, 4), Err(Error::Argument(_))));
        assert!(matches!(compute_block(&f, -4), Err(Error::Argument(_))));
    }

    #[test]
    fn single_lag_equals_zero_lag_block() {
        let f = random_field(3, 40, 3);
        let m = assemble_master(&f, &LagSet::new(vec![0]).unwrap()).unwrap();
        assert_eq!(m.entries(), &compute_block(&f, 0).unwrap().entries);
    }

    #[test]
    fn cached_assembly_matches_per_pair_blocks() {
        let f = random_field(3, 80, 5);
        let lags = LagSet::contiguous(2);
        let m = assemble_master(&f, &lags).unwrap();
        assert_eq!(m.block_cache().len(), 3);
        for k in 0..3 {
            for l in 0..3 {
                let direct = compute_block(&f, l as isize - k as isize).unwrap();
                assert_close(&m.block(k, l), &direct.entries, 1e-14);
            }
        }
        assert_eq!(m.block(0, 1), m.block(1, 2));
    }

    #[test]
    fn lag_set_validation() {
        assert!(LagSet::new(vec![1, 2]).is_err());
        assert!(LagSet::new(vec![0, 2, 2]).is_err());
        assert_eq!(LagSet::new(vec![0, 2, 5]).unwrap().differences(), vec![0, 2, 3, 5]);
        let f = random_field(1, 10, 0);
        assert!(assemble_master(&f, &LagSet::contiguous(5)).is_err());
        assert!(assemble_master(&f, &LagSet::contiguous(4)).is_ok());
    }

    #[test]
    fn assembled_matrix_structure_is_exact() {
        let f = random_field(3, 100, 9);
        let m = assemble_master(&f, &LagSet::contiguous(3)).unwrap();
        let r = verify_structure(&m);
        assert_eq!(r.hermitian_abs, 0.0);
        assert_eq!(r.pre_symmetrization_abs, 0.0);
        assert_eq!(r.toeplitz_abs, 0.0);
    }

    #[test]
    fn perturbation_is_detected() {
        let f = random_field(2, 100, 4);
        let m = assemble_master(&f, &LagSet::contiguous(1)).unwrap();
        let mut e = m.entries().clone();
        e[(0, 1)] += Complex64::new(1e-3, 0.0);
        let bad = MasterMatrix::from_entries(e, 2, m.lags().clone()).unwrap();
        let r = verify_structure(&bad);
        assert!(r.hermitian_abs >= 1e-3 * 0.999);
        assert!(r.toeplitz_abs >= 1e-3 * 0.999);
        assert!(!r.is_hermitian());
    }

    #[test]
    fn short_series_toeplitz_deviation_is_reported() {
        let f = random_field(3, 100, 21);
        let lags = LagSet::contiguous(10);
        let m = assemble_master(&f, &lags).unwrap();
        let r = structure_report(&f, &lags, &m).unwrap();
        assert!(r.toeplitz_abs > 0.0);
        assert!(r.toeplitz_rel < 1.0, "{r:?}");
        assert!(r.toeplitz_warning());
    }

    #[test]
    fn dump_round_trip() {
        let f = random_field(2, 30, 8);
        let lags = LagSet::contiguous(2);
        let m = assemble_master(&f, &lags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        m.write_dump(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"WFMM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 16 + 36 * 16);
        let back = MasterMatrix::read_dump(&p, 2, lags.clone()).unwrap();
        assert_eq!(back.entries(), m.entries());
        assert_eq!(back.block_cache(), m.block_cache());
        assert!(MasterMatrix::read_dump(&p, 3, lags).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scaling_scales_blocks_quadratically(seed in 0u64..1000, c in -5.0f64..5.0) {
            let f = random_field(2, 30, seed);
            let base = compute_block(&f, 1).unwrap().entries;
            let scaled = compute_block(&f.scaled(c), 1).unwrap().entries;
            assert_close(&scaled, &(base * Complex64::new(c * c, 0.0)), 1e-12);
        }

        #[test]
        fn zero_lag_diagonal_is_real_nonnegative(seed in 0u64..1000) {
            let f = random_field(3, 25, seed);
            let b = compute_block(&f, 0).unwrap().entries;
            for i in 0..3 {
                prop_assert_eq!(b[(i, i)].im, 0.0);
                prop_assert!(b[(i, i)].re >= 0.0);
            }
        }
    }
}
