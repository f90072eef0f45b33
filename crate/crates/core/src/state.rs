//! Scalar farm state: eigenvalue-weighted magnitudes of the projections of
//! the lagged velocity history onto the leading eigenmodes.
//!
//! For order `q` and time `t`,
//! `S(t) = Σ_{i≤q} |λ_i Σ_{k,j} ω_i[k·N_W + j] V_j(t − τ_k)| / Σ_{i≤q} |λ_i|`.
//! The state looks backward, so it is defined from `t = τ_max` on.

use num_complex::Complex64;

use crate::binning::EqualWidthBins;
use crate::covariance::LagSet;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::spectral::SpectralBasis;
use crate::timeseries::VelocityField;

const CHUNK: usize = 2048;

/// State values for one or more truncation orders over a common time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    orders: Vec<usize>,
    valid_from: usize,
    n_steps: usize,
    /// `values[o][t - valid_from]` for order `orders[o]`.
    values: Vec<Vec<f64>>,
    /// Steps whose lag history touches a gap are invalid.
    valid: Vec<bool>,
}

impl StateSeries {
    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    /// First time step with a complete lag history.
    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn order_index(&self, q: usize) -> Option<usize> {
        self.orders.iter().position(|&o| o == q)
    }

    /// State of order `q` at absolute step `t`.
    pub fn value(&self, q: usize, t: usize) -> Option<f64> {
        let o = self.order_index(q)?;
        if t < self.valid_from || t >= self.n_steps || !self.valid[t - self.valid_from] {
            return None;
        }
        Some(self.values[o][t - self.valid_from])
    }

    /// `(t, S)` pairs for order `q`, skipping invalid steps.
    pub fn iter(&self, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let o = self.order_index(q);
        let from = self.valid_from;
        o.into_iter().flat_map(move |o| {
            self.values[o]
                .iter()
                .zip(&self.valid)
                .enumerate()
                .filter_map(move |(i, (&s, &ok))| ok.then_some((from + i, s)))
        })
    }

    /// A single-order view.
    pub fn select(&self, q: usize) -> Option<StateSeries> {
        let o = self.order_index(q)?;
        Some(StateSeries {
            orders: vec![q],
            valid_from: self.valid_from,
            n_steps: self.n_steps,
            values: vec![self.values[o].clone()],
            valid: self.valid.clone(),
        })
    }
}

fn check_inputs(
    field: &VelocityField,
    basis: &SpectralBasis,
    lags: &LagSet,
    orders: &[usize],
) -> Result<()> {
    if basis.lags() != lags {
        return Err(Error::argument("lag set does not match the spectral basis"));
    }
    if basis.n_turbines() != field.n_turbines() {
        return Err(Error::argument(format!(
            "basis built for {} turbines, field has {}",
            basis.n_turbines(),
            field.n_turbines()
        )));
    }
    if orders.is_empty() {
        return Err(Error::argument("no truncation order requested"));
    }
    for &q in orders {
        if q == 0 || q > basis.n_retained() {
            return Err(Error::argument(format!(
                "order {q} outside 1..={} retained modes",
                basis.n_retained()
            )));
        }
        if !basis.is_admissible_order(q) {
            return Err(Error::argument(format!(
                "order {q} splits a degenerate eigenvalue cluster; use {}",
                basis.admissible_order(q)
            )));
        }
    }
    if lags.max_lag() >= field.n_steps() {
        return Err(Error::argument(format!(
            "no time step has a full history for lag {}",
            lags.max_lag()
        )));
    }
    Ok(())
}

/// State series of order `q`.
pub fn compute_state(
    field: &VelocityField,
    basis: &SpectralBasis,
    lags: &LagSet,
    q: usize,
) -> Result<StateSeries> {
    compute_states(field, basis, lags, &[q])
}

/// State series for several orders, sharing the mode projections.
pub fn compute_states(
    field: &VelocityField,
    basis: &SpectralBasis,
    lags: &LagSet,
    orders: &[usize],
) -> Result<StateSeries> {
    check_inputs(field, basis, lags, orders)?;
    let valid_from = lags.max_lag();
    let n_steps = field.n_steps();
    let len = n_steps - valid_from;
    let nw = field.n_turbines();
    let taus = lags.lags();
    let q_max = *orders.iter().max().unwrap();
    let lambdas = &basis.eigenvalues()[..q_max];
    let modes = &basis.eigenvectors()[..q_max];
    let denominators: Vec<f64> = orders
        .iter()
        .map(|&q| lambdas[..q].iter().map(|l| l.abs()).sum())
        .collect();

    let valid: Vec<bool> = (valid_from..n_steps)
        .map(|t| taus.iter().all(|&tau| !field.is_gap(t - tau)))
        .collect();

    let n_chunks = len.div_ceil(CHUNK);
    let chunks = map_indexed(n_chunks, |c| {
        let start = c * CHUNK;
        let end = (start + CHUNK).min(len);
        let mut weighted = vec![0.0f64; q_max];
        let mut out = vec![Vec::with_capacity(end - start); orders.len()];
        for i in start..end {
            let t = valid_from + i;
            for (m, (w, &lambda)) in modes.iter().zip(lambdas).enumerate() {
                let mut proj = Complex64::new(0.0, 0.0);
                for (k, &tau) in taus.iter().enumerate() {
                    let src = t - tau;
                    for j in 0..nw {
                        proj += w[k * nw + j] * field.get(j, src);
                    }
                }
                weighted[m] = (proj * lambda).norm();
            }
            for (o, &q) in orders.iter().enumerate() {
                let num: f64 = weighted[..q].iter().sum();
                let den = denominators[o];
                out[o].push(if den > 0.0 { num / den } else { 0.0 });
            }
        }
        out
    });

    let mut values = vec![Vec::with_capacity(len); orders.len()];
    for chunk in chunks {
        for (dst, src) in values.iter_mut().zip(chunk) {
            dst.extend(src);
        }
    }
    Ok(StateSeries {
        orders: orders.to_vec(),
        valid_from,
        n_steps,
        values,
        valid,
    })
}

/// Range and normalized histogram of one state order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSummary {
    pub order: usize,
    pub min: f64,
    pub max: f64,
    pub bins: EqualWidthBins,
    pub counts: Vec<u64>,
    /// Fraction of samples per bin; sums to one.
    pub mass: Vec<f64>,
}

impl StateSummary {
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Probability density per bin (mass over bin width), zero-width safe.
    pub fn density(&self) -> Vec<f64> {
        let w = self.bins.width();
        self.mass
            .iter()
            .map(|m| if w > 0.0 { m / w } else { *m })
            .collect()
    }
}

pub fn state_summary(series: &StateSeries, q: usize, n_bins: usize) -> Result<StateSummary> {
    if n_bins == 0 {
        return Err(Error::argument("state histogram needs at least one bin"));
    }
    let values: Vec<f64> = series.iter(q).map(|(_, s)| s).collect();
    let bins = EqualWidthBins::spanning(values.iter().copied(), n_bins)
        .ok_or_else(|| Error::argument(format!("state series of order {q} is empty")))?;
    let mut counts = vec![0u64; n_bins];
    for &s in &values {
        counts[bins.index(s)] += 1;
    }
    let total = values.len() as f64;
    Ok(StateSummary {
        order: q,
        min: bins.lo(),
        max: bins.hi(),
        bins,
        mass: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::assemble_master;
    use crate::spectral::{decompose, decompose_matrix, Modes};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(nw: usize, nt: usize, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..nw * nt)
            .map(|_| Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        VelocityField::new(nw, nt, vals).unwrap()
    }

    #[test]
    fn zero_field_gives_zero_state() {
        let lags = LagSet::contiguous(1);
        let basis = decompose(&assemble_master(&random_field(2, 30, 1), &lags).unwrap(), Modes::All)
            .unwrap();
        let zero = VelocityField::new(2, 30, vec![Complex64::new(0.0, 0.0); 60]).unwrap();
        let s = compute_states(&zero, &basis, &lags, &[1, 2]).unwrap();
        assert!(s.iter(1).chain(s.iter(2)).all(|(_, v)| v == 0.0));
    }

    #[test]
    fn single_turbine_collapses_to_speed() {
        let lags = LagSet::contiguous(0);
        let m = DMatrix::from_element(1, 1, Complex64::new(2.0, 0.0));
        let basis = decompose_matrix(&m, 1, lags.clone(), Modes::All).unwrap();
        let f = random_field(1, 20, 4);
        let s = compute_state(&f, &basis, &lags, 1).unwrap();
        assert_eq!(s.valid_from(), 0);
        for (t, v) in s.iter(1) {
            assert!((v - f.get(0, t).norm()).abs() <= 1e-14);
        }
    }

    #[test]
    fn valid_from_is_largest_lag() {
        let lags = LagSet::new(vec![0, 2, 3]).unwrap();
        let f = random_field(2, 40, 6);
        let basis = decompose(&assemble_master(&f, &lags).unwrap(), Modes::All).unwrap();
        let s = compute_state(&f, &basis, &lags, 1).unwrap();
        assert_eq!(s.valid_from(), 3);
        assert_eq!(s.value(1, 2), None);
        assert!(s.value(1, 3).is_some());
        assert_eq!(s.iter(1).count(), 37);
    }

    #[test]
    fn argument_checks() {
        let lags = LagSet::contiguous(1);
        let f = random_field(2, 30, 2);
        let basis = decompose(&assemble_master(&f, &lags).unwrap(), Modes::Count(2)).unwrap();
        assert!(compute_state(&f, &basis, &lags, 0).is_err());
        assert!(compute_state(&f, &basis, &lags, 3).is_err());
        assert!(compute_state(&f, &basis, &LagSet::contiguous(2), 1).is_err());
        assert!(compute_state(&random_field(3, 30, 2), &basis, &lags, 1).is_err());
    }

    #[test]
    fn phase_rotation_leaves_state_unchanged() {
        let lags = LagSet::contiguous(1);
        let f = random_field(3, 50, 8);
        let basis = decompose(&assemble_master(&f, &lags).unwrap(), Modes::All).unwrap();
        let rotated: Vec<_> = basis
            .eigenvectors()
            .iter()
            .enumerate()
            .map(|(i, v)| v * Complex64::from_polar(1.0, 0.7 * i as f64 + 0.3))
            .collect();
        let other = SpectralBasis::from_parts(
            basis.eigenvalues().to_vec(),
            rotated,
            3,
            lags.clone(),
        )
        .unwrap();
        let a = compute_states(&f, &basis, &lags, &[1, 3]).unwrap();
        let b = compute_states(&f, &other, &lags, &[1, 3]).unwrap();
        for q in [1, 3] {
            for ((_, x), (_, y)) in a.iter(q).zip(b.iter(q)) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gap_history_invalidates_steps() {
        let lags = LagSet::contiguous(1);
        let f = random_field(2, 30, 3);
        let basis = decompose(&assemble_master(&f, &lags).unwrap(), Modes::All).unwrap();
        let mut gaps = vec![false; 30];
        gaps[10] = true;
        let gapped =
            VelocityField::with_gaps(2, 30, f.values().to_vec(), Some(gaps)).unwrap();
        let s = compute_state(&gapped, &basis, &lags, 1).unwrap();
        assert_eq!(s.value(1, 10), None);
        assert_eq!(s.value(1, 11), None);
        assert!(s.value(1, 12).is_some());
    }

    #[test]
    fn summary_normalized() {
        let lags = LagSet::contiguous(1);
        let f = random_field(2, 200, 5);
        let basis = decompose(&assemble_master(&f, &lags).unwrap(), Modes::All).unwrap();
        let s = compute_state(&f, &basis, &lags, 1).unwrap();
        let sum = state_summary(&s, 1, 20).unwrap();
        assert!((sum.mass.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(sum.min <= sum.max);
        assert_eq!(sum.counts.iter().sum::<u64>(), 199);
    }

    #[test]
    fn constant_state_single_bin() {
        let lags = LagSet::contiguous(0);
        let m = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        let basis = decompose_matrix(&m, 1, lags.clone(), Modes::All).unwrap();
        let f = VelocityField::new(1, 10, vec![Complex64::new(3.0, 4.0); 10]).unwrap();
        let s = compute_state(&f, &basis, &lags, 1).unwrap();
        let sum = state_summary(&s, 1, 8).unwrap();
        assert_eq!(sum.occupied_bins(), 1);
        assert_eq!(sum.min, 5.0);
    }
}
