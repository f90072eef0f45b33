//! State-conditioned return statistics and the per-state choice of
//! truncation order and forecast horizon.
//!
//! Densities are histograms: the state axis uses equal-width bins shared by
//! every (q, τ) cell of a table, the return axis uses equal-width bins over
//! the returns observed in the cell. Expected return and risk are the first
//! moment and the central second moment of the conditional histogram,
//! evaluated at bin centers.

use crate::binning::EqualWidthBins;
use crate::covariance::LagSet;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::spectral::SpectralBasis;
use crate::state::{compute_states, StateSeries};
use crate::timeseries::{compute_returns, PowerSeries, ReturnSeries, VelocityField};

#[derive(Debug, Clone, PartialEq)]
pub struct BinningConfig {
    pub n_state_bins: usize,
    /// Odd by default so that r = 0 sits on a bin center.
    pub n_return_bins: usize,
    pub min_samples_per_bin: u64,
    /// Fixed state range; when absent the bins span the observed states.
    pub state_range: Option<(f64, f64)>,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            n_state_bins: 50,
            n_return_bins: 101,
            min_samples_per_bin: 30,
            state_range: None,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_state_bins < 2 {
            return Err(Error::argument("n_state_bins must be at least 2"));
        }
        if self.n_return_bins < 1 {
            return Err(Error::argument("n_return_bins must be at least 1"));
        }
        if self.min_samples_per_bin < 1 {
            return Err(Error::argument("min_samples_per_bin must be at least 1"));
        }
        if let Some((lo, hi)) = self.state_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::argument("state_range must be a finite increasing pair"));
            }
        }
        Ok(())
    }

    fn state_bins(&self, states: impl IntoIterator<Item = f64>) -> Option<EqualWidthBins> {
        match self.state_range {
            Some((lo, hi)) => Some(EqualWidthBins::new(lo, hi, self.n_state_bins)),
            None => EqualWidthBins::spanning(states, self.n_state_bins),
        }
    }
}

/// Sample mean and biased variance of the valid returns.
pub fn unconditional_stats(returns: &ReturnSeries) -> Result<(f64, f64)> {
    let values: Vec<f64> = returns.valid_values().collect();
    if values.len() < 2 {
        return Err(Error::argument(format!(
            "need at least 2 valid returns, found {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

/// `(S(t), r(t))` for every step where the state of order `q` and the return
/// over `[t, t + τ]` are both defined.
pub fn paired_samples(state: &StateSeries, q: usize, returns: &ReturnSeries) -> Vec<(f64, f64)> {
    state
        .iter(q)
        .filter_map(|(t, s)| returns.get(t).map(|r| (s, r)))
        .collect()
}

/// Joint histogram of (state, return) with its marginal and conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDensity {
    state_bins: EqualWidthBins,
    return_bins: EqualWidthBins,
    /// Row-major `[state_bin][return_bin]`.
    joint_counts: Vec<u64>,
    state_counts: Vec<u64>,
    n_samples: u64,
    min_samples: u64,
}

/// Conditional moments of one state bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub expected_return: f64,
    pub risk: f64,
    pub samples: u64,
}

impl ConditionalDensity {
    /// Bins `samples` onto a fixed state grid and a return grid spanning
    /// the sampled returns.
    pub fn from_samples(
        samples: &[(f64, f64)],
        state_bins: EqualWidthBins,
        n_return_bins: usize,
        min_samples: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::argument("no overlapping valid state/return samples"));
        }
        let return_bins = EqualWidthBins::spanning(samples.iter().map(|s| s.1), n_return_bins)
            .ok_or_else(|| Error::argument("no finite returns to bin"))?;
        let (ns, nr) = (state_bins.len(), return_bins.len());
        let mut joint_counts = vec![0u64; ns * nr];
        let mut state_counts = vec![0u64; ns];
        for &(s, r) in samples {
            let b = state_bins.index(s);
            joint_counts[b * nr + return_bins.index(r)] += 1;
            state_counts[b] += 1;
        }
        Ok(Self {
            state_bins,
            return_bins,
            joint_counts,
            state_counts,
            n_samples: samples.len() as u64,
            min_samples,
        })
    }

    pub fn state_bins(&self) -> &EqualWidthBins {
        &self.state_bins
    }

    pub fn return_bins(&self) -> &EqualWidthBins {
        &self.return_bins
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn joint_counts(&self) -> &[u64] {
        &self.joint_counts
    }

    pub fn state_counts(&self) -> &[u64] {
        &self.state_counts
    }

    /// Probability mass of each state bin.
    pub fn marginal_state(&self) -> Vec<f64> {
        let n = self.n_samples as f64;
        self.state_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Probability mass of each return bin over all states.
    pub fn marginal_return(&self) -> Vec<f64> {
        let nr = self.return_bins.len();
        let n = self.n_samples as f64;
        (0..nr)
            .map(|r| {
                self.joint_counts
                    .iter()
                    .skip(r)
                    .step_by(nr)
                    .sum::<u64>() as f64
                    / n
            })
            .collect()
    }

    pub fn is_supported(&self, state_bin: usize) -> bool {
        self.state_counts[state_bin] >= self.min_samples
    }

    pub fn support_flags(&self) -> Vec<bool> {
        (0..self.state_bins.len()).map(|b| self.is_supported(b)).collect()
    }

    /// Row-normalized return histogram of a non-empty state bin.
    pub fn conditional(&self, state_bin: usize) -> Option<Vec<f64>> {
        let count = self.state_counts[state_bin];
        if count == 0 {
            return None;
        }
        let nr = self.return_bins.len();
        let row = &self.joint_counts[state_bin * nr..(state_bin + 1) * nr];
        Some(row.iter().map(|&c| c as f64 / count as f64).collect())
    }

    /// Conditional mean and variance of any non-empty bin, supported or not.
    pub fn bin_moments(&self, state_bin: usize) -> Option<BinStats> {
        let cond = self.conditional(state_bin)?;
        let (mean, var) = moments(&cond, &self.return_bins);
        Some(BinStats {
            expected_return: mean,
            risk: var,
            samples: self.state_counts[state_bin],
        })
    }

    /// Mean and variance of the marginal return histogram.
    pub fn return_moments(&self) -> (f64, f64) {
        moments(&self.marginal_return(), &self.return_bins)
    }

    /// Joint probability density `count / (N · ΔS · Δr)`; zero-width axes
    /// contribute a factor of one.
    pub fn joint_density(&self) -> Vec<f64> {
        let ws = nonzero(self.state_bins.width());
        let wr = nonzero(self.return_bins.width());
        let n = self.n_samples as f64;
        self.joint_counts
            .iter()
            .map(|&c| c as f64 / (n * ws * wr))
            .collect()
    }
}

fn nonzero(w: f64) -> f64 {
    if w > 0.0 {
        w
    } else {
        1.0
    }
}

fn moments(mass: &[f64], bins: &EqualWidthBins) -> (f64, f64) {
    let mean: f64 = mass
        .iter()
        .enumerate()
        .map(|(i, p)| bins.center(i) * p)
        .sum();
    let var: f64 = mass
        .iter()
        .enumerate()
        .map(|(i, p)| (bins.center(i) - mean).powi(2) * p)
        .sum();
    (mean, var)
}

/// Joint density of the state of the series' first order with the return
/// series, on bins spanning the observed values.
pub fn estimate_density(
    state: &StateSeries,
    returns: &ReturnSeries,
    tau: usize,
    cfg: &BinningConfig,
) -> Result<ConditionalDensity> {
    cfg.validate()?;
    if returns.lag() != tau {
        return Err(Error::argument(format!(
            "return series has lag {}, expected horizon {tau}",
            returns.lag()
        )));
    }
    let q = *state
        .orders()
        .first()
        .ok_or_else(|| Error::argument("state series has no order"))?;
    let samples = paired_samples(state, q, returns);
    let bins = cfg
        .state_bins(samples.iter().map(|s| s.0))
        .ok_or_else(|| Error::argument("no overlapping valid state/return samples"))?;
    ConditionalDensity::from_samples(&samples, bins, cfg.n_return_bins, cfg.min_samples_per_bin)
}

/// Conditional expected return and risk per state bin; `None` where the
/// bin is below the support threshold.
pub fn conditional_stats(density: &ConditionalDensity) -> Vec<Option<BinStats>> {
    (0..density.state_bins.len())
        .map(|b| {
            if density.is_supported(b) {
                density.bin_moments(b)
            } else {
                None
            }
        })
        .collect()
}

/// One (q, τ, S-bin) entry of a risk-return table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableCell {
    pub expected_return: Option<f64>,
    pub risk: Option<f64>,
    /// `r̂ / Δr`; undefined for unsupported cells and zero risk.
    pub quotient: Option<f64>,
    pub samples: u64,
}

impl TableCell {
    pub fn from_stats(stats: Option<BinStats>, samples: u64) -> Self {
        match stats {
            Some(s) => Self {
                expected_return: Some(s.expected_return),
                risk: Some(s.risk),
                quotient: (s.risk > 0.0).then(|| s.expected_return / s.risk),
                samples,
            },
            None => Self {
                expected_return: None,
                risk: None,
                quotient: None,
                samples,
            },
        }
    }

    pub fn is_supported(&self) -> bool {
        self.expected_return.is_some()
    }
}

/// Conditional statistics over a (q, τ) grid on a shared state axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReturnTable {
    orders: Vec<usize>,
    taus: Vec<usize>,
    state_centers: Vec<f64>,
    /// `cells[(qi * taus.len() + ti) * n_bins + b]`.
    cells: Vec<TableCell>,
}

impl RiskReturnTable {
    pub fn from_cells(
        orders: Vec<usize>,
        taus: Vec<usize>,
        state_centers: Vec<f64>,
        cells: Vec<TableCell>,
    ) -> Result<Self> {
        if orders.is_empty() || taus.is_empty() || state_centers.is_empty() {
            return Err(Error::argument("risk-return table needs a non-empty grid"));
        }
        if cells.len() != orders.len() * taus.len() * state_centers.len() {
            return Err(Error::Schema(format!(
                "expected {} table cells, got {}",
                orders.len() * taus.len() * state_centers.len(),
                cells.len()
            )));
        }
        Ok(Self {
            orders,
            taus,
            state_centers,
            cells,
        })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn state_centers(&self) -> &[f64] {
        &self.state_centers
    }

    pub fn n_state_bins(&self) -> usize {
        self.state_centers.len()
    }

    fn offset(&self, qi: usize, ti: usize) -> usize {
        (qi * self.taus.len() + ti) * self.n_state_bins()
    }

    /// Cell for order `q`, horizon `tau` and state bin `b`.
    pub fn cell(&self, q: usize, tau: usize, b: usize) -> Option<&TableCell> {
        let qi = self.orders.iter().position(|&o| o == q)?;
        let ti = self.taus.iter().position(|&t| t == tau)?;
        self.cells.get(self.offset(qi, ti) + b)
    }

    /// All state bins of one (q, τ) slice.
    pub fn slice(&self, q: usize, tau: usize) -> Option<&[TableCell]> {
        let qi = self.orders.iter().position(|&o| o == q)?;
        let ti = self.taus.iter().position(|&t| t == tau)?;
        let start = self.offset(qi, ti);
        Some(&self.cells[start..start + self.n_state_bins()])
    }

    /// `(q, τ, bin, cell)` in grid order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, &TableCell)> + '_ {
        let nb = self.n_state_bins();
        let nt = self.taus.len();
        self.cells.iter().enumerate().map(move |(i, c)| {
            let b = i % nb;
            let ti = (i / nb) % nt;
            let qi = i / (nb * nt);
            (self.orders[qi], self.taus[ti], b, c)
        })
    }
}

/// Everything computed for one (q, τ) pair.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub density: ConditionalDensity,
    pub stats: Vec<Option<BinStats>>,
}

/// Fills the (q, τ) grid. State bins are shared across the grid: either the
/// configured range or the span of every state order involved.
pub fn build_table(
    field: &VelocityField,
    power: &PowerSeries,
    basis: &SpectralBasis,
    lags: &LagSet,
    q_range: &[usize],
    tau_range: &[usize],
    cfg: &BinningConfig,
) -> Result<RiskReturnTable> {
    let states = compute_states(field, basis, lags, q_range)?;
    build_table_from_states(&states, power, tau_range, cfg).map(|(t, _)| t)
}

/// Grid evaluation from precomputed states. Also returns the per-cell
/// densities in grid order (`q` outer, `τ` inner).
pub fn build_table_from_states(
    states: &StateSeries,
    power: &PowerSeries,
    tau_range: &[usize],
    cfg: &BinningConfig,
) -> Result<(RiskReturnTable, Vec<CellResult>)> {
    cfg.validate()?;
    let q_range = states.orders().to_vec();
    if q_range.is_empty() {
        return Err(Error::argument("q_range must be non-empty"));
    }
    if tau_range.is_empty() {
        return Err(Error::argument("tau_range must be non-empty"));
    }
    if power.len() != states.n_steps() {
        return Err(Error::Schema(format!(
            "power series has {} steps, velocity field has {}",
            power.len(),
            states.n_steps()
        )));
    }
    let returns: Vec<ReturnSeries> = tau_range
        .iter()
        .map(|&tau| compute_returns(power, tau))
        .collect::<Result<_>>()?;
    let state_bins = cfg
        .state_bins(q_range.iter().flat_map(|&q| states.iter(q).map(|(_, s)| s)))
        .ok_or_else(|| Error::argument("state series is empty"))?;

    let nt = tau_range.len();
    let results = map_indexed(q_range.len() * nt, |idx| {
        let (qi, ti) = (idx / nt, idx % nt);
        let samples = paired_samples(states, q_range[qi], &returns[ti]);
        let density = ConditionalDensity::from_samples(
            &samples,
            state_bins,
            cfg.n_return_bins,
            cfg.min_samples_per_bin,
        )
        .map_err(|e| {
            Error::argument(format!("q={}, tau={}: {e}", q_range[qi], tau_range[ti]))
        })?;
        let stats = conditional_stats(&density);
        Ok(CellResult { density, stats })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let cells = results
        .iter()
        .flat_map(|r| {
            r.stats
                .iter()
                .zip(r.density.state_counts())
                .map(|(s, &n)| TableCell::from_stats(*s, n))
        })
        .collect();
    let centers = (0..state_bins.len()).map(|b| state_bins.center(b)).collect();
    let table = RiskReturnTable::from_cells(q_range, tau_range.to_vec(), centers, cells)?;
    Ok((table, results))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEntry {
    pub q_max: usize,
    pub tau_max: usize,
    pub quotient: f64,
}

impl PolicyEntry {
    pub fn abs_quotient(&self) -> f64 {
        self.quotient.abs()
    }
}

/// Per-state-bin optimum of |r̂ / Δr| over the table's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicy {
    pub state_centers: Vec<f64>,
    pub entries: Vec<Option<PolicyEntry>>,
    pub orders: Vec<usize>,
    pub taus: Vec<usize>,
}

impl OptimalPolicy {
    /// Bins without any usable cell.
    pub fn excluded_bins(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(b, e)| e.is_none().then_some(b))
            .collect()
    }

    /// `(bin, entry)` for bins that have an optimum.
    pub fn covered(&self) -> impl Iterator<Item = (usize, &PolicyEntry)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(b, e)| e.as_ref().map(|e| (b, e)))
    }
}

/// Argmax of |quotient| per state bin; ties go to the smallest τ, then the
/// smallest q.
pub fn optimize_policy(table: &RiskReturnTable) -> OptimalPolicy {
    let mut taus: Vec<(usize, usize)> = table.taus.iter().copied().enumerate().collect();
    taus.sort_by_key(|&(_, t)| t);
    let mut orders: Vec<(usize, usize)> = table.orders.iter().copied().enumerate().collect();
    orders.sort_by_key(|&(_, q)| q);

    let entries = (0..table.n_state_bins())
        .map(|b| {
            let mut best: Option<PolicyEntry> = None;
            for &(ti, tau) in &taus {
                for &(qi, q) in &orders {
                    let cell = &table.cells[table.offset(qi, ti) + b];
                    let Some(quotient) = cell.quotient else { continue };
                    if best.is_none_or(|e| quotient.abs() > e.quotient.abs()) {
                        best = Some(PolicyEntry {
                            q_max: q,
                            tau_max: tau,
                            quotient,
                        });
                    }
                }
            }
            best
        })
        .collect();
    OptimalPolicy {
        state_centers: table.state_centers.clone(),
        entries,
        orders: table.orders.clone(),
        taus: table.taus.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn returns_from(power: &[f64], lag: usize) -> ReturnSeries {
        compute_returns(&PowerSeries::new(power.to_vec()).unwrap(), lag).unwrap()
    }

    #[test]
    fn unconditional_hand_values() {
        let r = returns_from(&[10.0, 12.0, 9.0], 1);
        let (m, v) = unconditional_stats(&r).unwrap();
        assert!((m - -0.025).abs() < 1e-15);
        assert!((v - 0.050625).abs() < 1e-15);
    }

    #[test]
    fn unconditional_constant_and_symmetric() {
        // P grows by 10% each step: constant return 0.1.
        let p: Vec<f64> = (0..101).map(|i| 1.1f64.powi(i)).collect();
        let (m, v) = unconditional_stats(&returns_from(&p, 1)).unwrap();
        assert!((m - 0.1).abs() < 1e-12 && v < 1e-24);

        let r = returns_from(&[2.0, 3.0, 1.5], 1);
        assert_eq!(r.valid_values().collect::<Vec<_>>(), vec![0.5, -0.5]);
        assert_eq!(unconditional_stats(&r).unwrap().0, 0.0);
    }

    #[test]
    fn unconditional_needs_two_samples() {
        let r = returns_from(&[1.0, 2.0], 1);
        assert!(unconditional_stats(&r).is_err());
    }

    fn one_bin_density(samples: &[(f64, f64)], nr: usize) -> ConditionalDensity {
        ConditionalDensity::from_samples(samples, EqualWidthBins::new(0.0, 1.0, 2), nr, 1)
            .unwrap()
    }

    #[test]
    fn single_state_bin_is_return_histogram() {
        let samples: Vec<(f64, f64)> = (0..40).map(|i| (0.1, (i % 7) as f64)).collect();
        let d = one_bin_density(&samples, 7);
        assert_eq!(d.marginal_state(), vec![1.0, 0.0]);
        assert_eq!(d.conditional(0).unwrap(), d.marginal_return());
        assert_eq!(d.conditional(1), None);
        assert_eq!(d.support_flags(), vec![true, false]);
    }

    #[test]
    fn concentrated_row_has_zero_risk() {
        let samples = vec![(0.2, 0.3); 10];
        let d = one_bin_density(&samples, 5);
        let s = conditional_stats(&d)[0].unwrap();
        assert_eq!(s.expected_return, 0.3);
        assert_eq!(s.risk, 0.0);
        assert_eq!(TableCell::from_stats(Some(s), 10).quotient, None);
    }

    #[test]
    fn symmetric_pair_of_bins() {
        let a = 0.4;
        // Two bins centered at -a and +a with equal mass.
        let bins = EqualWidthBins::new(-2.0 * a, 2.0 * a, 2);
        let (mean, var) = moments(&[0.5, 0.5], &bins);
        assert!(mean.abs() < 1e-15);
        assert!((var - a * a).abs() < 1e-15);

        // Samples at ±a land on centers ±2a/3 of three bins spanning [-a, a].
        let samples: Vec<(f64, f64)> = (0..20)
            .map(|i| (0.2, if i % 2 == 0 { a } else { -a }))
            .collect();
        let s = conditional_stats(&one_bin_density(&samples, 3))[0].unwrap();
        assert!(s.expected_return.abs() < 1e-15);
        assert!((s.risk - (2.0 * a / 3.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn unsupported_bins_flagged() {
        let mut samples = vec![(0.1, 0.0); 5];
        samples.extend(vec![(0.9, 1.0); 50]);
        let d = ConditionalDensity::from_samples(
            &samples,
            EqualWidthBins::new(0.0, 1.0, 2),
            3,
            30,
        )
        .unwrap();
        let stats = conditional_stats(&d);
        assert!(stats[0].is_none());
        assert!(stats[1].is_some());
        assert!(d.bin_moments(0).is_some());
    }

    #[test]
    fn density_integrates_to_one() {
        let samples: Vec<(f64, f64)> = (0..300)
            .map(|i| ((i % 17) as f64, ((i * 7) % 13) as f64 - 6.0))
            .collect();
        let d = ConditionalDensity::from_samples(&samples, EqualWidthBins::new(0.0, 16.0, 8), 9, 1)
            .unwrap();
        let cell = d.state_bins().width() * d.return_bins().width();
        let total: f64 = d.joint_density().iter().map(|p| p * cell).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for b in 0..8 {
            if let Some(row) = d.conditional(b) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn table(quotients: &[(usize, usize, Option<f64>)]) -> RiskReturnTable {
        let mut orders: Vec<usize> = quotients.iter().map(|c| c.0).collect();
        orders.sort();
        orders.dedup();
        let mut taus: Vec<usize> = quotients.iter().map(|c| c.1).collect();
        taus.sort();
        taus.dedup();
        let mut cells = Vec::new();
        for &q in &orders {
            for &t in &taus {
                let quotient = quotients
                    .iter()
                    .find(|c| c.0 == q && c.1 == t)
                    .and_then(|c| c.2);
                cells.push(TableCell {
                    expected_return: quotient,
                    risk: quotient.map(|_| 1.0),
                    quotient,
                    samples: 50,
                });
            }
        }
        RiskReturnTable::from_cells(orders, taus, vec![1.0], cells).unwrap()
    }

    #[test]
    fn single_cell_wins() {
        let p = optimize_policy(&table(&[(1, 1, Some(0.2))]));
        assert_eq!(
            p.entries[0],
            Some(PolicyEntry {
                q_max: 1,
                tau_max: 1,
                quotient: 0.2
            })
        );
    }

    #[test]
    fn absolute_value_decides() {
        let p = optimize_policy(&table(&[(1, 1, Some(0.5)), (2, 1, Some(-0.7))]));
        let e = p.entries[0].unwrap();
        assert_eq!((e.q_max, e.tau_max, e.quotient), (2, 1, -0.7));
    }

    #[test]
    fn ties_prefer_small_tau_then_small_q() {
        let p = optimize_policy(&table(&[
            (1, 2, Some(0.5)),
            (2, 1, Some(-0.5)),
            (3, 1, Some(0.5)),
        ]));
        let e = p.entries[0].unwrap();
        assert_eq!((e.q_max, e.tau_max), (2, 1));
    }

    #[test]
    fn bins_without_cells_are_excluded() {
        let p = optimize_policy(&table(&[(1, 1, None)]));
        assert_eq!(p.excluded_bins(), vec![0]);
    }
}
