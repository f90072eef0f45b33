//! Plot-ready CSV exports. Every file starts with a `#` comment declaring
//! its columns, followed by the header row. Missing values are empty cells.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::risk::{ConditionalDensity, OptimalPolicy, RiskReturnTable, TableCell};
use crate::spectral::{mode_profile, SpectralBasis};
use crate::state::{StateSeries, StateSummary};

pub const SPECTRUM_COLUMNS: &str = "mode,eigenvalue,abs_eigenvalue,cum_fraction";
pub const PROFILE_COLUMNS: &str = "mode,turbine,lag,abs_component";
pub const STATE_COLUMNS: &str = "t,q,S";
pub const HISTOGRAM_COLUMNS: &str = "q,s_bin_center,count,density";
pub const TABLE_COLUMNS: &str = "q,tau,s_bin_center,expected_return,risk,quotient,samples";
pub const POLICY_COLUMNS: &str = "s_bin_center,q_max,tau_max,abs_quotient";
pub const DENSITY_COLUMNS: &str = "s_bin_center,r_bin_center,joint_density";

struct CsvOut<'a> {
    path: &'a Path,
    w: BufWriter<File>,
}

impl<'a> CsvOut<'a> {
    fn create(path: &'a Path, columns: &str, note: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path,
            w: BufWriter::new(file),
        };
        out.line(&format!("# columns: {columns}; {note}"))?;
        out.line(columns)?;
        Ok(out)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(self.path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_spectrum(path: impl AsRef<Path>, basis: &SpectralBasis) -> Result<()> {
    let mut out = CsvOut::create(path.as_ref(), SPECTRUM_COLUMNS, "eigenvalues by descending magnitude")?;
    for (i, (l, f)) in basis
        .eigenvalues()
        .iter()
        .zip(basis.explained_fractions())
        .enumerate()
    {
        out.line(&format!("{},{l},{},{f}", i + 1, l.abs()))?;
    }
    out.finish()
}

/// Component magnitudes of the first `n_modes` eigenvectors.
pub fn write_mode_profiles(
    path: impl AsRef<Path>,
    basis: &SpectralBasis,
    n_modes: usize,
) -> Result<()> {
    let mut out = CsvOut::create(
        path.as_ref(),
        PROFILE_COLUMNS,
        "turbine is 1-based, lag in steps",
    )?;
    for mode in 1..=n_modes.min(basis.n_retained()) {
        let p = mode_profile(basis, mode)?;
        for (k, lag) in p.lags.iter().enumerate() {
            for j in 0..p.n_turbines {
                out.line(&format!("{mode},{},{lag},{}", j + 1, p.get(j, k)))?;
            }
        }
    }
    out.finish()
}

pub fn write_states(path: impl AsRef<Path>, series: &StateSeries) -> Result<()> {
    let mut out = CsvOut::create(path.as_ref(), STATE_COLUMNS, "S in m/s")?;
    for t in series.valid_from()..series.n_steps() {
        for &q in series.orders() {
            if let Some(s) = series.value(q, t) {
                out.line(&format!("{t},{q},{s}"))?;
            }
        }
    }
    out.finish()
}

pub fn write_state_histograms(path: impl AsRef<Path>, summaries: &[StateSummary]) -> Result<()> {
    let mut out = CsvOut::create(
        path.as_ref(),
        HISTOGRAM_COLUMNS,
        "equal-width bins over each order's own range",
    )?;
    for s in summaries {
        for (b, (c, d)) in s.counts.iter().zip(s.density()).enumerate() {
            out.line(&format!("{},{},{c},{d}", s.order, s.bins.center(b)))?;
        }
    }
    out.finish()
}

pub fn write_table(path: impl AsRef<Path>, table: &RiskReturnTable) -> Result<()> {
    let mut out = CsvOut::create(
        path.as_ref(),
        TABLE_COLUMNS,
        "empty cells are unsupported or undefined",
    )?;
    for (q, tau, b, c) in table.iter() {
        out.line(&format!(
            "{q},{tau},{},{},{},{},{}",
            table.state_centers()[b],
            opt(c.expected_return),
            opt(c.risk),
            opt(c.quotient),
            c.samples
        ))?;
    }
    out.finish()
}

/// Reads a table written by [`write_table`].
pub fn read_table(path: impl AsRef<Path>) -> Result<RiskReturnTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if header.iter().collect::<Vec<_>>().join(",") != TABLE_COLUMNS {
        return Err(Error::Schema(format!(
            "{}: header must be {TABLE_COLUMNS}",
            path.display()
        )));
    }

    let mut rows: Vec<(usize, usize, f64, TableCell)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse {what}"),
        };
        let float = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).ok_or_else(|| bad("row"))?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(&format!("column {}", i + 1)))
            }
        };
        let q = rec[0].parse().map_err(|_| bad("q"))?;
        let tau = rec[1].parse().map_err(|_| bad("tau"))?;
        let center = float(2)?.ok_or_else(|| bad("s_bin_center"))?;
        let samples = rec.get(6).ok_or_else(|| bad("row"))?.parse().map_err(|_| bad("samples"))?;
        let cell = TableCell {
            expected_return: float(3)?,
            risk: float(4)?,
            quotient: float(5)?,
            samples,
        };
        rows.push((q, tau, center, cell));
    }

    let mut orders: Vec<usize> = Vec::new();
    let mut taus: Vec<usize> = Vec::new();
    let mut centers: Vec<f64> = Vec::new();
    for &(q, tau, c, _) in &rows {
        if !orders.contains(&q) {
            orders.push(q);
        }
        if !taus.contains(&tau) {
            taus.push(tau);
        }
        if orders.len() == 1 && taus.len() == 1 {
            centers.push(c);
        }
    }
    let expected = orders.len() * taus.len() * centers.len();
    if rows.len() != expected {
        return Err(Error::Schema(format!(
            "{}: {} rows do not form a full q x tau x bin grid ({expected} expected)",
            path.display(),
            rows.len()
        )));
    }
    for (i, &(q, tau, c, _)) in rows.iter().enumerate() {
        let nb = centers.len();
        let (qi, ti, b) = (i / (nb * taus.len()), (i / nb) % taus.len(), i % nb);
        if q != orders[qi] || tau != taus[ti] || c != centers[b] {
            return Err(Error::Schema(format!(
                "{}: row {} is out of grid order",
                path.display(),
                i + 1
            )));
        }
    }
    RiskReturnTable::from_cells(orders, taus, centers, rows.into_iter().map(|r| r.3).collect())
}

pub fn write_policy(path: impl AsRef<Path>, policy: &OptimalPolicy) -> Result<()> {
    let mut out = CsvOut::create(
        path.as_ref(),
        POLICY_COLUMNS,
        "state bins without a usable cell are omitted",
    )?;
    for (b, e) in policy.covered() {
        out.line(&format!(
            "{},{},{},{}",
            policy.state_centers[b],
            e.q_max,
            e.tau_max,
            e.abs_quotient()
        ))?;
    }
    out.finish()
}

pub fn write_density(path: impl AsRef<Path>, density: &ConditionalDensity) -> Result<()> {
    let mut out = CsvOut::create(
        path.as_ref(),
        DENSITY_COLUMNS,
        "joint probability density of state and return",
    )?;
    let nr = density.return_bins().len();
    for (i, p) in density.joint_density().iter().enumerate() {
        let (b, r) = (i / nr, i % nr);
        out.line(&format!(
            "{},{},{p}",
            density.state_bins().center(b),
            density.return_bins().center(r)
        ))?;
    }
    out.finish()
}
