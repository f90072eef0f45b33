//! Raw data model: the complex velocity field, the farm power series and
//! the relative power return derived from it.

mod io;

pub use io::{
    load_power_series, load_velocity_field, write_power_series, write_velocity_field,
    PowerIngest, VelocityIngest,
};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default sampling interval in seconds (ten-minute data).
pub const DEFAULT_SAMPLE_INTERVAL: f64 = 600.0;

/// Relative floor below which the power is treated as zero for returns.
pub const FLOOR_FRACTION: f64 = 1e-6;

/// Horizontal wind velocity per turbine and time step, stored turbine-major.
///
/// Each entry is `vx + i·vy` in m/s. Steps flagged as gaps hold zero and are
/// excluded from every time average that touches them.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    values: Vec<Complex64>,
    n_turbines: usize,
    n_steps: usize,
    sample_interval: f64,
    gaps: Option<Vec<bool>>,
}

impl VelocityField {
    /// Builds a field from turbine-major values (`values[n * n_steps + t]`).
    pub fn new(n_turbines: usize, n_steps: usize, values: Vec<Complex64>) -> Result<Self> {
        Self::with_gaps(n_turbines, n_steps, values, None)
    }

    pub fn with_gaps(
        n_turbines: usize,
        n_steps: usize,
        mut values: Vec<Complex64>,
        gaps: Option<Vec<bool>>,
    ) -> Result<Self> {
        if n_turbines < 1 {
            return Err(Error::Validation("velocity field needs at least one turbine".into()));
        }
        if n_steps < 2 {
            return Err(Error::Validation("velocity field needs at least two time steps".into()));
        }
        if values.len() != n_turbines * n_steps {
            return Err(Error::Schema(format!(
                "expected {} velocity entries for {n_turbines} turbines x {n_steps} steps, got {}",
                n_turbines * n_steps,
                values.len()
            )));
        }
        if let Some(g) = &gaps {
            if g.len() != n_steps {
                return Err(Error::Schema(format!(
                    "gap mask has {} entries, expected {n_steps}",
                    g.len()
                )));
            }
        }
        for n in 0..n_turbines {
            for t in 0..n_steps {
                let v = &mut values[n * n_steps + t];
                if gaps.as_ref().is_some_and(|g| g[t]) {
                    *v = Complex64::new(0.0, 0.0);
                } else if !(v.re.is_finite() && v.im.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite velocity at turbine {}, step {t}",
                        n + 1
                    )));
                }
            }
        }
        let gaps = gaps.filter(|g| g.iter().any(|&x| x));
        Ok(Self {
            values,
            n_turbines,
            n_steps,
            sample_interval: DEFAULT_SAMPLE_INTERVAL,
            gaps,
        })
    }

    /// Builds a field from per-turbine rows.
    pub fn from_rows(rows: Vec<Vec<Complex64>>) -> Result<Self> {
        let n_turbines = rows.len();
        let n_steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_steps) {
            return Err(Error::Schema("turbine rows have unequal lengths".into()));
        }
        Self::new(n_turbines, n_steps, rows.into_iter().flatten().collect())
    }

    pub fn with_sample_interval(mut self, seconds: f64) -> Self {
        self.sample_interval = seconds;
        self
    }

    pub fn n_turbines(&self) -> usize {
        self.n_turbines
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    #[inline]
    pub fn get(&self, turbine: usize, step: usize) -> Complex64 {
        self.values[turbine * self.n_steps + step]
    }

    /// The full time series of one turbine.
    pub fn turbine(&self, turbine: usize) -> &[Complex64] {
        &self.values[turbine * self.n_steps..(turbine + 1) * self.n_steps]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    #[inline]
    pub fn is_gap(&self, step: usize) -> bool {
        self.gaps.as_ref().is_some_and(|g| g[step])
    }

    pub fn has_gaps(&self) -> bool {
        self.gaps.is_some()
    }

    pub fn gap_mask(&self) -> Option<&[bool]> {
        self.gaps.as_deref()
    }

    /// Mean of one turbine over all non-gap steps.
    pub fn turbine_mean(&self, turbine: usize) -> Complex64 {
        let mut sum = Complex64::new(0.0, 0.0);
        let mut count = 0usize;
        for (t, v) in self.turbine(turbine).iter().enumerate() {
            if !self.is_gap(t) {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            sum
        } else {
            sum / count as f64
        }
    }

    /// A copy with every velocity multiplied by a real factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Total farm power per time step, in kW.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    values: Vec<f64>,
    floor_epsilon: f64,
    gaps: Option<Vec<bool>>,
}

impl PowerSeries {
    /// Builds a power series with the default floor of `1e-6 × max(P)`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::with_gaps(values, None)
    }

    pub fn with_gaps(mut values: Vec<f64>, gaps: Option<Vec<bool>>) -> Result<Self> {
        if let Some(g) = &gaps {
            if g.len() != values.len() {
                return Err(Error::Schema(format!(
                    "gap mask has {} entries, expected {}",
                    g.len(),
                    values.len()
                )));
            }
        }
        for (t, p) in values.iter_mut().enumerate() {
            if gaps.as_ref().is_some_and(|g| g[t]) {
                *p = 0.0;
            } else if !p.is_finite() {
                return Err(Error::Validation(format!("non-finite power at step {t}")));
            } else if *p < 0.0 {
                return Err(Error::Validation(format!("negative power {p} at step {t}")));
            }
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        let gaps = gaps.filter(|g| g.iter().any(|&x| x));
        Ok(Self {
            values,
            floor_epsilon: FLOOR_FRACTION * max,
            gaps,
        })
    }

    pub fn with_floor(mut self, floor_epsilon: f64) -> Self {
        self.floor_epsilon = floor_epsilon;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn floor_epsilon(&self) -> f64 {
        self.floor_epsilon
    }

    #[inline]
    pub fn is_gap(&self, step: usize) -> bool {
        self.gaps.as_ref().is_some_and(|g| g[step])
    }

    pub fn gap_mask(&self) -> Option<&[bool]> {
        self.gaps.as_deref()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|p| p * factor).collect(),
            floor_epsilon: self.floor_epsilon * factor,
            gaps: self.gaps.clone(),
        }
    }
}

/// Relative power change over a fixed horizon, one entry per start step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    values: Vec<f64>,
    lag: usize,
    valid: Vec<bool>,
}

impl ReturnSeries {
    /// Return starting at `step`, if defined there.
    #[inline]
    pub fn get(&self, step: usize) -> Option<f64> {
        match self.valid.get(step) {
            Some(true) => Some(self.values[step]),
            _ => None,
        }
    }

    /// Raw values; entries not marked valid are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid values in step order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.valid)
            .filter_map(|(&v, &ok)| ok.then_some(v))
    }
}

/// `r(t) = (P(t+lag) - P(t)) / P(t)` for every start step with a usable
/// denominator.
pub fn compute_returns(power: &PowerSeries, lag: usize) -> Result<ReturnSeries> {
    let n = power.len();
    if lag == 0 || lag >= n {
        return Err(Error::argument(format!(
            "return lag {lag} must lie in 1..{n} for a series of {n} steps"
        )));
    }
    let p = power.values();
    let eps = power.floor_epsilon();
    let len = n - lag;
    let mut values = vec![f64::NAN; len];
    let mut valid = vec![false; len];
    for t in 0..len {
        if power.is_gap(t) || power.is_gap(t + lag) {
            continue;
        }
        let base = p[t];
        if base >= eps && base > 0.0 {
            values[t] = (p[t + lag] - base) / base;
            valid[t] = true;
        }
    }
    Ok(ReturnSeries { values, lag, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn returns_hand_arithmetic() {
        let p = PowerSeries::new(vec![10.0, 12.0, 9.0]).unwrap();
        let r = compute_returns(&p, 1).unwrap();
        assert_eq!(r.len(), 2);
        assert_abs_diff_eq!(r.get(0).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r.get(1).unwrap(), -0.25, epsilon = 1e-15);
    }

    #[test]
    fn constant_power_zero_return() {
        let p = PowerSeries::new(vec![5.0; 3]).unwrap();
        let r = compute_returns(&p, 1).unwrap();
        assert_eq!(r.valid_values().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn floor_guards_division() {
        let p = PowerSeries::new(vec![0.0, 4.0, 8.0]).unwrap().with_floor(0.1);
        let r = compute_returns(&p, 1).unwrap();
        assert_eq!(r.get(0), None);
        assert_eq!(r.get(1), Some(1.0));
    }

    #[test]
    fn all_zero_power_has_no_returns() {
        let p = PowerSeries::new(vec![0.0; 4]).unwrap();
        assert_eq!(p.floor_epsilon(), 0.0);
        assert_eq!(compute_returns(&p, 1).unwrap().valid_count(), 0);
    }

    #[test]
    fn lag_out_of_range() {
        let p = PowerSeries::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(compute_returns(&p, 0), Err(Error::Argument(_))));
        assert!(matches!(compute_returns(&p, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn negative_power_rejected() {
        assert!(matches!(
            PowerSeries::new(vec![1.0, -1.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn gap_steps_invalidate_returns() {
        let p = PowerSeries::with_gaps(
            vec![1.0, 2.0, f64::NAN, 4.0],
            Some(vec![false, false, true, false]),
        )
        .unwrap();
        let r = compute_returns(&p, 1).unwrap();
        assert_eq!(r.valid_mask(), &[true, false, false]);
    }

    #[test]
    fn velocity_field_rejects_nan() {
        let mut vals = vec![Complex64::new(1.0, 0.0); 6];
        vals[4] = Complex64::new(f64::NAN, 0.0);
        let err = VelocityField::new(2, 3, vals).unwrap_err();
        assert!(err.to_string().contains("turbine 2, step 1"), "{err}");
    }

    #[test]
    fn velocity_field_shape_checks() {
        assert!(VelocityField::new(0, 3, vec![]).is_err());
        assert!(VelocityField::new(1, 1, vec![Complex64::new(0.0, 0.0)]).is_err());
        assert!(matches!(
            VelocityField::new(2, 3, vec![Complex64::new(0.0, 0.0); 5]),
            Err(Error::Schema(_))
        ));
    }

    proptest! {
        #[test]
        fn returns_are_scale_free(
            p in prop::collection::vec(0.0f64..1e4, 3..60),
            c in 1e-3f64..1e3,
            lag in 1usize..3,
        ) {
            prop_assume!(lag < p.len());
            let base = PowerSeries::new(p.clone()).unwrap();
            let scaled = base.scaled(c);
            let a = compute_returns(&base, lag).unwrap();
            let b = compute_returns(&scaled, lag).unwrap();
            prop_assert_eq!(a.valid_mask(), b.valid_mask());
            for (x, y) in a.valid_values().zip(b.valid_values()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn valid_count_matches_floor(
            p in prop::collection::vec(0.0f64..10.0, 3..60),
            lag in 1usize..3,
        ) {
            prop_assume!(lag < p.len());
            let s = PowerSeries::new(p.clone()).unwrap();
            let eps = s.floor_epsilon();
            let r = compute_returns(&s, lag).unwrap();
            let expected = p[..p.len() - lag].iter().filter(|&&x| x >= eps && x > 0.0).count();
            prop_assert_eq!(r.valid_count(), expected);
        }

        #[test]
        fn constant_positive_power_has_zero_returns(
            level in 1e-3f64..1e5,
            n in 3usize..40,
            lag in 1usize..3,
        ) {
            let s = PowerSeries::new(vec![level; n]).unwrap();
            let r = compute_returns(&s, lag).unwrap();
            prop_assert!(r.valid_values().all(|x| x == 0.0));
            prop_assert_eq!(r.valid_count(), n - lag);
        }
    }
}
