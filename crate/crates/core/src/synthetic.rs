//! Synthetic wind farms: correlated Ornstein–Uhlenbeck velocity deviations
//! around a mean wind, and total power from a piecewise-cubic power curve.
//!
//! Random numbers come from ChaCha8 seeded with the scenario seed; normal
//! variates use `rand_distr::StandardNormal` (ziggurat). Per step the
//! generator draws all x innovations, then all y innovations, in turbine
//! order. The stream is platform independent, so a seed fixes the dataset.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::timeseries::{PowerSeries, VelocityField, DEFAULT_SAMPLE_INTERVAL};

/// Per-turbine power curve: zero below cut-in, cubic ramp, flat at rated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCurve {
    pub cut_in: f64,
    pub rated_speed: f64,
    /// kW
    pub rated_power: f64,
}

impl Default for PowerCurve {
    fn default() -> Self {
        Self {
            cut_in: 3.5,
            rated_speed: 13.0,
            rated_power: 2000.0,
        }
    }
}

impl PowerCurve {
    pub fn power(&self, speed: f64) -> f64 {
        if speed < self.cut_in {
            0.0
        } else if speed >= self.rated_speed {
            self.rated_power
        } else {
            let lo = self.cut_in.powi(3);
            self.rated_power * (speed.powi(3) - lo) / (self.rated_speed.powi(3) - lo)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarmScenario {
    pub n_turbines: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Decay length of the cross-turbine correlation, in turbine-index
    /// units. `f64::INFINITY` synchronizes every turbine.
    pub correlation_length: f64,
    /// m/s, `x + i·y`.
    pub mean_wind: Complex64,
    /// Mean-reversion rate per step.
    pub ou_theta: f64,
    /// Innovation scale, m/s per sqrt(step).
    pub ou_sigma: f64,
    pub power_curve: PowerCurve,
    /// Seconds between samples.
    pub sample_interval: f64,
}

impl Default for FarmScenario {
    fn default() -> Self {
        Self {
            n_turbines: 10,
            n_steps: 50_000,
            seed: 42,
            correlation_length: 3.0,
            mean_wind: Complex64::new(9.0, 2.0),
            ou_theta: 0.02,
            ou_sigma: 0.4,
            power_curve: PowerCurve::default(),
            sample_interval: DEFAULT_SAMPLE_INTERVAL,
        }
    }
}

impl FarmScenario {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_turbines < 1 {
            problems.push("n_turbines must be at least 1");
        }
        if self.n_steps < 2 {
            problems.push("n_steps must be at least 2");
        }
        if !(self.correlation_length > 0.0) {
            problems.push("correlation_length must be positive");
        }
        if !(self.mean_wind.re.is_finite() && self.mean_wind.im.is_finite()) {
            problems.push("mean_wind must be finite");
        }
        if !(self.ou_theta > 0.0 && self.ou_theta.is_finite()) {
            problems.push("ou_theta must be positive");
        }
        if !(self.ou_sigma >= 0.0 && self.ou_sigma.is_finite()) {
            problems.push("ou_sigma must be non-negative");
        }
        let pc = &self.power_curve;
        if !(pc.cut_in >= 0.0 && pc.cut_in < pc.rated_speed && pc.rated_speed.is_finite()) {
            problems.push("power curve needs 0 <= cut_in < rated_speed");
        }
        if !(pc.rated_power > 0.0 && pc.rated_power.is_finite()) {
            problems.push("rated_power must be positive");
        }
        if !(self.sample_interval > 0.0) {
            problems.push("sample_interval must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::argument(problems.join("; ")))
        }
    }

    /// Target correlation between turbines `i` and `j`.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        if self.correlation_length.is_infinite() {
            1.0
        } else {
            (-(i.abs_diff(j) as f64) / self.correlation_length).exp()
        }
    }

    /// Correlation matrix imposed on the innovations.
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_turbines, self.n_turbines, |i, j| {
            self.correlation(i, j)
        })
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = a` for positive semidefinite
/// `a`. Columns whose pivot vanishes (rank deficiency) are left at zero.
pub fn semidefinite_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let tol = 1e-12 * a.diagonal().iter().fold(0.0f64, |m, &d| m.max(d.abs()));
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / pivot;
        }
    }
    l
}

fn correlated(l: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
    }
}

/// Generates the velocity field and total power of a scenario.
pub fn generate(scn: &FarmScenario) -> Result<(VelocityField, PowerSeries)> {
    scn.validate()?;
    let (nw, nt) = (scn.n_turbines, scn.n_steps);
    let factor = semidefinite_cholesky(&scn.correlation_matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);

    let decay = (-scn.ou_theta).exp();
    let stationary_sd = scn.ou_sigma / (2.0 * scn.ou_theta).sqrt();
    let step_sd = stationary_sd * (1.0 - decay * decay).sqrt();

    let mut zx = vec![0.0; nw];
    let mut zy = vec![0.0; nw];
    let mut ex = vec![0.0; nw];
    let mut ey = vec![0.0; nw];
    let mut draw = |rng: &mut ChaCha8Rng, ex: &mut [f64], ey: &mut [f64]| {
        for z in zx.iter_mut().chain(zy.iter_mut()) {
            *z = rng.sample(StandardNormal);
        }
        correlated(&factor, &zx, ex);
        correlated(&factor, &zy, ey);
    };

    // Start from the stationary distribution.
    draw(&mut rng, &mut ex, &mut ey);
    let mut dev_x: Vec<f64> = ex.iter().map(|e| stationary_sd * e).collect();
    let mut dev_y: Vec<f64> = ey.iter().map(|e| stationary_sd * e).collect();

    let mut values = vec![Complex64::new(0.0, 0.0); nw * nt];
    let mut power = vec![0.0; nt];
    for t in 0..nt {
        if t > 0 {
            draw(&mut rng, &mut ex, &mut ey);
            for n in 0..nw {
                dev_x[n] = decay * dev_x[n] + step_sd * ex[n];
                dev_y[n] = decay * dev_y[n] + step_sd * ey[n];
            }
        }
        let mut total = 0.0;
        for n in 0..nw {
            let v = scn.mean_wind + Complex64::new(dev_x[n], dev_y[n]);
            values[n * nt + t] = v;
            total += scn.power_curve.power(v.norm());
        }
        power[t] = total;
    }

    let field = VelocityField::new(nw, nt, values)?.with_sample_interval(scn.sample_interval);
    Ok((field, PowerSeries::new(power)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> FarmScenario {
        FarmScenario {
            n_turbines: 4,
            n_steps: 1000,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, pa) = generate(&small(42)).unwrap();
        let (b, pb) = generate(&small(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = generate(&small(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sigma_is_constant() {
        let scn = FarmScenario {
            ou_sigma: 0.0,
            ..small(1)
        };
        let (f, p) = generate(&scn).unwrap();
        assert!(f.values().iter().all(|v| *v == scn.mean_wind));
        assert!(p.values().iter().all(|&x| x == p.values()[0]));
    }

    #[test]
    fn power_bounded() {
        let scn = FarmScenario {
            ou_sigma: 2.0,
            ..small(5)
        };
        let (_, p) = generate(&scn).unwrap();
        let cap = 4.0 * scn.power_curve.rated_power;
        assert!(p.values().iter().all(|&x| (0.0..=cap).contains(&x)));
    }

    #[test]
    fn power_curve_shape() {
        let pc = PowerCurve::default();
        assert_eq!(pc.power(0.0), 0.0);
        assert_eq!(pc.power(3.4), 0.0);
        assert_eq!(pc.power(3.5), 0.0);
        assert_eq!(pc.power(13.0), 2000.0);
        assert_eq!(pc.power(30.0), 2000.0);
        assert!(pc.power(8.0) > 0.0 && pc.power(8.0) < 2000.0);
    }

    #[test]
    fn cholesky_reproduces_matrix() {
        for l in [0.5, 3.0, f64::INFINITY] {
            let scn = FarmScenario {
                correlation_length: l,
                ..small(0)
            };
            let r = scn.correlation_matrix();
            let f = semidefinite_cholesky(&r);
            let back = &f * f.transpose();
            assert!((back - r).abs().max() < 1e-10, "L = {l}");
        }
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let bad = [
            FarmScenario {
                ou_theta: 0.0,
                ..small(0)
            },
            FarmScenario {
                power_curve: PowerCurve {
                    cut_in: 14.0,
                    ..Default::default()
                },
                ..small(0)
            },
            FarmScenario {
                n_steps: 1,
                ..small(0)
            },
            FarmScenario {
                correlation_length: 0.0,
                ..small(0)
            },
        ];
        for scn in bad {
            assert!(matches!(generate(&scn), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn adjacent_correlation_matches_target() {
        let scn = FarmScenario {
            n_turbines: 3,
            n_steps: 20_000,
            ou_theta: 0.5,
            correlation_length: 2.0,
            seed: 9,
            ..Default::default()
        };
        let (f, _) = generate(&scn).unwrap();
        let corr = |a: &[Complex64], b: &[Complex64]| {
            let n = a.len() as f64;
            let (ma, mb) = (
                a.iter().map(|v| v.re).sum::<f64>() / n,
                b.iter().map(|v| v.re).sum::<f64>() / n,
            );
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x.re - ma) * (y.re - mb)).sum();
            let va: f64 = a.iter().map(|x| (x.re - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y.re - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let target = scn.correlation(0, 1);
        for n in 0..2 {
            let c = corr(f.turbine(n), f.turbine(n + 1));
            assert!((c - target).abs() <= 0.05, "{c} vs {target}");
        }
    }

    #[test]
    fn synchronized_turbines_are_identical() {
        let scn = FarmScenario {
            correlation_length: f64::INFINITY,
            ..small(3)
        };
        let (f, _) = generate(&scn).unwrap();
        for n in 1..4 {
            assert_eq!(f.turbine(0), f.turbine(n));
        }
    }
}
