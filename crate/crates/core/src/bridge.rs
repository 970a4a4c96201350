//! External-performance exponents and transport/performance correlations.
//!
//! p-values are plain two-sided Student-t values. Checkpoints along one
//! trajectory are autocorrelated, so they describe association strength and
//! are not independent-sample significance levels.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::scaling::{loglog_fit, LineFit, MIN_SCALES};

pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Residual sum of squares below this fraction of the original counts as
/// fully explained by the schedule.
pub const RESIDUAL_DEGENERACY_RATIO: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Perplexity,
    MeanAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub model_id: String,
    /// Scale used for the external fit (nominal parameter count by default).
    #[serde(alias = "n_elements", alias = "n_params", alias = "n_elements_or_params")]
    pub n: u64,
    pub step: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMetricSeries {
    pub family: String,
    pub metric_kind: MetricKind,
    pub entries: Vec<MetricEntry>,
    pub floor: f64,
}

impl ExternalMetricSeries {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0) {
            return Err(Error::InvalidArgument(format!("metric floor {} must be positive", self.floor)));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.value.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite metric value for {} at step {}",
                e.model_id, e.step
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> BTreeSet<u64> {
        self.entries.iter().map(|e| e.step).collect()
    }

    pub fn floored(&self, value: f64) -> f64 {
        value.max(self.floor)
    }
}

/// `d log(metric) / d log N` at one step. `Ok(None)` when fewer than three
/// scales are available (optionally restricted to `evaluation_line`).
pub fn fit_external_exponent(
    series: &ExternalMetricSeries,
    step: u64,
    evaluation_line: Option<&[String]>,
) -> Result<Option<LineFit>> {
    series.validate()?;
    let mut points: Vec<(u64, f64)> = series
        .entries
        .iter()
        .filter(|e| e.step == step)
        .filter(|e| evaluation_line.is_none_or(|line| line.contains(&e.model_id)))
        .map(|e| (e.n, series.floored(e.value)))
        .collect();
    points.sort_by_key(|p| p.0);
    if points.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate metric scale at step {step}")));
    }
    if points.len() < MIN_SCALES {
        return Ok(None);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    loglog_fit(&xs, &ys).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
    /// A variable had zero variance; `r` is reported as 0 and `p` as 1.
    pub degenerate: bool,
}

/// Sample Pearson correlation with a two-sided t-test p-value on n - 2
/// degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 3)?;
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { r: 0.0, p: 1.0, n, degenerate: true });
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, p: t_test_p(r, n), n, degenerate: false })
}

/// Two-sided p for correlation `r` from `n` pairs. With `nu = n - 2`,
/// `P(|T| > t) = I_{1 - r^2}(nu / 2, 1 / 2)`. Clamped away from zero.
pub fn t_test_p(r: f64, n: usize) -> f64 {
    let nu = (n - 2) as f64;
    let x = (1.0 - r * r).clamp(0.0, 1.0);
    let p = if x == 0.0 { 0.0 } else { beta_reg(nu / 2.0, 0.5, x) };
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

fn check_pair(x: &[f64], y: &[f64], min_n: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < min_n {
        return Err(Error::InvalidArgument(format!("need at least {min_n} pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("correlation inputs must be finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearWarmupLinear,
    LinearWarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_warm: u64,
    pub t_total: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= eta_min <= eta_max, got ({}, {})",
                self.eta_min, self.eta_max
            )));
        }
        if !(0 < self.t_warm && self.t_warm < self.t_total) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < t_warm < t_total, got ({}, {})",
                self.t_warm, self.t_total
            )));
        }
        Ok(())
    }
}

/// Learning rate at step `t`: linear warmup from 0, then linear or cosine
/// decay to `eta_min` at `t_total`.
pub fn reconstruct_lr(schedule: &LrSchedule, t: u64) -> Result<f64> {
    schedule.validate()?;
    if t > schedule.t_total {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside schedule range [0, {}]",
            schedule.t_total
        )));
    }
    let LrSchedule { kind, eta_max, eta_min, t_warm, t_total } = *schedule;
    if t <= t_warm {
        return Ok(eta_max * t as f64 / t_warm as f64);
    }
    let progress = (t - t_warm) as f64 / (t_total - t_warm) as f64;
    Ok(match kind {
        ScheduleKind::LinearWarmupLinear => eta_max + (eta_min - eta_max) * progress,
        ScheduleKind::LinearWarmupCosine => eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * progress).cos()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialCorrelation {
    pub r: f64,
    pub n: usize,
    /// Residualising left (almost) nothing of one variable; `r` reported as 0.
    pub degenerate: bool,
}

/// Residuals of `v` after OLS on `eta` with intercept, plus the original
/// and residual sums of squares.
fn residualize(v: &[f64], eta: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = v.len() as f64;
    let mv = v.iter().sum::<f64>() / n;
    let me = eta.iter().sum::<f64>() / n;
    let see: f64 = eta.iter().map(|e| (e - me) * (e - me)).sum();
    let sev: f64 = eta.iter().zip(v).map(|(e, x)| (e - me) * (x - mv)).sum();
    let slope = if see > 0.0 { sev / see } else { 0.0 };
    let res: Vec<f64> = v
        .iter()
        .zip(eta)
        .map(|(x, e)| (x - mv) - slope * (e - me))
        .collect();
    let ss_orig: f64 = v.iter().map(|x| (x - mv) * (x - mv)).sum();
    let ss_res: f64 = res.iter().map(|r| r * r).sum();
    (res, ss_orig, ss_res)
}

/// Pearson correlation of `x` and `y` after linearly removing `eta` from
/// both.
pub fn lr_partial_pearson(x: &[f64], y: &[f64], eta: &[f64]) -> Result<PartialCorrelation> {
    check_pair(x, y, 4)?;
    check_pair(x, eta, 4)?;
    let n = x.len();
    let (rx, ssx, ssrx) = residualize(x, eta);
    let (ry, ssy, ssry) = residualize(y, eta);
    let degenerate_x = ssx == 0.0 || ssrx < RESIDUAL_DEGENERACY_RATIO * ssx;
    let degenerate_y = ssy == 0.0 || ssry < RESIDUAL_DEGENERACY_RATIO * ssy;
    if degenerate_x || degenerate_y {
        return Ok(PartialCorrelation { r: 0.0, n, degenerate: true });
    }
    let c = pearson(&rx, &ry)?;
    Ok(PartialCorrelation { r: c.r, n, degenerate: c.degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[(u64, f64)], step: u64) -> ExternalMetricSeries {
        ExternalMetricSeries {
            family: "f".into(),
            metric_kind: MetricKind::Perplexity,
            entries: values
                .iter()
                .enumerate()
                .map(|(i, &(n, value))| MetricEntry { model_id: format!("m{i}"), n, step, value })
                .collect(),
            floor: DEFAULT_FLOOR,
        }
    }

    #[test]
    fn external_exponent_cases() {
        let s = series(&[(10_000_000, 100.0), (20_000_000, 50.0), (40_000_000, 25.0), (80_000_000, 12.5)], 3);
        let f = fit_external_exponent(&s, 3, None).unwrap().unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);

        let flat = series(&[(1, 0.4), (2, 0.4), (4, 0.4)], 1);
        assert_eq!(fit_external_exponent(&flat, 1, None).unwrap().unwrap().slope, 0.0);

        let zero = series(&[(1, 0.0), (10, 1e-5), (100, 1e-4)], 1);
        let f = fit_external_exponent(&zero, 1, None).unwrap().unwrap();
        // log10 values -6, -5, -4
        assert!((f.slope - 1.0).abs() < 1e-12);

        assert!(fit_external_exponent(&s, 99, None).unwrap().is_none());
        let line = vec!["m0".to_string(), "m1".to_string()];
        assert!(fit_external_exponent(&s, 3, Some(&line)).unwrap().is_none());
    }

    #[test]
    fn pearson_cases() {
        let c = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert!(c.p > 0.0 && c.p <= 1.0);
        let c = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((c.r + 1.0).abs() < 1e-12);
        let c = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((c.r - 0.5).abs() < 1e-12);
        // one degree of freedom: p = (2 / pi) asin(sqrt(1 - r^2)) = 2/3
        assert!((c.p - 2.0 / 3.0).abs() < 1e-12, "{}", c.p);
        let c = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(c.degenerate && c.r == 0.0);
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn t_test_p_matches_reference_table() {
        // t = 2.228 on 10 dof is the two-sided 5% point.
        let nu = 10.0f64;
        let t = 2.228138851986f64;
        let r = t / (t * t + nu).sqrt();
        assert!((t_test_p(r, 12) - 0.05).abs() < 1e-9);
        assert_eq!(t_test_p(0.0, 10), 1.0);
    }

    fn pythia_like() -> LrSchedule {
        LrSchedule {
            kind: ScheduleKind::LinearWarmupCosine,
            eta_max: 1e-3,
            eta_min: 1e-4,
            t_warm: 1430,
            t_total: 143_000,
        }
    }

    #[test]
    fn schedule_boundaries() {
        let s = pythia_like();
        assert_eq!(reconstruct_lr(&s, 1430).unwrap(), 1e-3);
        assert!((reconstruct_lr(&s, 143_000).unwrap() - 1e-4).abs() < 1e-18);
        let mid = (1430 + 143_000) / 2;
        assert!((reconstruct_lr(&s, mid).unwrap() - 5.5e-4).abs() < 1e-12);
        assert_eq!(reconstruct_lr(&s, 0).unwrap(), 0.0);
        assert!(reconstruct_lr(&s, 143_001).is_err());

        let lin = LrSchedule { kind: ScheduleKind::LinearWarmupLinear, t_warm: 100, t_total: 1100, ..s };
        assert!((reconstruct_lr(&lin, 600).unwrap() - 5.5e-4).abs() < 1e-15);
        assert!((reconstruct_lr(&lin, 1100).unwrap() - 1e-4).abs() < 1e-18);

        let bad = LrSchedule { t_warm: 0, ..s };
        assert!(reconstruct_lr(&bad, 10).is_err());
        let bad = LrSchedule { eta_min: 2e-3, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_correlation_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0];
        let raw = pearson(&x, &y).unwrap().r;

        let flat = [0.5; 5];
        let p = lr_partial_pearson(&x, &y, &flat).unwrap();
        assert!((p.r - raw).abs() < 1e-12 && !p.degenerate);

        let eta = [0.1, 0.2, 0.3, 0.4, 0.5];
        let p = lr_partial_pearson(&x, &eta, &eta).unwrap();
        assert!(p.degenerate && p.r == 0.0);

        // x, y orthogonal to the centred schedule
        let eta = [1.0, -1.0, 0.0, 1.0, -1.0];
        let x = [1.0, 1.0, -4.0, 1.0, 1.0];
        let y = [2.0, 2.0, 3.0, -2.0, -2.0];
        let raw = pearson(&x, &y).unwrap().r;
        let p = lr_partial_pearson(&x, &y, &eta).unwrap();
        assert!((p.r - raw).abs() < 1e-12);
        assert!(lr_partial_pearson(&x[..3], &y[..3], &eta[..3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pearson_symmetric_and_affine_invariant(
                pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
                a in 0.1f64..10.0, b in -50.0f64..50.0,
            ) {
                let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let c = pearson(&x, &y).unwrap();
                prop_assume!(!c.degenerate);
                let rev = pearson(&y, &x).unwrap();
                prop_assert!((c.r - rev.r).abs() < 1e-12);
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap().r - c.r).abs() < 1e-12);
            }

            #[test]
            fn partial_invariant_under_affine_schedule(
                rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..1.0), 4..30),
                a in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], b in -3.0f64..3.0,
            ) {
                let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let eta: Vec<f64> = rows.iter().map(|r| r.2).collect();
                let eta2: Vec<f64> = eta.iter().map(|e| a * e + b).collect();
                let p1 = lr_partial_pearson(&x, &y, &eta).unwrap();
                let p2 = lr_partial_pearson(&x, &y, &eta2).unwrap();
                prop_assume!(!p1.degenerate && !p2.degenerate);
                prop_assert!((p1.r - p2.r).abs() < 1e-10);
            }
        }
    }
}
