//! Cross-scale log-log fits of the transport channels and their summaries.
//!
//! At one training step the records of all model scales are fitted as
//! `log s = D log N + c`, `log n_steps = z log N + c_z`,
//! `log v_abs = beta log N + c_beta` and `log v_rel = delta log N + c_delta`
//! by ordinary least squares on base-10 logs. Using the same scale set for
//! all four channels makes `beta = D - z` and `delta = beta - 1` hold up to
//! rounding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeResult;
use crate::error::{Error, Result};
use crate::nulls::NullVariant;

pub const MIN_SCALES: usize = 3;
pub const CLOSURE_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ROLLING_WINDOW: usize = 11;

/// One probe outcome, as stored in the temporal-dynamics files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportRecord {
    pub family: String,
    pub model_id: String,
    pub variant: NullVariant,
    pub step: u64,
    pub n_elements: u64,
    pub tau: f64,
    pub s_max: u64,
    pub n_steps: u64,
    pub ceiling_limited: bool,
    pub zero_cascade: bool,
    pub v_abs: Option<f64>,
    pub v_rel: Option<f64>,
}

impl TransportRecord {
    pub fn from_result(
        family: &str,
        model_id: &str,
        variant: NullVariant,
        step: u64,
        n_elements: u64,
        result: &CascadeResult,
    ) -> Self {
        Self {
            family: family.to_string(),
            model_id: model_id.to_string(),
            variant,
            step,
            n_elements,
            tau: result.tau,
            s_max: result.s_max,
            n_steps: result.n_steps,
            ceiling_limited: result.ceiling_limited,
            zero_cascade: result.zero_cascade,
            v_abs: result.v_abs,
            v_rel: result.v_rel,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.zero_cascade || self.ceiling_limited || self.n_steps == 0 || self.s_max == 0
    }

    /// Normalised duration `n_steps / N`.
    pub fn normalized_duration(&self) -> f64 {
        self.n_steps as f64 / self.n_elements as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// OLS of `ys` on `xs` (no transform). A constant target gives slope 0 and
/// `r2 = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "fit inputs differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < MIN_SCALES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SCALES} points to fit, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("fit inputs must be finite".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("zero variance in the scale variable".into()));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Ok(LineFit {
            slope: 0.0,
            intercept: ys[0],
            r2: 1.0,
        });
    }
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, r2 })
}

/// OLS in base-10 log-log space.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    loglog_fit_with(xs, ys, f64::log10)
}

pub fn loglog_fit_with(xs: &[f64], ys: &[f64], log: fn(f64) -> f64) -> Result<LineFit> {
    if let Some(v) = xs.iter().chain(ys).find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("log-log fit needs positive inputs, got {v}")));
    }
    let lx: Vec<f64> = xs.iter().map(|&x| log(x)).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| log(y)).collect();
    linear_fit(&lx, &ly)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScalingFit {
    pub family: String,
    pub variant: NullVariant,
    pub step: u64,
    pub scales_used: Vec<u64>,
    pub models_used: Vec<String>,
    pub n_scales: usize,
    pub d: f64,
    pub c: f64,
    pub z: f64,
    pub c_z: f64,
    pub beta: f64,
    pub c_beta: f64,
    pub delta: f64,
    pub c_delta: f64,
    pub r2_d: f64,
    pub r2_z: f64,
    pub r2_beta: f64,
    pub r2_delta: f64,
}

impl StepScalingFit {
    pub fn exponent(&self, which: Exponent) -> f64 {
        match which {
            Exponent::D => self.d,
            Exponent::Z => self.z,
            Exponent::Beta => self.beta,
            Exponent::Delta => self.delta,
        }
    }

    /// Largest closure residual `max(|beta - (D - z)|, |delta - (beta - 1)|)`.
    pub fn closure_residual(&self) -> f64 {
        (self.beta - (self.d - self.z))
            .abs()
            .max((self.delta - (self.beta - 1.0)).abs())
    }

    pub fn id(&self) -> String {
        format!("{}:{}:{}", self.family, self.variant, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exponent {
    D,
    Z,
    Beta,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Fewer than three non-degenerate scales.
    TooFewScales,
    /// Every record at the step is degenerate.
    AllDegenerate,
    /// Common-grid mode and at least one scale is degenerate.
    DegenerateScale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedStep {
    pub family: String,
    pub variant: NullVariant,
    pub step: u64,
    pub reason: SkipReason,
    pub n_records: usize,
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    Fit(StepScalingFit),
    Skipped(SkippedStep),
}

/// Fit one step from the records of all scales at that step.
pub fn fit_step(records: &[TransportRecord], require_all_scales: bool) -> Result<StepOutcome> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records to fit".into()))?;
    if records
        .iter()
        .any(|r| r.family != first.family || r.step != first.step || r.variant != first.variant)
    {
        return Err(Error::InvalidArgument(
            "records for one fit must share family, step and variant".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.n_elements) {
            return Err(Error::Data(format!(
                "duplicate scale N={} at {} step {} ({})",
                r.n_elements, r.family, r.step, r.variant
            )));
        }
    }

    let n_degenerate = records.iter().filter(|r| r.is_degenerate()).count();
    let skip = |reason| {
        Ok(StepOutcome::Skipped(SkippedStep {
            family: first.family.clone(),
            variant: first.variant,
            step: first.step,
            reason,
            n_records: records.len(),
            n_degenerate,
        }))
    };
    if n_degenerate == records.len() {
        return skip(SkipReason::AllDegenerate);
    }
    if require_all_scales && n_degenerate > 0 {
        return skip(SkipReason::DegenerateScale);
    }
    let mut clean: Vec<&TransportRecord> = records.iter().filter(|r| !r.is_degenerate()).collect();
    if clean.len() < MIN_SCALES {
        return skip(SkipReason::TooFewScales);
    }
    clean.sort_by_key(|r| r.n_elements);

    let xs: Vec<f64> = clean.iter().map(|r| r.n_elements as f64).collect();
    let s: Vec<f64> = clean.iter().map(|r| r.s_max as f64).collect();
    let n: Vec<f64> = clean.iter().map(|r| r.n_steps as f64).collect();
    let v_abs: Vec<f64> = s.iter().zip(&n).map(|(s, n)| s / n).collect();
    let v_rel: Vec<f64> = v_abs.iter().zip(&xs).map(|(v, x)| v / x).collect();

    let fd = loglog_fit(&xs, &s)?;
    let fz = loglog_fit(&xs, &n)?;
    let fb = loglog_fit(&xs, &v_abs)?;
    let fdl = loglog_fit(&xs, &v_rel)?;
    let fit = StepScalingFit {
        family: first.family.clone(),
        variant: first.variant,
        step: first.step,
        scales_used: clean.iter().map(|r| r.n_elements).collect(),
        models_used: clean.iter().map(|r| r.model_id.clone()).collect(),
        n_scales: clean.len(),
        d: fd.slope,
        c: fd.intercept,
        z: fz.slope,
        c_z: fz.intercept,
        beta: fb.slope,
        c_beta: fb.intercept,
        delta: fdl.slope,
        c_delta: fdl.intercept,
        r2_d: fd.r2,
        r2_z: fz.r2,
        r2_beta: fb.r2,
        r2_delta: fdl.r2,
    };
    if fit.closure_residual() > CLOSURE_TOLERANCE {
        return Err(Error::DegenerateFit(format!(
            "closure residual {} exceeds {CLOSURE_TOLERANCE} at {}",
            fit.closure_residual(),
            fit.id()
        )));
    }
    Ok(StepOutcome::Fit(fit))
}

/// Inclusive step interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub lo: u64,
    pub hi: u64,
}

impl StepWindow {
    pub fn new(lo: u64, hi: u64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("empty window [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, step: u64) -> bool {
        (self.lo..=self.hi).contains(&step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; `None` for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentSummary {
    pub d: MeanStd,
    pub z: MeanStd,
    pub beta: MeanStd,
    pub delta: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrelPlateau {
    pub model_id: String,
    pub n_elements: u64,
    pub mean: f64,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: StepWindow,
    /// True when no fit falls inside the window.
    pub empty: bool,
    pub n_fits: usize,
    pub fit_steps: Vec<u64>,
    pub exponents: Option<ExponentSummary>,
    pub vrel_plateaus: Vec<VrelPlateau>,
    /// Sample std over mean of the per-model plateau means.
    pub vrel_cv: Option<f64>,
    pub n_records_included: usize,
    pub n_records_degenerate: usize,
}

/// Regime summary over an inclusive step window, from unsmoothed per-step
/// fits and non-degenerate records only.
pub fn window_summary(fits: &[StepScalingFit], records: &[TransportRecord], window: StepWindow) -> Result<WindowSummary> {
    StepWindow::new(window.lo, window.hi)?;
    let mut in_window: Vec<&StepScalingFit> = fits.iter().filter(|f| window.contains(f.step)).collect();
    in_window.sort_by_key(|f| f.step);
    let collect = |e: Exponent| -> Vec<f64> { in_window.iter().map(|f| f.exponent(e)).collect() };
    let exponents = if in_window.is_empty() {
        None
    } else {
        Some(ExponentSummary {
            d: mean_std(&collect(Exponent::D)).unwrap(),
            z: mean_std(&collect(Exponent::Z)).unwrap(),
            beta: mean_std(&collect(Exponent::Beta)).unwrap(),
            delta: mean_std(&collect(Exponent::Delta)).unwrap(),
        })
    };

    let mut by_model: BTreeMap<(u64, &str), Vec<f64>> = BTreeMap::new();
    let mut n_included = 0;
    let mut n_degenerate = 0;
    for r in records.iter().filter(|r| window.contains(r.step)) {
        if r.is_degenerate() {
            n_degenerate += 1;
            continue;
        }
        if let Some(v) = r.v_rel {
            n_included += 1;
            by_model.entry((r.n_elements, r.model_id.as_str())).or_default().push(v);
        }
    }
    let vrel_plateaus: Vec<VrelPlateau> = by_model
        .into_iter()
        .map(|((n_elements, model_id), vs)| VrelPlateau {
            model_id: model_id.to_string(),
            n_elements,
            mean: vs.iter().sum::<f64>() / vs.len() as f64,
            n_records: vs.len(),
        })
        .collect();
    let plateau_means: Vec<f64> = vrel_plateaus.iter().map(|p| p.mean).collect();
    let vrel_cv = coefficient_of_variation(&plateau_means);

    Ok(WindowSummary {
        window,
        empty: in_window.is_empty(),
        n_fits: in_window.len(),
        fit_steps: in_window.iter().map(|f| f.step).collect(),
        exponents,
        vrel_plateaus,
        vrel_cv,
        n_records_included: n_included,
        n_records_degenerate: n_degenerate,
    })
}

/// Sample std / mean; `None` with fewer than two values or zero mean.
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    let ms = mean_std(values)?;
    match ms.std {
        Some(std) if ms.mean != 0.0 => Some(std / ms.mean.abs()),
        _ => None,
    }
}

/// Centred rolling median for display. Windows shrink symmetrically at the
/// ends so every window stays centred and odd.
pub fn rolling_median(series: &[(u64, f64)], window_len: usize) -> Result<Vec<(u64, f64)>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("rolling median of empty series".into()));
    }
    if window_len == 0 || window_len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window length {window_len} must be odd")));
    }
    let half = window_len / 2;
    let n = series.len();
    let mut buf = Vec::with_capacity(window_len);
    Ok((0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend(series[i - h..=i + h].iter().map(|p| p.1));
            buf.sort_by(f64::total_cmp);
            (series[i].0, buf[h])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tertile {
    pub label: String,
    pub step_lo: Option<u64>,
    pub step_hi: Option<u64>,
    pub stats: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TertileSummary {
    pub window: StepWindow,
    pub exponent: Exponent,
    /// Per-step `real - null` on the common in-window steps.
    pub per_step: Vec<(u64, f64)>,
    pub overall: MeanStd,
    pub tertiles: Vec<Tertile>,
}

/// Null-subtracted duration exponent `z_real - z_null` by tertile.
pub fn tertile_deltas(real: &[StepScalingFit], null: &[StepScalingFit], window: StepWindow) -> Result<TertileSummary> {
    tertile_deltas_for(real, null, window, Exponent::Z)
}

pub fn tertile_deltas_for(
    real: &[StepScalingFit],
    null: &[StepScalingFit],
    window: StepWindow,
    exponent: Exponent,
) -> Result<TertileSummary> {
    StepWindow::new(window.lo, window.hi)?;
    let null_by_step: BTreeMap<u64, f64> = null
        .iter()
        .filter(|f| window.contains(f.step))
        .map(|f| (f.step, f.exponent(exponent)))
        .collect();
    let mut per_step: Vec<(u64, f64)> = real
        .iter()
        .filter(|f| window.contains(f.step))
        .filter_map(|f| null_by_step.get(&f.step).map(|z0| (f.step, f.exponent(exponent) - z0)))
        .collect();
    per_step.sort_by_key(|p| p.0);
    per_step.dedup_by_key(|p| p.0);
    if per_step.is_empty() {
        return Err(Error::Data(format!(
            "no common fitted steps between real and null inside [{}, {}]",
            window.lo, window.hi
        )));
    }
    let deltas: Vec<f64> = per_step.iter().map(|p| p.1).collect();
    let overall = mean_std(&deltas).unwrap();

    let n = per_step.len();
    let mut start = 0;
    let tertiles = ["early", "mid", "late"]
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let len = n / 3 + usize::from(i < n % 3);
            let part = &per_step[start..start + len];
            start += len;
            Tertile {
                label: label.to_string(),
                step_lo: part.first().map(|p| p.0),
                step_hi: part.last().map(|p| p.0),
                stats: mean_std(&part.iter().map(|p| p.1).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(TertileSummary {
        window,
        exponent,
        per_step,
        overall,
        tertiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(model: &str, n: u64, step: u64, s: u64, steps: u64) -> TransportRecord {
        let (v_abs, v_rel) = if steps > 0 {
            (Some(s as f64 / steps as f64), Some(s as f64 / (n as f64 * steps as f64)))
        } else {
            (None, None)
        };
        TransportRecord {
            family: "fam".into(),
            model_id: model.into(),
            variant: NullVariant::Real,
            step,
            n_elements: n,
            tau: 1.0,
            s_max: s,
            n_steps: steps,
            ceiling_limited: false,
            zero_cascade: s == 0,
            v_abs,
            v_rel,
        }
    }

    fn fit_of(outcome: StepOutcome) -> StepScalingFit {
        match outcome {
            StepOutcome::Fit(f) => f,
            StepOutcome::Skipped(s) => panic!("unexpected skip {s:?}"),
        }
    }

    #[test]
    fn exact_power_law() {
        let f = loglog_fit(&[1e2, 1e3, 1e4], &[1e2, 1e3, 1e4]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_channel_convention() {
        let f = loglog_fit(&[10.0, 100.0, 1000.0], &[7.0, 7.0, 7.0]).unwrap();
        assert_eq!((f.slope, f.r2), (0.0, 1.0));
    }

    #[test]
    fn hand_derived_ols() {
        let f = linear_fit(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.intercept - 1.0 / 6.0).abs() < 1e-12);
        assert!((f.r2 - 0.75).abs() < 1e-12);
        // same case through the log path
        let f = loglog_fit(&[1.0, 10.0, 100.0], &[1.0, 10.0, 10.0]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.intercept - 1.0 / 6.0).abs() < 1e-12);
        assert!((f.r2 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert!(loglog_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(loglog_fit(&[1.0, 2.0, 0.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(loglog_fit(&[1.0, 2.0, 3.0], &[1.0, -2.0, 3.0]).is_err());
        assert!(matches!(
            loglog_fit(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn constructed_exact_laws() {
        // s = N, n_steps = N^0.2 exactly on N = 2^(5k)
        let recs: Vec<_> = (1..=4u32)
            .map(|k| {
                let n = 1u64 << (5 * k);
                record(&format!("m{k}"), n, 10, n, 1u64 << k)
            })
            .collect();
        let f = fit_of(fit_step(&recs, true).unwrap());
        assert!((f.d - 1.0).abs() < 1e-12);
        assert!((f.z - 0.2).abs() < 1e-12);
        assert!((f.beta - 0.8).abs() < 1e-12);
        assert!((f.delta + 0.2).abs() < 1e-12);
        assert_eq!(f.n_scales, 4);
        assert!(f.closure_residual() <= CLOSURE_TOLERANCE);
    }

    #[test]
    fn degenerate_scale_rules() {
        let recs = vec![
            record("a", 100, 1, 10, 2),
            record("b", 200, 1, 0, 0),
            record("c", 400, 1, 40, 2),
        ];
        let out = fit_step(&recs, false).unwrap();
        assert!(matches!(out, StepOutcome::Skipped(SkippedStep { reason: SkipReason::TooFewScales, .. })));

        let mut recs = vec![
            record("a", 100, 1, 10, 2),
            record("b", 200, 1, 20, 2),
            record("c", 400, 1, 40, 2),
            record("d", 800, 1, 80, 500),
        ];
        recs[3].ceiling_limited = true;
        let out = fit_step(&recs, true).unwrap();
        assert!(matches!(out, StepOutcome::Skipped(SkippedStep { reason: SkipReason::DegenerateScale, .. })));
        let f = fit_of(fit_step(&recs, false).unwrap());
        assert_eq!(f.scales_used, vec![100, 200, 400]);

        let all_zero = vec![record("a", 100, 1, 0, 0), record("b", 200, 1, 0, 0), record("c", 300, 1, 0, 0)];
        let out = fit_step(&all_zero, false).unwrap();
        assert!(matches!(out, StepOutcome::Skipped(SkippedStep { reason: SkipReason::AllDegenerate, .. })));
    }

    #[test]
    fn duplicate_scale_is_data_error() {
        let recs = vec![record("a", 100, 1, 10, 2), record("b", 100, 1, 20, 2), record("c", 400, 1, 40, 2)];
        assert!(matches!(fit_step(&recs, false), Err(Error::Data(_))));
    }

    #[test]
    fn window_summary_arithmetic() {
        let base = fit_of(fit_step(
            &[record("a", 100, 1, 100, 1), record("b", 1000, 1, 1000, 1), record("c", 10000, 1, 10000, 1)],
            true,
        )
        .unwrap());
        let fits: Vec<_> = [(1u64, 1.0), (2, 1.1), (3, 0.9), (50, 5.0)]
            .iter()
            .map(|&(step, d)| StepScalingFit { step, d, ..base.clone() })
            .collect();
        let recs = vec![
            record("a", 100, 1, 100, 1),   // v_rel 1
            record("b", 10, 2, 20, 1),     // v_rel 2
            record("c", 10, 3, 30, 1),     // v_rel 3
            record("c2", 10, 3, 0, 0),     // degenerate, excluded
        ];
        let w = window_summary(&fits, &recs, StepWindow::new(1, 10).unwrap()).unwrap();
        let d = w.exponents.unwrap().d;
        assert!((d.mean - 1.0).abs() < 1e-12);
        assert!((d.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(w.n_fits, 3);
        assert!((w.vrel_cv.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(w.n_records_degenerate, 1);

        let empty = window_summary(&fits, &recs, StepWindow::new(100, 200).unwrap()).unwrap();
        assert!(empty.empty);
        assert!(empty.exponents.is_none());
    }

    #[test]
    fn rolling_median_cases() {
        let flat: Vec<(u64, f64)> = (0..20).map(|i| (i, 3.0)).collect();
        assert_eq!(rolling_median(&flat, 11).unwrap(), flat);

        let mut spiky = flat.clone();
        spiky[10].1 = 100.0;
        assert_eq!(rolling_median(&spiky, 11).unwrap()[10].1, 3.0);

        assert_eq!(rolling_median(&[(5, 2.5)], 11).unwrap(), vec![(5, 2.5)]);
        assert!(rolling_median(&[], 11).is_err());
        assert!(rolling_median(&flat, 10).is_err());
    }

    #[test]
    fn tertiles() {
        let base = fit_of(fit_step(
            &[record("a", 100, 1, 100, 1), record("b", 1000, 1, 1000, 1), record("c", 10000, 1, 10000, 1)],
            true,
        )
        .unwrap());
        let real: Vec<_> = (1..=10u64).map(|s| StepScalingFit { step: s, z: 0.3, ..base.clone() }).collect();
        let null: Vec<_> = (1..=10u64).map(|s| StepScalingFit { step: s, z: 0.2, ..base.clone() }).collect();
        let w = StepWindow::new(1, 10).unwrap();
        let t = tertile_deltas(&real, &null, w).unwrap();
        let sizes: Vec<usize> = t.tertiles.iter().map(|t| t.stats.unwrap().n).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        for tt in &t.tertiles {
            let s = tt.stats.unwrap();
            assert!((s.mean - 0.1).abs() < 1e-12);
            assert!(s.std.unwrap().abs() < 1e-12);
        }
        let same = tertile_deltas(&real, &real, w).unwrap();
        assert!(same.tertiles.iter().all(|t| t.stats.unwrap().mean == 0.0));
        assert!(tertile_deltas(&real, &null[..0], w).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn slope_is_log_base_invariant(
                ys in prop::collection::vec(0.01f64..1e6, 3..8),
            ) {
                let xs: Vec<f64> = (0..ys.len()).map(|i| 10f64.powi(i as i32 + 2)).collect();
                let a = loglog_fit(&xs, &ys).unwrap();
                let b = loglog_fit_with(&xs, &ys, f64::ln).unwrap();
                prop_assert!((a.slope - b.slope).abs() < 1e-12);
                prop_assert!((a.r2 - b.r2).abs() < 1e-12);
            }

            #[test]
            fn closure_holds(
                sizes in prop::collection::vec((1u64..1_000_000, 1u64..500), 3..6),
            ) {
                let recs: Vec<_> = sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &(s, n))| record(&format!("m{i}"), 1000 << i, 7, s, n))
                    .collect();
                if let StepOutcome::Fit(f) = fit_step(&recs, true).unwrap() {
                    prop_assert!((f.beta - (f.d - f.z)).abs() <= CLOSURE_TOLERANCE);
                    prop_assert!((f.delta - (f.beta - 1.0)).abs() <= CLOSURE_TOLERANCE);
                }
            }
        }
    }
}
