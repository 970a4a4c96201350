//! Fit stage: per-step cross-scale fits for every variant, window and
//! tertile summaries, and the figure-summary blocks.
//!
//! Every summary number is computed from unsmoothed per-step fits or from
//! non-degenerate records; the rolling medians in `exponent_series` are for
//! display only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bridge::BridgeReport;
use super::config::RunConfig;
use super::json::write_json;
use super::probe::{load_temporal, TemporalDynamicsFile};
use crate::error::{Error, Result};
use crate::nulls::{decompose, NullDecomposition, NullVariant};
use crate::scaling::{
    fit_step, rolling_median, tertile_deltas_for, window_summary, Exponent, SkippedStep, StepOutcome,
    StepScalingFit, StepWindow, TertileSummary, TransportRecord, WindowSummary, DEFAULT_ROLLING_WINDOW,
};

pub const SUMMARY_SCHEMA_VERSION: &str = "1";
pub const FITS_FILE: &str = "fits.json";
pub const SUMMARY_FILE: &str = "figure_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFits {
    pub variant: NullVariant,
    pub fits: Vec<StepScalingFit>,
    pub skipped: Vec<SkippedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitsFile {
    pub schema_version: String,
    pub family: String,
    pub config_hash: String,
    pub fit_config_hash: String,
    pub scales: Vec<u64>,
    pub require_all_scales: bool,
    pub variants: Vec<VariantFits>,
}

impl FitsFile {
    pub fn fits_for(&self, variant: NullVariant) -> &[StepScalingFit] {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .map(|v| v.fits.as_slice())
            .unwrap_or(&[])
    }

    pub fn total_fits(&self) -> usize {
        self.variants.iter().map(|v| v.fits.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrelPoint {
    pub step: u64,
    pub v_rel: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrelBand {
    pub model_id: String,
    pub n_elements: u64,
    pub series: Vec<VrelPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrelBands {
    pub variant: NullVariant,
    pub models: Vec<VrelBand>,
    pub window_summary: WindowSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureRow {
    pub variant: NullVariant,
    pub window_summary: WindowSummary,
    pub max_closure_residual: Option<f64>,
    pub fit_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentSeries {
    pub variant: NullVariant,
    pub steps: Vec<u64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub rolling_window: usize,
    pub d_median: Vec<f64>,
    pub z_median: Vec<f64>,
    pub beta_median: Vec<f64>,
    pub delta_median: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressibilityPoint {
    pub fit_id: String,
    pub step: u64,
    pub r2_d: f64,
    pub r2_z: f64,
    pub r2_beta: f64,
    pub r2_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullContrast {
    pub variant: NullVariant,
    pub baseline: NullVariant,
    pub tertiles: TertileSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub observable: String,
    pub real: f64,
    pub n0: f64,
    pub n2: f64,
    pub decomposition: NullDecomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSkeleton {
    /// `z - z_N0` per step and by tertile, for each variant other than N0.
    pub duration_contrasts: Vec<NullContrast>,
    /// Window means of real, N0 and N2 split into distribution and
    /// assignment parts.
    pub decompositions: Vec<DecompositionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSummary {
    pub schema_version: String,
    pub family: String,
    pub config_hash: String,
    pub fit_config_hash: String,
    pub window: StepWindow,
    pub vrel_bands: VrelBands,
    pub closure_table: Vec<ClosureRow>,
    pub exponent_series: Vec<ExponentSeries>,
    pub compressibility_map: Vec<CompressibilityPoint>,
    pub null_skeleton: NullSkeleton,
    pub bridge_panels: Option<BridgeReport>,
}

/// Records of the configured family, checked against the probe hash and
/// restricted to the configured scales.
pub fn collect_records(config: &RunConfig, files: &[TemporalDynamicsFile]) -> Result<Vec<TransportRecord>> {
    let hash = config.probe_hash();
    let mut out = Vec::new();
    for f in files.iter().filter(|f| f.family == config.family) {
        if f.config_hash != hash {
            return Err(Error::Config(format!(
                "temporal file for {} ({}) has config hash {}, current probe settings hash to {hash}",
                f.model_id, f.variant, f.config_hash
            )));
        }
        out.extend(
            f.records
                .iter()
                .filter(|r| config.scales.is_empty() || config.scales.contains(&r.n_elements))
                .cloned(),
        );
    }
    out.sort_by_key(|r| (r.variant, r.step, r.n_elements));
    Ok(out)
}

pub fn compute_fits(config: &RunConfig, records: &[TransportRecord]) -> Result<FitsFile> {
    let mut grouped: BTreeMap<NullVariant, BTreeMap<u64, Vec<TransportRecord>>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.variant).or_default().entry(r.step).or_default().push(r.clone());
    }
    let mut variants = Vec::new();
    for (variant, by_step) in grouped {
        let mut fits = Vec::new();
        let mut skipped = Vec::new();
        for recs in by_step.values() {
            match fit_step(recs, config.require_all_scales)? {
                StepOutcome::Fit(f) => fits.push(f),
                StepOutcome::Skipped(s) => skipped.push(s),
            }
        }
        variants.push(VariantFits { variant, fits, skipped });
    }
    Ok(FitsFile {
        schema_version: SUMMARY_SCHEMA_VERSION.into(),
        family: config.family.clone(),
        config_hash: config.probe_hash(),
        fit_config_hash: config.fit_hash(),
        scales: config.scales.clone(),
        require_all_scales: config.require_all_scales,
        variants,
    })
}

fn effective_window(config: &RunConfig, records: &[TransportRecord]) -> StepWindow {
    config.window().unwrap_or_else(|| {
        let lo = records.iter().map(|r| r.step).min().unwrap_or(0);
        let hi = records.iter().map(|r| r.step).max().unwrap_or(0);
        StepWindow { lo, hi }
    })
}

pub fn compute_summary(config: &RunConfig, records: &[TransportRecord], fits: &FitsFile) -> Result<FigureSummary> {
    let window = effective_window(config, records);
    let records_of = |v: NullVariant| -> Vec<TransportRecord> {
        records.iter().filter(|r| r.variant == v).cloned().collect()
    };

    let real_records = records_of(NullVariant::Real);
    let mut by_model: BTreeMap<(u64, String), Vec<VrelPoint>> = BTreeMap::new();
    for r in &real_records {
        by_model
            .entry((r.n_elements, r.model_id.clone()))
            .or_default()
            .push(VrelPoint {
                step: r.step,
                v_rel: r.v_rel,
                degenerate: r.is_degenerate(),
            });
    }
    let vrel_bands = VrelBands {
        variant: NullVariant::Real,
        models: by_model
            .into_iter()
            .map(|((n_elements, model_id), mut series)| {
                series.sort_by_key(|p| p.step);
                VrelBand { model_id, n_elements, series }
            })
            .collect(),
        window_summary: window_summary(fits.fits_for(NullVariant::Real), &real_records, window)?,
    };

    let mut closure_table = Vec::new();
    let mut exponent_series = Vec::new();
    let mut summaries: BTreeMap<NullVariant, WindowSummary> = BTreeMap::new();
    for vf in &fits.variants {
        let ws = window_summary(&vf.fits, &records_of(vf.variant), window)?;
        let in_window: Vec<&StepScalingFit> = vf.fits.iter().filter(|f| window.contains(f.step)).collect();
        closure_table.push(ClosureRow {
            variant: vf.variant,
            window_summary: ws.clone(),
            max_closure_residual: in_window.iter().map(|f| f.closure_residual()).reduce(f64::max),
            fit_ids: in_window.iter().map(|f| f.id()).collect(),
        });
        summaries.insert(vf.variant, ws);
        if !vf.fits.is_empty() {
            exponent_series.push(series_for(vf.variant, &vf.fits)?);
        }
    }

    let compressibility_map = fits
        .fits_for(NullVariant::Real)
        .iter()
        .map(|f| CompressibilityPoint {
            fit_id: f.id(),
            step: f.step,
            r2_d: f.r2_d,
            r2_z: f.r2_z,
            r2_beta: f.r2_beta,
            r2_delta: f.r2_delta,
        })
        .collect();

    let mut duration_contrasts = Vec::new();
    let n0_fits = fits.fits_for(NullVariant::N0);
    if !n0_fits.is_empty() {
        for variant in [NullVariant::Real, NullVariant::N1, NullVariant::N2] {
            let f = fits.fits_for(variant);
            if f.is_empty() {
                continue;
            }
            // an empty intersection just leaves this contrast out
            if let Ok(tertiles) = tertile_deltas_for(f, n0_fits, window, Exponent::Z) {
                duration_contrasts.push(NullContrast {
                    variant,
                    baseline: NullVariant::N0,
                    tertiles,
                });
            }
        }
    }

    let mut decompositions = Vec::new();
    if let (Some(real), Some(n0), Some(n2)) = (
        summaries.get(&NullVariant::Real),
        summaries.get(&NullVariant::N0),
        summaries.get(&NullVariant::N2),
    ) {
        let window_mean = |s: &WindowSummary, e: Exponent| {
            s.exponents.as_ref().map(|x| match e {
                Exponent::D => x.d.mean,
                Exponent::Z => x.z.mean,
                Exponent::Beta => x.beta.mean,
                Exponent::Delta => x.delta.mean,
            })
        };
        for (name, e) in [("D", Exponent::D), ("z", Exponent::Z), ("delta", Exponent::Delta)] {
            if let (Some(a), Some(b), Some(c)) = (window_mean(real, e), window_mean(n0, e), window_mean(n2, e)) {
                decompositions.push(DecompositionRow {
                    observable: name.into(),
                    real: a,
                    n0: b,
                    n2: c,
                    decomposition: decompose(a, b, c)?,
                });
            }
        }
        let vrel_mean = |s: &WindowSummary| {
            (!s.vrel_plateaus.is_empty())
                .then(|| s.vrel_plateaus.iter().map(|p| p.mean).sum::<f64>() / s.vrel_plateaus.len() as f64)
        };
        if let (Some(a), Some(b), Some(c)) = (vrel_mean(real), vrel_mean(n0), vrel_mean(n2)) {
            decompositions.push(DecompositionRow {
                observable: "v_rel".into(),
                real: a,
                n0: b,
                n2: c,
                decomposition: decompose(a, b, c)?,
            });
        }
    }

    Ok(FigureSummary {
        schema_version: SUMMARY_SCHEMA_VERSION.into(),
        family: config.family.clone(),
        config_hash: config.probe_hash(),
        fit_config_hash: config.fit_hash(),
        window,
        vrel_bands,
        closure_table,
        exponent_series,
        compressibility_map,
        null_skeleton: NullSkeleton {
            duration_contrasts,
            decompositions,
        },
        bridge_panels: None,
    })
}

fn series_for(variant: NullVariant, fits: &[StepScalingFit]) -> Result<ExponentSeries> {
    let steps: Vec<u64> = fits.iter().map(|f| f.step).collect();
    let pick = |e: Exponent| -> Vec<f64> { fits.iter().map(|f| f.exponent(e)).collect() };
    let smooth = |values: &[f64]| -> Result<Vec<f64>> {
        let pairs: Vec<(u64, f64)> = steps.iter().copied().zip(values.iter().copied()).collect();
        Ok(rolling_median(&pairs, DEFAULT_ROLLING_WINDOW)?.into_iter().map(|p| p.1).collect())
    };
    let (d, z, beta, delta) = (pick(Exponent::D), pick(Exponent::Z), pick(Exponent::Beta), pick(Exponent::Delta));
    Ok(ExponentSeries {
        variant,
        rolling_window: DEFAULT_ROLLING_WINDOW,
        d_median: smooth(&d)?,
        z_median: smooth(&z)?,
        beta_median: smooth(&beta)?,
        delta_median: smooth(&delta)?,
        steps,
        d,
        z,
        beta,
        delta,
    })
}

/// Fits and summary computed from the temporal files under `out`.
pub fn compute_fit_outputs(config: &RunConfig, out: &Path) -> Result<(FitsFile, Option<FigureSummary>)> {
    let files = load_temporal(out)?;
    let records = collect_records(config, &files)?;
    if records.is_empty() {
        return Err(Error::Data(format!("no temporal records for family {} under {}", config.family, out.display())));
    }
    let fits = compute_fits(config, &records)?;
    if fits.total_fits() == 0 {
        return Ok((fits, None));
    }
    let summary = compute_summary(config, &records, &fits)?;
    Ok((fits, Some(summary)))
}

/// Run the fit stage. With no fittable step anywhere, `fits.json` is still
/// written (holding the skip journal) and `NoFittableSteps` is returned.
pub fn cmd_fit(config: &RunConfig, out: &Path) -> Result<FitsFile> {
    let (fits, summary) = compute_fit_outputs(config, out)?;
    // a bridge report built on earlier fits is stale now
    let stale = out.join(super::bridge::BRIDGE_FILE);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    write_json(&out.join(FITS_FILE), &fits)?;
    let Some(summary) = summary else {
        return Err(Error::NoFittableSteps(format!(
            "every step of family {} was skipped; see {}",
            config.family, FITS_FILE
        )));
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    for vf in &fits.variants {
        log::info!("fit: {} {} steps fitted, {} skipped", vf.variant, vf.fits.len(), vf.skipped.len());
    }
    Ok(fits)
}
