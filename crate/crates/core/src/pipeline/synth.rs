//! Synthetic snapshot families: one model per configured scale, one field
//! per (scale, step).

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, LogNormal, StandardNormal};

use super::config::{RunConfig, SynthGenerator};
use crate::error::{Error, Result};
use crate::rng;
use crate::snapshot::{snapshot_paths, write_snapshot, FieldKind, FieldSnapshot, SnapshotMeta};

pub fn model_id_for(family: &str, n: u64) -> String {
    format!("{family}-n{n}")
}

pub fn snapshot_name(model_id: &str, step: u64) -> String {
    format!("{model_id}_step{step:08}")
}

/// Values of one synthetic field, a pure function of its arguments.
pub fn synth_values(generator: SynthGenerator, sigma: f64, n: u64, seed: u64, step: u64) -> Result<Vec<f32>> {
    let mut rng = rng::stream(rng::mix_seed(seed, &[rng::label_tag("synth"), n, step]));
    Ok(match generator {
        SynthGenerator::Gaussian => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect(),
        SynthGenerator::Lognormal => {
            let dist = LogNormal::new(0.0, sigma).map_err(|e| Error::Config(format!("lognormal: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
    })
}

/// Write the synthetic family into `root`. Returns the manifest paths.
pub fn cmd_synth(config: &RunConfig, root: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let synth = config
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("synth section missing".into()))?;
    if config.scales.is_empty() {
        return Err(Error::Config("synth needs a scales list".into()));
    }

    let mut jobs = Vec::new();
    for &n in &config.scales {
        let model_id = model_id_for(&config.family, n);
        for &step in &synth.steps {
            let dir = root.join(&model_id);
            let name = snapshot_name(&model_id, step);
            let (data, manifest) = snapshot_paths(&dir, &name);
            if !force && (data.exists() || manifest.exists()) {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    manifest.display()
                )));
            }
            jobs.push((n, step, model_id.clone(), dir, name, manifest));
        }
    }

    let mut written = Vec::with_capacity(jobs.len());
    for (n, step, model_id, dir, name, manifest) in jobs {
        let values = synth_values(synth.generator, synth.lognormal_sigma, n, synth.seed, step)?;
        let generator = match synth.generator {
            SynthGenerator::Gaussian => "gaussian".to_string(),
            SynthGenerator::Lognormal => format!("lognormal(sigma={})", synth.lognormal_sigma),
        };
        let snap = FieldSnapshot::new(
            SnapshotMeta {
                family: config.family.clone(),
                model_id,
                field_kind: FieldKind::Synthetic,
                step,
                seed: Some(synth.seed),
                source: format!("synthetic {generator}"),
            },
            values,
        )?;
        write_snapshot(&snap, &dir, &name)?;
        log::debug!("wrote {}", manifest.display());
        written.push(manifest);
    }
    Ok(written)
}
