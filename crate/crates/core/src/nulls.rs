//! Matched null controls and the distribution/assignment decomposition.
//!
//! Each checkpoint gets exactly one realisation of each null, seeded with
//! `base_seed + step`. The three variants draw from separate ChaCha8
//! streams derived from that seed and the variant tag, see
//! [`crate::rng::mix_seed`].
//!
//! * N0: i.i.d. standard normal.
//! * N1: i.i.d. normal with the real field's mean and population std.
//! * N2: uniform random permutation of the real values.
//!
//! Gaussian draws use the ziggurat sampler of `rand_distr`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::snapshot::{mean_and_population_std, FieldKind, FieldSnapshot, SnapshotMeta};

pub const DEFAULT_NULL_BASE_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullVariant {
    Real,
    N0,
    N1,
    N2,
}

impl NullVariant {
    pub const ALL: [NullVariant; 4] = [NullVariant::Real, NullVariant::N0, NullVariant::N1, NullVariant::N2];

    pub fn tag(self) -> &'static str {
        match self {
            NullVariant::Real => "real",
            NullVariant::N0 => "n0",
            NullVariant::N1 => "n1",
            NullVariant::N2 => "n2",
        }
    }

    pub fn field_kind(self) -> Option<FieldKind> {
        match self {
            NullVariant::Real => None,
            NullVariant::N0 => Some(FieldKind::NullN0),
            NullVariant::N1 => Some(FieldKind::NullN1),
            NullVariant::N2 => Some(FieldKind::NullN2),
        }
    }
}

impl std::str::FromStr for NullVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NullVariant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown null variant {s:?}")))
    }
}

impl std::fmt::Display for NullVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Checkpoint seed `base_seed + step`.
pub fn checkpoint_seed(base_seed: u64, step: u64) -> u64 {
    base_seed.wrapping_add(step)
}

/// Stream seed for one variant at one checkpoint.
pub fn variant_stream_seed(checkpoint_seed: u64, variant: NullVariant) -> u64 {
    rng::mix_seed(checkpoint_seed, &[rng::label_tag("null"), rng::label_tag(variant.tag())])
}

/// Mean and population standard deviation that parameterise N1.
pub fn n1_parameters(values: &[f32]) -> (f64, f64) {
    mean_and_population_std(values)
}

pub fn generate_null(real: &FieldSnapshot, variant: NullVariant, base_seed: u64) -> Result<FieldSnapshot> {
    let kind = variant
        .field_kind()
        .ok_or_else(|| Error::InvalidArgument("the real variant is not a null".into()))?;
    if real.is_empty() {
        return Err(Error::InvalidArgument("cannot build a null for an empty field".into()));
    }
    let m = real.manifest();
    let seed = checkpoint_seed(base_seed, m.step);
    let mut rng = rng::stream(variant_stream_seed(seed, variant));
    let n = real.len();

    let values: Vec<f32> = match variant {
        NullVariant::N0 => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect(),
        NullVariant::N1 => {
            let (mean, std) = n1_parameters(real.values());
            let dist = Normal::new(mean, std)
                .map_err(|e| Error::InvalidArgument(format!("N1 parameters ({mean}, {std}): {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        NullVariant::N2 => {
            let mut v = real.values().to_vec();
            v.shuffle(&mut rng);
            v
        }
        NullVariant::Real => unreachable!(),
    };

    FieldSnapshot::new(
        SnapshotMeta {
            family: m.family.clone(),
            model_id: m.model_id.clone(),
            field_kind: kind,
            step: m.step,
            seed: Some(seed),
            source: format!("{} null of {}:{}", variant.tag(), m.model_id, m.checksum),
        },
        values,
    )
}

/// Split `real - n0` into a marginal-distribution part `n2 - n0` and an
/// assignment part `real - n2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullDecomposition {
    pub total: f64,
    pub dist: f64,
    pub assign: f64,
}

/// `total` is formed as `dist + assign` so the identity is exact in
/// floating point; it differs from `x_real - x_n0` by at most rounding.
pub fn decompose(x_real: f64, x_n0: f64, x_n2: f64) -> Result<NullDecomposition> {
    if !(x_real.is_finite() && x_n0.is_finite() && x_n2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "decomposition inputs must be finite: ({x_real}, {x_n0}, {x_n2})"
        )));
    }
    let dist = x_n2 - x_n0;
    let assign = x_real - x_n2;
    Ok(NullDecomposition {
        total: dist + assign,
        dist,
        assign,
    })
}
