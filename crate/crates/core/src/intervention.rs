//! Intervention values and concept correction.
//!
//! A corrected concept is overwritten with a fixed activation level: the
//! 95th percentile of that concept's activation over the training set when
//! the concept is present, the 5th percentile when it is absent.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::AnyModel;

pub const HIGH_PERCENTILE: u32 = 95;
pub const LOW_PERCENTILE: u32 = 5;

/// Per-concept activation levels substituted on correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionValues {
    pub high: Vec<f64>,
    pub low: Vec<f64>,
}

impl InterventionValues {
    pub fn new(high: Vec<f64>, low: Vec<f64>) -> Result<Self> {
        let v = InterventionValues { high, low };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.high.len() != self.low.len() {
            return Err(Error::Dimension {
                op: "intervention_values",
                left: vec![self.high.len()],
                right: vec![self.low.len()],
            });
        }
        for (k, (h, l)) in self.high.iter().zip(&self.low).enumerate() {
            if !h.is_finite() || !l.is_finite() {
                return Err(Error::Validation(format!("non-finite intervention value for concept {k}")));
            }
            if h < l {
                return Err(Error::Validation(format!(
                    "intervention high {h} < low {l} for concept {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }
}

/// Which samples feed each concept's percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileBasis {
    /// Every training sample, regardless of ground truth.
    #[default]
    AllSamples,
    /// High level from samples where the concept is present, low level
    /// from samples where it is absent. Falls back to all samples for a
    /// concept lacking either population.
    ConditionedOnTruth,
}

/// Nearest-rank percentile of an ascending slice: element
/// `ceil(pct·n/100) − 1`, clamped to the valid range.
pub fn nearest_rank(sorted: &[f64], pct: u32) -> f64 {
    let n = sorted.len();
    let rank = (pct as usize * n).div_ceil(100);
    sorted[rank.saturating_sub(1).min(n - 1)]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Intervention values from precomputed activations (`n × K`), with the
/// matching ground truth when `basis` conditions on it.
pub fn values_from_activations(
    activations: &[Vec<f64>],
    truth: &[Vec<u8>],
    basis: PercentileBasis,
) -> Result<InterventionValues> {
    let Some(first) = activations.first() else {
        return Err(Error::Validation("intervention values need at least one sample".into()));
    };
    let k = first.len();
    if activations.iter().any(|a| a.len() != k) {
        return Err(Error::Validation("ragged activation rows".into()));
    }
    let mut high = Vec::with_capacity(k);
    let mut low = Vec::with_capacity(k);
    for j in 0..k {
        let all = sorted(activations.iter().map(|a| a[j]).collect());
        let (mut h, mut l) = (nearest_rank(&all, HIGH_PERCENTILE), nearest_rank(&all, LOW_PERCENTILE));
        if basis == PercentileBasis::ConditionedOnTruth {
            if truth.len() != activations.len() {
                return Err(Error::Validation("conditioned percentiles need ground truth for every sample".into()));
            }
            let pick = |bit: u8| -> Vec<f64> {
                sorted(
                    activations
                        .iter()
                        .zip(truth)
                        .filter(|(_, t)| t[j] == bit)
                        .map(|(a, _)| a[j])
                        .collect(),
                )
            };
            let (pos, neg) = (pick(1), pick(0));
            if !pos.is_empty() && !neg.is_empty() {
                let (ch, cl) = (nearest_rank(&pos, HIGH_PERCENTILE), nearest_rank(&neg, LOW_PERCENTILE));
                if ch >= cl {
                    (h, l) = (ch, cl);
                }
            }
        }
        high.push(h);
        low.push(l);
    }
    InterventionValues::new(high, low)
}

/// Runs the model's concept pathway over `data` and takes percentiles of
/// the activations.
pub fn intervention_values(model: &AnyModel, data: &Dataset, basis: PercentileBasis) -> Result<InterventionValues> {
    if data.is_empty() {
        return Err(Error::Validation("intervention values need a non-empty dataset".into()));
    }
    let mut acts = Vec::with_capacity(data.len());
    for e in data.iter() {
        let base = model.base(&e.x)?;
        let c = base
            .concepts
            .ok_or_else(|| Error::State(format!("{} model has no concept head", model.kind())))?;
        acts.push(c.activations);
    }
    let truth: Vec<Vec<u8>> = data.iter().map(|e| e.c.clone()).collect();
    values_from_activations(&acts, &truth, basis)
}

/// How to correct a predicted concept vector.
#[derive(Debug, Clone, PartialEq)]
pub enum InterventionSpec {
    /// Correct a uniformly random subset of `⌊fraction·K⌋` concepts using
    /// ground truth.
    Random { fraction: f64, seed: u64 },
    /// Force the listed concepts to the given truth values.
    Explicit(BTreeMap<usize, bool>),
}

/// `⌊fraction·K⌋`, tolerant of representation error just below an integer.
pub fn subset_size(fraction: f64, k: usize) -> usize {
    (((fraction * k as f64) + 1e-9).floor() as usize).min(k)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Validation(format!("intervention fraction must be in [0, 1], got {fraction}")));
    }
    Ok(())
}

fn check_lengths(c_pred: &[f64], values: &InterventionValues) -> Result<()> {
    if c_pred.len() != values.len() {
        return Err(Error::Dimension {
            op: "concept_intervention",
            left: vec![c_pred.len()],
            right: vec![values.len()],
        });
    }
    Ok(())
}

/// Random-subset correction drawing the subset from `rng`.
pub fn intervene_random<R: Rng + ?Sized>(
    c_pred: &[f64],
    c_true: &[u8],
    fraction: f64,
    rng: &mut R,
    values: &InterventionValues,
) -> Result<Vec<f64>> {
    check_fraction(fraction)?;
    check_lengths(c_pred, values)?;
    if c_true.len() != c_pred.len() {
        return Err(Error::Dimension {
            op: "concept_intervention",
            left: vec![c_pred.len()],
            right: vec![c_true.len()],
        });
    }
    let k = c_pred.len();
    let m = subset_size(fraction, k);
    let mut out = c_pred.to_vec();
    if m == 0 {
        return Ok(out);
    }
    for i in index::sample(rng, k, m) {
        out[i] = if c_true[i] == 1 { values.high[i] } else { values.low[i] };
    }
    Ok(out)
}

/// Overwrites exactly the listed concepts.
pub fn intervene_explicit(
    c_pred: &[f64],
    forced: &BTreeMap<usize, bool>,
    values: &InterventionValues,
) -> Result<Vec<f64>> {
    check_lengths(c_pred, values)?;
    let mut out = c_pred.to_vec();
    for (&i, &present) in forced {
        if i >= out.len() {
            return Err(Error::Validation(format!(
                "concept index {i} out of range for {} concepts",
                out.len()
            )));
        }
        out[i] = if present { values.high[i] } else { values.low[i] };
    }
    Ok(out)
}

/// Applies `spec` to predicted activations. `c_true` is required for
/// random specs.
pub fn concept_intervention(
    c_pred: &[f64],
    c_true: Option<&[u8]>,
    spec: &InterventionSpec,
    values: &InterventionValues,
) -> Result<Vec<f64>> {
    match spec {
        InterventionSpec::Random { fraction, seed } => {
            let truth = c_true.ok_or_else(|| Error::Validation("random intervention needs ground-truth concepts".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            intervene_random(c_pred, truth, *fraction, &mut rng, values)
        }
        InterventionSpec::Explicit(forced) => intervene_explicit(c_pred, forced, values),
    }
}

/// Independent RNG stream per `(seed, stream, item)` so that per-item
/// draws do not depend on evaluation order.
pub fn item_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ stream) ^ item))
}
