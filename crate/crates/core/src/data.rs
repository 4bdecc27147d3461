//! Synthetic concept-driven datasets, splits, and JSONL interchange.
//!
//! Every class owns a distinct binary concept signature. An example's
//! concepts are its class signature with independent bit flips, and its
//! features are a fixed random linear mixing of those concepts plus
//! Gaussian noise. Class identity is therefore recoverable from concepts,
//! which is what makes concept correction useful for retrieval.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled example: features `x`, binary concepts `c`, class `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub x: Vec<f64>,
    pub c: Vec<u8>,
    pub y: usize,
}

impl Example {
    pub fn concepts_f64(&self) -> Vec<f64> {
        self.c.iter().map(|&b| b as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn num_concepts(&self) -> usize {
        self.examples.first().map_or(0, |e| e.c.len())
    }

    /// One past the largest label.
    pub fn num_classes(&self) -> usize {
        self.examples.iter().map(|e| e.y + 1).max().unwrap_or(0)
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }
}

/// Generator settings. `SynthConfig::default()` is the `synth-v1` benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::num_concepts")]
    pub num_concepts: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::samples_per_class")]
    pub samples_per_class: usize,
    /// Probability that a concept bit is flipped away from the class signature.
    #[serde(default = "defaults::concept_noise")]
    pub concept_noise: f64,
    /// Standard deviation of additive feature noise.
    #[serde(default = "defaults::feature_noise")]
    pub feature_noise: f64,
    /// Standard deviation of the entries of the concept-to-feature mixing matrix.
    #[serde(default = "defaults::mixing_scale")]
    pub mixing_scale: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

mod defaults {
    pub fn num_classes() -> usize {
        32
    }
    pub fn num_concepts() -> usize {
        12
    }
    pub fn input_dim() -> usize {
        32
    }
    pub fn samples_per_class() -> usize {
        30
    }
    pub fn concept_noise() -> f64 {
        0.05
    }
    pub fn feature_noise() -> f64 {
        0.1
    }
    pub fn mixing_scale() -> f64 {
        0.08
    }
    pub fn seed() -> u64 {
        1
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: defaults::num_classes(),
            num_concepts: defaults::num_concepts(),
            input_dim: defaults::input_dim(),
            samples_per_class: defaults::samples_per_class(),
            concept_noise: defaults::concept_noise(),
            feature_noise: defaults::feature_noise(),
            mixing_scale: defaults::mixing_scale(),
            seed: defaults::seed(),
        }
    }
}

impl SynthConfig {
    pub const BENCHMARK_NAME: &'static str = "synth-v1";

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.num_concepts < 1 || self.input_dim < 1 || self.samples_per_class < 1 {
            return Err(Error::Config(
                "num_classes, num_concepts, input_dim and samples_per_class must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.concept_noise) {
            return Err(Error::Config(format!(
                "concept_noise must lie in [0, 0.5), got {}",
                self.concept_noise
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config(format!(
                "feature_noise must be finite and >= 0, got {}",
                self.feature_noise
            )));
        }
        if !(self.mixing_scale > 0.0 && self.mixing_scale.is_finite()) {
            return Err(Error::Config(format!(
                "mixing_scale must be finite and > 0, got {}",
                self.mixing_scale
            )));
        }
        if self.input_dim < self.num_concepts {
            return Err(Error::Config(format!(
                "input_dim ({}) must be >= num_concepts ({}) for a full-column-rank mixing matrix",
                self.input_dim, self.num_concepts
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

const SIGNATURE_RETRIES_PER_CLASS: usize = 1000;
const MIXING_RETRIES: usize = 16;

/// Numerical rank of a column-major set of vectors via modified Gram-Schmidt.
fn column_rank(cols: &[Vec<f64>]) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.clone();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        if norm > 1e-8 * scale {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

/// Deterministically generates a dataset from `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.num_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut signatures = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        let mut found = None;
        for _ in 0..SIGNATURE_RETRIES_PER_CLASS {
            let sig: Vec<u8> = (0..k).map(|_| rng.random_bool(0.5) as u8).collect();
            if seen.insert(sig.clone()) {
                found = Some(sig);
                break;
            }
        }
        let Some(sig) = found else {
            return Err(Error::Config(format!(
                "could not draw a distinct concept signature for class {class} after \
                 {SIGNATURE_RETRIES_PER_CLASS} attempts; increase num_concepts (K={k})"
            )));
        };
        signatures.push(sig);
    }

    // Mixing matrix stored as K columns of length input_dim.
    let mut columns = None;
    for _ in 0..MIXING_RETRIES {
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..cfg.input_dim)
                    .map(|_| cfg.mixing_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        if column_rank(&cols) == k {
            columns = Some(cols);
            break;
        }
    }
    let columns = columns.ok_or_else(|| Error::Config("mixing matrix is rank deficient".into()))?;

    let mut examples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    let mut id = 0u64;
    for (y, sig) in signatures.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let c: Vec<u8> = sig
                .iter()
                .map(|&b| if rng.random_bool(cfg.concept_noise) { 1 - b } else { b })
                .collect();
            let mut x = vec![0.0; cfg.input_dim];
            for (col, &bit) in columns.iter().zip(&c) {
                if bit == 1 {
                    x.iter_mut().zip(col).for_each(|(xi, a)| *xi += a);
                }
            }
            for xi in x.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *xi += cfg.feature_noise * n;
            }
            examples.push(Example { id, x, c, y });
            id += 1;
        }
    }
    Ok(Dataset { examples })
}

/// Classes `[0, n/2)` for training, `[n/2, n)` held out as unseen.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSplit {
    pub train: Dataset,
    pub eval: Dataset,
    pub num_train_classes: usize,
}

/// Stratified 70/15/15 split over all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Retrieval,
    Classification { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Splits {
    Retrieval(RetrievalSplit),
    Classification(ClassificationSplit),
}

pub fn split(ds: &Dataset, protocol: Protocol) -> Result<Splits> {
    match protocol {
        Protocol::Retrieval => retrieval_split(ds).map(Splits::Retrieval),
        Protocol::Classification { seed } => classification_split(ds, seed).map(Splits::Classification),
    }
}

pub fn retrieval_split(ds: &Dataset) -> Result<RetrievalSplit> {
    let n = ds.num_classes();
    if n == 0 || n % 2 != 0 {
        return Err(Error::Validation(format!(
            "retrieval protocol needs an even, non-zero number of classes, got {n}"
        )));
    }
    let half = n / 2;
    let (train, eval): (Vec<Example>, Vec<Example>) = ds.examples.iter().cloned().partition(|e| e.y < half);
    Ok(RetrievalSplit {
        train: Dataset::new(train),
        eval: Dataset::new(eval),
        num_train_classes: half,
    })
}

pub fn classification_split(ds: &Dataset, seed: u64) -> Result<ClassificationSplit> {
    let n = ds.num_classes();
    let mut by_class: Vec<Vec<&Example>> = vec![Vec::new(); n];
    for e in &ds.examples {
        by_class[e.y].push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, members) in by_class.iter_mut().enumerate() {
        let m = members.len();
        if m == 0 {
            continue;
        }
        if m < 3 {
            return Err(Error::Validation(format!(
                "class {class} has {m} samples; the classification protocol needs at least 3"
            )));
        }
        members.shuffle(&mut rng);
        let n_val = ((0.15 * m as f64).round() as usize).max(1);
        let n_test = ((0.15 * m as f64).round() as usize).max(1);
        let n_train = m - n_val - n_test;
        train.extend(members[..n_train].iter().map(|e| (*e).clone()));
        val.extend(members[n_train..n_train + n_val].iter().map(|e| (*e).clone()));
        test.extend(members[n_train + n_val..].iter().map(|e| (*e).clone()));
    }
    Ok(ClassificationSplit {
        train: Dataset::new(train),
        val: Dataset::new(val),
        test: Dataset::new(test),
    })
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &ds.examples {
        let line = serde_json::to_string(e).expect("examples always serialize");
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct RawExample {
    id: Option<u64>,
    x: Option<Vec<f64>>,
    c: Option<Vec<f64>>,
    y: Option<usize>,
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

/// Parses JSONL from any reader; line numbers in errors are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let record = raw.id.map_or_else(|| format!("at line {lineno}"), |id| format!("id={id} (line {lineno})"));
        let missing = |field: &str| Error::Schema {
            record: record.clone(),
            message: format!("missing field `{field}`"),
        };
        let id = raw.id.ok_or_else(|| missing("id"))?;
        let x = raw.x.ok_or_else(|| missing("x"))?;
        let c_raw = raw.c.ok_or_else(|| missing("c"))?;
        let y = raw.y.ok_or_else(|| missing("y"))?;
        let mut c = Vec::with_capacity(c_raw.len());
        for (j, v) in c_raw.iter().enumerate() {
            match *v {
                0.0 => c.push(0),
                1.0 => c.push(1),
                other => {
                    return Err(Error::Schema {
                        record,
                        message: format!("concept {j} must be 0 or 1, got {other}"),
                    })
                }
            }
        }
        if let Some(first) = examples.first() {
            let first: &Example = first;
            if first.x.len() != x.len() || first.c.len() != c.len() {
                return Err(Error::Schema {
                    record,
                    message: format!(
                        "expected {} features and {} concepts, got {} and {}",
                        first.x.len(),
                        first.c.len(),
                        x.len(),
                        c.len()
                    ),
                });
            }
        }
        examples.push(Example { id, x, c, y });
    }
    Ok(Dataset { examples })
}
