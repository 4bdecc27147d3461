//! Two-stage CHAIR training and the baseline training loops.
//!
//! Stage 1 fits the encoder and concept head (and, depending on mode, the
//! fusion head). Stage 2 freezes encoder and concept head and trains the
//! projection and classifier on randomly corrected concept vectors, one
//! correction fraction drawn uniformly from `[0, 1)` per mini-batch (or per
//! sample).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Sgd, SgdConfig, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::intervention::{self, intervene_random, InterventionValues, PercentileBasis};
use crate::model::{AnyModel, BoundLinear, ChairModel, Component, Dims, ModelKind, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Joint,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" | "seq" => Ok(Mode::Sequential),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::Validation(format!("unknown mode `{other}` (expected sequential or joint)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionSampling {
    #[default]
    PerBatch,
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub seed: u64,
    /// Follow the Stage-1 branch of the reference pseudocode literally:
    /// the class loss joins Stage 1 in sequential mode instead of joint.
    pub alg1_verbatim: bool,
    pub intervention_sampling: InterventionSampling,
    /// Weight on the concept loss when it is summed with the class loss.
    pub concept_loss_weight: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub percentile_basis: PercentileBasis,
    /// Use this correction fraction for every Stage-2 batch instead of
    /// sampling one.
    pub stage2_fixed_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Joint,
            stage1_epochs: 40,
            stage2_epochs: 40,
            batch_size: 32,
            optimizer: SgdConfig::default(),
            seed: 1,
            alg1_verbatim: false,
            intervention_sampling: InterventionSampling::PerBatch,
            concept_loss_weight: 1.0,
            hidden: 64,
            embed_dim: 32,
            percentile_basis: PercentileBasis::AllSamples,
            stage2_fixed_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs < 1 || self.stage2_epochs < 1 {
            return Err(Error::Config("epochs per stage must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(p) = self.stage2_fixed_fraction {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("stage2_fixed_fraction must be in [0, 1], got {p}")));
            }
        }
        if !(self.concept_loss_weight >= 0.0 && self.concept_loss_weight.is_finite()) {
            return Err(Error::Config("concept_loss_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Whether Stage 1 adds the class loss on the fused embedding.
    pub fn class_loss_in_stage1(&self) -> bool {
        if self.alg1_verbatim {
            self.mode == Mode::Sequential
        } else {
            self.mode == Mode::Joint
        }
    }

    pub fn dims_for(&self, data: &Dataset) -> Dims {
        Dims {
            input_dim: data.input_dim(),
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            num_concepts: data.num_concepts(),
            num_classes: data.num_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub concept_loss: f64,
    pub class_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn extend(&mut self, other: TrainReport) {
        let offset = self.epochs.len();
        self.epochs.extend(other.epochs.into_iter().map(|mut r| {
            r.epoch += offset;
            r
        }));
    }

    /// `epoch,concept_loss,class_loss,val_acc,seconds`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,concept_loss,class_loss,val_acc,seconds\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.epoch, r.concept_loss, r.class_loss, r.val_acc, r.seconds
            ));
        }
        s
    }
}

/// Seeded RNG for a named purpose within a run.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    intervention::item_rng(seed, 0x7261_696e, purpose)
}

const INIT_STREAM: u64 = 1;
const STAGE1_STREAM: u64 = 2;
const STAGE2_STREAM: u64 = 3;
const RESET_STREAM: u64 = 4;
const SAMPLE_STREAM: u64 = 5;
const BASELINE_STREAM: u64 = 6;
const BASELINE_PHASE2_STREAM: u64 = 7;

struct BatchLoss {
    total: Var,
    concept: f64,
    class: f64,
}

fn gather_x(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| data.examples[i].x.as_slice()).collect();
    Tensor::from_rows(&rows)
}

fn gather_c(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.examples[i].concepts_f64()).collect();
    Tensor::from_rows(&rows)
}

fn gather_y(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.examples[i].y).collect()
}

/// Shared mini-batch SGD loop. `loss_fn` builds the batch objective on a
/// tape where only `trainable` components receive gradients.
#[allow(clippy::too_many_arguments)]
fn run_epochs<N, F, A>(
    net: &mut N,
    data: &Dataset,
    cfg: &TrainConfig,
    trainable: &[Component],
    epochs: usize,
    stage: u8,
    shuffle_rng: &mut ChaCha8Rng,
    accuracy: A,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    N: Network,
    F: FnMut(&N, &mut Tape, &[BoundLinear], &[usize]) -> Result<BatchLoss>,
    A: Fn(&N) -> Result<f64>,
{
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    let mut sgd = Sgd::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let started = Instant::now();
        order.shuffle(shuffle_rng);
        let (mut concept_sum, mut class_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, trainable);
            let loss = loss_fn(net, &mut tape, &bound, batch)?;
            concept_sum += loss.concept * batch.len() as f64;
            class_sum += loss.class * batch.len() as f64;
            let mut grads = tape.backward(loss.total)?;
            let mut params = net.absorb_grads(&bound, &mut grads, trainable)?;
            sgd.step(&mut params)?;
        }
        let n = data.len() as f64;
        report.epochs.push(EpochRecord {
            stage,
            epoch,
            concept_loss: concept_sum / n,
            class_loss: class_sum / n,
            val_acc: accuracy(net)?,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

fn accuracy_of(model: &AnyModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in data.iter() {
        let base = model.base(&e.x)?;
        let c = base.concepts.as_ref().map(|c| c.activations.as_slice());
        hits += (model.predict(&base, c)? == e.y) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}

fn chair_accuracy(m: &ChairModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in data.iter() {
        hits += (m.predict(&e.x)? == e.y) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}

fn check_labels(data: &Dataset, dims: &Dims) -> Result<()> {
    if data.input_dim() != dims.input_dim || data.num_concepts() != dims.num_concepts {
        return Err(Error::Dimension {
            op: "train",
            left: vec![data.input_dim(), data.num_concepts()],
            right: vec![dims.input_dim, dims.num_concepts],
        });
    }
    if data.num_classes() > dims.num_classes {
        return Err(Error::Validation(format!(
            "label {} out of range for {} classes",
            data.num_classes() - 1,
            dims.num_classes
        )));
    }
    Ok(())
}

/// Initializes a CHAIR model from the run seed.
pub fn init_chair(data: &Dataset, cfg: &TrainConfig) -> Result<ChairModel> {
    let dims = cfg.dims_for(data);
    dims.validate()?;
    Ok(ChairModel::new(dims, &mut stream(cfg.seed, INIT_STREAM)))
}

/// Stage 1: concept loss on the concept logits, plus (per mode) the class
/// loss on `ψ'(z + ω(ReLU(φ(z))))`. When the class loss is off, `ω` and
/// `ψ'` are left untouched.
pub fn train_stage1(model: &mut ChairModel, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    check_labels(data, &model.dims)?;
    let with_class = cfg.class_loss_in_stage1();
    let trainable: &[Component] = if with_class {
        &[Component::Encoder, Component::ConceptHead, Component::Projection, Component::Classifier]
    } else {
        &[Component::Encoder, Component::ConceptHead]
    };
    let lambda = cfg.concept_loss_weight;
    let val = val.unwrap_or(data);
    let mut rng = stream(cfg.seed, STAGE1_STREAM);
    run_epochs(
        model,
        data,
        cfg,
        trainable,
        cfg.stage1_epochs,
        1,
        &mut rng,
        |m| chair_accuracy(m, val),
        |m, tape, bound, idx| {
            let x = tape.constant(&gather_x(data, idx)?);
            let out = m.tape_forward(tape, bound, x, None)?;
            let concept = tape.bce_with_logits(out.concept_logits, &gather_c(data, idx)?)?;
            let class = tape.softmax_cross_entropy(out.class_logits, &gather_y(data, idx))?;
            let (cv, kv) = (tape.value(concept).data()[0], tape.value(class).data()[0]);
            let total = if with_class {
                let weighted = tape.scale(concept, lambda)?;
                tape.add(weighted, class)?
            } else {
                concept
            };
            Ok(BatchLoss {
                total,
                concept: cv,
                class: kv,
            })
        },
    )
}

/// Stage 2: encoder and concept head frozen; in sequential mode `ω` is
/// re-initialized first. Each batch corrects a random subset of concepts
/// with the intervention values and trains `ω` and `ψ'` on the class loss.
pub fn train_stage2(
    model: &mut ChairModel,
    data: &Dataset,
    values: Option<&InterventionValues>,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let values = values.ok_or_else(|| Error::State("stage 2 requires intervention values from a completed stage 1".into()))?;
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    check_labels(data, &model.dims)?;
    if values.len() != model.dims.num_concepts {
        return Err(Error::Dimension {
            op: "train_stage2",
            left: vec![values.len()],
            right: vec![model.dims.num_concepts],
        });
    }
    if cfg.mode == Mode::Sequential {
        model.projection.reset(&mut stream(cfg.seed, RESET_STREAM));
    }
    let predicted: Vec<Vec<f64>> = data
        .iter()
        .map(|e| model.forward(&e.x).map(|f| f.concepts.activations))
        .collect::<Result<_>>()?;
    let mut sample_rng = stream(cfg.seed, SAMPLE_STREAM);
    let fixed = cfg.stage2_fixed_fraction;
    let per_sample = cfg.intervention_sampling == InterventionSampling::PerSample;
    let val = val.unwrap_or(data);
    let mut rng = stream(cfg.seed, STAGE2_STREAM);
    run_epochs(
        model,
        data,
        cfg,
        &[Component::Projection, Component::Classifier],
        cfg.stage2_epochs,
        2,
        &mut rng,
        |m| chair_accuracy(m, val),
        |m, tape, bound, idx| {
            let draw = |rng: &mut ChaCha8Rng| fixed.unwrap_or_else(|| rng.random::<f64>());
            let batch_p = draw(&mut sample_rng);
            let mut rows = Vec::with_capacity(idx.len());
            for &i in idx {
                let p = if per_sample { draw(&mut sample_rng) } else { batch_p };
                rows.push(intervene_random(&predicted[i], &data.examples[i].c, p, &mut sample_rng, values)?);
            }
            let x = tape.constant(&gather_x(data, idx)?);
            let c_hat = tape.constant(&Tensor::from_rows(&rows)?);
            let out = m.tape_forward(tape, bound, x, Some(c_hat))?;
            let class = tape.softmax_cross_entropy(out.class_logits, &gather_y(data, idx))?;
            let kv = tape.value(class).data()[0];
            Ok(BatchLoss {
                total: class,
                concept: 0.0,
                class: kv,
            })
        },
    )
}

/// Which CHAIR stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub stage1: bool,
    pub stage2: bool,
}

impl Stages {
    pub const BOTH: Stages = Stages {
        stage1: true,
        stage2: true,
    };

    pub fn as_list(&self) -> Vec<u8> {
        let mut v = Vec::new();
        if self.stage1 {
            v.push(1);
        }
        if self.stage2 {
            v.push(2);
        }
        v
    }
}

/// Result of a full CHAIR run.
#[derive(Debug, Clone)]
pub struct ChairRun {
    pub model: ChairModel,
    pub values: InterventionValues,
    pub report: TrainReport,
}

/// Stage 1, intervention values from the training data, then (optionally)
/// Stage 2.
pub fn train_chair(data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, run_stage2: bool) -> Result<ChairRun> {
    let mut model = init_chair(data, cfg)?;
    let mut report = train_stage1(&mut model, data, val, cfg)?;
    let any = AnyModel::Chair(model);
    let values = intervention::intervention_values(&any, data, cfg.percentile_basis)?;
    let AnyModel::Chair(mut model) = any else { unreachable!() };
    if run_stage2 {
        report.extend(train_stage2(&mut model, data, Some(&values), val, cfg)?);
    }
    Ok(ChairRun { model, values, report })
}

/// Trains one of the comparison models.
///
/// * `standard`: encoder + classifier on the class loss.
/// * `cbm`: sequential fits concepts, then `ψ` on frozen predicted
///   activations; joint optimizes the weighted sum of both losses.
/// * `cbm_extend`: end-to-end on both losses.
///
/// Baselines get the same total epoch budget as the two CHAIR stages.
pub fn train_baseline(kind: ModelKind, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<(AnyModel, TrainReport)> {
    cfg.validate()?;
    if kind == ModelKind::Chair {
        return Err(Error::Validation("chair is not a baseline; use train_chair".into()));
    }
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    let dims = cfg.dims_for(data);
    let mut model = AnyModel::new(kind, dims, &mut stream(cfg.seed, INIT_STREAM))?;
    let val = val.unwrap_or(data);
    let total_epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    let lambda = cfg.concept_loss_weight;
    let mut rng = stream(cfg.seed, BASELINE_STREAM);

    let report = match &mut model {
        AnyModel::Standard(m) => run_epochs(
            m,
            data,
            cfg,
            &[Component::Encoder, Component::Classifier],
            total_epochs,
            1,
            &mut rng,
            |m| accuracy_of(&AnyModel::Standard(m.clone()), val),
            |m, tape, bound, idx| {
                let x = tape.constant(&gather_x(data, idx)?);
                let (_, logits) = m.tape_forward(tape, bound, x)?;
                let class = tape.softmax_cross_entropy(logits, &gather_y(data, idx))?;
                let kv = tape.value(class).data()[0];
                Ok(BatchLoss {
                    total: class,
                    concept: 0.0,
                    class: kv,
                })
            },
        )?,
        AnyModel::Cbm(m) => {
            let acc = |m: &crate::model::CbmModel| accuracy_of(&AnyModel::Cbm(m.clone()), val);
            match cfg.mode {
                Mode::Sequential => {
                    let mut report = run_epochs(
                        m,
                        data,
                        cfg,
                        &[Component::Encoder, Component::ConceptHead],
                        cfg.stage1_epochs,
                        1,
                        &mut rng,
                        acc,
                        |m, tape, bound, idx| {
                            let x = tape.constant(&gather_x(data, idx)?);
                            let out = m.tape_forward(tape, bound, x, None)?;
                            let concept = tape.bce_with_logits(out.concept_logits, &gather_c(data, idx)?)?;
                            let class = tape.softmax_cross_entropy(out.class_logits, &gather_y(data, idx))?;
                            Ok(BatchLoss {
                                total: concept,
                                concept: tape.value(concept).data()[0],
                                class: tape.value(class).data()[0],
                            })
                        },
                    )?;
                    let mut rng2 = stream(cfg.seed, BASELINE_PHASE2_STREAM);
                    report.extend(run_epochs(
                        m,
                        data,
                        cfg,
                        &[Component::Classifier],
                        cfg.stage2_epochs,
                        2,
                        &mut rng2,
                        acc,
                        |m, tape, bound, idx| {
                            let x = tape.constant(&gather_x(data, idx)?);
                            let out = m.tape_forward(tape, bound, x, None)?;
                            let class = tape.softmax_cross_entropy(out.class_logits, &gather_y(data, idx))?;
                            Ok(BatchLoss {
                                total: class,
                                concept: 0.0,
                                class: tape.value(class).data()[0],
                            })
                        },
                    )?);
                    report
                }
                Mode::Joint => run_epochs(
                    m,
                    data,
                    cfg,
                    &[Component::Encoder, Component::ConceptHead, Component::Classifier],
                    total_epochs,
                    1,
                    &mut rng,
                    acc,
                    |m, tape, bound, idx| {
                        let x = tape.constant(&gather_x(data, idx)?);
                        let out = m.tape_forward(tape, bound, x, None)?;
                        joint_loss(tape, out.concept_logits, out.class_logits, data, idx, lambda)
                    },
                )?,
            }
        }
        AnyModel::CbmExtend(m) => run_epochs(
            m,
            data,
            cfg,
            &[
                Component::Encoder,
                Component::ConceptHead,
                Component::ExtendHidden,
                Component::Classifier,
            ],
            total_epochs,
            1,
            &mut rng,
            |m| accuracy_of(&AnyModel::CbmExtend(m.clone()), val),
            |m, tape, bound, idx| {
                let x = tape.constant(&gather_x(data, idx)?);
                let out = m.tape_forward(tape, bound, x, None)?;
                joint_loss(tape, out.concept_logits, out.class_logits, data, idx, lambda)
            },
        )?,
        AnyModel::Chair(_) => unreachable!(),
    };
    Ok((model, report))
}

fn joint_loss(tape: &mut Tape, concept_logits: Var, class_logits: Var, data: &Dataset, idx: &[usize], lambda: f64) -> Result<BatchLoss> {
    let concept = tape.bce_with_logits(concept_logits, &gather_c(data, idx)?)?;
    let class = tape.softmax_cross_entropy(class_logits, &gather_y(data, idx))?;
    let (cv, kv) = (tape.value(concept).data()[0], tape.value(class).data()[0]);
    let weighted = tape.scale(concept, lambda)?;
    let total = tape.add(weighted, class)?;
    Ok(BatchLoss {
        total,
        concept: cv,
        class: kv,
    })
}

/// Loss of a CHAIR model on a batch as the sum of concept and class loss,
/// recorded on `tape` with every layer trainable. Used for gradient checks.
pub fn chair_batch_loss(model: &ChairModel, tape: &mut Tape, data: &Dataset, idx: &[usize]) -> Result<(Var, Vec<BoundLinear>)> {
    let all = [Component::Encoder, Component::ConceptHead, Component::Projection, Component::Classifier];
    let bound = model.bind(tape, &all);
    let x = tape.constant(&gather_x(data, idx)?);
    let out = model.tape_forward(tape, &bound, x, None)?;
    let loss = joint_loss(tape, out.concept_logits, out.class_logits, data, idx, 1.0)?;
    Ok((loss.total, bound))
}

/// Classification accuracy on `data` under an optional per-item concept
/// override (`c_hat[i]` for item `i`).
pub fn accuracy(model: &AnyModel, data: &Dataset, c_hat: Option<&[Vec<f64>]>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("accuracy on empty data".into()));
    }
    let mut hits = 0usize;
    for (i, e) in data.iter().enumerate() {
        let base = model.base(&e.x)?;
        let logits = model.class_logits(&base, c_hat.map(|c| c[i].as_slice()))?;
        hits += (argmax(&logits) == e.y) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}
