//! CHAIR and the comparison baselines.
//!
//! All models share the same building blocks: an MLP encoder `ζ`, and
//! affine [`Linear`] heads. CHAIR adds a concept head `φ`, a projection `ω`
//! from concept activations back into embedding space, and a classifier
//! `ψ'` reading the fused embedding `z + ω(c')`.

mod baselines;
mod chair;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use baselines::{CbmExtendModel, CbmModel, StandardModel};
pub use chair::{ChairForward, ChairModel};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// Affine layer `y = W·x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)` for weights and bias.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(out_dim * in_dim);
        let b = draw(out_dim);
        Linear {
            weight: Tensor::from_parts_unchecked(vec![out_dim, in_dim], w),
            bias: Tensor::from_parts_unchecked(vec![out_dim], b),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [bout]) if out == bout => Ok(Linear { weight, bias }),
            (w, b) => Err(Error::Dimension {
                op: "linear",
                left: w.to_vec(),
                right: b.to_vec(),
            }),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn reset<R: Rng>(&mut self, rng: &mut R) {
        *self = Linear::new(self.in_dim(), self.out_dim(), rng);
    }

    /// Single-vector forward with a dimension check.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                op: "linear",
                left: vec![x.len()],
                right: vec![self.out_dim(), self.in_dim()],
            });
        }
        Ok(kernels::linear(
            x,
            1,
            self.in_dim(),
            self.weight.data(),
            self.bias.data(),
            self.out_dim(),
        ))
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in self.weight.data().iter().chain(self.bias.data()) {
            h.update(v.to_le_bytes());
        }
    }
}

/// Layer handles for a [`Linear`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

/// Stack of linear layers with ReLU between consecutive layers (none after
/// the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i < last {
                h = kernels::relu(&h);
            }
        }
        Ok(h)
    }

    pub fn tape_forward(tape: &mut Tape, layers: &[BoundLinear], x: Var) -> Result<Var> {
        let mut h = x;
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Sizes shared by every model kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.hidden, self.embed_dim, self.num_concepts, self.num_classes].contains(&0) {
            return Err(Error::Validation(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn encoder_sizes(&self) -> [usize; 4] {
        [self.input_dim, self.hidden, self.hidden, self.embed_dim]
    }
}

/// Learnable parts of a model; used for freezing and hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    ConceptHead,
    Projection,
    Classifier,
    ExtendHidden,
}

/// Common parameter plumbing for every model kind.
pub trait Network {
    /// Layers in canonical order, with their checkpoint name and component.
    fn named_layers(&self) -> Vec<(String, Component, &Linear)>;
    fn layers_mut(&mut self) -> Vec<(Component, &mut Linear)>;

    /// Records every layer on `tape`; layers of `trainable` components
    /// receive gradients, the rest are constants.
    fn bind(&self, tape: &mut Tape, trainable: &[Component]) -> Vec<BoundLinear> {
        self.named_layers()
            .into_iter()
            .map(|(_, comp, l)| {
                if trainable.contains(&comp) {
                    BoundLinear {
                        w: tape.param(&l.weight),
                        b: tape.param(&l.bias),
                    }
                } else {
                    BoundLinear {
                        w: tape.constant(&l.weight),
                        b: tape.constant(&l.bias),
                    }
                }
            })
            .collect()
    }

    /// Moves gradients from `grads` onto the trainable layers and returns
    /// their parameter tensors in a stable order.
    fn absorb_grads(
        &mut self,
        bound: &[BoundLinear],
        grads: &mut Gradients,
        trainable: &[Component],
    ) -> Result<Vec<&mut Tensor>> {
        let mut out = Vec::new();
        for ((comp, layer), b) in self.layers_mut().into_iter().zip(bound) {
            if !trainable.contains(&comp) {
                continue;
            }
            let gw = grads.take(b.w).unwrap_or_else(|| vec![0.0; layer.weight.len()]);
            let gb = grads.take(b.b).unwrap_or_else(|| vec![0.0; layer.bias.len()]);
            layer.weight.set_grad(gw)?;
            layer.bias.set_grad(gb)?;
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        Ok(out)
    }

    fn components(&self) -> Vec<Component> {
        let mut v: Vec<Component> = Vec::new();
        for (_, c, _) in self.named_layers() {
            if !v.contains(&c) {
                v.push(c);
            }
        }
        v
    }

    /// SHA-256 over the raw weights of one component (hex).
    fn component_hash(&self, component: Component) -> String {
        let mut h = Sha256::new();
        for (_, c, l) in self.named_layers() {
            if c == component {
                l.hash_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Chair,
    Standard,
    Cbm,
    CbmExtend,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Chair => "chair",
            ModelKind::Standard => "standard",
            ModelKind::Cbm => "cbm",
            ModelKind::CbmExtend => "cbm_extend",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chair" => Ok(ModelKind::Chair),
            "standard" => Ok(ModelKind::Standard),
            "cbm" => Ok(ModelKind::Cbm),
            "cbm_extend" | "cbm-extend" => Ok(ModelKind::CbmExtend),
            other => Err(Error::Validation(format!(
                "unknown model kind `{other}` (expected chair, standard, cbm or cbm_extend)"
            ))),
        }
    }
}

/// Concept-head output: raw logits and downstream activations `ReLU(logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptOutput {
    pub logits: Vec<f64>,
    pub activations: Vec<f64>,
}

/// Per-item quantities that do not depend on intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseForward {
    pub z: Vec<f64>,
    pub concepts: Option<ConceptOutput>,
}

/// Any of the four model kinds behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Chair(ChairModel),
    Standard(StandardModel),
    Cbm(CbmModel),
    CbmExtend(CbmExtendModel),
}

impl AnyModel {
    pub fn new<R: Rng>(kind: ModelKind, dims: Dims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        Ok(match kind {
            ModelKind::Chair => AnyModel::Chair(ChairModel::new(dims, rng)),
            ModelKind::Standard => AnyModel::Standard(StandardModel::new(dims, rng)),
            ModelKind::Cbm => AnyModel::Cbm(CbmModel::new(dims, rng)),
            ModelKind::CbmExtend => AnyModel::CbmExtend(CbmExtendModel::new(dims, rng)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Chair(_) => ModelKind::Chair,
            AnyModel::Standard(_) => ModelKind::Standard,
            AnyModel::Cbm(_) => ModelKind::Cbm,
            AnyModel::CbmExtend(_) => ModelKind::CbmExtend,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyModel::Chair(m) => m.dims,
            AnyModel::Standard(m) => m.dims,
            AnyModel::Cbm(m) => m.dims,
            AnyModel::CbmExtend(m) => m.dims,
        }
    }

    pub fn network(&self) -> &dyn Network {
        match self {
            AnyModel::Chair(m) => m,
            AnyModel::Standard(m) => m,
            AnyModel::Cbm(m) => m,
            AnyModel::CbmExtend(m) => m,
        }
    }

    pub fn network_mut(&mut self) -> &mut dyn Network {
        match self {
            AnyModel::Chair(m) => m,
            AnyModel::Standard(m) => m,
            AnyModel::Cbm(m) => m,
            AnyModel::CbmExtend(m) => m,
        }
    }

    pub fn has_concepts(&self) -> bool {
        !matches!(self, AnyModel::Standard(_))
    }

    fn encoder(&self) -> &Mlp {
        match self {
            AnyModel::Chair(m) => &m.encoder,
            AnyModel::Standard(m) => &m.encoder,
            AnyModel::Cbm(m) => &m.encoder,
            AnyModel::CbmExtend(m) => &m.encoder,
        }
    }

    fn concept_head(&self) -> Option<&Linear> {
        match self {
            AnyModel::Chair(m) => Some(&m.concept_head),
            AnyModel::Standard(_) => None,
            AnyModel::Cbm(m) => Some(&m.concept_head),
            AnyModel::CbmExtend(m) => Some(&m.concept_head),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims().input_dim {
            return Err(Error::Dimension {
                op: "encode",
                left: vec![x.len()],
                right: vec![self.dims().input_dim],
            });
        }
        self.encoder().apply(x)
    }

    pub fn concept_forward(&self, z: &[f64]) -> Result<Option<ConceptOutput>> {
        self.concept_head().map(|h| concept_forward_with(h, z)).transpose()
    }

    pub fn base(&self, x: &[f64]) -> Result<BaseForward> {
        let z = self.encode(x)?;
        let concepts = self.concept_forward(&z)?;
        Ok(BaseForward { z, concepts })
    }

    fn pick<'a>(&self, base: &'a BaseForward, c_hat: Option<&'a [f64]>) -> Result<&'a [f64]> {
        let c = match (c_hat, &base.concepts) {
            (Some(c), _) => c,
            (None, Some(co)) => &co.activations,
            (None, None) => return Err(Error::State("model has no concept pathway".into())),
        };
        if c.len() != self.dims().num_concepts {
            return Err(Error::Dimension {
                op: "concepts",
                left: vec![c.len()],
                right: vec![self.dims().num_concepts],
            });
        }
        Ok(c)
    }

    /// Retrieval embedding (un-normalized). `c_hat` overrides the predicted
    /// concept activations where the model has a concept pathway into it.
    pub fn embedding(&self, base: &BaseForward, c_hat: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            AnyModel::Chair(m) => m.fuse(&base.z, self.pick(base, c_hat)?),
            AnyModel::Standard(_) | AnyModel::Cbm(_) => Ok(base.z.clone()),
            AnyModel::CbmExtend(m) => m.hidden_embedding(self.pick(base, c_hat)?),
        }
    }

    pub fn class_logits(&self, base: &BaseForward, c_hat: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            AnyModel::Chair(m) => m.classify(&m.fuse(&base.z, self.pick(base, c_hat)?)?),
            AnyModel::Standard(m) => m.classifier.apply(&base.z),
            AnyModel::Cbm(m) => m.classifier.apply(self.pick(base, c_hat)?),
            AnyModel::CbmExtend(m) => m.classifier.apply(&m.hidden_embedding(self.pick(base, c_hat)?)?),
        }
    }

    pub fn predict(&self, base: &BaseForward, c_hat: Option<&[f64]>) -> Result<usize> {
        Ok(kernels::argmax(&self.class_logits(base, c_hat)?))
    }
}

pub(crate) fn concept_forward_with(head: &Linear, z: &[f64]) -> Result<ConceptOutput> {
    let logits = head.apply(z)?;
    let activations = kernels::relu(&logits);
    Ok(ConceptOutput { logits, activations })
}
