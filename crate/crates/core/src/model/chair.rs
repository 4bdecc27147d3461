use rand::Rng;

use super::{concept_forward_with, BoundLinear, Component, ConceptOutput, Dims, Linear, Mlp, Network};
use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};

/// Encoder `ζ`, concept head `φ`, projection `ω` and classifier `ψ'`.
///
/// `y = ψ'(ζ(x) + ω(ReLU(φ(ζ(x)))))`; the concept loss is taken on the
/// logits of `φ`, while `ω` and the intervention statistics see the ReLU
/// activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ChairModel {
    pub dims: Dims,
    pub encoder: Mlp,
    pub concept_head: Linear,
    pub projection: Linear,
    pub classifier: Linear,
}

/// Every intermediate of one CHAIR forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChairForward {
    pub z: Vec<f64>,
    pub concepts: ConceptOutput,
    pub edited: Vec<f64>,
    pub class_logits: Vec<f64>,
}

/// Tape handles produced by [`ChairModel::tape_forward`].
#[derive(Debug, Clone, Copy)]
pub struct ChairTape {
    pub z: Var,
    pub concept_logits: Var,
    pub activations: Var,
    pub edited: Var,
    pub class_logits: Var,
}

impl ChairModel {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        ChairModel {
            dims,
            encoder: Mlp::new(&dims.encoder_sizes(), rng),
            concept_head: Linear::new(dims.embed_dim, dims.num_concepts, rng),
            projection: Linear::new(dims.num_concepts, dims.embed_dim, rng),
            classifier: Linear::new(dims.embed_dim, dims.num_classes, rng),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.input_dim {
            return Err(Error::Dimension {
                op: "encode",
                left: vec![x.len()],
                right: vec![self.dims.input_dim],
            });
        }
        self.encoder.apply(x)
    }

    pub fn concept_forward(&self, z: &[f64]) -> Result<ConceptOutput> {
        concept_forward_with(&self.concept_head, z)
    }

    /// `z + ω(c_hat)`.
    pub fn fuse(&self, z: &[f64], c_hat: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.embed_dim {
            return Err(Error::Dimension {
                op: "fuse",
                left: vec![z.len()],
                right: vec![self.dims.embed_dim],
            });
        }
        let proj = self.projection.apply(c_hat)?;
        Ok(kernels::add(z, &proj))
    }

    pub fn classify(&self, edited: &[f64]) -> Result<Vec<f64>> {
        self.classifier.apply(edited)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ChairForward> {
        let z = self.encode(x)?;
        let concepts = self.concept_forward(&z)?;
        let edited = self.fuse(&z, &concepts.activations)?;
        let class_logits = self.classify(&edited)?;
        Ok(ChairForward {
            z,
            concepts,
            edited,
            class_logits,
        })
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(kernels::argmax(&self.forward(x)?.class_logits))
    }

    /// Batched forward on a tape. `bound` must come from [`Network::bind`].
    /// When `c_hat` is given it replaces the activations fed to `ω`.
    pub fn tape_forward(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var, c_hat: Option<Var>) -> Result<ChairTape> {
        let (enc, rest) = bound.split_at(self.encoder.layers.len());
        let z = Mlp::tape_forward(tape, enc, x)?;
        let concept_logits = rest[0].forward(tape, z)?;
        let activations = tape.relu(concept_logits)?;
        let fed = c_hat.unwrap_or(activations);
        let proj = rest[1].forward(tape, fed)?;
        let edited = tape.add(z, proj)?;
        let class_logits = rest[2].forward(tape, edited)?;
        Ok(ChairTape {
            z,
            concept_logits,
            activations,
            edited,
            class_logits,
        })
    }
}

impl Network for ChairModel {
    fn named_layers(&self) -> Vec<(String, Component, &Linear)> {
        let mut v: Vec<(String, Component, &Linear)> = self
            .encoder
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), Component::Encoder, l))
            .collect();
        v.push(("concept_head".into(), Component::ConceptHead, &self.concept_head));
        v.push(("projection".into(), Component::Projection, &self.projection));
        v.push(("classifier".into(), Component::Classifier, &self.classifier));
        v
    }

    fn layers_mut(&mut self) -> Vec<(Component, &mut Linear)> {
        let mut v: Vec<(Component, &mut Linear)> =
            self.encoder.layers.iter_mut().map(|l| (Component::Encoder, l)).collect();
        v.push((Component::ConceptHead, &mut self.concept_head));
        v.push((Component::Projection, &mut self.projection));
        v.push((Component::Classifier, &mut self.classifier));
        v
    }
}
