use rand::Rng;

use super::{BoundLinear, Component, Dims, Linear, Mlp, Network};
use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Encoder plus a linear classifier on the embedding; no concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardModel {
    pub dims: Dims,
    pub encoder: Mlp,
    pub classifier: Linear,
}

impl StandardModel {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        StandardModel {
            dims,
            encoder: Mlp::new(&dims.encoder_sizes(), rng),
            classifier: Linear::new(dims.embed_dim, dims.num_classes, rng),
        }
    }

    /// Returns `(embedding, class_logits)`.
    pub fn tape_forward(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var) -> Result<(Var, Var)> {
        let (enc, rest) = bound.split_at(self.encoder.layers.len());
        let z = Mlp::tape_forward(tape, enc, x)?;
        let logits = rest[0].forward(tape, z)?;
        Ok((z, logits))
    }
}

impl Network for StandardModel {
    fn named_layers(&self) -> Vec<(String, Component, &Linear)> {
        let mut v = encoder_layers(&self.encoder);
        v.push(("classifier".into(), Component::Classifier, &self.classifier));
        v
    }

    fn layers_mut(&mut self) -> Vec<(Component, &mut Linear)> {
        let mut v = encoder_layers_mut(&mut self.encoder);
        v.push((Component::Classifier, &mut self.classifier));
        v
    }
}

/// Vanilla concept bottleneck: the class is predicted from concept
/// activations alone, `y = ψ(ReLU(φ(ζ(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    pub dims: Dims,
    pub encoder: Mlp,
    pub concept_head: Linear,
    pub classifier: Linear,
}

/// Tape handles for concept-bottleneck style models.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckTape {
    pub z: Var,
    pub concept_logits: Var,
    pub activations: Var,
    pub embedding: Var,
    pub class_logits: Var,
}

impl CbmModel {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        CbmModel {
            dims,
            encoder: Mlp::new(&dims.encoder_sizes(), rng),
            concept_head: Linear::new(dims.embed_dim, dims.num_concepts, rng),
            classifier: Linear::new(dims.num_concepts, dims.num_classes, rng),
        }
    }

    pub fn tape_forward(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var, c_hat: Option<Var>) -> Result<BottleneckTape> {
        let (enc, rest) = bound.split_at(self.encoder.layers.len());
        let z = Mlp::tape_forward(tape, enc, x)?;
        let concept_logits = rest[0].forward(tape, z)?;
        let activations = tape.relu(concept_logits)?;
        let class_logits = rest[1].forward(tape, c_hat.unwrap_or(activations))?;
        Ok(BottleneckTape {
            z,
            concept_logits,
            activations,
            embedding: z,
            class_logits,
        })
    }
}

impl Network for CbmModel {
    fn named_layers(&self) -> Vec<(String, Component, &Linear)> {
        let mut v = encoder_layers(&self.encoder);
        v.push(("concept_head".into(), Component::ConceptHead, &self.concept_head));
        v.push(("classifier".into(), Component::Classifier, &self.classifier));
        v
    }

    fn layers_mut(&mut self) -> Vec<(Component, &mut Linear)> {
        let mut v = encoder_layers_mut(&mut self.encoder);
        v.push((Component::ConceptHead, &mut self.concept_head));
        v.push((Component::Classifier, &mut self.classifier));
        v
    }
}

/// Naive extension of a CBM for retrieval: a linear layer on the concept
/// activations produces the retrieval embedding, and the classifier reads
/// that embedding. The encoder output `z` never reaches the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmExtendModel {
    pub dims: Dims,
    pub encoder: Mlp,
    pub concept_head: Linear,
    pub hidden: Linear,
    pub classifier: Linear,
}

impl CbmExtendModel {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        CbmExtendModel {
            dims,
            encoder: Mlp::new(&dims.encoder_sizes(), rng),
            concept_head: Linear::new(dims.embed_dim, dims.num_concepts, rng),
            hidden: Linear::new(dims.num_concepts, dims.embed_dim, rng),
            classifier: Linear::new(dims.embed_dim, dims.num_classes, rng),
        }
    }

    pub fn hidden_embedding(&self, concepts: &[f64]) -> Result<Vec<f64>> {
        self.hidden.apply(concepts)
    }

    pub fn tape_forward(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var, c_hat: Option<Var>) -> Result<BottleneckTape> {
        let (enc, rest) = bound.split_at(self.encoder.layers.len());
        let z = Mlp::tape_forward(tape, enc, x)?;
        let concept_logits = rest[0].forward(tape, z)?;
        let activations = tape.relu(concept_logits)?;
        let embedding = rest[1].forward(tape, c_hat.unwrap_or(activations))?;
        let class_logits = rest[2].forward(tape, embedding)?;
        Ok(BottleneckTape {
            z,
            concept_logits,
            activations,
            embedding,
            class_logits,
        })
    }
}

impl Network for CbmExtendModel {
    fn named_layers(&self) -> Vec<(String, Component, &Linear)> {
        let mut v = encoder_layers(&self.encoder);
        v.push(("concept_head".into(), Component::ConceptHead, &self.concept_head));
        v.push(("extend_hidden".into(), Component::ExtendHidden, &self.hidden));
        v.push(("classifier".into(), Component::Classifier, &self.classifier));
        v
    }

    fn layers_mut(&mut self) -> Vec<(Component, &mut Linear)> {
        let mut v = encoder_layers_mut(&mut self.encoder);
        v.push((Component::ConceptHead, &mut self.concept_head));
        v.push((Component::ExtendHidden, &mut self.hidden));
        v.push((Component::Classifier, &mut self.classifier));
        v
    }
}

fn encoder_layers(enc: &Mlp) -> Vec<(String, Component, &Linear)> {
    enc.layers
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("encoder.{i}"), Component::Encoder, l))
        .collect()
}

fn encoder_layers_mut(enc: &mut Mlp) -> Vec<(Component, &mut Linear)> {
    enc.layers.iter_mut().map(|l| (Component::Encoder, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::{AnyModel, ModelKind};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims {
            input_dim: 6,
            hidden: 8,
            embed_dim: 5,
            num_concepts: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn cbm_logits_are_a_function_of_concepts_only() {
        let m = AnyModel::new(ModelKind::Cbm, dims(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = m.base(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = m.base(&[-1.0, 2.0, 0.0, 0.4, 9.0, 0.6]).unwrap();
        let c = [0.0, 1.5, 2.0, 0.25];
        assert_ne!(a.z, b.z);
        assert_eq!(m.class_logits(&a, Some(&c)).unwrap(), m.class_logits(&b, Some(&c)).unwrap());
    }

    #[test]
    fn cbm_extend_embedding_ignores_encoder_output() {
        let m = AnyModel::new(ModelKind::CbmExtend, dims(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = m.base(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = m.base(&[3.0, -2.0, 0.0, 0.4, 1.0, 0.6]).unwrap();
        let c = [1.0, 0.0, 0.5, 0.25];
        assert_eq!(m.embedding(&a, Some(&c)).unwrap(), m.embedding(&b, Some(&c)).unwrap());
    }

    #[test]
    fn standard_has_no_concept_pathway() {
        let m = AnyModel::new(ModelKind::Standard, dims(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(!m.has_concepts());
        let b = m.base(&[0.0; 6]).unwrap();
        assert!(b.concepts.is_none());
        assert_eq!(m.embedding(&b, None).unwrap(), b.z);
    }
}
