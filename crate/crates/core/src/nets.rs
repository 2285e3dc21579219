//! MLP encoders: a relu backbone followed by a two-layer projection head whose
//! output is L2-normalized.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub proj_hidden_dim: usize,
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, proj_hidden_dim: usize, embed_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            proj_hidden_dim,
            embed_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain([self.proj_hidden_dim, self.embed_dim]);
        for d in all {
            if d == 0 {
                return Err(Error::BadSpec(format!("all dimensions must be >= 1: {self:?}")));
            }
        }
        Ok(())
    }

    /// Layer widths from input to embedding.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.proj_hidden_dim);
        w.push(self.embed_dim);
        w
    }

    /// Width of the backbone output (the input itself when there are no hidden layers).
    pub fn backbone_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// What an encoder is used as; recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
    MomentumKey,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::Student => 0,
            Role::Teacher => 1,
            Role::MomentumKey => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Role::Student),
            1 => Some(Role::Teacher),
            2 => Some(Role::MomentumKey),
            _ => None,
        }
    }
}

/// Which representation of an encoder downstream consumers read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Normalized projection-head output (the embedding).
    Projection,
    /// Normalized backbone output.
    Backbone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub role: Role,
    pub layers: Vec<Linear>,
}

/// Graph node ids of an encoder's parameters.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    layers: Vec<(NodeId, NodeId)>,
}

impl BoundEncoder {
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Gradients in the order of [`EncoderParams::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.nodes()
            .map(|n| grads.get(n).cloned().expect("bound parameters require gradients"))
            .collect()
    }
}

pub struct EncoderNodes {
    pub backbone: NodeId,
    pub embedding: NodeId,
}

/// Output of [`encoder_forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub embeddings: Tensor,
    /// Rows whose pre-normalization norm fell below 1e-8.
    pub degenerate_rows: Vec<usize>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> EncoderParams {
    let widths = spec.widths();
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
            let mut rng = keyed(seed, Stream::Init, l as u64, 0);
            let values = (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect();
            Linear {
                weight: Tensor::matrix(fan_in, fan_out, values),
                bias: Tensor::zeros(vec![1, fan_out]),
            }
        })
        .collect();
    EncoderParams {
        spec: spec.clone(),
        role: Role::Student,
        layers,
    }
}

impl EncoderParams {
    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Checks that layer shapes chain according to the spec and values are finite.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let widths = self.spec.widths();
        if self.layers.len() != widths.len() - 1 {
            return Err(Error::BadSpec(format!(
                "{} layers for spec expecting {}",
                self.layers.len(),
                widths.len() - 1
            )));
        }
        for (l, (layer, w)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [1, w[1]] {
                return Err(Error::BadSpec(format!("layer {l} shape does not match spec")));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::BadSpec(format!("layer {l} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Adds the parameters to `g` as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.parameter(l.weight.clone()), g.parameter(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundEncoder { layers }
    }

    /// Builds the forward pass for a `rows × input_dim` node.
    pub fn build_forward(&self, g: &mut Graph, bound: &BoundEncoder, input: NodeId) -> Result<EncoderNodes> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::InputWidth {
                expected: self.spec.input_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        // Bias rows are tiled explicitly: ones(B×1) · b(1×H).
        let ones = g.constant(Tensor::full(vec![shape[0], 1], 1.0));
        let n_backbone = self.spec.hidden_dims.len();
        let mut h = input;
        let mut backbone = input;
        for (l, &(w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            let tiled = g.matmul(ones, b)?;
            let z = g.add(z, tiled)?;
            let last = l + 1 == bound.layers.len();
            h = if last { z } else { g.relu(z)? };
            if l + 1 == n_backbone {
                backbone = h;
            }
        }
        let embedding = g.l2_normalize_rows(h)?;
        Ok(EncoderNodes { backbone, embedding })
    }

    /// Backbone output for a `rows × input_dim` node, without the head.
    pub fn build_backbone(&self, g: &mut Graph, bound: &BoundEncoder, input: NodeId) -> Result<NodeId> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::InputWidth {
                expected: self.spec.input_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let ones = g.constant(Tensor::full(vec![shape[0], 1], 1.0));
        let mut h = input;
        for &(w, b) in &bound.layers[..self.spec.hidden_dims.len()] {
            let z = g.matmul(h, w)?;
            let tiled = g.matmul(ones, b)?;
            let z = g.add(z, tiled)?;
            h = g.relu(z)?;
        }
        Ok(h)
    }

    /// Normalized features of `batch` from the chosen representation.
    pub fn features(&self, batch: &Tensor, source: FeatureSource) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let nodes = self.build_forward(&mut g, &bound, x)?;
        let out = match source {
            FeatureSource::Projection => nodes.embedding,
            FeatureSource::Backbone => g.l2_normalize_rows(nodes.backbone)?,
        };
        let eval = g.evaluate(&HashMap::new())?;
        let bad: Vec<usize> = eval
            .degenerate_rows()
            .iter()
            .filter(|(n, _)| *n == out)
            .map(|&(_, r)| r)
            .collect();
        if let Some(&first) = bad.first() {
            return Err(Error::DegenerateEmbedding {
                count: bad.len(),
                first,
            });
        }
        Ok(eval.into_value(out))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.spec.input_dim {
            return Err(Error::InputWidth {
                expected: self.spec.input_dim,
                got: batch.cols(),
            });
        }
        Ok(())
    }
}

/// Unit-norm embeddings of a `B × input_dim` batch.
pub fn encoder_forward(params: &EncoderParams, batch: &Tensor) -> Result<Forward> {
    params.check_batch(batch)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let nodes = params.build_forward(&mut g, &bound, x)?;
    let eval = g.evaluate(&HashMap::new())?;
    let degenerate_rows = eval
        .degenerate_rows()
        .iter()
        .filter(|(n, _)| *n == nodes.embedding)
        .map(|&(_, r)| r)
        .collect();
    Ok(Forward {
        embeddings: eval.into_value(nodes.embedding),
        degenerate_rows,
    })
}

/// `target ← m·target + (1−m)·online`, parameter-wise.
pub fn momentum_update(online: &EncoderParams, target: &mut EncoderParams, m: f64) -> Result<()> {
    if online.spec != target.spec {
        return Err(Error::SpecMismatch(format!("{:?} vs {:?}", online.spec, target.spec)));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidParameter(format!("momentum {m} outside [0, 1]")));
    }
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (tv, ov) in t.values_mut().iter_mut().zip(o.values()) {
            *tv = m * *tv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn spec() -> EncoderSpec {
        EncoderSpec::new(5, vec![7, 6], 4, 3).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = keyed(seed, Stream::Blobs, 99, 0);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(init_params(&spec(), 3), init_params(&spec(), 3));
        assert_ne!(init_params(&spec(), 3), init_params(&spec(), 4));
    }

    #[test]
    fn no_hidden_layers_means_head_only() {
        let s = EncoderSpec::new(4, vec![], 8, 2).unwrap();
        let p = init_params(&s, 0);
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].weight.shape(), &[4, 8]);
        assert_eq!(s.backbone_dim(), 4);
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(EncoderSpec::new(0, vec![], 1, 1).is_err());
        assert!(EncoderSpec::new(3, vec![0], 1, 1).is_err());
    }

    #[test]
    fn init_weight_mean_within_three_sigma() {
        // One 100x100 layer gives 10^4 draws from U(-s, s) with s = sqrt(6/200).
        let s = EncoderSpec::new(100, vec![], 100, 1).unwrap();
        let p = init_params(&s, 17);
        let w = p.layers[0].weight.values();
        let bound = (6.0f64 / 200.0).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sigma_of_mean = bound / 3f64.sqrt() / (w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma_of_mean, "mean {mean}");
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(p.layers[0].bias.values().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let p = init_params(&spec(), 1);
        let out = encoder_forward(&p, &batch(16, 5, 2)).unwrap();
        assert!(out.degenerate_rows.is_empty());
        for r in 0..16 {
            let n = crate::tensor::norm(out.embeddings.row(r));
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_weights_flag_degenerate_rows() {
        let mut p = init_params(&spec(), 1);
        p.tensors_mut().for_each(|t| t.values_mut().fill(0.0));
        let out = encoder_forward(&p, &batch(3, 5, 2)).unwrap();
        assert_eq!(out.degenerate_rows, vec![0, 1, 2]);
        assert!(p.features(&batch(3, 5, 2), FeatureSource::Projection).is_err());
    }

    #[test]
    fn rows_are_batch_independent() {
        let p = init_params(&spec(), 5);
        let big = batch(32, 5, 8);
        let all = encoder_forward(&p, &big).unwrap().embeddings;
        let one = encoder_forward(&p, &big.gather_rows(&[13])).unwrap().embeddings;
        assert_eq!(one.row(0), all.row(13));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = init_params(&spec(), 5);
        assert!(matches!(
            encoder_forward(&p, &batch(2, 4, 0)),
            Err(Error::InputWidth { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn momentum_update_endpoints() {
        let online = init_params(&spec(), 1);
        let original = init_params(&spec(), 2);
        let mut t = original.clone();
        momentum_update(&online, &mut t, 1.0).unwrap();
        assert_eq!(t, original);
        momentum_update(&online, &mut t, 0.0).unwrap();
        assert_eq!(t.layers, online.layers);
    }

    #[test]
    fn momentum_update_scalar_case() {
        let s = EncoderSpec::new(1, vec![], 1, 1).unwrap();
        let mut online = init_params(&s, 0);
        online.tensors_mut().for_each(|t| t.values_mut().fill(0.0));
        let mut target = online.clone();
        target.tensors_mut().for_each(|t| t.values_mut().fill(1.0));
        momentum_update(&online, &mut target, 0.999).unwrap();
        assert!(target.tensors().all(|t| t.values()[0] == 0.999));
    }

    #[test]
    fn momentum_update_contracts_geometrically() {
        let online = init_params(&spec(), 1);
        let start = init_params(&spec(), 2);
        let mut t = start.clone();
        let m: f64 = 0.9;
        for _ in 0..20 {
            momentum_update(&online, &mut t, m).unwrap();
        }
        for ((tt, st), ot) in t.tensors().zip(start.tensors()).zip(online.tensors()) {
            for ((a, b), c) in tt.values().iter().zip(st.values()).zip(ot.values()) {
                let expected = m.powi(20) * (b - c);
                assert!(((a - c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_update_rejects_mismatched_specs() {
        let a = init_params(&spec(), 1);
        let mut b = init_params(&EncoderSpec::new(5, vec![7], 4, 3).unwrap(), 1);
        assert!(matches!(momentum_update(&a, &mut b, 0.5), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn forward_gradients_pass_finite_differences() {
        let p = init_params(&spec(), 11);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = g.constant(batch(4, 5, 3));
        let nodes = p.build_forward(&mut g, &bound, x).unwrap();
        let w = g.constant(batch(4, 3, 4));
        let prod = g.mul(nodes.embedding, w).unwrap();
        let loss = g.sum(prod).unwrap();
        for n in bound.nodes() {
            let err = finite_difference_check(&g, &HashMap::new(), loss, n, 1e-5).unwrap();
            assert!(err <= 1e-4, "node {n:?}: {err}");
        }
    }
}
