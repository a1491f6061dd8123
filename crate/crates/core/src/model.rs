//! Dual-head MLP: a shared trunk feeding a K-way class head and a scalar
//! OOD head. One network carries both tasks so the classification signal
//! shapes the features the OOD score is computed from.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// One affine layer: weights `in_dim x out_dim`, bias `1 x out_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // Symmetric uniform init scaled by 1/sqrt(fan_in); biases start at zero.
        let scale = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Dense {
            weights: Tensor::from_vec(in_dim, out_dim, data).expect("sized above"),
            bias: Tensor::zeros(1, out_dim),
        }
    }
}

/// All trainable parameters of the dual-head network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    input_dim: usize,
    class_count: usize,
    activation: Activation,
    trunk: Vec<Dense>,
    class_head: Dense,
    ood_head: Dense,
}

/// Forward outputs for a batch, one row per sample.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `n x K` raw class logits.
    pub class_logits: Tensor,
    /// `n x K` softmax probabilities.
    pub class_probs: Tensor,
    /// `n x 1` sigmoid OOD scores in (0, 1).
    pub ood_scores: Tensor,
}

/// Node handles for a model forward pass inside a caller-owned [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub class_logits: NodeId,
    pub class_probs: NodeId,
    pub ood_logit: NodeId,
    pub ood_score: NodeId,
}

/// Parameter leaves registered in a graph, in the same order as
/// [`ModelParams::params_mut`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    input_dim: usize,
    activation: Activation,
    trunk: Vec<(NodeId, NodeId)>,
    class_head: (NodeId, NodeId),
    ood_head: (NodeId, NodeId),
}

/// Builds a fresh dual-head MLP. Weights are drawn from a symmetric uniform
/// distribution with scale `1/sqrt(fan_in)`, biases are zero, and the result
/// is deterministic in `seed`.
pub fn init_model(
    input_dim: usize,
    hidden_widths: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<ModelParams> {
    if input_dim < 1 {
        return Err(Error::Config("input_dim must be >= 1".into()));
    }
    if class_count < 2 {
        return Err(Error::Config(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    if hidden_widths.contains(&0) {
        return Err(Error::Config("hidden widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(hidden_widths.len());
    let mut dim = input_dim;
    for &width in hidden_widths {
        trunk.push(Dense::init(dim, width, &mut rng));
        dim = width;
    }
    let class_head = Dense::init(dim, class_count, &mut rng);
    let ood_head = Dense::init(dim, 1, &mut rng);
    Ok(ModelParams {
        input_dim,
        class_count,
        activation: Activation::Tanh,
        trunk,
        class_head,
        ood_head,
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_activation(&mut self, activation: Activation) {
        self.activation = activation;
    }

    /// Trainable tensors in a stable order (trunk, class head, ood head;
    /// weights before bias within each layer).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.class_head.weights);
        out.push(&mut self.class_head.bias);
        out.push(&mut self.ood_head.weights);
        out.push(&mut self.ood_head.bias);
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            out.push(layer.weights.shape());
            out.push(layer.bias.shape());
        }
        out.push(self.class_head.weights.shape());
        out.push(self.class_head.bias.shape());
        out.push(self.ood_head.weights.shape());
        out.push(self.ood_head.bias.shape());
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Registers every parameter as a graph leaf so a training step can read
    /// gradients back in `params_mut` order.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let mut bind_layer = |layer: &Dense| {
            let w = g.leaf(layer.weights.clone());
            let b = g.leaf(layer.bias.clone());
            (w, b)
        };
        let trunk: Vec<(NodeId, NodeId)> = self.trunk.iter().map(&mut bind_layer).collect();
        let class_head = bind_layer(&self.class_head);
        let ood_head = bind_layer(&self.ood_head);
        BoundModel {
            input_dim: self.input_dim,
            activation: self.activation,
            trunk,
            class_head,
            ood_head,
        }
    }

    /// Forward pass over a `n x d` batch with no gradient bookkeeping kept.
    pub fn forward(&self, batch: &Tensor) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.leaf(batch.clone());
        let nodes = bound.forward(&mut g, x)?;
        Ok(ModelOutput {
            class_logits: g.value(nodes.class_logits).clone(),
            class_probs: g.value(nodes.class_probs).clone(),
            ood_scores: g.value(nodes.ood_score).clone(),
        })
    }

    /// OOD-head scores for a batch, flattened to one score per row.
    pub fn ood_scores(&self, batch: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(batch)?.ood_scores.data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

impl BoundModel {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in &self.trunk {
            out.push(w);
            out.push(b);
        }
        out.push(self.class_head.0);
        out.push(self.class_head.1);
        out.push(self.ood_head.0);
        out.push(self.ood_head.1);
        out
    }

    /// Builds the forward computation for an `n x d` input node.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<ForwardNodes> {
        let d = g.value(x).cols();
        if d != self.input_dim {
            return Err(Error::shape(
                "model_forward",
                format!("input has {d} columns, model expects {}", self.input_dim),
            ));
        }
        let mut h = x;
        for &(w, b) in &self.trunk {
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = match self.activation {
                Activation::Tanh => g.tanh(z),
                Activation::Relu => g.relu(z),
            };
        }
        let class_logits = {
            let z = g.matmul(h, self.class_head.0)?;
            g.add(z, self.class_head.1)?
        };
        let class_probs = g.softmax(class_logits);
        let ood_logit = {
            let z = g.matmul(h, self.ood_head.0)?;
            g.add(z, self.ood_head.1)?
        };
        let ood_score = g.sigmoid(ood_logit);
        Ok(ForwardNodes {
            class_logits,
            class_probs,
            ood_logit,
            ood_score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = init_model(3, &[8, 8], 4, 99).unwrap();
        let b = init_model(3, &[8, 8], 4, 99).unwrap();
        assert_eq!(a, b);
        let c = init_model(3, &[8, 8], 4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        // 2->16->16 trunk, 4-way class head, 1-way ood head:
        // 2*16+16 + 16*16+16 + 16*4+4 + 16*1+1 = 405.
        let m = init_model(2, &[16, 16], 4, 0).unwrap();
        assert_eq!(m.param_count(), 405);
    }

    #[test]
    fn biases_start_at_zero() {
        let m = init_model(5, &[7], 3, 1).unwrap();
        for layer in m.trunk.iter().chain([&m.class_head, &m.ood_head]) {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn class_count_below_two_is_rejected() {
        assert!(init_model(2, &[4], 1, 0).is_err());
        assert!(init_model(2, &[4], 0, 0).is_err());
    }

    #[test]
    fn empty_hidden_widths_gives_linear_model() {
        let m = init_model(3, &[], 2, 0).unwrap();
        assert_eq!(m.param_count(), 3 * 2 + 2 + 3 + 1);
        let out = m.forward(&Tensor::zeros(4, 3)).unwrap();
        assert_eq!(out.class_probs.shape(), (4, 2));
    }

    #[test]
    fn zero_weight_model_predicts_uniform_and_half() {
        let mut m = init_model(2, &[6], 4, 3).unwrap();
        for p in m.params_mut() {
            *p = Tensor::zeros(p.rows(), p.cols());
        }
        let out = m
            .forward(&Tensor::from_rows(&[&[0.3, -0.7], &[9.0, 2.0]]).unwrap())
            .unwrap();
        for &p in out.class_probs.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        for &s in out.ood_scores.data() {
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn output_batch_size_matches_input() {
        let m = init_model(3, &[5], 2, 7).unwrap();
        let out = m.forward(&Tensor::zeros(11, 3)).unwrap();
        assert_eq!(out.class_probs.rows(), 11);
        assert_eq!(out.ood_scores.shape(), (11, 1));
    }

    #[test]
    fn softmax_rows_are_normalized_on_random_model() {
        let m = init_model(4, &[9, 5], 6, 21).unwrap();
        let batch =
            Tensor::from_vec(8, 4, (0..32).map(|i| (i as f64 * 0.713).sin()).collect()).unwrap();
        let out = m.forward(&batch).unwrap();
        for i in 0..8 {
            let sum: f64 = out.class_probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.class_probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn ood_score_matches_straight_line_reimplementation() {
        // Independent oracle: evaluate the affine/tanh chain with plain loops.
        let m = init_model(3, &[4], 2, 5).unwrap();
        let x = [0.25, -0.5, 0.75];

        let mut h: Vec<f64> = x.to_vec();
        for layer in &m.trunk {
            let mut next = vec![0.0; layer.bias.cols()];
            for (j, n) in next.iter_mut().enumerate() {
                let mut acc = layer.bias.get(0, j);
                for (i, &xi) in h.iter().enumerate() {
                    acc += xi * layer.weights.get(i, j);
                }
                *n = acc.tanh();
            }
            h = next;
        }
        let mut logit = m.ood_head.bias.get(0, 0);
        for (i, &hi) in h.iter().enumerate() {
            logit += hi * m.ood_head.weights.get(i, 0);
        }
        let expected = 1.0 / (1.0 + (-logit).exp());

        let got = m.ood_scores(&Tensor::from_rows(&[&x]).unwrap()).unwrap()[0];
        assert!(
            (got - expected).abs() < 1e-12,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = init_model(3, &[4], 2, 5).unwrap();
        assert!(m.forward(&Tensor::zeros(2, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("openset_model_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let m = init_model(2, &[64, 64], 4, 1234).unwrap();
        m.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(m, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn head_gradients_pass_finite_difference_check() {
        let m = init_model(2, &[5], 3, 17).unwrap();
        let batch = Tensor::from_rows(&[&[0.4, -0.2], &[-0.9, 0.35]]).unwrap();

        // Scalar objective touching both heads.
        let eval = |m: &ModelParams| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g);
            let x = g.leaf(batch.clone());
            let nodes = bound.forward(&mut g, x).unwrap();
            let pm = g.mean(nodes.class_probs);
            let om = g.mean(nodes.ood_score);
            let sum = g.add(pm, om).unwrap();
            let lg_in = g.clamp(sum, 1e-12, 10.0);
            let out = g.log(lg_in);
            (g, bound, out)
        };

        let (mut g, bound, out) = eval(&m);
        g.backward(out).unwrap();
        let analytic: Vec<Tensor> = bound
            .param_ids()
            .iter()
            .map(|&id| g.grad(id).unwrap().clone())
            .collect();

        let shapes = m.param_shapes();
        let step = 1e-6;
        for (pi, shape) in shapes.iter().enumerate() {
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = m.clone();
                    let v = plus.params_mut()[pi].get(r, c);
                    plus.params_mut()[pi].set(r, c, v + step);
                    let mut minus = m.clone();
                    minus.params_mut()[pi].set(r, c, v - step);
                    let f = |mm: &ModelParams| {
                        let (g, _, out) = eval(mm);
                        g.value(out).item()
                    };
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
                    let a = analytic[pi].get(r, c);
                    let diff = (a - numeric).abs();
                    let scale = a.abs().max(numeric.abs());
                    assert!(
                        diff <= 1e-6 || diff / scale <= 1e-4,
                        "param {pi} ({r},{c}): analytic={a} numeric={numeric}"
                    );
                }
            }
        }
    }
}
