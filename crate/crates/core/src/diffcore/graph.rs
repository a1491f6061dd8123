use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Matrix product `a . b`.
    MatMul(NodeId, NodeId),
    /// Elementwise sum; `b` may be a `1 x k` row broadcast over the rows of `a`.
    Add(NodeId, NodeId),
    /// Elementwise difference, same broadcast rule as `Add`.
    Sub(NodeId, NodeId),
    /// Elementwise product of same-shape tensors.
    Mul(NodeId, NodeId),
    /// Multiplication by a compile-time constant scalar.
    Scale(NodeId, f64),
    /// Addition of a constant scalar to every entry. The constant is kept for
    /// debug output; its gradient is a pass-through.
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    Log(NodeId),
    /// Clamp into `[lo, hi]`; gradient is passed through strictly inside the range.
    Clamp(NodeId, f64, f64),
    /// Sum of all entries, producing a `1 x 1` tensor.
    Sum(NodeId),
    /// Mean of all entries, producing a `1 x 1` tensor.
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph. Nodes are created in topological order, so
/// [`Graph::backward`] is a single reverse sweep. Gradients of nodes used as
/// inputs to several operations accumulate by summation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output with respect to `id`, if that
    /// node participated in the backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shapes(&self, a: NodeId, b: NodeId) -> ((usize, usize), (usize, usize)) {
        (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(
            "add",
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            |x, y| x + y,
        )?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(
            "sub",
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            |x, y| x - y,
        )?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(Error::shape(
                "mul",
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::from_vec(sa.0, sa.1, data)?
        };
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(Op::AddScalar(a, c), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Row-wise softmax with the usual max-subtraction for stability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let (n, k) = src.shape();
        let mut value = Tensor::zeros(n, k);
        for i in 0..n {
            let row = src.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                value.set(i, j, e);
                sum += e;
            }
            for j in 0..k {
                value.set(i, j, value.get(i, j) / sum);
            }
        }
        self.push(Op::Softmax(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let total: f64 = t.data().iter().sum();
        let value = Tensor::scalar(total / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Reverse sweep from a scalar output. Fills the gradient slot of every
    /// node that `output` depends on; leaves untouched by the sweep report
    /// `None` from [`Graph::grad`].
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if !self.nodes[output.0].value.is_scalar() {
            let (r, c) = self.nodes[output.0].value.shape();
            return Err(Error::shape(
                "backward",
                format!("output must be 1x1, got {r}x{c}"),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(grad) = self.grads[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = grad.matmul(&self.nodes[b.0].value.transpose())?;
                    let gb = self.nodes[a.0].value.transpose().matmul(&grad)?;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, reduce_to_shape(&grad, self.nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    let gb = reduce_to_shape(&grad, self.nodes[b.0].value.shape()).map(|v| -v);
                    self.accumulate(b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = zip_same(&grad, &self.nodes[b.0].value, |g, v| g * v);
                    let gb = zip_same(&grad, &self.nodes[a.0].value, |g, v| g * v);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, grad.map(|g| g * c));
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(a, grad);
                }
                Op::Tanh(a) => {
                    let ga = zip_same(&grad, &self.nodes[idx].value, |g, y| g * (1.0 - y * y));
                    self.accumulate(a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_same(
                        &grad,
                        &self.nodes[a.0].value,
                        |g, x| if x > 0.0 { g } else { 0.0 },
                    );
                    self.accumulate(a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_same(&grad, &self.nodes[idx].value, |g, y| g * y * (1.0 - y));
                    self.accumulate(a, ga);
                }
                Op::Softmax(a) => {
                    // Per row: dx = y * (g - <g, y>).
                    let y = &self.nodes[idx].value;
                    let (n, k) = y.shape();
                    let mut ga = Tensor::zeros(n, k);
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = grad.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..k {
                            ga.set(i, j, yr[j] * (gr[j] - dot));
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_same(&grad, &self.nodes[a.0].value, |g, x| g / x);
                    self.accumulate(a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_same(&grad, &self.nodes[a.0].value, |g, x| {
                        if x > lo && x < hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(a, ga);
                }
                Op::Sum(a) => {
                    let g = grad.item();
                    let (r, c) = self.nodes[a.0].value.shape();
                    self.accumulate(a, Tensor::zeros(r, c).map(|_| g));
                }
                Op::Mean(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let g = grad.item() / (r * c) as f64;
                    self.accumulate(a, Tensor::zeros(r, c).map(|_| g));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, incoming: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, i) in existing.data_mut().iter_mut().zip(incoming.data()) {
                    *e += i;
                }
            }
            slot @ None => *slot = Some(incoming),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shapes checked")
}

/// Elementwise combine where `b` may be a `1 x k` row broadcast over `a`'s rows.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_same(a, b, f));
    }
    if b.rows() == 1 && b.cols() == a.cols() {
        let mut out = Tensor::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                out.set(i, j, f(a.get(i, j), b.get(0, j)));
            }
        }
        return Ok(out);
    }
    Err(Error::shape(
        op,
        format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
    ))
}

/// Sums a gradient over rows when the forward op broadcast a `1 x k` operand.
fn reduce_to_shape(grad: &Tensor, target: (usize, usize)) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    debug_assert_eq!(target.0, 1);
    debug_assert_eq!(target.1, grad.cols());
    let mut out = Tensor::zeros(1, grad.cols());
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            out.set(0, j, out.get(0, j) + grad.get(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        for k in [2usize, 3, 7] {
            let x = g.leaf(Tensor::zeros(1, k));
            let y = g.softmax(x);
            for &p in g.value(y).data() {
                assert!((p - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random_tensor(&mut rng, 2, 3);
        let b = random_tensor(&mut rng, 3, 2);

        // Independent oracle: naive triple loop.
        let mut expected = Tensor::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                expected.set(i, j, acc);
            }
        }

        let mut g = Graph::new();
        let na = g.leaf(a);
        let nb = g.leaf(b);
        let nc = g.matmul(na, nb).unwrap();
        for (got, want) in g.value(nc).data().iter().zip(expected.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_operation() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn backward_square_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_product_of_two_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        let y = g.tanh(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(&mut rng, 3, 4);
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let h = g.tanh(x);
            let s = g.softmax(h);
            let m = g.mean(s);
            g.value(m).item()
        };
        assert_eq!(run(&t), run(&t));
    }

    /// Central finite differences of a scalar-valued graph with respect to one leaf.
    fn finite_diff(build: &dyn Fn(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
        let mut out = Tensor::zeros(at.rows(), at.cols());
        for idx in 0..at.len() {
            let mut plus = at.clone();
            plus.data_mut()[idx] += step;
            let mut minus = at.clone();
            minus.data_mut()[idx] -= step;
            out.data_mut()[idx] = (build(&plus) - build(&minus)) / (2.0 * step);
        }
        out
    }

    fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_floor: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            assert!(
                diff <= abs_floor || diff / scale <= rel_tol,
                "analytic={a} numeric={n} diff={diff}"
            );
        }
    }

    #[test]
    fn bce_of_sigmoid_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_tensor(&mut rng, 8, 1);
        let x = random_tensor(&mut rng, 1, 8);
        let target = 1.0;

        let loss_of_w = |w: &Tensor| {
            let mut g = Graph::new();
            let nw = g.leaf(w.clone());
            let nx = g.leaf(x.clone());
            let z = g.matmul(nx, nw).unwrap();
            let p = g.sigmoid(z);
            let logp = g.log(p);
            let neg = g.scale(p, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            let log1p = g.log(one_minus);
            let t1 = g.scale(logp, target);
            let t2 = g.scale(log1p, 1.0 - target);
            let s = g.add(t1, t2).unwrap();
            let loss = g.scale(s, -1.0);
            let loss = g.mean(loss);
            (g, nw, loss)
        };

        let (mut g, nw, loss) = loss_of_w(&w);
        g.backward(loss).unwrap();
        let analytic = g.grad(nw).unwrap().clone();

        let numeric = finite_diff(
            &|wp: &Tensor| {
                let (g, _, l) = loss_of_w(wp);
                g.value(l).item()
            },
            &w,
            1e-5,
        );
        assert_grad_close(&analytic, &numeric, 1e-4, 1e-6);
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        // One composed scalar function touching each differentiable op.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&mut rng, 3, 4);
        let w = random_tensor(&mut rng, 4, 3);
        let b = random_tensor(&mut rng, 1, 3);

        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let nx = g.leaf(x.clone());
            let nw = g.leaf(w.clone());
            let nb = g.leaf(b.clone());
            let h = g.matmul(nx, nw).unwrap();
            let h = g.add(h, nb).unwrap();
            let t = g.tanh(h);
            let r = g.relu(t);
            let sm = g.softmax(r);
            let sg = g.sigmoid(h);
            let prod = g.mul(sm, sg).unwrap();
            let cl = g.clamp(prod, 1e-9, 2.0);
            let lg = g.log(cl);
            let diff = g.sub(lg, nb).unwrap();
            let sc = g.scale(diff, 0.75);
            let sh = g.add_scalar(sc, 0.1);
            let total = g.sum(sh);
            let tm = g.mean(sh);
            let out = g.add(total, tm).unwrap();
            (g, [nx, nw, nb], out)
        };

        let (mut g, leaves, out) = eval(&x, &w, &b);
        g.backward(out).unwrap();
        let analytic: Vec<Tensor> = leaves
            .iter()
            .map(|&id| g.grad(id).unwrap().clone())
            .collect();

        let tensors = [x.clone(), w.clone(), b.clone()];
        for (which, at) in tensors.iter().enumerate() {
            let numeric = finite_diff(
                &|t: &Tensor| {
                    let mut args = tensors.clone();
                    args[which] = t.clone();
                    let (g, _, out) = eval(&args[0], &args[1], &args[2]);
                    g.value(out).item()
                },
                at,
                1e-6,
            );
            assert_grad_close(&analytic[which], &numeric, 1e-4, 1e-6);
        }
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // f(x) = sum(x * x) + sum(x): grad = 2x + 1.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.5, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum(sq);
        let s2 = g.sum(x);
        let out = g.add(s1, s2).unwrap();
        g.backward(out).unwrap();
        let grad = g.grad(x).unwrap();
        assert!((grad.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((grad.get(0, 1) + 3.0).abs() < 1e-12);
    }
}
