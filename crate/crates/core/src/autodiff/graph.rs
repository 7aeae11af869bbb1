//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse. Column vectors are `n × 1` matrices and
//! scalars are `1 × 1`.

use crate::tensor::{sigmoid, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a bᵀ` for two columns.
    Outer(Var, Var),
    /// `aᵀ b` for two columns, a `1 × 1` result.
    Dot(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `1×1` scalar times a matrix.
    ScalarMul(Var, Var),
    /// `Diag(col) · m`.
    RowScale(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    EluPlusOne(Var),
    Silu(Var),
    Gelu(Var),
    Recip(Var),
    /// Column normalized to unit norm; `norm` is cached.
    L2Normalize { x: Var, norm: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, normed: Mat, inv_std: f64 },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Mat },
    Mse { pred: Var, target: Mat },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// The recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, zeros of `shape` when it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => g.axpy(1.0, &delta),
        None => *slot = Some(delta),
    }
}

/// `a · bᵀ`
fn mul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.cols(), "shape error in mul_nt");
    Mat::from_fn(a.rows(), b.rows(), |i, j| {
        a.row_slice(i).iter().zip(b.row_slice(j)).fold(0.0, |acc, (x, y)| acc + x * y)
    })
}

/// `aᵀ · b`
fn mul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows(), b.rows(), "shape error in mul_tn");
    let (n, m) = (a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for p in 0..a.rows() {
        let b_row = b.row_slice(p);
        for (i, &x) in a.row_slice(p).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Mat::from_vec(n, m, out)
}

fn scalar(m: &Mat) -> f64 {
    assert_eq!(m.shape(), (1, 1), "expected a 1x1 scalar");
    m.as_slice()[0]
}

fn column_check(m: &Mat, op: &str) {
    assert_eq!(m.cols(), 1, "shape error in {op}: expected a column, got {:?}", m.shape());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        scalar(self.value(v))
    }

    /// A parameter or a constant input.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_vec(1, 1, vec![x]))
    }

    #[track_caller]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    #[track_caller]
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        column_check(self.value(a), "outer");
        column_check(self.value(b), "outer");
        let value = mul_nt(self.value(a), self.value(b));
        self.push(value, Op::Outer(a, b))
    }

    #[track_caller]
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        column_check(x, "dot");
        assert_eq!(x.shape(), y.shape(), "shape error in dot");
        let d = x.as_slice().iter().zip(y.as_slice()).fold(0.0, |acc, (p, q)| acc + p * q);
        self.push(Mat::from_vec(1, 1, vec![d]), Op::Dot(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    #[track_caller]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    #[track_caller]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    #[track_caller]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_const(neg, 1.0)
    }

    #[track_caller]
    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Var {
        let value = self.value(m).scale(scalar(self.value(s)));
        self.push(value, Op::ScalarMul(s, m))
    }

    #[track_caller]
    pub fn row_scale(&mut self, col: Var, m: Var) -> Var {
        let c = self.value(col);
        column_check(c, "row_scale");
        let value = self.value(m).scale_rows(&c.col_vector(0));
        self.push(value, Op::RowScale(col, m))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let value = self.value(a).map(crate::layer::elu_plus_one);
        self.push(value, Op::EluPlusOne(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        self.push(value, Op::Silu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    /// Unit-norm column; the zero column maps to itself.
    #[track_caller]
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        column_check(xv, "l2_normalize");
        let norm = xv.frobenius_norm();
        let value = if norm == 0.0 { xv.clone() } else { xv.scale(1.0 / norm) };
        self.push(value, Op::L2Normalize { x, norm })
    }

    #[track_caller]
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        column_check(xv, "softmax");
        let value = Mat::from_vec(xv.rows(), 1, crate::tensor::softmax(xv.as_slice()));
        self.push(value, Op::Softmax(x))
    }

    /// Layer norm of a column with a learned gain and no bias.
    #[track_caller]
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        column_check(xv, "layer_norm");
        assert_eq!(xv.shape(), self.value(gain).shape(), "shape error in layer_norm");
        let n = xv.rows() as f64;
        let mean = xv.as_slice().iter().sum::<f64>() / n;
        let var = xv.as_slice().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normed = xv.map(|a| (a - mean) * inv_std);
        let value = normed.hadamard(self.value(gain));
        self.push(value, Op::LayerNorm { x, gain, normed, inv_std })
    }

    #[track_caller]
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).row_block(start, len);
        self.push(value, Op::SliceRows { x, start })
    }

    #[track_caller]
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "shape error in concat_rows");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    #[track_caller]
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "shape error in concat_cols");
            for r in 0..rows {
                for c in 0..m.cols() {
                    out.set(r, offset + c, m.get(r, c));
                }
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().sum::<f64>();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(x))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Option<Var> {
        let mut it = terms.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, t| self.add(acc, t)))
    }

    /// `−log softmax(logits)[target]`.
    #[track_caller]
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits);
        column_check(lv, "cross_entropy");
        assert!(target < lv.rows(), "target class {target} out of range");
        let probs = Mat::from_vec(lv.rows(), 1, crate::tensor::softmax(lv.as_slice()));
        let max = lv.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.as_slice().iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.get(target, 0);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, target, probs })
    }

    /// Mean squared error against a constant target.
    #[track_caller]
    pub fn mse(&mut self, pred: Var, target: &Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "shape error in mse");
        let n = (pv.rows() * pv.cols()) as f64;
        let loss = pv.sub(target).as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::Mse { pred, target: target.clone() })
    }

    /// Reverse pass from a `1 × 1` output, seeded with adjoint 1.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_with(output, Mat::from_vec(1, 1, vec![1.0]))
    }

    /// Reverse pass from any node with the given adjoint.
    #[track_caller]
    pub fn backward_with(&self, output: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "backward seed shape");
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[a.0], mul_nt(&g, val(*b)));
                    accumulate(&mut grads[b.0], mul_tn(val(*a), &g));
                }
                Op::Outer(a, b) => {
                    accumulate(&mut grads[a.0], g.matmul(val(*b)));
                    accumulate(&mut grads[b.0], mul_tn(&g, val(*a)));
                }
                Op::Dot(a, b) => {
                    let s = scalar(&g);
                    accumulate(&mut grads[a.0], val(*b).scale(s));
                    accumulate(&mut grads[b.0], val(*a).scale(s));
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a.0], g.hadamard(val(*b)));
                    accumulate(&mut grads[b.0], g.hadamard(val(*a)));
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::AddConst(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::ScalarMul(s, m) => {
                    let ds = g.frobenius_dot(val(*m));
                    accumulate(&mut grads[s.0], Mat::from_vec(1, 1, vec![ds]));
                    accumulate(&mut grads[m.0], g.scale(scalar(val(*s))));
                }
                Op::RowScale(col, m) => {
                    let mv = val(*m);
                    let dc = Mat::from_fn(mv.rows(), 1, |r, _| {
                        g.row_slice(r).iter().zip(mv.row_slice(r)).map(|(x, y)| x * y).sum()
                    });
                    accumulate(&mut grads[col.0], dc);
                    accumulate(&mut grads[m.0], g.scale_rows(&val(*col).col_vector(0)));
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|y| y * (1.0 - y));
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::EluPlusOne(a) => {
                    let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { x.exp() });
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::Silu(a) => {
                    let d = val(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::Gelu(a) => {
                    let d = val(*a).map(gelu_grad);
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::Recip(a) => {
                    let d = node.value.map(|y| -y * y);
                    accumulate(&mut grads[a.0], g.hadamard(&d));
                }
                Op::L2Normalize { x, norm } => {
                    if *norm == 0.0 {
                        accumulate(&mut grads[x.0], Mat::zeros(g.rows(), 1));
                    } else {
                        let y = &node.value;
                        let yg = y.frobenius_dot(&g);
                        let d = g.sub(&y.scale(yg)).scale(1.0 / norm);
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let yg = y.frobenius_dot(&g);
                    accumulate(&mut grads[x.0], y.hadamard(&g.map(|a| a - yg)));
                }
                Op::LayerNorm { x, gain, normed, inv_std } => {
                    accumulate(&mut grads[gain.0], g.hadamard(normed));
                    let gn = g.hadamard(val(*gain));
                    let n = gn.rows() as f64;
                    let mean_g = gn.as_slice().iter().sum::<f64>() / n;
                    let mean_gx = gn.frobenius_dot(normed) / n;
                    let dx = Mat::from_fn(gn.rows(), 1, |r, _| {
                        inv_std * (gn.get(r, 0) - mean_g - normed.get(r, 0) * mean_gx)
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let mut d = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            d.set(start + r, c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(*p).rows();
                        accumulate(&mut grads[p.0], g.row_block(offset, rows));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = val(*p).cols();
                        accumulate(&mut grads[p.0], g.col_block(offset, cols));
                        offset += cols;
                    }
                }
                Op::Sum(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads[x.0], Mat::from_fn(r, c, |_, _| scalar(&g)));
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let mut d = probs.clone();
                    d.set(*target, 0, d.get(*target, 0) - 1.0);
                    accumulate(&mut grads[logits.0], d.scale(scalar(&g)));
                }
                Op::Mse { pred, target } => {
                    let pv = val(*pred);
                    let n = (pv.rows() * pv.cols()) as f64;
                    accumulate(&mut grads[pred.0], pv.sub(target).scale(2.0 * scalar(&g) / n));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` built fresh on every call.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar_value(out)
        };
        let eps = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], m.shape());
            for e in 0..m.as_slice().len() {
                let mut plus = inputs.clone();
                plus[i].as_mut_slice()[e] += eps;
                let mut minus = inputs.clone();
                minus[i].as_mut_slice()[e] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.as_slice()[e];
                let denom = a.abs() + numeric.abs();
                if denom > 1e-12 {
                    assert!((a - numeric).abs() / denom < 1e-6, "input {i} entry {e}: {a} vs {numeric}");
                }
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::uniform(r, c, 1.0, rng)
    }

    #[test]
    fn matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 2, 3)], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let t = g.transpose(v[2]);
            let p = g.mul(ab, t);
            g.sum(p)
        });
    }

    #[test]
    fn outer_dot_scalar_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![rand_mat(&mut rng, 3, 1), rand_mat(&mut rng, 4, 1), rand_mat(&mut rng, 1, 1), rand_mat(&mut rng, 3, 1)],
            |g, v| {
                let o = g.outer(v[0], v[1]);
                let so = g.scalar_mul(v[2], o);
                let rs = g.row_scale(v[3], so);
                let d = g.dot(v[0], v[3]);
                let d = g.add_const(d, 3.0);
                let r = g.recip(d);
                let s = g.sum(rs);
                let m = g.mul(s, r);
                let om = g.one_minus(m);
                g.scale(om, 0.7)
            },
        );
    }

    #[test]
    fn pointwise_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_mat(&mut rng, 6, 1).scale(2.0), rand_mat(&mut rng, 6, 1)], |g, v| {
            let parts = [g.sigmoid(v[0]), g.tanh(v[0]), g.elu_plus_one(v[0]), g.silu(v[0]), g.gelu(v[0])];
            let mut acc = g.constant_scalar(0.0);
            for p in parts {
                let d = g.dot(p, v[1]);
                acc = g.add(acc, d);
            }
            acc
        });
    }

    #[test]
    fn normalizers_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = rand_mat(&mut rng, 5, 1);
        check(vec![rand_mat(&mut rng, 5, 1), rand_mat(&mut rng, 5, 1)], move |g, v| {
            let n = g.l2_normalize(v[0]);
            let ln = g.layer_norm(v[0], v[1]);
            let sm = g.softmax(ln);
            let sum = g.add(n, sm);
            let mse = g.mse(sum, &target);
            let ce = g.cross_entropy(n, 2);
            g.add(mse, ce)
        });
    }

    #[test]
    fn slicing_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![rand_mat(&mut rng, 6, 1), rand_mat(&mut rng, 4, 3)], |g, v| {
            let a = g.slice_rows(v[0], 1, 2);
            let b = g.slice_rows(v[0], 4, 2);
            let c = g.concat_rows(&[b, a]);
            let cols = g.concat_cols(&[c, v[1], c]);
            let sq = g.mul(cols, cols);
            let s = g.sum(sq);
            let parts: Vec<Var> = (0..3).map(|_| s).collect();
            g.add_all(&parts).unwrap()
        });
    }

    #[test]
    fn zero_column_normalizes_to_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::zeros(3, 1));
        let n = g.l2_normalize(x);
        assert_eq!(g.value(n), &Mat::zeros(3, 1));
        let s = g.sum(n);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &Mat::zeros(3, 1));
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let l = g.leaf(Mat::from_vec(2, 1, vec![0.0, 3f64.ln()]));
        let ce = g.cross_entropy(l, 1);
        assert!((g.scalar_value(ce) - (-(0.75f64).ln())).abs() < 1e-14);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Mat::identity(2));
        let b = g.leaf(Mat::identity(2));
        let s = g.sum(a);
        let grads = g.backward(s);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b, (2, 2)), Mat::zeros(2, 2));
    }
}
