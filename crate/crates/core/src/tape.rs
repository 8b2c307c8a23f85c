//! A minimal reverse-mode tape over [`Matrix`] values.
//!
//! Only the operations the encoders, prompt assembly and classifier need are
//! provided. Losses are evaluated outside the tape and seed the backward pass
//! with their gradient w.r.t. the tape outputs.

use crate::tensor::{Matrix, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows, like.cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulT(a, b), v, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, b.cols, "bias width");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddRow(a, bias), v, ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "hadamard shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Hadamard(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|x| x.tanh()).collect());
        let ng = self.ng(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    /// Column-wise mean, producing a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols];
        for r in 0..src.rows {
            for (o, x) in out.iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / src.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), Matrix::row_vector(out), ng)
    }

    /// Divides each row by `sqrt(‖row‖² + ε)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let ng = self.ng(a);
        self.push(Op::NormalizeRows(a), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_vec(rows, cols, data), ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec(ids.len(), t.cols, data);
        let ng = self.ng(table);
        self.push(Op::GatherRows(table, ids.to_vec()), v, ng)
    }

    /// Runs the reverse pass from the given output seeds.
    pub fn backward(&self, seeds: Vec<(Var, Matrix)>) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed shape");
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ; da = g b; db = gᵀ a
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.ng(*bias) {
                        let mut gb = vec![0.0; g.cols];
                        for r in 0..g.rows {
                            for (o, x) in gb.iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *bias, Matrix::row_vector(gb));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, elementwise(&g, self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, elementwise(&g, self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.scale(*s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let inv = 1.0 / src.rows as f64;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = x * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let src = self.value(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        let n = (src.row(r).iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (q - p * inner) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        if self.ng(p) {
                            let slice = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, g.cols, slice));
                        }
                        offset += rows;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `Σ c ⊙ f(x)` built by `build`; checks dx against central differences.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&mut tape, xv);
        let c = Matrix::randn(tape.value(out).rows, tape.value(out).cols, 1.0, &mut rng);
        let grads = tape.backward(vec![(out, c.clone())]);
        let analytic = grads.get_or_zeros(xv, &x);

        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(m.clone(), false);
            let o = build(&mut t, v);
            crate::tensor::dot(&t.value(o).data, &c.data)
        };
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (eval(&p) - eval(&m)) / (2.0 * eps);
            let a = analytic.data[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "coord {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn softmax_attention_block_gradient() {
        let w = sample(4, 4, 11);
        check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let q = t.matmul(x, wv);
                let s = t.matmul_t(q, x);
                let s = t.scale(s, 0.5);
                let a = t.softmax_rows(s);
                let h = t.matmul(a, x);
                let h = t.add(h, x);
                t.tanh(h)
            },
            sample(3, 4, 1),
        );
    }

    #[test]
    fn normalize_mean_and_gather_gradients() {
        check(
            |t, x| {
                let g = t.gather_rows(x, &[0, 2, 0, 1]);
                let m = t.mean_rows(g);
                let both = t.concat_rows(&[m, x]);
                let n = t.normalize_rows(both);
                t.hadamard(n, both)
            },
            sample(3, 5, 2),
        );
    }

    #[test]
    fn add_row_gradient_flows_to_bias() {
        check(
            |t, b| {
                let x = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
                let y = t.add_row(x, b);
                t.tanh(y)
            },
            sample(1, 2, 5),
        );
    }
}
