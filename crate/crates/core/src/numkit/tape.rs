//! Reverse-mode differentiation over a recorded tape of row-batched matrix
//! operations.
//!
//! Every node holds a 2-D value (`[rows, cols]`, scalars are `[1, 1]`).
//! Operations append nodes; [`Tape::backward`] walks the tape once in reverse
//! and accumulates gradients for every node that depends on a parameter leaf.

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn, Exec};
use super::ops::log_softmax_into;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    NormalizeRows(Var, Vec<f64>),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    LogSoftmaxRows(Var, f64),
    MarginLogits { cos: Var, labels: Vec<Option<usize>>, scale: f64, margin: f64 },
    CrossEntropy(Var, Vec<f64>),
    PairDots(Var, Vec<(usize, usize)>),
    Sum(Var),
    Add(Var, Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Smallest row norm used when normalizing on the tape.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, zero-filled when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()),
            None => Tensor::matrix(r, c, vec![0.0; r * c]),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        1 => (1, t.shape()[0]),
        _ => (t.shape()[0], t.len() / t.shape()[0]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf. 1-D tensors become a single row.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let (r, c) = as_matrix(t);
        self.push(r, c, t.values().to_vec(), Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = as_matrix(t);
        self.push(r, c, t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        self.push(rows, cols, values, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    /// `a[n,k] · b[m,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, kb) = self.shape(b);
        assert_eq!(k, kb, "matmul_nt inner dimension");
        let out = matmul_nt(self.value(a), n, k, self.value(b), m, self.exec);
        let ng = self.needs(a) || self.needs(b);
        self.push(n, m, out, Op::MatMulNt(a, b), ng)
    }

    /// Adds a `[1, m]` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias shape");
        let b = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(m).for_each(|row| row.iter_mut().zip(&b).for_each(|(o, bi)| *o += bi));
        let ng = self.needs(a) || self.needs(bias);
        self.push(n, m, out, Op::AddBias(a, bias), ng)
    }

    /// `x · wᵀ + b` with `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(n, m, out, Op::Relu(a), ng)
    }

    /// Row-wise ℓ2 normalization.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let nr = dot(row, row).sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let ng = self.needs(a);
        self.push(n, m, out, Op::NormalizeRows(a, norms), ng)
    }

    /// Multiplies row `i` of `a` by `s[i]`; `s` is `[1, n]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(s).0 * self.shape(s).1, n, "row scale length");
        let sv = self.value(s).to_vec();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(m).zip(&sv).for_each(|(row, &si)| row.iter_mut().for_each(|v| *v *= si));
        let ng = self.needs(a) || self.needs(s);
        self.push(n, m, out, Op::ScaleRows(a, s), ng)
    }

    /// Elementwise `c · a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|v| c * v).collect();
        let ng = self.needs(a);
        self.push(n, m, out, Op::Affine(a, c), ng)
    }

    /// Row-wise `log softmax(a / temperature)`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0);
        let (n, m) = self.shape(a);
        let mut out = vec![0.0; n * m];
        for (o, row) in out.chunks_mut(m).zip(self.value(a).chunks(m)) {
            log_softmax_into(row, temperature, o);
        }
        let ng = self.needs(a);
        self.push(n, m, out, Op::LogSoftmaxRows(a, temperature), ng)
    }

    /// Additive angular margin logits from cosines: `s·cos(θ+m)` on each
    /// row's labelled column, `s·cos θ` elsewhere. Rows without a label get no
    /// margin.
    pub fn margin_logits(&mut self, cos: Var, labels: &[Option<usize>], scale: f64, margin: f64) -> Var {
        let (n, c) = self.shape(cos);
        assert_eq!(labels.len(), n, "one label slot per row");
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut out: Vec<f64> = self.value(cos).iter().map(|v| scale * v).collect();
        for (i, lab) in labels.iter().enumerate() {
            if let Some(y) = *lab {
                let ct = self.value(cos)[i * c + y];
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                out[i * c + y] = scale * (ct * cm - st * sm);
            }
        }
        let ng = self.needs(cos);
        self.push(n, c, out, Op::MarginLogits { cos, labels: labels.to_vec(), scale, margin }, ng)
    }

    /// Scalar `−Σ targets ∘ logp`; `targets` is a constant `[n, c]` matrix.
    pub fn cross_entropy(&mut self, logp: Var, targets: Vec<f64>) -> Var {
        let (n, m) = self.shape(logp);
        assert_eq!(targets.len(), n * m, "target shape");
        let v: f64 = -targets.iter().zip(self.value(logp)).filter(|(t, _)| **t != 0.0).map(|(t, l)| t * l).sum::<f64>();
        let ng = self.needs(logp);
        self.push(1, 1, vec![v], Op::CrossEntropy(logp, targets), ng)
    }

    /// `[1, P]` vector of dot products between the listed row pairs.
    pub fn pair_dots(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Var {
        let (_, m) = self.shape(a);
        let val = self.value(a);
        let out: Vec<f64> = pairs.iter().map(|&(i, j)| dot(&val[i * m..(i + 1) * m], &val[j * m..(j + 1) * m])).collect();
        let p = out.len();
        let ng = self.needs(a);
        self.push(1, p, out, Op::PairDots(a, pairs), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![v], Op::Sum(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(n, m, out, Op::Add(a, b), ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let exec = self.exec;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let (n, m) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::MatMulNt(a, b) => {
                    let (_, k) = self.shape(*a);
                    let (mb, _) = self.shape(*b);
                    if self.needs(*a) {
                        let da = matmul_nn(&dy, n, mb, self.value(*b), k, exec);
                        acc(&mut grads, *a, n * k, |g| axpy(1.0, &da, g));
                    }
                    if self.needs(*b) {
                        let db = matmul_tn(&dy, n, mb, self.value(*a), k, exec);
                        acc(&mut grads, *b, mb * k, |g| axpy(1.0, &db, g));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, m, |g| dy.chunks(m).for_each(|row| axpy(1.0, row, g)));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, n * m, |g| axpy(1.0, &dy, g));
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, n * m, |g| {
                        for ((gi, di), yi) in g.iter_mut().zip(&dy).zip(y) {
                            if *yi > 0.0 {
                                *gi += di;
                            }
                        }
                    });
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    acc(&mut grads, *a, n * m, |g| {
                        for r in 0..n {
                            let yr = &y[r * m..(r + 1) * m];
                            let dr = &dy[r * m..(r + 1) * m];
                            let proj = dot(yr, dr);
                            let inv = 1.0 / norms[r];
                            for ((gi, di), yi) in g[r * m..(r + 1) * m].iter_mut().zip(dr).zip(yr) {
                                *gi += (di - yi * proj) * inv;
                            }
                        }
                    });
                }
                Op::ScaleRows(a, s) => {
                    let av = self.value(*a);
                    let sv = self.value(*s);
                    if self.needs(*s) {
                        acc(&mut grads, *s, n, |g| {
                            for r in 0..n {
                                g[r] += dot(&dy[r * m..(r + 1) * m], &av[r * m..(r + 1) * m]);
                            }
                        });
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, n * m, |g| {
                            for r in 0..n {
                                axpy(sv[r], &dy[r * m..(r + 1) * m], &mut g[r * m..(r + 1) * m]);
                            }
                        });
                    }
                }
                Op::Affine(a, c) => acc(&mut grads, *a, n * m, |g| axpy(*c, &dy, g)),
                Op::LogSoftmaxRows(a, t) => {
                    let y = &node.value;
                    acc(&mut grads, *a, n * m, |g| {
                        for r in 0..n {
                            let dr = &dy[r * m..(r + 1) * m];
                            let total: f64 = dr.iter().sum();
                            for ((gi, di), yi) in g[r * m..(r + 1) * m].iter_mut().zip(dr).zip(&y[r * m..(r + 1) * m]) {
                                *gi += (di - yi.exp() * total) / t;
                            }
                        }
                    });
                }
                Op::MarginLogits { cos, labels, scale, margin } => {
                    let cv = self.value(*cos);
                    let (cm, sm) = (margin.cos(), margin.sin());
                    acc(&mut grads, *cos, n * m, |g| {
                        axpy(*scale, &dy, g);
                        for (i, lab) in labels.iter().enumerate() {
                            if let Some(y) = *lab {
                                let ct = cv[i * m + y];
                                let st = (1.0 - ct * ct).max(1e-12).sqrt();
                                let deriv = scale * (cm + ct * sm / st);
                                g[i * m + y] += dy[i * m + y] * (deriv - scale);
                            }
                        }
                    });
                }
                Op::CrossEntropy(a, t) => {
                    let (ra, ca) = self.shape(*a);
                    let d = dy[0];
                    acc(&mut grads, *a, ra * ca, |g| axpy(-d, t, g));
                }
                Op::PairDots(a, pairs) => {
                    let (ra, ca) = self.shape(*a);
                    let av = self.value(*a);
                    acc(&mut grads, *a, ra * ca, |g| {
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            let d = dy[p];
                            if d == 0.0 {
                                continue;
                            }
                            let (ri, rj) = (av[i * ca..(i + 1) * ca].to_vec(), av[j * ca..(j + 1) * ca].to_vec());
                            axpy(d, &rj, &mut g[i * ca..(i + 1) * ca]);
                            axpy(d, &ri, &mut g[j * ca..(j + 1) * ca]);
                        }
                    });
                }
                Op::Sum(a) => {
                    let (ra, ca) = self.shape(*a);
                    let d = dy[0];
                    acc(&mut grads, *a, ra * ca, |g| g.iter_mut().for_each(|x| *x += d));
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, n * m, |g| axpy(1.0, &dy, g));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, n * m, |g| axpy(1.0, &dy, g));
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        let shapes = self.nodes.iter().map(|n| (n.rows, n.cols)).collect();
        // intermediate gradients were consumed; only leaves keep theirs
        Grads { grads, shapes }
    }
}
