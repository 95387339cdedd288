//! Reverse-mode tape over dense matrices.
//!
//! Every recorded value is a row-major matrix; scalars are 1x1. Operations
//! append nodes in topological order, so one reverse sweep propagates the
//! loss gradient to every parameter leaf. A tape is single-use: backward
//! consumes it and a second call reports an error instead of returning
//! silently wrong gradients.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    Exp { a: usize },
    Neg { a: usize },
    Relu { a: usize },
    Softplus { a: usize },
    Sigmoid { a: usize },
    ClampUpper { a: usize, cap: f64 },
    Sum { a: usize },
    Mean { a: usize },
    Mse { a: usize, b: usize },
    GatherBilinear { grid: usize, coords: usize },
    Reshape { a: usize },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
    param_count: usize,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Pixel-center bilinear footprint of a continuous coordinate on an
/// `h` x `w` grid: up to four (row, col, weight) corners, out-of-grid
/// corners dropped. For a fully interior coordinate the four weights are
/// non-negative and sum to 1.
pub fn bilinear_footprint(
    h: usize,
    w: usize,
    u: f64,
    v: f64,
) -> ([(usize, usize, f64); 4], usize) {
    let x = u - 0.5;
    let y = v - 0.5;
    let j0 = x.floor();
    let i0 = y.floor();
    let fx = x - j0;
    let fy = y - i0;
    let mut out = [(0usize, 0usize, 0.0f64); 4];
    let mut n = 0;
    let candidates = [
        (i0, j0, (1.0 - fy) * (1.0 - fx)),
        (i0, j0 + 1.0, (1.0 - fy) * fx),
        (i0 + 1.0, j0, fy * (1.0 - fx)),
        (i0 + 1.0, j0 + 1.0, fy * fx),
    ];
    for (i, j, wgt) in candidates {
        if i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w {
            out[n] = (i as usize, j as usize, wgt);
            n += 1;
        }
    }
    (out, n)
}

/// Bilinear lookup on a plain grid, same semantics as the tape op:
/// out-of-bounds fades to zero.
pub fn bilinear_sample(grid: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let (corners, n) = bilinear_footprint(h, w, u, v);
    corners[..n]
        .iter()
        .map(|&(i, j, wgt)| wgt * grid[i * w + j])
        .sum()
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    // Strides express the (possibly transposed) views over row-major data.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        assert!(!self.spent, "reading values from a consumed tape");
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Constant leaf from a tensor; rank-1 tensors become column vectors.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf { param: None }, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf { param: None }, false)
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Var {
        self.push(
            rows,
            cols,
            vec![1.0; rows * cols],
            Op::Leaf { param: None },
            false,
        )
    }

    /// Learnable leaf: copies the parameter's current value and remembers
    /// its id so backward can report the gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.param_count = self.param_count.max(id.index() + 1);
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(AutodiffError::Shape(format!(
                "matmul [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        dgemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            0.0,
            &mut out,
        );
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(m, n, out, Op::Matmul { a: a.0, b: b.0 }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::Shape(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(r, c, out, Op::Add { a: a.0, b: b.0 }, ng))
    }

    /// Adds a 1 x n row vector to every row of an m x n matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(AutodiffError::Shape(format!(
                "add_row [{m}x{n}] + [{rr}x{rc}]"
            )));
        }
        let rowv = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(n)
            .flat_map(|r| r.iter().zip(rowv).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(row);
        Ok(self.push(m, n, out, Op::AddRow { a: a.0, row: row.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(r, c, out, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| k * x).collect();
        let ng = self.needs_grad(a);
        self.push(r, c, out, Op::Scale { a: a.0, k }, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.needs_grad(a);
        self.push(r, c, out, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    /// min(x, cap). The subgradient at x == cap is 1 (pass-through), which
    /// keeps saturated values trainable from below.
    pub fn clamp_upper(&mut self, a: Var, cap: f64) -> Var {
        self.unary(a, |x| x.min(cap), Op::ClampUpper { a: a.0, cap })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs_grad(a);
        self.push(1, 1, vec![s], Op::Sum { a: a.0 }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs_grad(a);
        self.push(1, 1, vec![s / len as f64], Op::Mean { a: a.0 }, ng)
    }

    /// Mean squared error between two same-shape values, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mse")?;
        let len = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(1, 1, vec![s / len as f64], Op::Mse { a: a.0, b: b.0 }, ng))
    }

    /// Bilinear lookups into a 2-D grid at M continuous (u, v) coordinates
    /// (an M x 2 constant). Out-of-bounds samples yield 0 with no gradient.
    /// Differentiable with respect to the grid only.
    pub fn gather_bilinear(&mut self, grid: Var, coords: Var) -> Result<Var, AutodiffError> {
        let (h, w) = self.shape(grid);
        let (m, two) = self.shape(coords);
        if two != 2 {
            return Err(AutodiffError::Shape(format!(
                "gather_bilinear coords must be Mx2, got {m}x{two}"
            )));
        }
        debug_assert!(
            !self.needs_grad(coords),
            "gather_bilinear does not differentiate through coordinates"
        );
        let gridv = &self.nodes[grid.0].value;
        let coordv = &self.nodes[coords.0].value;
        let out = (0..m)
            .map(|i| bilinear_sample(gridv, h, w, coordv[2 * i], coordv[2 * i + 1]))
            .collect();
        let ng = self.needs_grad(grid);
        Ok(self.push(
            m,
            1,
            out,
            Op::GatherBilinear {
                grid: grid.0,
                coords: coords.0,
            },
            ng,
        ))
    }

    /// Shape-only view; the flat data is unchanged.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(AutodiffError::Shape(format!(
                "reshape [{r}x{c}] -> [{rows}x{cols}]"
            )));
        }
        let out = self.nodes[a.0].value.clone();
        let ng = self.needs_grad(a);
        Ok(self.push(rows, cols, out, Op::Reshape { a: a.0 }, ng))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient bundle for
    /// every parameter leaf reached and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.spent {
            return Err(AutodiffError::TapeSpent);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(AutodiffError::NotScalar(ln.rows, ln.cols));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.param_count);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, &mut out);
        }

        self.nodes.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let nodes = &self.nodes;

        // Allocates the input's gradient buffer on first touch; inputs that
        // cannot influence any parameter are skipped entirely.
        macro_rules! grad_of {
            ($j:expr) => {
                grads[$j].get_or_insert_with(|| vec![0.0; nodes[$j].value.len()])
            };
        }
        macro_rules! if_tracked {
            ($j:expr, $body:expr) => {
                if nodes[$j].needs_grad {
                    $body
                }
            };
        }

        match nodes[i].op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    out.add_to(pid, g);
                }
            }
            Op::Matmul { a, b } => {
                let m = nodes[a].rows;
                let k = nodes[a].cols;
                let n = nodes[b].cols;
                if_tracked!(a, {
                    // dA += dC * B^T
                    let bv = &nodes[b].value;
                    dgemm(m, n, k, g, false, bv, true, 1.0, grad_of!(a));
                });
                if_tracked!(b, {
                    // dB += A^T * dC
                    let av = &nodes[a].value;
                    dgemm(k, m, n, av, true, g, false, 1.0, grad_of!(b));
                });
            }
            Op::Add { a, b } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
                if_tracked!(b, {
                    let gb = grad_of!(b);
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
            }
            Op::AddRow { a, row } => {
                let n = nodes[i].cols;
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
                if_tracked!(row, {
                    let gr = grad_of!(row);
                    for (col, dst) in gr.iter_mut().enumerate() {
                        let mut s = 0.0;
                        let mut idx = col;
                        while idx < g.len() {
                            s += g[idx];
                            idx += n;
                        }
                        *dst += s;
                    }
                });
            }
            Op::Mul { a, b } => {
                if_tracked!(a, {
                    let bv = &nodes[b].value;
                    let ga = grad_of!(a);
                    for ((dst, src), y) in ga.iter_mut().zip(g).zip(bv) {
                        *dst += src * y;
                    }
                });
                if_tracked!(b, {
                    let av = &nodes[a].value;
                    let gb = grad_of!(b);
                    for ((dst, src), x) in gb.iter_mut().zip(g).zip(av) {
                        *dst += src * x;
                    }
                });
            }
            Op::Scale { a, k } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += k * src;
                    }
                });
            }
            Op::Exp { a } => {
                if_tracked!(a, {
                    let outv = &nodes[i].value;
                    let ga = grad_of!(a);
                    for ((dst, src), y) in ga.iter_mut().zip(g).zip(outv) {
                        *dst += src * y;
                    }
                });
            }
            Op::Neg { a } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst -= src;
                    }
                });
            }
            Op::Relu { a } => {
                if_tracked!(a, {
                    let av = &nodes[a].value;
                    let ga = grad_of!(a);
                    for ((dst, src), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *dst += src;
                        }
                    }
                });
            }
            Op::Softplus { a } => {
                if_tracked!(a, {
                    let av = &nodes[a].value;
                    let ga = grad_of!(a);
                    for ((dst, src), x) in ga.iter_mut().zip(g).zip(av) {
                        *dst += src * stable_sigmoid(*x);
                    }
                });
            }
            Op::Sigmoid { a } => {
                if_tracked!(a, {
                    let outv = &nodes[i].value;
                    let ga = grad_of!(a);
                    for ((dst, src), s) in ga.iter_mut().zip(g).zip(outv) {
                        *dst += src * s * (1.0 - s);
                    }
                });
            }
            Op::ClampUpper { a, cap } => {
                if_tracked!(a, {
                    let av = &nodes[a].value;
                    let ga = grad_of!(a);
                    for ((dst, src), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x <= cap {
                            *dst += src;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for dst in ga.iter_mut() {
                        *dst += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    let k = g[0] / ga.len() as f64;
                    for dst in ga.iter_mut() {
                        *dst += k;
                    }
                });
            }
            Op::Mse { a, b } => {
                let len = nodes[a].value.len() as f64;
                let k = 2.0 * g[0] / len;
                if_tracked!(a, {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let ga = grad_of!(a);
                    for ((dst, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *dst += k * (x - y);
                    }
                });
                if_tracked!(b, {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let gb = grad_of!(b);
                    for ((dst, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *dst -= k * (x - y);
                    }
                });
            }
            Op::GatherBilinear { grid, coords } => {
                if_tracked!(grid, {
                    let h = nodes[grid].rows;
                    let w = nodes[grid].cols;
                    let cv = &nodes[coords].value;
                    let gg = grad_of!(grid);
                    for (m, gm) in g.iter().enumerate() {
                        let (corners, n) = bilinear_footprint(h, w, cv[2 * m], cv[2 * m + 1]);
                        for &(r, c, wgt) in &corners[..n] {
                            gg[r * w + c] += wgt * gm;
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                if_tracked!(a, {
                    let ga = grad_of!(a);
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
            }
        }
    }
}
