//! A minimal reverse-mode gradient tape over dense matrices.
//!
//! The op set is exactly what the networks in this crate need: dense layers,
//! an elementwise activation, hadamard products, row gathers, the per-channel
//! node-index matrix product of 2-FWL message passing, segment mean pooling
//! and the norms used by the losses. Values are `DMatrix<f64>`; every op
//! records its inputs and [`Tape::backward`] walks the list in reverse.

use std::sync::Arc;

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Tanh form of the Gaussian-error linear unit.
    Gelu,
    /// Passthrough; used by test fixtures.
    Identity,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// `eˣ` for `x` in [-40, 40], within a few ulp; branch-free so the
/// activation loop vectorizes.
fn exp_bounded(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-40.0, 40.0);
    // Adding and removing 1.5·2⁵² rounds to nearest without a libm call.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let k = (x * std::f64::consts::LOG2_E + SHIFT) - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r¹³; |r| ≤ ln2/2 keeps the remainder below 1e-17.
    let mut p = INV_FACT[13];
    for &c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    p * f64::from_bits(((k as i64 + 1023) as u64) << 52)
}

const INV_FACT: [f64; 14] = {
    let mut t = [1.0; 14];
    let mut i = 1;
    while i < 14 {
        t[i] = t[i - 1] / i as f64;
        i += 1;
    }
    t
};

fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (exp_bounded(2.0 * u) + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    gelu_with_grad(x).0
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_K * (x + GELU_C * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    (y, dy)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `x·w + 1·b` with `b` a single row.
    Affine(Var, Var, Var),
    /// `x + 1·b` with `b` a single row.
    AddRow(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    /// Elementwise activation with its derivative at the input.
    Act(Var, Option<Mat>),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    /// Output row `r` is input row `idx[r]`.
    Gather(Var, Arc<Vec<usize>>),
    /// Output row `r` is the elementwise product of rows `idx_k[r]` of each input.
    GatherProduct(Vec<(Var, Arc<Vec<usize>>)>),
    /// Input columns split into halves `A | B`; per column pair and per
    /// block of `n²` rows (row-major `n×n`), `s·A·B`.
    ChannelMatmul(Var, usize, f64),
    /// Mean of each run of `len` consecutive rows.
    SegmentMean(Var, usize),
    /// Euclidean norm of each row; the subgradient at 0 is 0.
    RowNorms(Var),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable tensor; its gradient lands in slot `index`.
    pub fn param(&mut self, index: usize, value: Mat) -> Var {
        self.push(value, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut v = self.value(x) * self.value(w);
        add_bias(&mut v, self.value(b));
        self.push(v, Op::Affine(x, w, b))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let mut v = self.value(x).clone();
        add_bias(&mut v, self.value(b));
        self.push(v, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        add_into(&mut v, self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = mul(self.value(a), self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => {
                let src = self.value(x);
                let mut v = vec![0.0; src.len()];
                let mut d = vec![0.0; src.len()];
                for ((vi, di), &xi) in v.iter_mut().zip(d.iter_mut()).zip(src.as_slice()) {
                    (*vi, *di) = gelu_with_grad(xi);
                }
                let (r, c) = src.shape();
                self.push(Mat::from_vec(r, c, v), Op::Act(x, Some(Mat::from_vec(r, c, d))))
            }
            Activation::Identity => {
                let v = self.value(x).clone();
                self.push(v, Op::Act(x, None))
            }
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = scaled(self.value(x), s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows());
        let v = [va.as_slice(), vb.as_slice()].concat();
        let v = Mat::from_vec(va.nrows(), va.ncols() + vb.ncols(), v);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let r = src.nrows();
        let v = Mat::from_column_slice(r, len, &src.as_slice()[start * r..(start + len) * r]);
        self.push(v, Op::SliceCols(x, start))
    }

    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let src = self.value(x);
        let (rows, cols) = (src.nrows(), src.ncols());
        let s = src.as_slice();
        let mut v = Vec::with_capacity(idx.len() * cols);
        for c in 0..cols {
            let col = &s[c * rows..(c + 1) * rows];
            v.extend(idx.iter().map(|&k| col[k]));
        }
        let v = Mat::from_vec(idx.len(), cols, v);
        self.push(v, Op::Gather(x, idx))
    }

    /// Same as gathering each input and multiplying the results, without the
    /// intermediates.
    pub fn gather_product(&mut self, parts: Vec<(Var, Arc<Vec<usize>>)>) -> Var {
        let rows = parts[0].1.len();
        let cols = self.value(parts[0].0).ncols();
        let mut v = vec![1.0; rows * cols];
        for (x, idx) in &parts {
            let src = self.value(*x);
            assert_eq!((idx.len(), src.ncols()), (rows, cols));
            let (sr, s) = (src.nrows(), src.as_slice());
            for (c, out) in v.chunks_exact_mut(rows).enumerate() {
                let col = &s[c * sr..(c + 1) * sr];
                for (o, &k) in out.iter_mut().zip(idx.iter()) {
                    *o *= col[k];
                }
            }
        }
        self.push(Mat::from_vec(rows, cols, v), Op::GatherProduct(parts))
    }

    /// `ab` holds `A` in its first half of columns and `B` in the second.
    pub fn channel_matmul(&mut self, ab: Var, n: usize, scale: f64) -> Var {
        let v = self.value(ab);
        let (rows, h) = (v.nrows(), v.ncols() / 2);
        assert_eq!(v.ncols(), 2 * h);
        assert_eq!(rows % (n * n), 0);
        let (va, vb) = v.as_slice().split_at(rows * h);
        let mut out = vec![0.0; rows * h];
        for ((co, ca), cb) in out.chunks_exact_mut(rows).zip(va.chunks_exact(rows)).zip(vb.chunks_exact(rows)) {
            for ((o, a), b) in co.chunks_exact_mut(n * n).zip(ca.chunks_exact(n * n)).zip(cb.chunks_exact(n * n)) {
                block_matmul(a, b, o, n);
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        self.push(Mat::from_vec(rows, h, out), Op::ChannelMatmul(ab, n, scale))
    }

    pub fn segment_mean(&mut self, x: Var, len: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows() % len, 0);
        let segs = src.nrows() / len;
        let inv = 1.0 / len as f64;
        // Segments never straddle a column, so column-major chunks line up.
        let v = src.as_slice().chunks_exact(len).map(|s| s.iter().sum::<f64>() * inv).collect();
        let v = Mat::from_vec(segs, src.ncols(), v);
        self.push(v, Op::SegmentMean(x, len))
    }

    pub fn row_norms(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let v = Mat::from_fn(src.nrows(), 1, |r, _| src.row(r).norm());
        self.push(v, Op::RowNorms(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(x).norm_squared());
        self.push(v, Op::SumSquares(x))
    }

    /// Backpropagates from the scalar `root`; gradients of [`Tape::param`]
    /// nodes are added into `grads[index]`.
    pub fn backward(&self, root: Var, grads: &mut [Mat]) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::from_element(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(k) => add_into(&mut grads[*k], &g),
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Affine(x, w, b) => {
                    let gx = &g * self.value(*w).transpose();
                    let gw = self.value(*x).transpose() * &g;
                    let gb = column_sums(&g);
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *w, gw);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = column_sums(&g);
                    accumulate(&mut adj, *b, gb);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = mul(&g, self.value(*b));
                    let gb = mul(&g, self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Act(x, d) => {
                    let gx = match d {
                        Some(d) => mul(&g, d),
                        None => g,
                    };
                    accumulate(&mut adj, *x, gx);
                }
                Op::Scale(x, s) => accumulate(&mut adj, *x, scaled(&g, *s)),
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    let (r, split) = (g.nrows(), na * g.nrows());
                    let ga = Mat::from_column_slice(r, na, &g.as_slice()[..split]);
                    let gb = Mat::from_column_slice(r, g.ncols() - na, &g.as_slice()[split..]);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::SliceCols(x, start) => {
                    let src = self.value(*x);
                    let mut gx = Mat::zeros(src.nrows(), src.ncols());
                    gx.columns_mut(*start, g.ncols()).copy_from(&g);
                    accumulate(&mut adj, *x, gx);
                }
                Op::Gather(x, idx) => {
                    let src = self.value(*x);
                    let rows = src.nrows();
                    let mut gx = Mat::zeros(rows, src.ncols());
                    let gs = gx.as_mut_slice();
                    for (c, gc) in g.as_slice().chunks_exact(idx.len()).enumerate() {
                        let xc = &mut gs[c * rows..(c + 1) * rows];
                        for (&gi, &k) in gc.iter().zip(idx.iter()) {
                            xc[k] += gi;
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::GatherProduct(parts) => {
                    let rows = g.nrows();
                    let gathered: Vec<Vec<f64>> = parts
                        .iter()
                        .map(|(x, idx)| {
                            let src = self.value(*x);
                            let sr = src.nrows();
                            let mut out = Vec::with_capacity(g.len());
                            for col in src.as_slice().chunks_exact(sr) {
                                out.extend(idx.iter().map(|&i| col[i]));
                            }
                            out
                        })
                        .collect();
                    // `before` runs over the factors left of k, times the incoming gradient.
                    let mut before = g.as_slice().to_vec();
                    let mut after = vec![1.0; g.len()];
                    let mut others = vec![Vec::new(); parts.len()];
                    for k in (0..parts.len()).rev() {
                        others[k] = after.clone();
                        after.iter_mut().zip(&gathered[k]).for_each(|(a, x)| *a *= x);
                    }
                    for (k, (x, idx)) in parts.iter().enumerate() {
                        let w = &mut others[k];
                        w.iter_mut().zip(&before).for_each(|(a, b)| *a *= b);
                        before.iter_mut().zip(&gathered[k]).for_each(|(b, x)| *b *= x);
                        let src = self.value(*x);
                        let sr = src.nrows();
                        let mut gx = Mat::zeros(sr, src.ncols());
                        for (xc, wc) in gx.as_mut_slice().chunks_exact_mut(sr).zip(w.chunks_exact(rows)) {
                            for (&wi, &i) in wc.iter().zip(idx.iter()) {
                                xc[i] += wi;
                            }
                        }
                        accumulate(&mut adj, *x, gx);
                    }
                }
                Op::ChannelMatmul(ab, n, scale) => {
                    let (n, v) = (*n, self.value(*ab));
                    let (rows, h) = (v.nrows(), v.ncols() / 2);
                    let (va, vb) = v.as_slice().split_at(rows * h);
                    let gs = scaled(&g, *scale);
                    let mut gab = vec![0.0; rows * 2 * h];
                    let (ga, gb) = gab.split_at_mut(rows * h);
                    let cols = va.chunks_exact(rows).zip(vb.chunks_exact(rows)).zip(gs.as_slice().chunks_exact(rows));
                    for (((ca, cb), cg), (cga, cgb)) in cols.zip(ga.chunks_exact_mut(rows).zip(gb.chunks_exact_mut(rows))) {
                        for blk in 0..rows / (n * n) {
                            let r = blk * n * n..(blk + 1) * n * n;
                            // dA = dP·Bᵀ, dB = Aᵀ·dP per block.
                            block_matmul_bt(&cg[r.clone()], &cb[r.clone()], &mut cga[r.clone()], n);
                            block_matmul_at(&ca[r.clone()], &cg[r.clone()], &mut cgb[r.clone()], n);
                        }
                    }
                    accumulate(&mut adj, *ab, Mat::from_vec(rows, 2 * h, gab));
                }
                Op::SegmentMean(x, len) => {
                    let src = self.value(*x);
                    let inv = 1.0 / *len as f64;
                    let mut gx = Vec::with_capacity(src.len());
                    for &gi in g.as_slice() {
                        gx.extend(std::iter::repeat_n(gi * inv, *len));
                    }
                    let gx = Mat::from_vec(src.nrows(), src.ncols(), gx);
                    accumulate(&mut adj, *x, gx);
                }
                Op::RowNorms(x) => {
                    let src = self.value(*x);
                    let norms = &node.value;
                    let gx = Mat::from_fn(src.nrows(), src.ncols(), |r, c| {
                        if norms[(r, 0)] > 0.0 {
                            g[(r, 0)] * src[(r, c)] / norms[(r, 0)]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sum(x) => {
                    let src = self.value(*x);
                    accumulate(&mut adj, *x, Mat::from_element(src.nrows(), src.ncols(), g[(0, 0)]));
                }
                Op::SumSquares(x) => {
                    let gx = scaled(self.value(*x), 2.0 * g[(0, 0)]);
                    accumulate(&mut adj, *x, gx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape());
    let v = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.nrows(), a.ncols(), v)
}

fn scaled(a: &Mat, s: f64) -> Mat {
    Mat::from_vec(a.nrows(), a.ncols(), a.as_slice().iter().map(|x| x * s).collect())
}

fn add_bias(v: &mut Mat, bias: &Mat) {
    assert_eq!(bias.shape(), (1, v.ncols()));
    let r = v.nrows();
    for (col, &b) in v.as_mut_slice().chunks_exact_mut(r).zip(bias.as_slice()) {
        col.iter_mut().for_each(|x| *x += b);
    }
}

fn column_sums(g: &Mat) -> Mat {
    let sums = g.as_slice().chunks_exact(g.nrows()).map(|c| c.iter().sum()).collect();
    Mat::from_vec(1, g.ncols(), sums)
}

fn add_into(acc: &mut Mat, g: &Mat) {
    assert_eq!(acc.shape(), g.shape());
    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += b;
    }
}

/// `out = a·b` for row-major `n×n` slices.
fn block_matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    for u in 0..n {
        let row = &mut out[u * n..(u + 1) * n];
        for j in 0..n {
            let auj = a[u * n + j];
            if auj == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += auj * bv;
            }
        }
    }
}

/// `out += g·bᵀ`.
fn block_matmul_bt(g: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    for u in 0..n {
        let grow = &g[u * n..(u + 1) * n];
        for j in 0..n {
            let brow = &b[j * n..(j + 1) * n];
            out[u * n + j] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ·g`.
fn block_matmul_at(a: &[f64], g: &[f64], out: &mut [f64], n: usize) {
    for u in 0..n {
        let grow = &g[u * n..(u + 1) * n];
        for j in 0..n {
            let auj = a[u * n + j];
            if auj == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += auj * gv;
            }
        }
    }
}
