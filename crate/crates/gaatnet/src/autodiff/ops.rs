//! Forward operations and their vector-Jacobian products.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::{assert_finite, Tensor};

/// Deterministic parallel matmul: the output is split into fixed row
/// chunks, each computed by one serial dgemm call, so results are bitwise
/// identical for any thread count.
pub(crate) fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul: {n}x{k} . {k2}x{m}");
    let mut out = Array2::<f64>::zeros((n, m));
    const CHUNK: usize = 256;
    if n <= CHUNK || n * k * m < (1 << 22) {
        general_mat_mul(1.0, &a, &b, 0.0, &mut out);
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut chunk)| {
            let lo = i * CHUNK;
            let hi = (lo + CHUNK).min(n);
            general_mat_mul(1.0, &a.slice(s![lo..hi, ..]), &b, 0.0, &mut chunk);
        });
    out
}

/// Stable row softmax in place.
fn softmax_rows_inplace(x: &mut Array2<f64>) {
    x.axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        });
}

/// Contiguous index ranges partitioning `0..total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn new(offsets: Vec<usize>) -> Self {
        assert!(!offsets.is_empty() && offsets[0] == 0, "bad segment offsets");
        assert!(
            offsets.windows(2).all(|w| w[0] <= w[1]),
            "segment offsets must be non-decreasing"
        );
        Segments { offsets }
    }

    /// Build from per-segment lengths.
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            offsets.push(offsets.last().unwrap() + len);
        }
        Segments { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, seg: usize) -> std::ops::Range<usize> {
        self.offsets[seg]..self.offsets[seg + 1]
    }
}

/// Immutable CSR matrix with a precomputed transpose, for constant-weight
/// sparse products (e.g. averaging sampled distant-neighbor rows).
#[derive(Debug, Clone)]
pub struct SparseMat {
    out_dim: usize,
    in_dim: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_col: Vec<u32>,
    t_val: Vec<f64>,
}

impl SparseMat {
    /// `rows[i]` holds the (column, weight) entries of output row `i`.
    pub fn from_rows(in_dim: usize, rows: &[Vec<(u32, f64)>]) -> Self {
        let out_dim = rows.len();
        let mut row_ptr = Vec::with_capacity(out_dim + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for entries in rows {
            for &(c, w) in entries {
                assert!((c as usize) < in_dim, "sparse column out of range");
                col.push(c);
                val.push(w);
            }
            row_ptr.push(col.len());
        }
        // Transpose structure.
        let mut t_counts = vec![0usize; in_dim];
        for &c in &col {
            t_counts[c as usize] += 1;
        }
        let mut t_row_ptr = vec![0usize; in_dim + 1];
        for i in 0..in_dim {
            t_row_ptr[i + 1] = t_row_ptr[i] + t_counts[i];
        }
        let mut cursor = t_row_ptr.clone();
        let mut t_col = vec![0u32; col.len()];
        let mut t_val = vec![0f64; col.len()];
        for r in 0..out_dim {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = col[k] as usize;
                t_col[cursor[c]] = r as u32;
                t_val[cursor[c]] = val[k];
                cursor[c] += 1;
            }
        }
        SparseMat {
            out_dim,
            in_dim,
            row_ptr,
            col,
            val,
            t_row_ptr,
            t_col,
            t_val,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.in_dim, "fixed_spmm shape");
        Self::csr_product(self.out_dim, &self.row_ptr, &self.col, &self.val, x)
    }

    fn apply_transpose(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.out_dim, "fixed_spmm transpose shape");
        Self::csr_product(self.in_dim, &self.t_row_ptr, &self.t_col, &self.t_val, x)
    }

    fn csr_product(
        out_rows: usize,
        row_ptr: &[usize],
        col: &[u32],
        val: &[f64],
        x: &Array2<f64>,
    ) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((out_rows, d));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                for k in row_ptr[i]..row_ptr[i + 1] {
                    let src = x.row(col[k] as usize);
                    let w = val[k];
                    for (o, &v) in row.iter_mut().zip(src.iter()) {
                        *o += w * v;
                    }
                }
            });
        out
    }
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) enum Op {
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    MulElem(Tensor, Tensor),
    DivElem(Tensor, Tensor),
    AddRowBroadcast(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ConcatCols(Vec<Tensor>),
    SliceCols(Tensor, usize, usize),
    SliceRows(Tensor, usize, usize),
    LeakyRelu(Tensor, f64),
    Relu(Tensor),
    Elu(Tensor),
    Gelu(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Sqrt(Tensor),
    MaxScalar(Tensor, f64),
    RowSoftmaxMasked(Tensor, Rc<Array2<bool>>),
    LayerNorm {
        x: Tensor,
        scale: Tensor,
        shift: Tensor,
        eps: f64,
    },
    Dropout(Tensor, Rc<Array2<f64>>),
    RowSum(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    GatherRows(Tensor, Rc<Vec<u32>>),
    SegmentSoftmax(Tensor, Rc<Segments>),
    SegmentLogSumExp(Tensor, Rc<Segments>),
    SegmentWeightedSum {
        weights: Tensor,
        feats: Tensor,
        src: Rc<Vec<u32>>,
        seg: Rc<Segments>,
    },
    FixedSpmm(Rc<SparseMat>, Tensor),
    AttentionHead {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        bias: Option<Tensor>,
    },
    BceLoss {
        scores: Tensor,
        labels: Rc<Vec<f64>>,
        eps: f64,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b)
            | Op::DivElem(a, b)
            | Op::AddRowBroadcast(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SliceCols(a, _, _)
            | Op::SliceRows(a, _, _)
            | Op::LeakyRelu(a, _)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::MaxScalar(a, _)
            | Op::RowSoftmaxMasked(a, _)
            | Op::Dropout(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::SegmentLogSumExp(a, _)
            | Op::FixedSpmm(_, a)
            | Op::BceLoss { scores: a, .. } => vec![a.clone()],
            Op::ConcatCols(parts) => parts.clone(),
            Op::SegmentWeightedSum { weights, feats, .. } => {
                vec![weights.clone(), feats.clone()]
            }
            Op::LayerNorm { x, scale, shift, .. } => {
                vec![x.clone(), scale.clone(), shift.clone()]
            }
            Op::AttentionHead { q, k, v, bias } => {
                let mut p = vec![q.clone(), k.clone(), v.clone()];
                if let Some(b) = bias {
                    p.push(b.clone());
                }
                p
            }
        }
    }

    /// Push this node's gradient to its parents. `out` is the node's own
    /// forward output, `g` the upstream gradient.
    pub(crate) fn vjp(&self, out: &Array2<f64>, g: &Array2<f64>) {
        match self {
            Op::Matmul(a, b) => {
                if a.requires_grad() {
                    let da = par_matmul(g.view(), b.value().t());
                    a.accumulate_grad(da);
                }
                if b.requires_grad() {
                    let db = par_matmul(a.value().t(), g.view());
                    b.accumulate_grad(db);
                }
            }
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(g.clone());
                }
                if b.requires_grad() {
                    b.accumulate_grad(g.clone());
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(g.clone());
                }
                if b.requires_grad() {
                    b.accumulate_grad(-g);
                }
            }
            Op::MulElem(a, b) => {
                if a.requires_grad() {
                    let da = g * &*b.value();
                    a.accumulate_grad(da);
                }
                if b.requires_grad() {
                    let db = g * &*a.value();
                    b.accumulate_grad(db);
                }
            }
            Op::DivElem(a, b) => {
                if a.requires_grad() {
                    let da = g / &*b.value();
                    a.accumulate_grad(da);
                }
                if b.requires_grad() {
                    let bv = b.value();
                    let db = -(g * &*a.value()) / (&*bv * &*bv);
                    drop(bv);
                    b.accumulate_grad(db);
                }
            }
            Op::AddRowBroadcast(a, row) => {
                if a.requires_grad() {
                    a.accumulate_grad(g.clone());
                }
                if row.requires_grad() {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    row.accumulate_grad(summed);
                }
            }
            Op::Scale(a, c) => {
                if a.requires_grad() {
                    a.accumulate_grad(g * *c);
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(g.clone());
                }
            }
            Op::ConcatCols(parts) => {
                let mut lo = 0;
                for p in parts {
                    let w = p.shape().1;
                    if p.requires_grad() {
                        p.accumulate_grad(g.slice(s![.., lo..lo + w]).to_owned());
                    }
                    lo += w;
                }
            }
            Op::SliceCols(a, lo, hi) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let mut da = Array2::zeros((r, c));
                    da.slice_mut(s![.., *lo..*hi]).assign(g);
                    a.accumulate_grad(da);
                }
            }
            Op::SliceRows(a, lo, hi) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let mut da = Array2::zeros((r, c));
                    da.slice_mut(s![*lo..*hi, ..]).assign(g);
                    a.accumulate_grad(da);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if a.requires_grad() {
                    let av = a.value();
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| {
                        if x <= 0.0 {
                            *d *= slope;
                        }
                    });
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let av = a.value();
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::Elu(a) => {
                if a.requires_grad() {
                    // For x <= 0 the output is e^x - 1, so e^x = out + 1.
                    let av = a.value();
                    let mut da = g.clone();
                    for ((d, &x), &o) in da.iter_mut().zip(av.iter()).zip(out.iter()) {
                        if x <= 0.0 {
                            *d *= o + 1.0;
                        }
                    }
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::Gelu(a) => {
                if a.requires_grad() {
                    let av = a.value();
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| *d *= gelu_grad_scalar(x));
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let mut da = g.clone();
                    da.zip_mut_with(out, |d, &o| *d *= o * (1.0 - o));
                    a.accumulate_grad(da);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(g * out);
                }
            }
            Op::Sqrt(a) => {
                if a.requires_grad() {
                    let mut da = g.clone();
                    da.zip_mut_with(out, |d, &o| *d *= 0.5 / o);
                    a.accumulate_grad(da);
                }
            }
            Op::MaxScalar(a, c) => {
                if a.requires_grad() {
                    let av = a.value();
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| {
                        if x <= *c {
                            *d = 0.0;
                        }
                    });
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::RowSoftmaxMasked(a, _mask) => {
                if a.requires_grad() {
                    // Masked positions have out == 0, so they contribute
                    // nothing and receive nothing.
                    let mut da = Array2::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let mut rd = 0.0;
                        for j in 0..g.ncols() {
                            rd += g[(i, j)] * out[(i, j)];
                        }
                        for j in 0..g.ncols() {
                            da[(i, j)] = out[(i, j)] * (g[(i, j)] - rd);
                        }
                    }
                    a.accumulate_grad(da);
                }
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let xv = x.value();
                let sv = scale.value();
                let (n, d) = xv.dim();
                let mut dx = Array2::zeros((n, d));
                let mut dscale = Array2::zeros((1, d));
                let mut dshift = Array2::zeros((1, d));
                for i in 0..n {
                    let row = xv.row(i);
                    let mean = row.sum() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let gg = g[(i, j)] * sv[(0, j)];
                        mean_gg += gg;
                        mean_ggx += gg * xh;
                        dscale[(0, j)] += g[(i, j)] * xh;
                        dshift[(0, j)] += g[(i, j)];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let gg = g[(i, j)] * sv[(0, j)];
                        dx[(i, j)] = (gg - mean_gg - xh * mean_ggx) * inv_std;
                    }
                }
                drop(xv);
                drop(sv);
                if x.requires_grad() {
                    x.accumulate_grad(dx);
                }
                if scale.requires_grad() {
                    scale.accumulate_grad(dscale);
                }
                if shift.requires_grad() {
                    shift.accumulate_grad(dshift);
                }
            }
            Op::Dropout(a, mask) => {
                if a.requires_grad() {
                    a.accumulate_grad(g * &**mask);
                }
            }
            Op::RowSum(a) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let mut da = Array2::zeros((r, c));
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        da.row_mut(i).fill(gi);
                    }
                    a.accumulate_grad(da);
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    a.accumulate_grad(Array2::from_elem((r, c), g[(0, 0)]));
                }
            }
            Op::Mean(a) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let scale = g[(0, 0)] / (r * c) as f64;
                    a.accumulate_grad(Array2::from_elem((r, c), scale));
                }
            }
            Op::GatherRows(a, idx) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let mut da = Array2::zeros((r, c));
                    for (e, &i) in idx.iter().enumerate() {
                        let mut dst = da.row_mut(i as usize);
                        dst += &g.row(e);
                    }
                    a.accumulate_grad(da);
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if a.requires_grad() {
                    let mut da = Array2::zeros(g.dim());
                    for si in 0..seg.len() {
                        let range = seg.range(si);
                        let mut rd = 0.0;
                        for e in range.clone() {
                            rd += g[(e, 0)] * out[(e, 0)];
                        }
                        for e in range {
                            da[(e, 0)] = out[(e, 0)] * (g[(e, 0)] - rd);
                        }
                    }
                    a.accumulate_grad(da);
                }
            }
            Op::SegmentLogSumExp(a, seg) => {
                if a.requires_grad() {
                    let av = a.value();
                    let mut da = Array2::zeros(av.dim());
                    for si in 0..seg.len() {
                        let lse = out[(si, 0)];
                        let gs = g[(si, 0)];
                        for e in seg.range(si) {
                            da[(e, 0)] = gs * (av[(e, 0)] - lse).exp();
                        }
                    }
                    drop(av);
                    a.accumulate_grad(da);
                }
            }
            Op::SegmentWeightedSum { weights, feats, src, seg } => {
                if weights.requires_grad() {
                    let fv = feats.value();
                    let mut dw = Array2::zeros((src.len(), 1));
                    for si in 0..seg.len() {
                        let grow = g.row(si);
                        for e in seg.range(si) {
                            let frow = fv.row(src[e] as usize);
                            dw[(e, 0)] = grow.iter().zip(frow.iter()).map(|(a, b)| a * b).sum();
                        }
                    }
                    drop(fv);
                    weights.accumulate_grad(dw);
                }
                if feats.requires_grad() {
                    let wv = weights.value();
                    let (r, c) = feats.shape();
                    let mut df = Array2::zeros((r, c));
                    for si in 0..seg.len() {
                        let grow = g.row(si);
                        for e in seg.range(si) {
                            let w = wv[(e, 0)];
                            let mut dst = df.row_mut(src[e] as usize);
                            for (d, &gv) in dst.iter_mut().zip(grow.iter()) {
                                *d += w * gv;
                            }
                        }
                    }
                    drop(wv);
                    feats.accumulate_grad(df);
                }
            }
            Op::FixedSpmm(mat, x) => {
                if x.requires_grad() {
                    x.accumulate_grad(mat.apply_transpose(g));
                }
            }
            Op::AttentionHead { q, k, v, bias } => {
                // Compute every parent gradient while the value borrows are
                // alive, then drop the borrows before accumulating.
                let (dq, dkk, dv, db) = {
                    let qv = q.value();
                    let kv = k.value();
                    let vv = v.value();
                    let dk = qv.ncols();
                    let scale = 1.0 / (dk as f64).sqrt();
                    // Recompute attention probabilities instead of storing
                    // the n x n matrix on the tape.
                    let mut p = par_matmul(qv.view(), kv.t());
                    p.mapv_inplace(|x| x * scale);
                    if let Some(b) = bias {
                        let bv = b.value();
                        for mut row in p.rows_mut() {
                            for (j, cell) in row.iter_mut().enumerate() {
                                *cell += bv[(j, 0)];
                            }
                        }
                    }
                    softmax_rows_inplace(&mut p);
                    let dv = if v.requires_grad() {
                        Some(par_matmul(p.t(), g.view()))
                    } else {
                        None
                    };
                    // dS = P (dP - rowsum(dP * P)); reuse dP's buffer.
                    let mut ds = par_matmul(g.view(), vv.t());
                    for i in 0..ds.nrows() {
                        let mut rd = 0.0;
                        for j in 0..ds.ncols() {
                            rd += ds[(i, j)] * p[(i, j)];
                        }
                        for j in 0..ds.ncols() {
                            ds[(i, j)] = p[(i, j)] * (ds[(i, j)] - rd);
                        }
                    }
                    drop(p);
                    let dq = if q.requires_grad() {
                        let mut dq = par_matmul(ds.view(), kv.view());
                        dq.mapv_inplace(|x| x * scale);
                        Some(dq)
                    } else {
                        None
                    };
                    let dkk = if k.requires_grad() {
                        let mut dkk = par_matmul(ds.t(), qv.view());
                        dkk.mapv_inplace(|x| x * scale);
                        Some(dkk)
                    } else {
                        None
                    };
                    let db = match bias {
                        Some(b) if b.requires_grad() => {
                            Some(ds.sum_axis(Axis(0)).insert_axis(Axis(1)))
                        }
                        _ => None,
                    };
                    (dq, dkk, dv, db)
                };
                if let Some(dq) = dq {
                    q.accumulate_grad(dq);
                }
                if let Some(dkk) = dkk {
                    k.accumulate_grad(dkk);
                }
                if let Some(dv) = dv {
                    v.accumulate_grad(dv);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    b.accumulate_grad(db);
                }
            }
            Op::BceLoss { scores, labels, eps } => {
                if scores.requires_grad() {
                    let sv = scores.value();
                    let n = labels.len() as f64;
                    let gs = g[(0, 0)];
                    let mut da = Array2::zeros(sv.dim());
                    for (i, &y) in labels.iter().enumerate() {
                        let s = sv[(i, 0)].clamp(*eps, 1.0 - *eps);
                        da[(i, 0)] = gs * (-y / s + (1.0 - y) / (1.0 - s)) / n;
                    }
                    drop(sv);
                    scores.accumulate_grad(da);
                }
            }
        }
    }
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let out = par_matmul(self.value().view(), other.value().view());
        assert_finite("matmul", &out);
        Tensor::from_op(out, Op::Matmul(self.clone(), other.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape("add", self, other);
        let out = &*self.value() + &*other.value();
        assert_finite("add", &out);
        Tensor::from_op(out, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape("sub", self, other);
        let out = &*self.value() - &*other.value();
        assert_finite("sub", &out);
        Tensor::from_op(out, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul_elem(&self, other: &Tensor) -> Tensor {
        same_shape("mul_elem", self, other);
        let out = &*self.value() * &*other.value();
        assert_finite("mul_elem", &out);
        Tensor::from_op(out, Op::MulElem(self.clone(), other.clone()))
    }

    pub fn div_elem(&self, other: &Tensor) -> Tensor {
        same_shape("div_elem", self, other);
        let out = &*self.value() / &*other.value();
        assert_finite("div_elem", &out);
        Tensor::from_op(out, Op::DivElem(self.clone(), other.clone()))
    }

    /// Add a 1 x d row vector to every row.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Tensor {
        let (_, d) = self.shape();
        assert_eq!(row.shape(), (1, d), "add_row_broadcast: row must be 1x{d}");
        let out = &*self.value() + &*row.value();
        assert_finite("add_row_broadcast", &out);
        Tensor::from_op(out, Op::AddRowBroadcast(self.clone(), row.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = &*self.value() * c;
        assert_finite("scale", &out);
        Tensor::from_op(out, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = &*self.value() + c;
        assert_finite("add_scalar", &out);
        Tensor::from_op(out, Op::AddScalar(self.clone()))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = parts[0].shape().0;
        let total: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().0, rows, "concat_cols: row mismatch");
                p.shape().1
            })
            .sum();
        let mut out = Array2::zeros((rows, total));
        let mut lo = 0;
        for p in parts {
            let w = p.shape().1;
            out.slice_mut(s![.., lo..lo + w]).assign(&p.value());
            lo += w;
        }
        assert_finite("concat_cols", &out);
        Tensor::from_op(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let (_, c) = self.shape();
        assert!(lo < hi && hi <= c, "slice_cols: bad range {lo}..{hi} of {c}");
        let out = self.value().slice(s![.., lo..hi]).to_owned();
        Tensor::from_op(out, Op::SliceCols(self.clone(), lo, hi))
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        let (r, _) = self.shape();
        assert!(lo < hi && hi <= r, "slice_rows: bad range {lo}..{hi} of {r}");
        let out = self.value().slice(s![lo..hi, ..]).to_owned();
        Tensor::from_op(out, Op::SliceRows(self.clone(), lo, hi))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        assert_finite("leaky_relu", &out);
        Tensor::from_op(out, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.value().mapv(|x| x.max(0.0));
        Tensor::from_op(out, Op::Relu(self.clone()))
    }

    pub fn elu(&self) -> Tensor {
        let out = self.value().mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        assert_finite("elu", &out);
        Tensor::from_op(out, Op::Elu(self.clone()))
    }

    /// GELU in the tanh form `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let out = self.value().mapv(gelu_scalar);
        assert_finite("gelu", &out);
        Tensor::from_op(out, Op::Gelu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Tensor::from_op(out, Op::Sigmoid(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.value().mapv(f64::exp);
        assert_finite("exp", &out);
        Tensor::from_op(out, Op::Exp(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.value().mapv(f64::sqrt);
        assert_finite("sqrt", &out);
        Tensor::from_op(out, Op::Sqrt(self.clone()))
    }

    pub fn max_scalar(&self, c: f64) -> Tensor {
        let out = self.value().mapv(|x| x.max(c));
        Tensor::from_op(out, Op::MaxScalar(self.clone(), c))
    }

    /// Row softmax over the positions where `mask` is true; masked
    /// positions are treated as -inf, so their output and gradient are
    /// exactly zero.
    pub fn row_softmax_masked(&self, mask: &Rc<Array2<bool>>) -> Tensor {
        let v = self.value();
        assert_eq!(v.dim(), mask.dim(), "row_softmax_masked: mask shape");
        let (n, m) = v.dim();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if mask[(i, j)] {
                    max = max.max(v[(i, j)]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..m {
                if mask[(i, j)] {
                    let e = (v[(i, j)] - max).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..m {
                out[(i, j)] /= sum;
            }
        }
        drop(v);
        Tensor::from_op(out, Op::RowSoftmaxMasked(self.clone(), Rc::clone(mask)))
    }

    /// Per-row layer normalization with learnable 1 x d scale and shift.
    /// Zero-variance rows normalize to zero.
    pub fn layer_norm(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
        let (n, d) = self.shape();
        assert_eq!(scale.shape(), (1, d), "layer_norm: scale must be 1x{d}");
        assert_eq!(shift.shape(), (1, d), "layer_norm: shift must be 1x{d}");
        let xv = self.value();
        let sv = scale.value();
        let bv = shift.value();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[(i, j)] = (row[j] - mean) * inv_std * sv[(0, j)] + bv[(0, j)];
            }
        }
        drop(xv);
        drop(sv);
        drop(bv);
        assert_finite("layer_norm", &out);
        Tensor::from_op(
            out,
            Op::LayerNorm {
                x: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                eps,
            },
        )
    }

    /// Inverted dropout: at train time, kept entries are scaled by
    /// `1/(1-rate)`; in eval mode this is the identity (no tape node).
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut impl Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if !train || rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let (n, d) = self.shape();
        let mask = Array2::from_shape_fn((n, d), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = &*self.value() * &mask;
        Tensor::from_op(out, Op::Dropout(self.clone(), Rc::new(mask)))
    }

    /// Sum each row: n x d -> n x 1.
    pub fn row_sum(&self) -> Tensor {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        assert_finite("row_sum", &out);
        Tensor::from_op(out, Op::RowSum(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let out = Array2::from_elem((1, 1), self.value().sum());
        assert_finite("sum", &out);
        Tensor::from_op(out, Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let (r, c) = self.shape();
        let out = Array2::from_elem((1, 1), self.value().sum() / (r * c) as f64);
        assert_finite("mean", &out);
        Tensor::from_op(out, Op::Mean(self.clone()))
    }

    /// Select rows by index (with repetition allowed); gradient scatters
    /// back additively.
    pub fn gather_rows(&self, idx: &Rc<Vec<u32>>) -> Tensor {
        let v = self.value();
        let d = v.ncols();
        let mut out = Array2::zeros((idx.len(), d));
        for (e, &i) in idx.iter().enumerate() {
            out.row_mut(e).assign(&v.row(i as usize));
        }
        drop(v);
        Tensor::from_op(out, Op::GatherRows(self.clone(), Rc::clone(idx)))
    }

    /// Softmax within each contiguous segment of an E x 1 column.
    pub fn segment_softmax(&self, seg: &Rc<Segments>) -> Tensor {
        let v = self.value();
        assert_eq!(v.ncols(), 1, "segment_softmax expects a column");
        assert_eq!(v.nrows(), seg.total(), "segment_softmax: offsets mismatch");
        let mut out = Array2::zeros(v.dim());
        for si in 0..seg.len() {
            let range = seg.range(si);
            if range.is_empty() {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                max = max.max(v[(e, 0)]);
            }
            let mut sum = 0.0;
            for e in range.clone() {
                let x = (v[(e, 0)] - max).exp();
                out[(e, 0)] = x;
                sum += x;
            }
            for e in range {
                out[(e, 0)] /= sum;
            }
        }
        drop(v);
        Tensor::from_op(out, Op::SegmentSoftmax(self.clone(), Rc::clone(seg)))
    }

    /// Log-sum-exp within each contiguous segment: E x 1 -> S x 1.
    /// Segments must be non-empty.
    pub fn segment_logsumexp(&self, seg: &Rc<Segments>) -> Tensor {
        let v = self.value();
        assert_eq!(v.ncols(), 1, "segment_logsumexp expects a column");
        assert_eq!(v.nrows(), seg.total(), "segment_logsumexp: offsets mismatch");
        let mut out = Array2::zeros((seg.len(), 1));
        for si in 0..seg.len() {
            let range = seg.range(si);
            assert!(!range.is_empty(), "segment_logsumexp: empty segment {si}");
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                max = max.max(v[(e, 0)]);
            }
            let mut sum = 0.0;
            for e in range {
                sum += (v[(e, 0)] - max).exp();
            }
            out[(si, 0)] = max + sum.ln();
        }
        drop(v);
        assert_finite("segment_logsumexp", &out);
        Tensor::from_op(out, Op::SegmentLogSumExp(self.clone(), Rc::clone(seg)))
    }

    /// Weighted sum of feature rows within each segment:
    /// `out[s] = sum_{e in seg s} weights[e] * feats[src[e]]`.
    pub fn segment_weighted_sum(
        weights: &Tensor,
        feats: &Tensor,
        src: &Rc<Vec<u32>>,
        seg: &Rc<Segments>,
    ) -> Tensor {
        assert_eq!(weights.shape(), (src.len(), 1), "weights must be E x 1");
        assert_eq!(seg.total(), src.len(), "segment offsets mismatch");
        let wv_guard = weights.value();
        let fv_guard = feats.value();
        // Plain references for the parallel loop: cell guards and Rc are
        // not Sync.
        let wv: &Array2<f64> = &wv_guard;
        let fv: &Array2<f64> = &fv_guard;
        let src_ref: &[u32] = src;
        let seg_ref: &Segments = seg;
        let d = fv.ncols();
        let mut out = Array2::zeros((seg.len(), d));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(si, mut row)| {
                for e in seg_ref.range(si) {
                    let w = wv[(e, 0)];
                    let frow = fv.row(src_ref[e] as usize);
                    for (o, &x) in row.iter_mut().zip(frow.iter()) {
                        *o += w * x;
                    }
                }
            });
        drop(wv_guard);
        drop(fv_guard);
        assert_finite("segment_weighted_sum", &out);
        Tensor::from_op(
            out,
            Op::SegmentWeightedSum {
                weights: weights.clone(),
                feats: feats.clone(),
                src: Rc::clone(src),
                seg: Rc::clone(seg),
            },
        )
    }

    /// Multiply by a constant sparse matrix: out = M x.
    pub fn fixed_spmm(mat: &Rc<SparseMat>, x: &Tensor) -> Tensor {
        let out = mat.apply(&x.value());
        assert_finite("fixed_spmm", &out);
        Tensor::from_op(out, Op::FixedSpmm(Rc::clone(mat), x.clone()))
    }

    /// One scaled-dot-product attention head with an optional key-side
    /// additive bias: `softmax(q k^T / sqrt(d_k) + bias_j) v`. The n x n
    /// score matrix is recomputed during the backward pass rather than
    /// stored.
    pub fn attention_head(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let (n, dk) = q.shape();
        assert_eq!(k.shape(), (n, dk), "attention_head: k shape");
        assert_eq!(v.shape().0, n, "attention_head: v rows");
        if let Some(b) = bias {
            assert_eq!(b.shape(), (n, 1), "attention_head: bias must be n x 1");
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let mut p = par_matmul(q.value().view(), k.value().t());
        p.mapv_inplace(|x| x * scale);
        if let Some(b) = bias {
            let bv = b.value();
            for mut row in p.rows_mut() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell += bv[(j, 0)];
                }
            }
        }
        softmax_rows_inplace(&mut p);
        let out = par_matmul(p.view(), v.value().view());
        assert_finite("attention_head", &out);
        Tensor::from_op(
            out,
            Op::AttentionHead {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                bias: bias.cloned(),
            },
        )
    }

    /// Mean binary cross-entropy of scores in (0,1] against 0/1 labels;
    /// scores are clamped to `[eps, 1-eps]` inside the logs.
    pub fn bce_loss(scores: &Tensor, labels: &Rc<Vec<f64>>, eps: f64) -> Tensor {
        let sv = scores.value();
        assert_eq!(sv.ncols(), 1, "bce_loss expects a column of scores");
        assert_eq!(sv.nrows(), labels.len(), "bce_loss: label count");
        assert!(!labels.is_empty(), "bce_loss: empty input");
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let s = sv[(i, 0)].clamp(eps, 1.0 - eps);
            acc -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
        let out = Array2::from_elem((1, 1), acc / labels.len() as f64);
        drop(sv);
        assert_finite("bce_loss", &out);
        Tensor::from_op(
            out,
            Op::BceLoss {
                scores: scores.clone(),
                labels: Rc::clone(labels),
                eps,
            },
        )
    }
}
