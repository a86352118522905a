use rand::Rng;

use super::layers::{dropout_mask, layer_norm_row, softmax_in_place, Mode};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMulT { x: Var, w: Var },
    AddRow { x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Mask { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    IndexRows { x: Var, idx: Vec<usize> },
    BagSum { table: Var, offsets: Vec<usize>, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BlockScores { q: Var, k: Var, n: usize },
    BlockMix { a: Var, v: Var, n: usize },
    RankNet { s: Var, labels: Vec<f64>, n: usize },
    SoftmaxCe { s: Var, labels: Vec<f64>, n: usize },
}

struct Node {
    // `None` for parameter leaves, whose value lives in the borrowed `ParamSet`.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation over a borrowed [`ParamSet`].
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x · wᵀ` for `x: [r × in]`, `w: [out × in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, inner) = xv.dims2();
        let (o, wi) = wv.dims2();
        assert_eq!(inner, wi, "matmul_t inner dimension mismatch");
        let mut out = vec![0.0; r * o];
        for i in 0..r {
            let xr = xv.row(i);
            let dst = &mut out[i * o..(i + 1) * o];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(xr, wv.row(j));
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor { shape: vec![r, o], data: out }, Op::MatMulT { x, w }, rg)
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = xv.dims2();
        assert_eq!(bv.len(), c, "add_row bias width mismatch");
        let mut out = xv.data.clone();
        for row in out.chunks_mut(c.max(1)).take(r) {
            for (o, bb) in row.iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor { shape: vec![r, c], data: out }, Op::AddRow { x, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add length mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul length mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let shape = av.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v * factor).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v + c).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v.max(0.0)).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = dropout_mask(xv.len(), rate, rng);
        let data = xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Mask { x, mask }, rg))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let (r, c) = xv.dims2();
        assert_eq!(gv.len(), c, "layer_norm gain width mismatch");
        assert_eq!(sv.len(), c, "layer_norm shift width mismatch");
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            inv_std[i] = layer_norm_row(
                xv.row(i),
                &gv.data,
                &sv.data,
                eps,
                &mut xhat[i * c..(i + 1) * c],
                &mut out[i * c..(i + 1) * c],
            );
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        self.push(
            Tensor { shape: vec![r, c], data: out },
            Op::LayerNorm { x, gain, shift, xhat, inv_std },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::SoftmaxRows(x), rg)
    }

    /// `out[r] = x[idx[r]]`; used for embedding lookups and row broadcasting.
    pub fn index_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let (rows, c) = xv.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < rows, "index_rows: row {i} out of range {rows}");
            data.extend_from_slice(xv.row(i));
        }
        let shape = vec![idx.len(), c];
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::IndexRows { x, idx }, rg)
    }

    /// One output row per bag: the sum of the table rows of its ids, with
    /// multiplicity. An empty bag yields a zero row.
    pub fn bag_sum(&mut self, table: Var, bags: &[Vec<usize>]) -> Var {
        let tv = self.value(table);
        let (rows, c) = tv.dims2();
        let mut offsets = Vec::with_capacity(bags.len() + 1);
        let mut ids = Vec::new();
        let mut data = vec![0.0; bags.len() * c];
        offsets.push(0);
        for (b, bag) in bags.iter().enumerate() {
            let dst = &mut data[b * c..(b + 1) * c];
            for &w in bag {
                assert!(w < rows, "bag_sum: id {w} out of range {rows}");
                for (d, t) in dst.iter_mut().zip(tv.row(w)) {
                    *d += t;
                }
                ids.push(w);
            }
            offsets.push(ids.len());
        }
        let shape = vec![bags.len(), c];
        let rg = self.rg(table);
        self.push(Tensor { shape, data }, Op::BagSum { table, offsets, ids }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row count mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Sums each row, giving `[r × 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, _) = xv.dims2();
        let data = (0..r).map(|i| xv.row(i).iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor { shape: vec![r, 1], data }, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Attention logits within consecutive blocks of `n` rows:
    /// `out[r, j] = q[r] · k[block(r)·n + j]`.
    pub fn block_scores(&mut self, q: Var, k: Var, n: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let (r, h) = qv.dims2();
        assert_eq!(kv.dims2(), (r, h), "block_scores shape mismatch");
        assert!(n > 0 && r % n == 0, "block_scores: {r} rows not divisible into blocks of {n}");
        let mut data = vec![0.0; r * n];
        for i in 0..r {
            let base = (i / n) * n;
            for j in 0..n {
                data[i * n + j] = dot(qv.row(i), kv.row(base + j));
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(Tensor { shape: vec![r, n], data }, Op::BlockScores { q, k, n }, rg)
    }

    /// Block-wise mixing: `out[r] = Σ_j a[r, j] · v[block(r)·n + j]`.
    pub fn block_mix(&mut self, a: Var, v: Var, n: usize) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        let (r, h) = vv.dims2();
        assert_eq!(av.dims2(), (r, n), "block_mix weight shape mismatch");
        let mut data = vec![0.0; r * h];
        for i in 0..r {
            let base = (i / n) * n;
            let dst = &mut data[i * h..(i + 1) * h];
            for j in 0..n {
                axpy(av.get(i, j), vv.row(base + j), dst);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        self.push(Tensor { shape: vec![r, h], data }, Op::BlockMix { a, v, n }, rg)
    }

    /// Per-list positive-normalized RankNet loss over consecutive lists of
    /// length `n`. Returns `[B × 1]`.
    pub fn ranknet_lists(&mut self, s: Var, labels: Vec<f64>, n: usize) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), labels.len(), "ranknet_lists label length mismatch");
        assert!(n > 0 && labels.len() % n == 0, "ranknet_lists: ragged lists");
        let data = sv
            .data
            .chunks(n)
            .zip(labels.chunks(n))
            .map(|(s, y)| crate::losses::ranknet_value(s, y))
            .collect::<Vec<_>>();
        let b = data.len();
        let rg = self.rg(s);
        self.push(Tensor { shape: vec![b, 1], data }, Op::RankNet { s, labels, n }, rg)
    }

    /// Per-list Softmax cross-entropy against positive-normalized labels.
    /// Lists without positives contribute 0. Returns `[B × 1]`.
    pub fn softmax_ce_lists(&mut self, s: Var, labels: Vec<f64>, n: usize) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), labels.len(), "softmax_ce_lists label length mismatch");
        assert!(n > 0 && labels.len() % n == 0, "softmax_ce_lists: ragged lists");
        let data = sv
            .data
            .chunks(n)
            .zip(labels.chunks(n))
            .map(|(s, y)| crate::losses::softmax_ce_value(s, y).unwrap_or(0.0))
            .collect::<Vec<_>>();
        let b = data.len();
        let rg = self.rg(s);
        self.push(Tensor { shape: vec![b, 1], data }, Op::SoftmaxCe { s, labels, n }, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        let out_val = self.value(output);
        assert_eq!(out_val.len(), 1, "backward requires a scalar output");
        grads[output.0] = Some(Tensor {
            shape: out_val.shape.clone(),
            data: vec![1.0],
        });

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let param_vars = self
            .param_vars
            .iter()
            .map(|v| v.filter(|v| v.0 <= output.0))
            .collect();
        Gradients { grads, param_vars }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMulT { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, _) = xv.dims2();
                let o = wv.rows();
                if self.rg(*x) {
                    let dx = slot(grads, *x, xv);
                    for row in 0..r {
                        let dst = dx.row_mut(row);
                        for j in 0..o {
                            let c = gd[row * o + j];
                            if c != 0.0 {
                                axpy(c, wv.row(j), dst);
                            }
                        }
                    }
                }
                if self.rg(*w) {
                    let dw = slot(grads, *w, wv);
                    for row in 0..r {
                        let xr = xv.row(row);
                        for j in 0..o {
                            let c = gd[row * o + j];
                            if c != 0.0 {
                                axpy(c, xr, dw.row_mut(j));
                            }
                        }
                    }
                }
            }
            Op::AddRow { x, b } => {
                if self.rg(*x) {
                    slot(grads, *x, self.value(*x)).add_assign(g);
                }
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let c = bv.len();
                    let db = slot(grads, *b, bv);
                    for row in gd.chunks(c.max(1)) {
                        for (d, v) in db.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        slot(grads, *v, self.value(*v)).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = slot(grads, *a, av);
                    for ((d, gg), o) in da.data.iter_mut().zip(gd).zip(&bv.data) {
                        *d += gg * o;
                    }
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, bv);
                    for ((d, gg), o) in db.data.iter_mut().zip(gd).zip(&av.data) {
                        *d += gg * o;
                    }
                }
            }
            Op::Scale(x, f) => {
                let dx = slot(grads, *x, self.value(*x));
                for (d, gg) in dx.data.iter_mut().zip(gd) {
                    *d += gg * f;
                }
            }
            Op::AddScalar(x) => {
                slot(grads, *x, self.value(*x)).add_assign(g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = slot(grads, *x, xv);
                for ((d, gg), v) in dx.data.iter_mut().zip(gd).zip(&xv.data) {
                    if *v > 0.0 {
                        *d += gg;
                    }
                }
            }
            Op::Mask { x, mask } => {
                let dx = slot(grads, *x, self.value(*x));
                for ((d, gg), m) in dx.data.iter_mut().zip(gd).zip(mask) {
                    *d += gg * m;
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (r, c) = xv.dims2();
                if self.rg(*x) {
                    let dx = slot(grads, *x, xv);
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let gr = &gd[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        for k in 0..c {
                            dxhat[k] = gr[k] * gv.data[k];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dst = dx.row_mut(row);
                        for k in 0..c {
                            dst[k] += inv_std[row] * (dxhat[k] - mean_d - xh[k] * mean_dx);
                        }
                    }
                }
                if self.rg(*gain) {
                    let dg = slot(grads, *gain, gv);
                    for (k, (gg, xh)) in gd.iter().zip(xhat).enumerate() {
                        dg.data[k % c] += gg * xh;
                    }
                }
                if self.rg(*shift) {
                    let ds = slot(grads, *shift, self.value(*shift));
                    for (k, gg) in gd.iter().enumerate() {
                        ds.data[k % c] += gg;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let c = y.cols();
                let dx = slot(grads, *x, self.value(*x));
                for (row, (yr, gr)) in y.data.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yy, gg)) in dx.row_mut(row).iter_mut().zip(yr.iter().zip(gr)) {
                        *d += yy * (gg - inner);
                    }
                }
            }
            Op::IndexRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let dx = slot(grads, *x, xv);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, gg) in dx.row_mut(src).iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += gg;
                    }
                }
            }
            Op::BagSum { table, offsets, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let dt = slot(grads, *table, tv);
                for b in 0..offsets.len() - 1 {
                    let gr = &gd[b * c..(b + 1) * c];
                    for &w in &ids[offsets[b]..offsets[b + 1]] {
                        for (d, gg) in dt.row_mut(w).iter_mut().zip(gr) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        let dp = slot(grads, p, pv);
                        for r in 0..pv.rows() {
                            for (d, gg) in dp.row_mut(r).iter_mut().zip(&gd[r * total + start..r * total + start + w]) {
                                *d += gg;
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let dx = slot(grads, *x, xv);
                for (r, gg) in gd.iter().enumerate() {
                    for d in dx.row_mut(r).iter_mut().take(c) {
                        *d += gg;
                    }
                }
            }
            Op::Sum(x) => {
                let dx = slot(grads, *x, self.value(*x));
                dx.data.iter_mut().for_each(|d| *d += gd[0]);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let scale = gd[0] / xv.len().max(1) as f64;
                let dx = slot(grads, *x, xv);
                dx.data.iter_mut().for_each(|d| *d += scale);
            }
            Op::BlockScores { q, k, n } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (r, _) = qv.dims2();
                let n = *n;
                if self.rg(*q) {
                    let dq = slot(grads, *q, qv);
                    for i in 0..r {
                        let base = (i / n) * n;
                        for j in 0..n {
                            axpy(gd[i * n + j], kv.row(base + j), dq.row_mut(i));
                        }
                    }
                }
                if self.rg(*k) {
                    let dk = slot(grads, *k, kv);
                    for i in 0..r {
                        let base = (i / n) * n;
                        for j in 0..n {
                            axpy(gd[i * n + j], qv.row(i), dk.row_mut(base + j));
                        }
                    }
                }
            }
            Op::BlockMix { a, v, n } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (r, h) = vv.dims2();
                let n = *n;
                if self.rg(*a) {
                    let da = slot(grads, *a, av);
                    for i in 0..r {
                        let base = (i / n) * n;
                        let gr = &gd[i * h..(i + 1) * h];
                        for j in 0..n {
                            da.data[i * n + j] += dot(gr, vv.row(base + j));
                        }
                    }
                }
                if self.rg(*v) {
                    let dv = slot(grads, *v, vv);
                    for i in 0..r {
                        let base = (i / n) * n;
                        let gr = &gd[i * h..(i + 1) * h];
                        for j in 0..n {
                            axpy(av.get(i, j), gr, dv.row_mut(base + j));
                        }
                    }
                }
            }
            Op::RankNet { s, labels, n } => {
                let sv = self.value(*s);
                let ds = slot(grads, *s, sv);
                for (b, gg) in gd.iter().enumerate() {
                    let range = b * n..(b + 1) * n;
                    crate::losses::ranknet_grad(
                        &sv.data[range.clone()],
                        &labels[range.clone()],
                        *gg,
                        &mut ds.data[range],
                    );
                }
            }
            Op::SoftmaxCe { s, labels, n } => {
                let sv = self.value(*s);
                let ds = slot(grads, *s, sv);
                for (b, gg) in gd.iter().enumerate() {
                    let range = b * n..(b + 1) * n;
                    crate::losses::softmax_ce_grad(
                        &sv.data[range.clone()],
                        &labels[range.clone()],
                        *gg,
                        &mut ds.data[range],
                    );
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(&like.shape))
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars[id.0].and_then(|v| self.wrt(v))
    }

    /// Per-parameter gradients aligned with the owning [`ParamSet`];
    /// parameters the output does not depend on get zeros.
    pub fn param_grads(&self, params: &ParamSet) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}
