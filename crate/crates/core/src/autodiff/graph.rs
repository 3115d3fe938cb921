use super::param::{ParamId, ParamStore};
use super::scalar::{matmul, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Elu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Film { h: Var, gamma: Var, beta: Var },
    Gather { table: Var, idx: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    BroadcastTime { x: Var },
    MeanTime { x: Var },
    Reshape { x: Var },
    SwapLastTwo { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op<T>,
}

/// A reverse-mode tape. Build one per forward pass; nodes are appended in
/// evaluation order, so reverse index order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += *b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, param: None, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Copies a parameter onto the tape; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), !p.frozen, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradients of every trainable parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(id), Some(g)) => Some((id, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// `x [B, C_in, L]`, `w [C_out, C_in, k]`, optional bias `[C_out]` → `[B, C_out, L']`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(format!("conv1d input {xs:?} with kernel {ws:?}, stride {stride}")));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if len + 2 * pad < k {
            return Err(Error::shape(format!("conv1d length {len} + 2*{pad} < kernel {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv1d bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let ncol = bsz * lout;
        // cols[(c*k + j), (b*lout + o)] = x[b, c, o*stride + j - pad]
        let xv = &self.nodes[x.0].value.data;
        let mut cols = vec![T::zero(); ck * ncol];
        for c in 0..cin {
            for j in 0..k {
                let row = &mut cols[(c * k + j) * ncol..(c * k + j + 1) * ncol];
                for bi in 0..bsz {
                    let src = &xv[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    for o in 0..lout {
                        let pos = (o * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            row[bi * lout + o] = src[pos as usize];
                        }
                    }
                }
            }
        }
        let mut y2 = vec![T::zero(); cout * ncol];
        matmul(cout, ck, ncol, &self.nodes[w.0].value.data, false, &cols, false, &mut y2, T::zero());
        let bias = b.map(|b| &self.nodes[b.0].value.data);
        let mut out = vec![T::zero(); bsz * cout * lout];
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |bd| bd[co]);
            for bi in 0..bsz {
                let dst = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                let src = &y2[co * ncol + bi * lout..co * ncol + (bi + 1) * lout];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s + bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor { shape: vec![bsz, cout, lout], data: out };
        Ok(self.push(value, rg, Op::Conv1d { x, w, b, stride, pad, cols }))
    }

    /// Affine map over the trailing dim: `x [.., d_in]`, `w [d_out, d_in]`, `b [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
            return Err(Error::shape(format!("linear input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!("linear bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let (din, dout) = (ws[1], ws[0]);
        let n = self.value(x).numel() / din;
        let mut y = vec![T::zero(); n * dout];
        matmul(n, din, dout, &self.value(x).data, false, &self.value(w).data, true, &mut y, T::zero());
        if let Some(b) = b {
            let bd = &self.nodes[b.0].value.data;
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += *bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data: y }, rg, Op::Linear { x, w, b }))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|&v| if v > T::zero() { v } else { v.exp_m1() }).collect();
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        let rg = self.rg(x);
        self.push(value, rg, Op::Elu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| *x + *y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data.iter().map(|&v| v * c).collect();
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale { x, c })
    }

    /// `γ ⊙ h + β` with per-sample, per-channel `γ, β [B, C]` broadcast over time of `h [B, C, L]`.
    pub fn film(&mut self, h: Var, gamma: Var, beta: Var) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        if hs.len() != 3 || self.shape(gamma) != &hs[..2] || self.shape(beta) != &hs[..2] {
            return Err(Error::shape(format!(
                "film on {hs:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let l = hs[2];
        let (hv, gv, bv) = (&self.value(h).data, &self.value(gamma).data, &self.value(beta).data);
        let mut data = Vec::with_capacity(hv.len());
        for (bc, row) in hv.chunks(l).enumerate() {
            data.extend(row.iter().map(|&v| gv[bc] * v + bv[bc]));
        }
        let rg = self.rg(h) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor { shape: hs, data }, rg, Op::Film { h, gamma, beta }))
    }

    /// Rows `idx` of `table [N, d]` → `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("gather from {ts:?}")));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, size: n });
        }
        let tv = &self.value(table).data;
        let data = idx.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(table);
        let value = Tensor { shape: vec![idx.len(), d], data };
        Ok(self.push(value, rg, Op::Gather { table, idx: idx.to_vec() }))
    }

    /// `[Na, d] ++ [Nb, d]` → `[Na + Nb, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("concat_rows {sa:?} with {sb:?}")));
        }
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor { shape: vec![sa[0] + sb[0], sa[1]], data };
        Ok(self.push(value, rg, Op::ConcatRows { a, b }))
    }

    /// `[B, Ca, L] ++ [B, Cb, L]` → `[B, Ca + Cb, L]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape(format!("concat_channels {sa:?} with {sb:?}")));
        }
        let (bsz, ca, cb, l) = (sa[0], sa[1], sb[1], sa[2]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(bsz * (ca + cb) * l);
        for i in 0..bsz {
            data.extend_from_slice(&av[i * ca * l..(i + 1) * ca * l]);
            data.extend_from_slice(&bv[i * cb * l..(i + 1) * cb * l]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor { shape: vec![bsz, ca + cb, l], data };
        Ok(self.push(value, rg, Op::ConcatChannels { a, b }))
    }

    /// `[B, C]` → `[B, C, len]` by repetition along time.
    pub fn broadcast_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("broadcast_time on {s:?}")));
        }
        let data = self.value(x).data.iter().flat_map(|&v| std::iter::repeat(v).take(len)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[0], s[1], len], data }, rg, Op::BroadcastTime { x }))
    }

    /// Mean over the last axis of `[B, C, L]` → `[B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] == 0 {
            return Err(Error::shape(format!("mean_time on {s:?}")));
        }
        let inv = T::cast_from(1.0 / s[2] as f64);
        let data = self.value(x).data.chunks(s[2]).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[0], s[1]], data }, rg, Op::MeanTime { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = Tensor { shape: shape.to_vec(), data: self.value(x).data.clone() };
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// `[B, C, L]` → `[B, L, C]`.
    pub fn swap_last_two(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("swap_last_two on {s:?}")));
        }
        let (data, shape) = (transpose_inner(&self.value(x).data, s[0], s[1], s[2]), vec![s[0], s[2], s[1]]);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, rg, Op::SwapLastTwo { x }))
    }

    /// Mean softmax cross-entropy. `logits [.., K]` are flattened to `[N, K]`; `labels` has `N` entries.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = *s.last().ok_or_else(|| Error::shape("cross_entropy on a scalar"))?;
        let n = self.value(logits).numel() / k.max(1);
        if n != labels.len() || n == 0 {
            return Err(Error::shape(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index { index: bad, size: k });
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (i, (row, p)) in lv.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pj, &r) in p.iter_mut().zip(row) {
                *pj = (r - m).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v = *v / z);
            total += (z.ln() + m - row[labels[i]]).as_f64();
        }
        let value = Tensor::scalar(T::cast_from(total / n as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, rg, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        self.nodes.iter_mut().for_each(|n| n.grad = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, d) in contribs {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut self.nodes[v.0].grad, &d);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad, cols } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bsz, cin, len, cout, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
                let lout = node.value.shape[2];
                let (ck, ncol) = (cin * k, bsz * lout);
                // dY as [C_out, B*L'] to match the column layout
                let mut g2 = vec![T::zero(); cout * ncol];
                for bi in 0..bsz {
                    for co in 0..cout {
                        g2[co * ncol + bi * lout..co * ncol + (bi + 1) * lout]
                            .copy_from_slice(&g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout]);
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); cout * ck];
                    matmul(cout, ncol, ck, &g2, false, cols, true, &mut dw, T::zero());
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, g2.chunks(ncol).map(|r| r.iter().copied().sum()).collect()));
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); ck * ncol];
                    matmul(ck, cout, ncol, &self.value(*w).data, true, &g2, false, &mut dcols, T::zero());
                    let mut dx = vec![T::zero(); bsz * cin * len];
                    for c in 0..cin {
                        for j in 0..k {
                            let row = &dcols[(c * k + j) * ncol..(c * k + j + 1) * ncol];
                            for bi in 0..bsz {
                                let dst = &mut dx[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                                for o in 0..lout {
                                    let pos = (o * stride + j) as isize - *pad as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        dst[pos as usize] += row[bi * lout + o];
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let n = g.len() / dout;
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    matmul(n, dout, din, g, false, &self.value(*w).data, false, &mut dx, T::zero());
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul(dout, n, din, g, true, &self.value(*x).data, false, &mut dw, T::zero());
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += *r);
                    }
                    out.push((b, db));
                }
            }
            Op::Elu { x } => {
                let d = g
                    .iter()
                    .zip(&node.value.data)
                    .map(|(&gi, &y)| if y > T::zero() { gi } else { gi * (y + T::one()) })
                    .collect();
                out.push((*x, d));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Scale { x, c } => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Film { h, gamma, beta } => {
                let l = node.value.shape[2];
                let (hv, gv) = (&self.value(*h).data, &self.value(*gamma).data);
                if self.rg(*h) {
                    let mut dh = Vec::with_capacity(g.len());
                    for (bc, row) in g.chunks(l).enumerate() {
                        dh.extend(row.iter().map(|&v| v * gv[bc]));
                    }
                    out.push((*h, dh));
                }
                if self.rg(*gamma) {
                    let dg = g.chunks(l).zip(hv.chunks(l)).map(|(gr, hr)| gr.iter().zip(hr).map(|(a, b)| *a * *b).sum()).collect();
                    out.push((*gamma, dg));
                }
                if self.rg(*beta) {
                    out.push((*beta, g.chunks(l).map(|r| r.iter().copied().sum()).collect()));
                }
            }
            Op::Gather { table, idx } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += *b);
                }
                out.push((*table, dt));
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).numel();
                out.push((*a, g[..na].to_vec()));
                out.push((*b, g[na..].to_vec()));
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bsz, ca, cb, l) = (sa[0], sa[1], sb[1], sa[2]);
                let mut da = Vec::with_capacity(bsz * ca * l);
                let mut db = Vec::with_capacity(bsz * cb * l);
                for row in g.chunks((ca + cb) * l) {
                    da.extend_from_slice(&row[..ca * l]);
                    db.extend_from_slice(&row[ca * l..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::BroadcastTime { x } => {
                let l = node.value.shape[2];
                out.push((*x, g.chunks(l).map(|r| r.iter().copied().sum()).collect()));
            }
            Op::MeanTime { x } => {
                let l = self.shape(*x)[2];
                let inv = T::cast_from(1.0 / l as f64);
                out.push((*x, g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(l)).collect()));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::SwapLastTwo { x } => {
                let s = &node.value.shape;
                out.push((*x, transpose_inner(g, s[0], s[1], s[2])));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = *self.shape(*logits).last().unwrap();
                let scale = g[0] * T::cast_from(1.0 / labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }
}

/// `[B, R, C]` → `[B, C, R]`.
fn transpose_inner<T: Scalar>(x: &[T], bsz: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..bsz {
        let (src, dst) = (&x[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
