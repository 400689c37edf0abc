use super::tape::{Node, Op, Tape, Var};
use super::{Activation, Scalar, Tensor};
use crate::error::{Error, Result};

/// Row/column strides of a matrix operand as seen by gemm.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

impl View {
    /// Logical `[r, c]` operand stored as `[r, c]` (or `[c, r]` when transposed).
    fn of(r: usize, c: usize, transposed: bool) -> Self {
        if transposed {
            View {
                rs: 1,
                cs: r as isize,
            }
        } else {
            View {
                rs: c as isize,
                cs: 1,
            }
        }
    }

    fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatMulDims> {
    let (batch, a2, b2) = match (a.len(), b.len()) {
        (2, 2) => (1, a, b),
        (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..]),
        _ => {
            return Err(Error::Shape(format!(
                "matmul operands {a:?} and {b:?} are not matrices of matching batch"
            )))
        }
    };
    let (m, ka) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {a:?}{} x {b:?}{}",
            if ta { "^T" } else { "" },
            if tb { "^T" } else { "" }
        )));
    }
    Ok(MatMulDims { batch, m, k: ka, n })
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl<S: Scalar> Tape<S> {
    /// Matrix product `a · b` (2-D, or batched 3-D with equal batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let d = matmul_dims(av.shape(), bv.shape(), ta, tb)?;
        let mut out = vec![S::zero(); d.batch * d.m * d.n];
        let va = View::of(d.m, d.k, ta);
        let vb = View::of(d.k, d.n, tb);
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for g in 0..d.batch {
            S::gemm(
                d.m,
                d.k,
                d.n,
                &av.data()[g * sa..(g + 1) * sa],
                va.rs,
                va.cs,
                &bv.data()[g * sb..(g + 1) * sb],
                vb.rs,
                vb.cs,
                S::zero(),
                &mut out[g * sc..(g + 1) * sc],
                d.n as isize,
                1,
            );
        }
        let shape = if av.rank() == 3 {
            vec![d.batch, d.m, d.n]
        } else {
            vec![d.m, d.n]
        };
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b, ta, tb }))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, masks).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let bd = bv.data();
        let out: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bd.len()])
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a, b }))
    }

    /// Elementwise `a ⊙ b`, `b` broadcast over leading dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let bd = bv.data();
        let out: Vec<S> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % bd.len()])
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let av = self.value(a);
        let out: Vec<S> = av.data().iter().map(|&x| x * factor).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: out,
        };
        let rg = self.any_requires_grad(&[a]);
        self.push(t, rg, Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.any_requires_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    /// Row-wise softmax over the last dimension of `scores + mask`.
    ///
    /// Mask entries are `0` or `-inf`; its shape is a suffix of the scores
    /// shape. Rows with no finite entry come out as all zeros.
    pub fn softmax_masked(&mut self, scores: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let sv = self.value(scores);
        if let Some(m) = mask {
            if !is_suffix(sv.shape(), m.shape()) {
                return Err(Error::Shape(format!(
                    "mask {:?} does not broadcast onto scores {:?}",
                    m.shape(),
                    sv.shape()
                )));
            }
        }
        let c = sv.last_dim();
        let mut out = sv.data().to_vec();
        if let Some(m) = mask {
            let md = m.data();
            for (i, v) in out.iter_mut().enumerate() {
                *v = *v + md[i % md.len()];
            }
        }
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_row(row);
            }
        }
        let t = Tensor {
            shape: sv.shape().to_vec(),
            data: out,
        };
        let rg = self.any_requires_grad(&[scores]);
        Ok(self.push(t, rg, Op::SoftmaxMasked { a: scores }))
    }

    /// Normalizes each last-dimension row to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape(format!(
                "layernorm params {:?}/{:?} do not match last dim {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let dn = S::from_usize(d).unwrap_or_else(S::one);
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_requires_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let av = self.value(a);
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| kind.apply(x)).collect(),
        };
        let rg = self.any_requires_grad(&[a]);
        self.push(t, rg, Op::Act { a, kind })
    }

    /// Gathers rows of a `[n, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape("embedding table must be a matrix".into()));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Shape(format!(
                    "row {id} out of range for table of {n}"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.any_requires_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.shape()[0] != batch * seq || av.shape()[1] % heads != 0 {
            return Err(Error::Shape(format!(
                "cannot split {:?} into {batch}x{seq} with {heads} heads",
                av.shape()
            )));
        }
        let dh = av.shape()[1] / heads;
        let mut out = vec![S::zero(); av.numel()];
        permute_heads(av.data(), &mut out, batch, seq, heads, dh, true);
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![batch * heads, seq, dh], out)?,
            rg,
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || av.shape()[0] != batch * heads || av.shape()[1] != seq {
            return Err(Error::Shape(format!(
                "cannot merge {:?} as {batch}x{heads} heads of {seq}",
                av.shape()
            )));
        }
        let dh = av.shape()[2];
        let mut out = vec![S::zero(); av.numel()];
        permute_heads(av.data(), &mut out, batch, seq, heads, dh, false);
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![batch * seq, heads * dh], out)?,
            rg,
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits` over the
    /// positions where `keep` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || keep.len() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs {} targets / {} mask entries",
                lv.shape(),
                targets.len(),
                keep.len()
            )));
        }
        let v = lv.shape()[1];
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![S::zero(); lv.numel()];
        let mut total = S::zero();
        for (i, (&t, &k)) in targets.iter().zip(keep).enumerate() {
            if !k {
                continue;
            }
            if t >= v {
                return Err(Error::Shape(format!("target {t} outside vocab {v}")));
            }
            let row = &mut probs[i * v..(i + 1) * v];
            row.copy_from_slice(lv.row(i));
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            total += z.ln() + max - lv.row(i)[t];
            for p in row.iter_mut() {
                *p = *p / z;
            }
        }
        let loss = total / S::from_usize(count).unwrap_or_else(S::one);
        let rg = self.any_requires_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
                count,
            },
        ))
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() || max.is_nan() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn permute_heads<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
    split: bool,
) {
    let d = heads * dh;
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let flat = (b * seq + t) * d + h * dh;
                let headed = ((b * heads + h) * seq + t) * dh;
                let (from, to) = if split {
                    (flat, headed)
                } else {
                    (headed, flat)
                };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

fn grad_buf<'a, S: Scalar>(nodes: &'a mut [Node<S>], v: Var) -> Option<&'a mut [S]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    node.grad.as_mut().map(Tensor::data_mut)
}

/// Pushes `grad` (the gradient of the loss wrt `node`'s value) into the
/// gradients of the node's parents, all of which live in `before`.
pub(crate) fn backward_node<S: Scalar>(node: &Node<S>, grad: &Tensor<S>, before: &mut [Node<S>]) {
    let g = grad.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (ash, bsh) = (
                before[a.0].value.shape().to_vec(),
                before[b.0].value.shape().to_vec(),
            );
            let d = matmul_dims(&ash, &bsh, ta, tb).expect("shapes checked in forward");
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            let va = View::of(d.m, d.k, ta);
            let vb = View::of(d.k, d.n, tb);
            let vg = View::of(d.m, d.n, false);
            if before[a.0].requires_grad {
                let bval = before[b.0].value.data().to_vec();
                let ga = grad_buf(before, a).expect("requires grad");
                for bi in 0..d.batch {
                    let gs = &g[bi * sc..(bi + 1) * sc];
                    let bs = &bval[bi * sb..(bi + 1) * sb];
                    let out = &mut ga[bi * sa..(bi + 1) * sa];
                    if ta {
                        // dA (stored k×m) = op(B) · dCᵀ
                        let vbt = vg.t();
                        S::gemm(
                            d.k,
                            d.n,
                            d.m,
                            bs,
                            vb.rs,
                            vb.cs,
                            gs,
                            vbt.rs,
                            vbt.cs,
                            S::one(),
                            out,
                            d.m as isize,
                            1,
                        );
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        let vbt = vb.t();
                        S::gemm(
                            d.m,
                            d.n,
                            d.k,
                            gs,
                            vg.rs,
                            vg.cs,
                            bs,
                            vbt.rs,
                            vbt.cs,
                            S::one(),
                            out,
                            d.k as isize,
                            1,
                        );
                    }
                }
            }
            if before[b.0].requires_grad {
                let aval = before[a.0].value.data().to_vec();
                let gb = grad_buf(before, b).expect("requires grad");
                for bi in 0..d.batch {
                    let gs = &g[bi * sc..(bi + 1) * sc];
                    let as_ = &aval[bi * sa..(bi + 1) * sa];
                    let out = &mut gb[bi * sb..(bi + 1) * sb];
                    if tb {
                        // dB (stored n×k) = dCᵀ · op(A)
                        let vgt = vg.t();
                        S::gemm(
                            d.n,
                            d.m,
                            d.k,
                            gs,
                            vgt.rs,
                            vgt.cs,
                            as_,
                            va.rs,
                            va.cs,
                            S::one(),
                            out,
                            d.k as isize,
                            1,
                        );
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        let vat = va.t();
                        S::gemm(
                            d.k,
                            d.m,
                            d.n,
                            as_,
                            vat.rs,
                            vat.cs,
                            gs,
                            vg.rs,
                            vg.cs,
                            S::one(),
                            out,
                            d.n as isize,
                            1,
                        );
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = grad_buf(before, a) {
                for (x, &gv) in ga.iter_mut().zip(g) {
                    *x += gv;
                }
            }
            if let Some(gb) = grad_buf(before, b) {
                let n = gb.len();
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % n] += gv;
                }
            }
        }
        &Op::Mul { a, b } => {
            if before[a.0].requires_grad {
                let bval = before[b.0].value.data().to_vec();
                let ga = grad_buf(before, a).expect("requires grad");
                let n = bval.len();
                for (i, (x, &gv)) in ga.iter_mut().zip(g).enumerate() {
                    *x += gv * bval[i % n];
                }
            }
            if before[b.0].requires_grad {
                let aval = before[a.0].value.data().to_vec();
                let gb = grad_buf(before, b).expect("requires grad");
                let n = gb.len();
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % n] += gv * aval[i];
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = grad_buf(before, a) {
                for (x, &gv) in ga.iter_mut().zip(g) {
                    *x += gv * factor;
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = grad_buf(before, a) {
                let gv = g[0];
                ga.iter_mut().for_each(|x| *x += gv);
            }
        }
        &Op::SoftmaxMasked { a } => {
            let p = node.value.data();
            let c = node.value.last_dim();
            if let Some(ga) = grad_buf(before, a) {
                if c == 0 {
                    return;
                }
                for ((gr, pr), outr) in g.chunks(c).zip(p.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: S = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                    for j in 0..c {
                        outr[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = node.value.last_dim();
            let dn = S::from_usize(d).unwrap_or_else(S::one);
            let gain_v = before[gain.0].value.data().to_vec();
            if let Some(gg) = grad_buf(before, *gain) {
                for (i, &gv) in g.iter().enumerate() {
                    gg[i % d] += gv * xhat[i];
                }
            }
            if let Some(gbias) = grad_buf(before, *bias) {
                for (i, &gv) in g.iter().enumerate() {
                    gbias[i % d] += gv;
                }
            }
            if let Some(gx) = grad_buf(before, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        gx[r * d + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        }
        &Op::Act { a, kind } => {
            if before[a.0].requires_grad {
                let aval = before[a.0].value.data().to_vec();
                let ga = grad_buf(before, a).expect("requires grad");
                for ((x, &gv), &av) in ga.iter_mut().zip(g).zip(&aval) {
                    *x += gv * kind.derivative(av);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.last_dim();
            if let Some(gt) = grad_buf(before, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        &Op::SplitHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let dh = node.value.last_dim();
            if let Some(ga) = grad_buf(before, a) {
                let mut tmp = vec![S::zero(); g.len()];
                permute_heads(g, &mut tmp, batch, seq, heads, dh, false);
                for (x, t) in ga.iter_mut().zip(tmp) {
                    *x += t;
                }
            }
        }
        &Op::MergeHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let dh = node.value.last_dim() / heads;
            if let Some(ga) = grad_buf(before, a) {
                let mut tmp = vec![S::zero(); g.len()];
                permute_heads(g, &mut tmp, batch, seq, heads, dh, true);
                for (x, t) in ga.iter_mut().zip(tmp) {
                    *x += t;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            keep,
            probs,
            count,
        } => {
            let scale = g[0] / S::from_usize(*count).unwrap_or_else(S::one);
            let v = before[logits.0].value.last_dim();
            if let Some(gl) = grad_buf(before, *logits) {
                for (i, (&t, &k)) in targets.iter().zip(keep).enumerate() {
                    if !k {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { S::one() } else { S::zero() };
                        gl[i * v + j] += scale * (probs[i * v + j] - onehot);
                    }
                }
            }
        }
    }
}
