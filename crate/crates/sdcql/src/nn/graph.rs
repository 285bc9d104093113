//! Flat tape for reverse-mode differentiation.
//!
//! Ops compute eagerly on construction; `backward` sweeps the tape in
//! reverse, accumulating into parent gradients and, for `Param` leaves,
//! into the [`ParamStore`] gradient buffers. Construction order is the
//! topological order, so no explicit sort is needed. Values are dropped
//! as soon as their backward has run to bound peak memory on long
//! unrolls.
//!
//! Gradient stops are expressed by re-entering a value as a fresh leaf
//! ([`Graph::detach`]); the sweep never crosses a leaf.

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt_acc, matmul_tn_acc, Mat};

const LN_EPS: f32 = 1e-5;

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

enum Op {
    Leaf,
    Param { slot: ParamId },
    /// a (m×k) @ b (k×n)
    Matmul { a: NodeId, b: NodeId },
    /// x + broadcast row b (1×n)
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    Relu { x: NodeId },
    /// Per-row layer norm over columns with gain/bias rows (1×n).
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Group-wise q·kᵀ·scale. q,k: (R·p)×d → (R·p)×p.
    Scores { q: NodeId, k: NodeId, p: usize, scale: f32 },
    SoftmaxRows { x: NodeId },
    /// Group-wise probs @ v. probs: (R·p)×p, v: (R·p)×d → (R·p)×d.
    AttnApply { probs: NodeId, v: NodeId, p: usize },
    /// Interleave per-group token blocks into (R·P)×d.
    PackTokens { parts: Vec<NodeId>, tokens: Vec<usize> },
    /// Positions [from,to) of each group of p tokens → (R·(to-from))×d.
    TokenRange { x: NodeId, p: usize, from: usize, to: usize },
    ConcatCols { a: NodeId, b: NodeId },
    /// Mean over consecutive groups of `group` rows.
    MeanGroups { x: NodeId, group: usize },
    /// q: (B·N)×A, idx: (B·S·N) → (B·S)×N; out[bS+s,i] = q[bN+i, idx[...]].
    GatherSamples { q: NodeId, idx: Vec<usize>, n_agents: usize },
    /// Monotone two-layer mix with per-row |w| and ELU hidden.
    MonotoneMix { q: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId },
    /// Σ_r w_r (x[r,0] - t_r)²  → 1×1
    MaskedSqErrSum { x: NodeId, target: Vec<f32>, weight: Vec<f32> },
    /// Σ_r w_r x[r,0] → 1×1
    WeightedSum { x: NodeId, weight: Vec<f32> },
    /// Weighted per-agent-row reconstruction MSE (own 3 dims + k·6 dims).
    RecLossSum {
        own_pred: NodeId,
        ent_pred: NodeId,
        own_tgt: Mat,
        ent_tgt: Mat,
        weight: Vec<f32>,
        k: usize,
    },
    /// Σ_r w_r · CE(softmax over available logits, action_r) → 1×1
    CeLossSum {
        logits: NodeId,
        avail: Vec<f32>,
        action: Vec<usize>,
        weight: Vec<f32>,
    },
    Reshape { x: NodeId },
}

/// Eagerly evaluated autodiff tape.
pub struct Graph {
    ops: Vec<Op>,
    vals: Vec<Mat>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, val: Mat) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        NodeId((self.vals.len() - 1) as u32)
    }

    pub fn val(&self, id: NodeId) -> &Mat {
        &self.vals[id.0 as usize]
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        let m = self.val(id);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn leaf(&mut self, m: Mat) -> NodeId {
        self.push(Op::Leaf, m)
    }

    /// Re-enter an existing value as a constant (gradient stop).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.vals[id.0 as usize].clone();
        self.leaf(v)
    }

    pub fn param(&mut self, store: &ParamStore, slot: ParamId) -> NodeId {
        self.push(Op::Param { slot }, store.value(slot).clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.val(a), self.val(b));
        self.push(Op::Matmul { a, b }, v)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xm, bm) = (self.val(x), self.val(b));
        assert_eq!(bm.rows, 1);
        assert_eq!(bm.cols, xm.cols);
        let mut v = xm.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bm.data[c];
            }
        }
        self.push(Op::AddBias { x, b }, v)
    }

    /// x @ w + b
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.val(a), self.val(b));
        assert_eq!(am.rows, bm.rows);
        assert_eq!(am.cols, bm.cols);
        let mut v = am.clone();
        for (o, x) in v.data.iter_mut().zip(&bm.data) {
            *o += x;
        }
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.val(a), self.val(b));
        assert_eq!(am.rows, bm.rows);
        assert_eq!(am.cols, bm.cols);
        let mut v = am.clone();
        for (o, x) in v.data.iter_mut().zip(&bm.data) {
            *o -= x;
        }
        self.push(Op::Sub { a, b }, v)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let mut v = self.val(x).clone();
        for o in &mut v.data {
            *o *= c;
        }
        self.push(Op::Scale { x, c }, v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.val(x).clone();
        for o in &mut v.data {
            *o = o.max(0.0);
        }
        self.push(Op::Relu { x }, v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xm = self.val(x);
        let g = self.val(gain);
        let b = self.val(bias);
        let n = xm.cols;
        assert_eq!(g.cols, n);
        assert_eq!(b.cols, n);
        let mut v = Mat::zeros(xm.rows, n);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&x| (f64::from(x) - mean) * (f64::from(x) - mean))
                .sum::<f64>()
                / n as f64;
            let rstd = 1.0 / (var + f64::from(LN_EPS)).sqrt();
            let out = v.row_mut(r);
            for c in 0..n {
                let xn = ((f64::from(row[c]) - mean) * rstd) as f32;
                out[c] = xn * g.data[c] + b.data[c];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, v)
    }

    pub fn scores(&mut self, q: NodeId, k: NodeId, p: usize) -> NodeId {
        let (qm, km) = (self.val(q), self.val(k));
        assert_eq!(qm.rows, km.rows);
        assert_eq!(qm.cols, km.cols);
        assert_eq!(qm.rows % p, 0);
        let d = qm.cols;
        let scale = 1.0 / (d as f32).sqrt();
        let groups = qm.rows / p;
        let mut v = Mat::zeros(qm.rows, p);
        for g in 0..groups {
            for i in 0..p {
                let qr = qm.row(g * p + i);
                for j in 0..p {
                    let kr = km.row(g * p + j);
                    let mut s = 0.0f32;
                    for c in 0..d {
                        s += qr[c] * kr[c];
                    }
                    *v.at_mut(g * p + i, j) = s * scale;
                }
            }
        }
        self.push(Op::Scores { q, k, p, scale }, v)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xm = self.val(x);
        let mut v = Mat::zeros(xm.rows, xm.cols);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let out = v.row_mut(r);
            for (o, &xv) in out.iter_mut().zip(row) {
                let e = (xv - max).exp();
                *o = e;
                sum += f64::from(e);
            }
            let inv = (1.0 / sum) as f32;
            for o in out {
                *o *= inv;
            }
        }
        self.push(Op::SoftmaxRows { x }, v)
    }

    pub fn attn_apply(&mut self, probs: NodeId, v: NodeId, p: usize) -> NodeId {
        let (pm, vm) = (self.val(probs), self.val(v));
        assert_eq!(pm.cols, p);
        assert_eq!(pm.rows, vm.rows);
        let d = vm.cols;
        let groups = pm.rows / p;
        let mut out = Mat::zeros(pm.rows, d);
        for g in 0..groups {
            for i in 0..p {
                let prow = pm.row(g * p + i);
                let orow = out.row_mut(g * p + i);
                for (j, &pij) in prow.iter().enumerate() {
                    let vrow = &vm.data[(g * p + j) * d..(g * p + j + 1) * d];
                    for c in 0..d {
                        orow[c] += pij * vrow[c];
                    }
                }
            }
        }
        self.push(Op::AttnApply { probs, v, p }, out)
    }

    /// Interleave parts (each `(R·tᵢ)×d`, group-major) into `(R·Σtᵢ)×d`.
    pub fn pack_tokens(&mut self, parts: &[(NodeId, usize)]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.val(parts[0].0).cols;
        let groups = self.val(parts[0].0).rows / parts[0].1;
        let total: usize = parts.iter().map(|&(_, t)| t).sum();
        for &(id, t) in parts {
            assert_eq!(self.val(id).cols, d);
            assert_eq!(self.val(id).rows, groups * t);
        }
        let mut v = Mat::zeros(groups * total, d);
        for g in 0..groups {
            let mut off = 0;
            for &(id, t) in parts {
                let pm = self.val(id);
                for u in 0..t {
                    let src = pm.row(g * t + u);
                    v.row_mut(g * total + off + u).copy_from_slice(src);
                }
                off += t;
            }
        }
        let op = Op::PackTokens {
            parts: parts.iter().map(|&(id, _)| id).collect(),
            tokens: parts.iter().map(|&(_, t)| t).collect(),
        };
        self.push(op, v)
    }

    /// Positions `[from,to)` of each group of `p` tokens.
    pub fn token_range(&mut self, x: NodeId, p: usize, from: usize, to: usize) -> NodeId {
        let xm = self.val(x);
        assert!(from < to && to <= p);
        assert_eq!(xm.rows % p, 0);
        let groups = xm.rows / p;
        let span = to - from;
        let d = xm.cols;
        let mut v = Mat::zeros(groups * span, d);
        for g in 0..groups {
            for u in 0..span {
                v.row_mut(g * span + u)
                    .copy_from_slice(xm.row(g * p + from + u));
            }
        }
        self.push(Op::TokenRange { x, p, from, to }, v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.val(a), self.val(b));
        assert_eq!(am.rows, bm.rows);
        let mut v = Mat::zeros(am.rows, am.cols + bm.cols);
        for r in 0..am.rows {
            v.row_mut(r)[..am.cols].copy_from_slice(am.row(r));
            v.row_mut(r)[am.cols..].copy_from_slice(bm.row(r));
        }
        self.push(Op::ConcatCols { a, b }, v)
    }

    pub fn mean_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let xm = self.val(x);
        assert_eq!(xm.rows % group, 0);
        let out_rows = xm.rows / group;
        let mut v = Mat::zeros(out_rows, xm.cols);
        let inv = 1.0 / group as f32;
        for g in 0..out_rows {
            for s in 0..group {
                let src = xm.row(g * group + s);
                let dst = v.row_mut(g);
                for c in 0..xm.cols {
                    dst[c] += src[c] * inv;
                }
            }
        }
        self.push(Op::MeanGroups { x, group }, v)
    }

    /// Gather per-agent action values for `S` joint samples per episode.
    pub fn gather_samples(&mut self, q: NodeId, idx: Vec<usize>, n_agents: usize) -> NodeId {
        let qm = self.val(q);
        assert_eq!(qm.rows % n_agents, 0);
        assert_eq!(idx.len() % n_agents, 0);
        let episodes = qm.rows / n_agents;
        let out_rows = idx.len() / n_agents;
        assert_eq!(out_rows % episodes, 0);
        let s = out_rows / episodes;
        let mut v = Mat::zeros(out_rows, n_agents);
        for b in 0..episodes {
            for j in 0..s {
                for i in 0..n_agents {
                    let a = idx[(b * s + j) * n_agents + i];
                    *v.at_mut(b * s + j, i) = qm.at(b * n_agents + i, a);
                }
            }
        }
        self.push(Op::GatherSamples { q, idx, n_agents }, v)
    }

    /// Monotone mixing: `out[r] = Σ_h |w2[b,h]|·elu(Σ_i |w1[b,iH+h]|·q[r,i] + b1[b,h]) + b2[b]`
    /// with `b = r / (q.rows / w1.rows)`.
    pub fn monotone_mix(
        &mut self,
        q: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> NodeId {
        let (qm, w1m, b1m, w2m, b2m) = (
            self.val(q),
            self.val(w1),
            self.val(b1),
            self.val(w2),
            self.val(b2),
        );
        let n = qm.cols;
        let hidden = b1m.cols;
        let episodes = w1m.rows;
        assert_eq!(w1m.cols, n * hidden);
        assert_eq!(w2m.cols, hidden);
        assert_eq!(b2m.cols, 1);
        assert_eq!(b1m.rows, episodes);
        assert_eq!(w2m.rows, episodes);
        assert_eq!(b2m.rows, episodes);
        assert_eq!(qm.rows % episodes, 0);
        let s = qm.rows / episodes;
        let mut v = Mat::zeros(qm.rows, 1);
        for r in 0..qm.rows {
            let b = r / s;
            let qrow = qm.row(r);
            let mut total = f64::from(b2m.at(b, 0));
            for h in 0..hidden {
                let mut pre = b1m.at(b, h);
                for (i, &qv) in qrow.iter().enumerate() {
                    pre += w1m.at(b, i * hidden + h).abs() * qv;
                }
                let act = elu(pre);
                total += f64::from(w2m.at(b, h).abs() * act);
            }
            v.data[r] = total as f32;
        }
        self.push(Op::MonotoneMix { q, w1, b1, w2, b2 }, v)
    }

    pub fn masked_sq_err_sum(&mut self, x: NodeId, target: Vec<f32>, weight: Vec<f32>) -> NodeId {
        let xm = self.val(x);
        assert_eq!(xm.cols, 1);
        assert_eq!(target.len(), xm.rows);
        assert_eq!(weight.len(), xm.rows);
        let mut s = 0.0f64;
        for r in 0..xm.rows {
            let d = f64::from(xm.data[r]) - f64::from(target[r]);
            s += f64::from(weight[r]) * d * d;
        }
        self.push(Op::MaskedSqErrSum { x, target, weight }, Mat::scalar(s as f32))
    }

    pub fn weighted_sum(&mut self, x: NodeId, weight: Vec<f32>) -> NodeId {
        let xm = self.val(x);
        assert_eq!(xm.cols, 1);
        assert_eq!(weight.len(), xm.rows);
        let s: f64 = xm
            .data
            .iter()
            .zip(&weight)
            .map(|(&v, &w)| f64::from(v) * f64::from(w))
            .sum();
        self.push(Op::WeightedSum { x, weight }, Mat::scalar(s as f32))
    }

    /// Per-agent-row reconstruction MSE, weighted and summed.
    /// `own_pred`: R×d_own, `ent_pred`: (R·k)×d_ent; per-row MSE divides
    /// by the total feature count `d_own + k·d_ent`.
    pub fn rec_loss_sum(
        &mut self,
        own_pred: NodeId,
        ent_pred: NodeId,
        own_tgt: Mat,
        ent_tgt: Mat,
        weight: Vec<f32>,
    ) -> NodeId {
        let om = self.val(own_pred);
        let em = self.val(ent_pred);
        assert_eq!(om.rows, weight.len());
        assert_eq!(om.rows, own_tgt.rows);
        assert_eq!(em.rows, ent_tgt.rows);
        assert_eq!(em.rows % om.rows, 0);
        let k = em.rows / om.rows;
        let denom = (om.cols + k * em.cols) as f64;
        let mut s = 0.0f64;
        for r in 0..om.rows {
            let mut sq = 0.0f64;
            for c in 0..om.cols {
                let d = f64::from(om.at(r, c)) - f64::from(own_tgt.at(r, c));
                sq += d * d;
            }
            for kk in 0..k {
                let pr = em.row(r * k + kk);
                let tr = ent_tgt.row(r * k + kk);
                for c in 0..em.cols {
                    let d = f64::from(pr[c]) - f64::from(tr[c]);
                    sq += d * d;
                }
            }
            s += f64::from(weight[r]) * sq / denom;
        }
        self.push(
            Op::RecLossSum {
                own_pred,
                ent_pred,
                own_tgt,
                ent_tgt,
                weight,
                k,
            },
            Mat::scalar(s as f32),
        )
    }

    /// Cross entropy of the availability-restricted softmax vs. the data
    /// action, weighted per row and summed.
    pub fn ce_loss_sum(
        &mut self,
        logits: NodeId,
        avail: Vec<f32>,
        action: Vec<usize>,
        weight: Vec<f32>,
    ) -> NodeId {
        let lm = self.val(logits);
        assert_eq!(avail.len(), lm.len());
        assert_eq!(action.len(), lm.rows);
        assert_eq!(weight.len(), lm.rows);
        let a_dim = lm.cols;
        let mut s = 0.0f64;
        for r in 0..lm.rows {
            if weight[r] == 0.0 {
                continue;
            }
            let row = lm.row(r);
            let av = &avail[r * a_dim..(r + 1) * a_dim];
            debug_assert!(av[action[r]] > 0.0, "data action must be available");
            let mut max = f32::NEG_INFINITY;
            for (c, &l) in row.iter().enumerate() {
                if av[c] > 0.0 && l > max {
                    max = l;
                }
            }
            let mut denom = 0.0f64;
            for (c, &l) in row.iter().enumerate() {
                if av[c] > 0.0 {
                    denom += f64::from((l - max).exp());
                }
            }
            let logp = f64::from(row[action[r]] - max) - denom.ln();
            s -= f64::from(weight[r]) * logp;
        }
        self.push(
            Op::CeLossSum {
                logits,
                avail,
                action,
                weight,
            },
            Mat::scalar(s as f32),
        )
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xm = self.val(x);
        assert_eq!(xm.len(), rows * cols);
        let v = Mat::from_vec(rows, cols, xm.data.clone());
        self.push(Op::Reshape { x }, v)
    }

    fn parents(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        match &self.ops[i] {
            Op::Leaf | Op::Param { .. } => {}
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::ConcatCols { a, b } => {
                out.push(a.0 as usize);
                out.push(b.0 as usize);
            }
            Op::AddBias { x, b } => {
                out.push(x.0 as usize);
                out.push(b.0 as usize);
            }
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::SoftmaxRows { x }
            | Op::TokenRange { x, .. }
            | Op::MeanGroups { x, .. }
            | Op::MaskedSqErrSum { x, .. }
            | Op::WeightedSum { x, .. }
            | Op::Reshape { x, .. } => out.push(x.0 as usize),
            Op::LayerNorm { x, gain, bias } => {
                out.push(x.0 as usize);
                out.push(gain.0 as usize);
                out.push(bias.0 as usize);
            }
            Op::Scores { q, k, .. } => {
                out.push(q.0 as usize);
                out.push(k.0 as usize);
            }
            Op::AttnApply { probs, v, .. } => {
                out.push(probs.0 as usize);
                out.push(v.0 as usize);
            }
            Op::PackTokens { parts, .. } => out.extend(parts.iter().map(|p| p.0 as usize)),
            Op::GatherSamples { q, .. } => out.push(q.0 as usize),
            Op::MonotoneMix { q, w1, b1, w2, b2 } => {
                out.extend([q.0, w1.0, b1.0, w2.0, b2.0].iter().map(|&v| v as usize));
            }
            Op::RecLossSum {
                own_pred, ent_pred, ..
            } => {
                out.push(own_pred.0 as usize);
                out.push(ent_pred.0 as usize);
            }
            Op::CeLossSum { logits, .. } => out.push(logits.0 as usize),
        }
    }

    /// Reverse sweep from `loss`, accumulating parameter gradients into
    /// `store`. Consumes the graph.
    pub fn backward(mut self, loss: NodeId, store: &mut ParamStore) {
        let n = self.ops.len();
        let mut needed = vec![false; n];
        let mut stack = vec![loss.0 as usize];
        let mut parents = Vec::with_capacity(8);
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            self.parents(i, &mut parents);
            stack.extend(parents.iter().copied());
        }

        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        {
            let lm = &self.vals[loss.0 as usize];
            grads[loss.0 as usize] = Some(Mat::from_vec(lm.rows, lm.cols, vec![1.0; lm.len()]));
        }

        for i in (0..n).rev() {
            if !needed[i] {
                self.vals[i] = Mat::zeros(0, 0);
                continue;
            }
            let Some(g) = grads[i].take() else {
                self.vals[i] = Mat::zeros(0, 0);
                continue;
            };
            self.backward_op(i, &g, &mut grads, store);
            self.vals[i] = Mat::zeros(0, 0);
        }
    }

    fn backward_op(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>], store: &mut ParamStore) {
        let acc = |grads: &mut [Option<Mat>], id: NodeId, add: Mat| {
            match &mut grads[id.0 as usize] {
                Some(m) => {
                    debug_assert_eq!(m.rows, add.rows);
                    debug_assert_eq!(m.cols, add.cols);
                    for (o, v) in m.data.iter_mut().zip(&add.data) {
                        *o += v;
                    }
                }
                slot @ None => *slot = Some(add),
            }
        };
        let ensure = |grads: &mut [Option<Mat>], id: NodeId, rows: usize, cols: usize| {
            if grads[id.0 as usize].is_none() {
                grads[id.0 as usize] = Some(Mat::zeros(rows, cols));
            }
        };

        match &self.ops[i] {
            Op::Leaf => {}
            Op::Param { slot } => store.accumulate_grad(*slot, g),
            Op::Matmul { a, b } => {
                let (am, bm) = (&self.vals[a.0 as usize], &self.vals[b.0 as usize]);
                ensure(grads, *a, am.rows, am.cols);
                matmul_nt_acc(g, bm, grads[a.0 as usize].as_mut().unwrap());
                ensure(grads, *b, bm.rows, bm.cols);
                matmul_tn_acc(am, g, grads[b.0 as usize].as_mut().unwrap());
            }
            Op::AddBias { x, b } => {
                acc(grads, *x, g.clone());
                let mut gb = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gb.data[c] += g.at(r, c);
                    }
                }
                acc(grads, *b, gb);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                acc(grads, *b, neg);
            }
            Op::Scale { x, c } => {
                let mut gx = g.clone();
                for v in &mut gx.data {
                    *v *= c;
                }
                acc(grads, *x, gx);
            }
            Op::Relu { x } => {
                let out = &self.vals[i];
                let mut gx = g.clone();
                for (v, &o) in gx.data.iter_mut().zip(&out.data) {
                    if o <= 0.0 {
                        *v = 0.0;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xm = &self.vals[x.0 as usize];
                let gm = &self.vals[gain.0 as usize];
                let n = xm.cols;
                let mut gx = Mat::zeros(xm.rows, n);
                let mut gg = Mat::zeros(1, n);
                let mut gb = Mat::zeros(1, n);
                for r in 0..xm.rows {
                    let row = xm.row(r);
                    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
                    let var = row
                        .iter()
                        .map(|&v| (f64::from(v) - mean) * (f64::from(v) - mean))
                        .sum::<f64>()
                        / n as f64;
                    let rstd = 1.0 / (var + f64::from(LN_EPS)).sqrt();
                    let grow = g.row(r);
                    // h = gain ∘ dy; dx = rstd (h - mean(h) - x̂ mean(h∘x̂))
                    let mut mean_h = 0.0f64;
                    let mut mean_hx = 0.0f64;
                    for c in 0..n {
                        let xn = (f64::from(row[c]) - mean) * rstd;
                        let h = f64::from(gm.data[c]) * f64::from(grow[c]);
                        mean_h += h;
                        mean_hx += h * xn;
                        gg.data[c] += (f64::from(grow[c]) * xn) as f32;
                        gb.data[c] += grow[c];
                    }
                    mean_h /= n as f64;
                    mean_hx /= n as f64;
                    let out = gx.row_mut(r);
                    for c in 0..n {
                        let xn = (f64::from(row[c]) - mean) * rstd;
                        let h = f64::from(gm.data[c]) * f64::from(grow[c]);
                        out[c] = (rstd * (h - mean_h - xn * mean_hx)) as f32;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gain, gg);
                acc(grads, *bias, gb);
            }
            Op::Scores { q, k, p, scale } => {
                let qm = &self.vals[q.0 as usize];
                let km = &self.vals[k.0 as usize];
                let d = qm.cols;
                let groups = qm.rows / p;
                let mut gq = Mat::zeros(qm.rows, d);
                let mut gk = Mat::zeros(km.rows, d);
                for gi in 0..groups {
                    for ii in 0..*p {
                        let grow = g.row(gi * p + ii);
                        for j in 0..*p {
                            let gs = grow[j] * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            let krow = km.row(gi * p + j);
                            let qrow = qm.row(gi * p + ii);
                            let gq_row = &mut gq.data[(gi * p + ii) * d..(gi * p + ii + 1) * d];
                            for c in 0..d {
                                gq_row[c] += gs * krow[c];
                            }
                            let gk_row = &mut gk.data[(gi * p + j) * d..(gi * p + j + 1) * d];
                            for c in 0..d {
                                gk_row[c] += gs * qrow[c];
                            }
                        }
                    }
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
            }
            Op::SoftmaxRows { x } => {
                let out = &self.vals[i];
                let mut gx = Mat::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let orow = out.row(r);
                    let grow = g.row(r);
                    let dot: f64 = orow
                        .iter()
                        .zip(grow)
                        .map(|(&p, &gv)| f64::from(p) * f64::from(gv))
                        .sum();
                    let xrow = gx.row_mut(r);
                    for c in 0..out.cols {
                        xrow[c] = (f64::from(orow[c]) * (f64::from(grow[c]) - dot)) as f32;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::AttnApply { probs, v, p } => {
                let pm = &self.vals[probs.0 as usize];
                let vm = &self.vals[v.0 as usize];
                let d = vm.cols;
                let groups = pm.rows / p;
                let mut gp = Mat::zeros(pm.rows, *p);
                let mut gv = Mat::zeros(vm.rows, d);
                for gi in 0..groups {
                    for ii in 0..*p {
                        let grow = g.row(gi * p + ii);
                        let prow = pm.row(gi * p + ii);
                        for j in 0..*p {
                            let vrow = vm.row(gi * p + j);
                            let mut s = 0.0f32;
                            for c in 0..d {
                                s += grow[c] * vrow[c];
                            }
                            *gp.at_mut(gi * p + ii, j) = s;
                            let pij = prow[j];
                            if pij != 0.0 {
                                let gvrow =
                                    &mut gv.data[(gi * p + j) * d..(gi * p + j + 1) * d];
                                for c in 0..d {
                                    gvrow[c] += pij * grow[c];
                                }
                            }
                        }
                    }
                }
                acc(grads, *probs, gp);
                acc(grads, *v, gv);
            }
            Op::PackTokens { parts, tokens } => {
                let total: usize = tokens.iter().sum();
                let groups = g.rows / total;
                let d = g.cols;
                let mut off = 0;
                for (part, &t) in parts.iter().zip(tokens) {
                    let mut gp = Mat::zeros(groups * t, d);
                    for gi in 0..groups {
                        for u in 0..t {
                            gp.row_mut(gi * t + u)
                                .copy_from_slice(g.row(gi * total + off + u));
                        }
                    }
                    acc(grads, *part, gp);
                    off += t;
                }
            }
            Op::TokenRange { x, p, from, to } => {
                let xm_rows = self.vals[x.0 as usize].rows;
                let span = to - from;
                let groups = xm_rows / p;
                let d = g.cols;
                let mut gx = Mat::zeros(xm_rows, d);
                for gi in 0..groups {
                    for u in 0..span {
                        gx.row_mut(gi * p + from + u)
                            .copy_from_slice(g.row(gi * span + u));
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatCols { a, b } => {
                let ac = self.vals[a.0 as usize].cols;
                let bc = self.vals[b.0 as usize].cols;
                let mut ga = Mat::zeros(g.rows, ac);
                let mut gb = Mat::zeros(g.rows, bc);
                for r in 0..g.rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MeanGroups { x, group } => {
                let xm_rows = self.vals[x.0 as usize].rows;
                let inv = 1.0 / *group as f32;
                let mut gx = Mat::zeros(xm_rows, g.cols);
                for r in 0..xm_rows {
                    let src = g.row(r / group);
                    let dst = gx.row_mut(r);
                    for c in 0..g.cols {
                        dst[c] = src[c] * inv;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GatherSamples { q, idx, n_agents } => {
                let qm = &self.vals[q.0 as usize];
                let episodes = qm.rows / n_agents;
                let s = (idx.len() / n_agents) / episodes;
                let mut gq = Mat::zeros(qm.rows, qm.cols);
                for b in 0..episodes {
                    for j in 0..s {
                        for i2 in 0..*n_agents {
                            let a = idx[(b * s + j) * n_agents + i2];
                            *gq.at_mut(b * n_agents + i2, a) += g.at(b * s + j, i2);
                        }
                    }
                }
                acc(grads, *q, gq);
            }
            Op::MonotoneMix { q, w1, b1, w2, b2 } => {
                let qm = &self.vals[q.0 as usize];
                let w1m = &self.vals[w1.0 as usize];
                let b1m = &self.vals[b1.0 as usize];
                let w2m = &self.vals[w2.0 as usize];
                let n = qm.cols;
                let hidden = b1m.cols;
                let episodes = w1m.rows;
                let s = qm.rows / episodes;
                let mut gq = Mat::zeros(qm.rows, n);
                let mut gw1 = Mat::zeros(episodes, n * hidden);
                let mut gb1 = Mat::zeros(episodes, hidden);
                let mut gw2 = Mat::zeros(episodes, hidden);
                let mut gb2 = Mat::zeros(episodes, 1);
                for r in 0..qm.rows {
                    let dout = g.data[r];
                    if dout == 0.0 {
                        continue;
                    }
                    let b = r / s;
                    let qrow = qm.row(r);
                    for h in 0..hidden {
                        let mut pre = b1m.at(b, h);
                        for (i2, &qv) in qrow.iter().enumerate() {
                            pre += w1m.at(b, i2 * hidden + h).abs() * qv;
                        }
                        let act = elu(pre);
                        let dact = if pre > 0.0 { 1.0 } else { act + 1.0 };
                        let w2v = w2m.at(b, h);
                        *gw2.at_mut(b, h) += dout * act * sign(w2v);
                        let dpre = dout * w2v.abs() * dact;
                        *gb1.at_mut(b, h) += dpre;
                        for (i2, &qv) in qrow.iter().enumerate() {
                            let w1v = w1m.at(b, i2 * hidden + h);
                            *gq.at_mut(r, i2) += dpre * w1v.abs();
                            *gw1.at_mut(b, i2 * hidden + h) += dpre * qv * sign(w1v);
                        }
                    }
                    *gb2.at_mut(b, 0) += dout;
                }
                acc(grads, *q, gq);
                acc(grads, *w1, gw1);
                acc(grads, *b1, gb1);
                acc(grads, *w2, gw2);
                acc(grads, *b2, gb2);
            }
            Op::MaskedSqErrSum { x, target, weight } => {
                let xm = &self.vals[x.0 as usize];
                let gs = g.data[0];
                let mut gx = Mat::zeros(xm.rows, 1);
                for r in 0..xm.rows {
                    gx.data[r] = gs * weight[r] * 2.0 * (xm.data[r] - target[r]);
                }
                acc(grads, *x, gx);
            }
            Op::WeightedSum { x, weight } => {
                let gs = g.data[0];
                let mut gx = Mat::zeros(weight.len(), 1);
                for r in 0..weight.len() {
                    gx.data[r] = gs * weight[r];
                }
                acc(grads, *x, gx);
            }
            Op::RecLossSum {
                own_pred,
                ent_pred,
                own_tgt,
                ent_tgt,
                weight,
                k,
            } => {
                let om = &self.vals[own_pred.0 as usize];
                let em = &self.vals[ent_pred.0 as usize];
                let gs = g.data[0];
                let denom = (om.cols + k * em.cols) as f32;
                let mut go = Mat::zeros(om.rows, om.cols);
                let mut ge = Mat::zeros(em.rows, em.cols);
                for r in 0..om.rows {
                    let w = gs * weight[r] * 2.0 / denom;
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..om.cols {
                        *go.at_mut(r, c) = w * (om.at(r, c) - own_tgt.at(r, c));
                    }
                    for kk in 0..*k {
                        let pr = em.row(r * k + kk);
                        let tr = ent_tgt.row(r * k + kk);
                        let gr = ge.row_mut(r * k + kk);
                        for c in 0..gr.len() {
                            gr[c] = w * (pr[c] - tr[c]);
                        }
                    }
                }
                acc(grads, *own_pred, go);
                acc(grads, *ent_pred, ge);
            }
            Op::CeLossSum {
                logits,
                avail,
                action,
                weight,
            } => {
                let lm = &self.vals[logits.0 as usize];
                let gs = g.data[0];
                let a_dim = lm.cols;
                let mut gl = Mat::zeros(lm.rows, a_dim);
                for r in 0..lm.rows {
                    let w = gs * weight[r];
                    if w == 0.0 {
                        continue;
                    }
                    let row = lm.row(r);
                    let av = &avail[r * a_dim..(r + 1) * a_dim];
                    let mut max = f32::NEG_INFINITY;
                    for (c, &l) in row.iter().enumerate() {
                        if av[c] > 0.0 && l > max {
                            max = l;
                        }
                    }
                    let mut denom = 0.0f64;
                    for (c, &l) in row.iter().enumerate() {
                        if av[c] > 0.0 {
                            denom += f64::from((l - max).exp());
                        }
                    }
                    let grow = gl.row_mut(r);
                    for c in 0..a_dim {
                        if av[c] > 0.0 {
                            let p = (f64::from((row[c] - max).exp()) / denom) as f32;
                            let y = if c == action[r] { 1.0 } else { 0.0 };
                            grow[c] = w * (p - y);
                        }
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::Reshape { x, .. } => {
                let xm = &self.vals[x.0 as usize];
                let gx = Mat::from_vec(xm.rows, xm.cols, g.data.clone());
                acc(grads, *x, gx);
            }
        }
    }
}

#[inline]
fn elu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;

    /// Finite-difference check of d(loss)/d(param) for a graph builder.
    fn check_grads(
        store: &mut ParamStore,
        build: impl Fn(&mut Graph, &ParamStore) -> NodeId,
        tol: f32,
    ) {
        store.zero_grads();
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        g.backward(loss, store);

        let ids: Vec<ParamId> = store.ids().collect();
        for pid in ids {
            let len = store.value(pid).len();
            for e in (0..len).step_by(7.max(len / 5)) {
                let orig = store.value(pid).data[e];
                let h = 5e-3_f32.max(orig.abs() * 1e-2);
                store.value_mut(pid).data[e] = orig + h;
                let mut gp = Graph::new();
                let lp_id = build(&mut gp, store);
                let lp = gp.scalar_value(lp_id);
                store.value_mut(pid).data[e] = orig - h;
                let mut gm = Graph::new();
                let lm_id = build(&mut gm, store);
                let lm = gm.scalar_value(lm_id);
                store.value_mut(pid).data[e] = orig;
                let numeric = (f64::from(lp) - f64::from(lm)) / (2.0 * f64::from(h));
                let analytic = f64::from(store.grad(pid).data[e]);
                let scale = numeric.abs().max(analytic.abs()).max(1.0);
                assert!(
                    (numeric - analytic).abs() / scale < f64::from(tol),
                    "param {pid:?} elem {e}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    fn seeded_store(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut store = ParamStore::new();
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        for &(name, r, c) in shapes {
            let m = Mat::from_fn(r, c, |_, _| next() * 0.8);
            store.add(name, m);
        }
        store
    }

    #[test]
    fn affine_relu_chain_gradients() {
        let mut store = seeded_store(&[("w1", 5, 7), ("b1", 1, 7), ("w2", 7, 1), ("b2", 1, 1)]);
        let x = Mat::from_fn(4, 5, |r, c| 0.3 * (r as f32) - 0.2 * (c as f32) + 0.1);
        check_grads(
            &mut store,
            move |g, s| {
                let xid = g.leaf(x.clone());
                let w1 = g.param(s, s.id("w1"));
                let b1 = g.param(s, s.id("b1"));
                let w2 = g.param(s, s.id("w2"));
                let b2 = g.param(s, s.id("b2"));
                let h = g.affine(xid, w1, b1);
                let h = g.relu(h);
                let o = g.affine(h, w2, b2);
                g.masked_sq_err_sum(o, vec![0.5, -0.2, 0.1, 0.9], vec![1.0, 0.5, 1.0, 0.25])
            },
            2e-2,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut store = seeded_store(&[("x", 3, 8), ("g", 1, 8), ("b", 1, 8), ("w", 8, 1)]);
        check_grads(
            &mut store,
            |g, s| {
                let x = g.param(s, s.id("x"));
                let gain = g.param(s, s.id("g"));
                let bias = g.param(s, s.id("b"));
                let w = g.param(s, s.id("w"));
                let y = g.layer_norm(x, gain, bias);
                let o = g.matmul(y, w);
                g.masked_sq_err_sum(o, vec![0.1, 0.2, -0.1], vec![1.0, 1.0, 1.0])
            },
            3e-2,
        );
    }

    #[test]
    fn attention_gradients() {
        // 2 groups of 3 tokens, d = 4.
        let mut store = seeded_store(&[("q", 6, 4), ("k", 6, 4), ("v", 6, 4), ("w", 4, 1)]);
        check_grads(
            &mut store,
            |g, s| {
                let q = g.param(s, s.id("q"));
                let k = g.param(s, s.id("k"));
                let v = g.param(s, s.id("v"));
                let w = g.param(s, s.id("w"));
                let sc = g.scores(q, k, 3);
                let p = g.softmax_rows(sc);
                let o = g.attn_apply(p, v, 3);
                let o = g.matmul(o, w);
                let t: Vec<f32> = (0..6).map(|i| 0.1 * i as f32).collect();
                g.masked_sq_err_sum(o, t, vec![1.0; 6])
            },
            3e-2,
        );
    }

    #[test]
    fn pack_and_range_roundtrip_gradients() {
        let mut store = seeded_store(&[("own", 2, 4), ("ents", 6, 4), ("h", 2, 4), ("w", 4, 1)]);
        check_grads(
            &mut store,
            |g, s| {
                let own = g.param(s, s.id("own"));
                let ents = g.param(s, s.id("ents"));
                let h = g.param(s, s.id("h"));
                let w = g.param(s, s.id("w"));
                let packed = g.pack_tokens(&[(own, 1), (ents, 3), (h, 1)]);
                let mid = g.token_range(packed, 5, 1, 4);
                let o = g.matmul(mid, w);
                g.masked_sq_err_sum(o, vec![0.0; 6], vec![1.0; 6])
            },
            2e-2,
        );
    }

    #[test]
    fn monotone_mix_gradients() {
        let mut store = seeded_store(&[
            ("q", 4, 3),
            ("w1", 2, 12),
            ("b1", 2, 4),
            ("w2", 2, 4),
            ("b2", 2, 1),
        ]);
        check_grads(
            &mut store,
            |g, s| {
                let q = g.param(s, s.id("q"));
                let w1 = g.param(s, s.id("w1"));
                let b1 = g.param(s, s.id("b1"));
                let w2 = g.param(s, s.id("w2"));
                let b2 = g.param(s, s.id("b2"));
                let o = g.monotone_mix(q, w1, b1, w2, b2);
                g.masked_sq_err_sum(o, vec![0.2, -0.4, 0.3, 0.0], vec![1.0, 1.0, 0.5, 1.0])
            },
            2e-2,
        );
    }

    #[test]
    fn ce_and_gather_gradients() {
        let mut store = seeded_store(&[("q", 4, 5)]);
        let avail = vec![
            1.0, 1.0, 0.0, 1.0, 0.0, //
            1.0, 1.0, 1.0, 1.0, 1.0, //
            0.0, 1.0, 1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, 1.0,
        ];
        check_grads(
            &mut store,
            move |g, s| {
                let q = g.param(s, s.id("q"));
                let ce = g.ce_loss_sum(q, avail.clone(), vec![0, 2, 1, 4], vec![1.0, 0.5, 1.0, 1.0]);
                let gathered = g.gather_samples(q, vec![0, 1, 3, 2, 1, 1, 0, 4], 2);
                let m = g.mean_groups(gathered, 2);
                let flat = g.reshape(m, 4, 1);
                let ws = g.weighted_sum(flat, vec![0.3, 0.7, 0.2, 0.1]);
                g.add(ce, ws)
            },
            2e-2,
        );
    }

    #[test]
    fn rec_loss_gradients() {
        let mut store = seeded_store(&[("op", 3, 2), ("ep", 6, 3)]);
        let own_tgt = Mat::from_fn(3, 2, |r, c| 0.1 * (r + c) as f32);
        let ent_tgt = Mat::from_fn(6, 3, |r, c| 0.05 * r as f32 - 0.02 * c as f32);
        check_grads(
            &mut store,
            move |g, s| {
                let op = g.param(s, s.id("op"));
                let ep = g.param(s, s.id("ep"));
                g.rec_loss_sum(op, ep, own_tgt.clone(), ent_tgt.clone(), vec![1.0, 0.5, 1.0])
            },
            2e-2,
        );
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut store = seeded_store(&[("w", 3, 1)]);
        store.zero_grads();
        let mut g = Graph::new();
        let w = g.param(&store, store.id("w"));
        let x = g.leaf(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(x, w);
        let stopped = g.detach(y);
        let loss = g.masked_sq_err_sum(stopped, vec![0.0, 0.0], vec![1.0, 1.0]);
        g.backward(loss, &mut store);
        assert!(store.grad(store.id("w")).data.iter().all(|&v| v == 0.0));
    }
}
