//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Tape`] records one node per operation in creation order. Backward
//! walks the tape strictly in reverse and accumulates contributions in that
//! fixed order, which makes gradients bitwise reproducible run to run.

use crate::tensor::{self, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters; the order fixes checkpoint layout and
/// gradient accumulation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name: name.into(), value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

enum Rule {
    Leaf { param: Option<usize> },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    BmmNt { a: NodeId, b: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Softmax { x: NodeId },
    Gelu { x: NodeId },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    MaskedFill { x: NodeId, mask: Vec<bool> },
    MulMask { x: NodeId, mask: Vec<f64> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    rule: Rule,
}

/// Records a computation as a sequence of nodes; acyclic by construction
/// because every operand handle precedes the node it feeds.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TensorError> {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, rule: Rule) -> NodeId {
        self.nodes.push(Node { value, rule });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(value: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    /// Leaf bound to `params[index]`; backward accumulates into its grad.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Result<NodeId, TensorError> {
        let value = params.get(index).value.clone();
        Self::check_finite(&value, "param")?;
        Ok(self.push(value, Rule::Leaf { param: Some(index) }))
    }

    /// Leaf with no gradient destination.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        Self::check_finite(&value, "constant")?;
        Ok(self.push(value, Rule::Leaf { param: None }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::Add { a, b }))
    }

    /// `a + bias` where `bias` spans the last axis of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let d = *va.shape().last().unwrap_or(&0);
        if vb.shape() != [d] {
            return Err(TensorError::Shape {
                op: "add_row",
                detail: format!("bias {:?} does not span last axis of {:?}", vb.shape(), va.shape()),
            });
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::AddRow { a, bias }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::Scale { a, c }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Rule::Matmul { a, b }))
    }

    /// `a · bᵀ` for rank-2 operands; the output projection against a tied
    /// embedding table uses this directly.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = tensor::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Rule::MatmulNt { a, b }))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = tensor::bmm(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Rule::Bmm { a, b }))
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = tensor::bmm_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Rule::BmmNt { a, b }))
    }

    /// Row lookup: `table[ids[r], :]` stacked into `[len(ids), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let vt = &self.nodes[table.0].value;
        let (v, d) = vt.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { op: "embedding", index: id, bound: v });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Rule::Embedding { table, ids: ids.to_vec() }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().ok_or(TensorError::Shape {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!("gain {:?} / bias {:?} do not span last axis {}", vg.shape(), vb.shape(), d),
            });
        }
        let rows = vx.numel() / d;
        let mut xhat = Tensor::zeros(vx.shape().to_vec());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(vx.shape().to_vec());
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = &mut xhat.data_mut()[r * d..(r + 1) * d];
            let dst = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                xh[j] = (src[j] - mean) * is;
                dst[j] = xh[j] * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(out, Rule::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().ok_or(TensorError::Shape {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let mut out = Tensor::zeros(vx.shape().to_vec());
        for (src, dst) in vx.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (s, o) in src.iter().zip(dst.iter_mut()) {
                *o = (s - max).exp();
                sum += *o;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(out, Rule::Softmax { x }))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(value, Rule::Gelu { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(value, Rule::Reshape { x }))
    }

    /// Axis permutation; `perm[i]` names the source axis placed at output
    /// axis `i`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let rank = vx.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Shape {
                op: "permute",
                detail: format!("{:?} is not a permutation of {} axes", perm, rank),
            });
        }
        let value = permute_copy(vx, perm)?;
        Ok(self.push(value, Rule::Permute { x, perm: perm.to_vec() }))
    }

    /// Replaces elements where `mask` is true with `value`; those positions
    /// receive zero gradient.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], value: f64) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if mask.len() != vx.numel() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                detail: format!("mask has {} entries for {} elements", mask.len(), vx.numel()),
            });
        }
        let data: Vec<f64> = vx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Rule::MaskedFill { x, mask: mask.to_vec() }))
    }

    /// Elementwise product with a constant mask; dropout is this with mask
    /// entries `0` or `1/(1-rate)`.
    pub fn mul_mask(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        if mask.len() != vx.numel() {
            return Err(TensorError::Shape {
                op: "mul_mask",
                detail: format!("mask has {} entries for {} elements", mask.len(), vx.numel()),
            });
        }
        let data: Vec<f64> = vx.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Rule::MulMask { x, mask: mask.to_vec() }))
    }

    /// Stacks `x[rows[r], :]` into `[len(rows), d]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (n, d) = vx.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index { op: "gather_rows", index: r, bound: n });
            }
            data.extend_from_slice(&vx.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(value, Rule::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Weighted negative log-softmax at the target ids, summed over rows.
    /// Returns the scalar node and the plain weight sum so callers can
    /// normalize.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<(NodeId, f64), TensorError> {
        let vl = &self.nodes[logits.0].value;
        let (n, v) = vl.dims2("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("{} rows but {} targets / {} weights", n, targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, bound: v });
        }
        let mut probs = Tensor::zeros(vec![n, v]);
        let mut total = 0.0;
        for r in 0..n {
            let row = &vl.data()[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let pr = &mut probs.data_mut()[r * v..(r + 1) * v];
            for (p, &l) in pr.iter_mut().zip(row) {
                *p = (l - max).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            let ce = max + sum.ln() - row[targets[r]];
            total += weights[r] * ce;
        }
        let weight_sum = weights.iter().sum();
        let id = self.push(
            Tensor::scalar(total),
            Rule::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        );
        Ok((id, weight_sum))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Rule::Sum { x }))
    }

    /// Accumulates `d loss / d parameter` into each reachable parameter's
    /// grad, walking nodes strictly in reverse creation order.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar { op: "backward", shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].rule {
                Rule::Leaf { param } => {
                    if let Some(idx) = *param {
                        let dst = params.get_mut(idx);
                        debug_assert_eq!(dst.value.shape(), g.shape(), "parameter set mismatch");
                        add_into(&mut dst.grad, &g);
                    }
                }
                Rule::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Rule::AddRow { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let d = self.nodes[bias.0].value.numel();
                    let mut db = Tensor::zeros(vec![d]);
                    for row in g.data().chunks(d) {
                        for (s, &v) in db.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, a, g);
                    acc(&mut grads, bias, db);
                }
                Rule::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    let neg = map_tensor(&g, |v| -v);
                    acc(&mut grads, a, g);
                    acc(&mut grads, b, neg);
                }
                Rule::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = zip_tensor(&g, &self.nodes[b.0].value, |gv, bv| gv * bv);
                    let db = zip_tensor(&g, &self.nodes[a.0].value, |gv, av| gv * av);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Rule::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    acc(&mut grads, a, map_tensor(&g, |v| v * c));
                }
                Rule::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = tensor::matmul_nt(&g, &self.nodes[b.0].value)?;
                    let db = tensor::matmul_tn(&self.nodes[a.0].value, &g)?;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Rule::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = tensor::matmul(&g, &self.nodes[b.0].value)?;
                    let db = tensor::matmul_tn(&g, &self.nodes[a.0].value)?;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Rule::Bmm { a, b } => {
                    let (a, b) = (*a, *b);
                    let mut da = Tensor::zeros(self.nodes[a.0].value.shape().to_vec());
                    tensor::bmm_nt_acc_into(&g, &self.nodes[b.0].value, &mut da)?;
                    let mut db = Tensor::zeros(self.nodes[b.0].value.shape().to_vec());
                    tensor::bmm_tn_acc_into(&self.nodes[a.0].value, &g, &mut db)?;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Rule::BmmNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = tensor::bmm(&g, &self.nodes[b.0].value)?;
                    let mut db = Tensor::zeros(self.nodes[b.0].value.shape().to_vec());
                    tensor::bmm_tn_acc_into(&g, &self.nodes[a.0].value, &mut db)?;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Rule::Embedding { table, ids } => {
                    let table = *table;
                    let vt = &self.nodes[table.0].value;
                    let d = vt.shape()[1];
                    let mut dt = Tensor::zeros(vt.shape().to_vec());
                    for (r, &id2) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        let dst = &mut dt.data_mut()[id2 * d..(id2 + 1) * d];
                        for (s, &v) in dst.iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, table, dt);
                }
                Rule::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = self.nodes[gain.0].value.numel();
                    let rows = g.numel() / d;
                    let vg = self.nodes[gain.0].value.data().to_vec();
                    let mut dgain = Tensor::zeros(vec![d]);
                    let mut dbias = Tensor::zeros(vec![d]);
                    let mut dx = Tensor::zeros(g.shape().to_vec());
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xh = &xhat.data()[r * d..(r + 1) * d];
                        for j in 0..d {
                            dgain.data_mut()[j] += gr[j] * xh[j];
                            dbias.data_mut()[j] += gr[j];
                        }
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * vg[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = gr[j] * vg[j];
                            dst[j] = inv_std[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, x, dx);
                    acc(&mut grads, gain, dgain);
                    acc(&mut grads, bias, dbias);
                }
                Rule::Softmax { x } => {
                    let x = *x;
                    let y = &self.nodes[id].value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(d)
                        .zip(g.data().chunks(d))
                        .zip(dx.data_mut().chunks_mut(d))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Rule::Gelu { x } => {
                    let x = *x;
                    let vx = &self.nodes[x.0].value;
                    let dx = zip_tensor(&g, vx, |gv, xv| gv * gelu_bwd(xv));
                    acc(&mut grads, x, dx);
                }
                Rule::Reshape { x } => {
                    let x = *x;
                    let back = g.reshaped(self.nodes[x.0].value.shape().to_vec())?;
                    acc(&mut grads, x, back);
                }
                Rule::Permute { x, perm } => {
                    let x = *x;
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_copy(&g, &inverse)?;
                    acc(&mut grads, x, back);
                }
                Rule::MaskedFill { x, mask } => {
                    let x = *x;
                    let mut dx = g.clone();
                    for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Rule::MulMask { x, mask } => {
                    let x = *x;
                    let mut dx = g.clone();
                    for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc(&mut grads, x, dx);
                }
                Rule::GatherRows { x, rows } => {
                    let x = *x;
                    let vx = &self.nodes[x.0].value;
                    let d = vx.shape()[1];
                    let mut dx = Tensor::zeros(vx.shape().to_vec());
                    for (r, &row) in rows.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        let dst = &mut dx.data_mut()[row * d..(row + 1) * d];
                        for (s, &v) in dst.iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Rule::CrossEntropy { logits, targets, weights, probs } => {
                    let logits = *logits;
                    let u = g.item()?;
                    let (n, v) = probs.dims2("cross_entropy_backward")?;
                    let mut dl = Tensor::zeros(vec![n, v]);
                    for r in 0..n {
                        let pr = &probs.data()[r * v..(r + 1) * v];
                        let dst = &mut dl.data_mut()[r * v..(r + 1) * v];
                        let w = u * weights[r];
                        for j in 0..v {
                            dst[j] = w * pr[j];
                        }
                        dst[targets[r]] -= w;
                    }
                    acc(&mut grads, logits, dl);
                }
                Rule::Sum { x } => {
                    let x = *x;
                    let u = g.item()?;
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc(&mut grads, x, Tensor::full(shape, u));
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
    match &mut grads[id.0] {
        Some(t) => add_into(t, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permute_copy(t: &Tensor, perm: &[usize]) -> Result<Tensor, TensorError> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut out = Tensor::zeros(out_shape.clone());
    let numel = t.numel();
    let mut index = vec![0usize; rank];
    for flat in 0..numel {
        let mut rem = flat;
        for i in 0..rank {
            index[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        let mut out_flat = 0;
        for i in 0..rank {
            out_flat += index[perm[i]] * out_strides[i];
        }
        out.data_mut()[out_flat] = t.data()[flat];
    }
    Ok(out)
}

/// Settings for [`grad_check`]. `eps` is the finite-difference step;
/// `sample_coords` bounds how many coordinates are probed.
#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub sample_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { eps: 1e-4, sample_coords: 200, seed: 0x5eed_cafe }
    }
}

/// Compares analytic gradients of `build`'s scalar output against
/// fourth-order central differences
/// `(f(x-2e) - 8 f(x-e) + 8 f(x+e) - f(x+2e)) / (12 e)` on a seeded random
/// subsample of parameter coordinates and returns the worst relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The O(eps^4) truncation of the five-point stencil allows a step large
/// enough (default 1e-4) to keep floating-point cancellation noise several
/// orders of magnitude below typical gradient tolerances.
pub fn grad_check<F, E>(
    build: F,
    params: &mut ParamSet,
    settings: &GradCheckSettings,
) -> Result<f64, E>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId, E>,
    E: From<TensorError>,
{
    if settings.eps <= 0.0 {
        return Err(E::from(TensorError::BadEps(settings.eps)));
    }
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params).map_err(E::from)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.numel()).map(move |ci| (pi, ci)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= settings.sample_coords {
        coords
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(settings.seed);
        rand::seq::index::sample(&mut rng, coords.len(), settings.sample_coords)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let eval = |tape_params: &ParamSet| -> Result<f64, E> {
        let mut t = Tape::new();
        let node = build(&mut t, tape_params)?;
        t.scalar_value(node).map_err(E::from)
    };

    let mut worst: f64 = 0.0;
    for (pi, ci) in chosen {
        let original = params.get(pi).value.data()[ci];
        let at = |x: f64, params: &mut ParamSet| -> Result<f64, E> {
            params.get_mut(pi).value.data_mut()[ci] = x;
            eval(params)
        };
        let e = settings.eps;
        let m2 = at(original - 2.0 * e, params)?;
        let m1 = at(original - e, params)?;
        let p1 = at(original + e, params)?;
        let p2 = at(original + 2.0 * e, params)?;
        params.get_mut(pi).value.data_mut()[ci] = original;
        // Pairing the differences keeps the stencil exactly zero when all
        // four evaluations agree bit-for-bit (dead coordinates), which a
        // left-to-right sum would not.
        let numeric = ((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * e);
        let a = analytic[pi][ci];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
