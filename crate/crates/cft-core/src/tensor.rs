//! Dense row-major `f64` tensors plus the matrix kernels the graph layer is
//! built on.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so repeated runs produce bit-identical results on any target.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a scalar output, found shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("grad_check: eps must be positive, got {0}")]
    BadEps(f64),
    #[error("{op}: index {index} out of range {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
}

/// Dense row-major tensor. A rank-0 shape holds exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { op: "item", shape: self.shape.clone() })
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::Shape { op, detail: format!("expected rank 2, got {:?}", other) }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c += a * b` over contiguous rows; the k-loop is outermost so the inner
/// update is a vectorizable axpy with a fixed per-element accumulation order.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += aᵀ * b` where `a` is `[k, m]` and `b` is `[k, n]`: a sequence of
/// rank-1 updates, again axpy-shaped.
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for r in 0..k {
        let a_row = &a[r * m..(r + 1) * m];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &ari) in a_row.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += ari * bv;
            }
        }
    }
}

fn transpose_raw(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(TensorError::Shape {
            op: "matmul",
            detail: format!("inner dims differ: {:?} x {:?}", a.shape, b.shape),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    mm_acc(&a.data, &b.data, &mut out.data, m, ka, n);
    Ok(out)
}

/// `[m, k] x [n, k]ᵀ -> [m, n]`; `b` is transposed once so the core stays axpy.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = a.dims2("matmul_nt")?;
    let (n, kb) = b.dims2("matmul_nt")?;
    if ka != kb {
        return Err(TensorError::Shape {
            op: "matmul_nt",
            detail: format!("inner dims differ: {:?} x {:?}ᵀ", a.shape, b.shape),
        });
    }
    let bt = transpose_raw(&b.data, n, kb);
    let mut out = Tensor::zeros(vec![m, n]);
    mm_acc(&a.data, &bt, &mut out.data, m, ka, n);
    Ok(out)
}

/// `[k, m]ᵀ x [k, n] -> [m, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ka, m) = a.dims2("matmul_tn")?;
    let (kb, n) = b.dims2("matmul_tn")?;
    if ka != kb {
        return Err(TensorError::Shape {
            op: "matmul_tn",
            detail: format!("outer dims differ: {:?}ᵀ x {:?}", a.shape, b.shape),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    mm_tn_acc(&a.data, &b.data, &mut out.data, ka, m, n);
    Ok(out)
}

fn batch_dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [b, m, n] => Ok((*b, *m, *n)),
        other => Err(TensorError::Shape { op, detail: format!("expected rank 3, got {:?}", other) }),
    }
}

/// Blockwise `[g, m, k] x [g, k, n] -> [g, m, n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ga, m, ka) = batch_dims3(a, "bmm")?;
    let (gb, kb, n) = batch_dims3(b, "bmm")?;
    if ga != gb || ka != kb {
        return Err(TensorError::Shape {
            op: "bmm",
            detail: format!("incompatible blocks: {:?} x {:?}", a.shape, b.shape),
        });
    }
    let mut out = Tensor::zeros(vec![ga, m, n]);
    for g in 0..ga {
        mm_acc(
            &a.data[g * m * ka..(g + 1) * m * ka],
            &b.data[g * ka * n..(g + 1) * ka * n],
            &mut out.data[g * m * n..(g + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    Ok(out)
}

/// Blockwise `[g, m, k] x [g, n, k]ᵀ -> [g, m, n]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ga, m, ka) = batch_dims3(a, "bmm_nt")?;
    let (gb, n, kb) = batch_dims3(b, "bmm_nt")?;
    if ga != gb || ka != kb {
        return Err(TensorError::Shape {
            op: "bmm_nt",
            detail: format!("incompatible blocks: {:?} x {:?}ᵀ", a.shape, b.shape),
        });
    }
    let mut out = Tensor::zeros(vec![ga, m, n]);
    for g in 0..ga {
        let bt = transpose_raw(&b.data[g * n * kb..(g + 1) * n * kb], n, kb);
        mm_acc(
            &a.data[g * m * ka..(g + 1) * m * ka],
            &bt,
            &mut out.data[g * m * n..(g + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    Ok(out)
}

/// Blockwise `aᵀ·b` accumulated into `c`; used by batched backward rules.
pub(crate) fn bmm_tn_acc_into(a: &Tensor, b: &Tensor, c: &mut Tensor) -> Result<(), TensorError> {
    let (ga, ka, m) = batch_dims3(a, "bmm_tn")?;
    let (gb, kb, n) = batch_dims3(b, "bmm_tn")?;
    let (gc, mc, nc) = batch_dims3(c, "bmm_tn")?;
    if ga != gb || ga != gc || ka != kb || m != mc || n != nc {
        return Err(TensorError::Shape {
            op: "bmm_tn",
            detail: format!("incompatible blocks: {:?}ᵀ x {:?} -> {:?}", a.shape, b.shape, c.shape),
        });
    }
    for g in 0..ga {
        mm_tn_acc(
            &a.data[g * ka * m..(g + 1) * ka * m],
            &b.data[g * kb * n..(g + 1) * kb * n],
            &mut c.data[g * m * n..(g + 1) * m * n],
            ka,
            m,
            n,
        );
    }
    Ok(())
}

/// Blockwise `a·bᵀ` accumulated into `c`.
pub(crate) fn bmm_nt_acc_into(a: &Tensor, b: &Tensor, c: &mut Tensor) -> Result<(), TensorError> {
    let (ga, m, ka) = batch_dims3(a, "bmm_nt_acc")?;
    let (gb, n, kb) = batch_dims3(b, "bmm_nt_acc")?;
    let (gc, mc, nc) = batch_dims3(c, "bmm_nt_acc")?;
    if ga != gb || ga != gc || ka != kb || m != mc || n != nc {
        return Err(TensorError::Shape {
            op: "bmm_nt_acc",
            detail: format!("incompatible blocks: {:?} x {:?}ᵀ -> {:?}", a.shape, b.shape, c.shape),
        });
    }
    for g in 0..ga {
        let bt = transpose_raw(&b.data[g * n * kb..(g + 1) * n * kb], n, kb);
        mm_acc(
            &a.data[g * m * ka..(g + 1) * m * ka],
            &bt,
            &mut c.data[g * m * n..(g + 1) * m * n],
            m,
            ka,
            n,
        );
    }
    Ok(())
}

/// `[m, n] -> [n, m]` copy.
pub fn transpose2(t: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = t.dims2("transpose")?;
    Ok(Tensor { shape: vec![n, m], data: transpose_raw(&t.data, m, n) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones_gives_inner_dim() {
        let a = Tensor::full(vec![2, 3], 1.0);
        let b = Tensor::full(vec![3, 2], 1.0);
        let c = matmul(&a, &b).expect("shapes agree");
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::full(vec![2, 3], 1.0);
        let b = Tensor::full(vec![2, 2], 1.0);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = transpose2(&transpose2(&t).unwrap()).unwrap();
        assert_eq!(t, tt);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_plain = matmul(&a, &transpose2(&b).unwrap()).unwrap();
        assert_eq!(via_nt, via_plain);

        let c = Tensor::new(vec![3, 2], vec![2.0, 1.0, 0.0, -1.0, 4.0, 0.5]).unwrap();
        let d = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let via_tn = matmul_tn(&c, &d).unwrap();
        let via_plain = matmul(&transpose2(&c).unwrap(), &d).unwrap();
        assert_eq!(via_tn, via_plain);
    }

    #[test]
    fn bmm_matches_per_block_matmul() {
        let a = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let b = Tensor::new(vec![2, 3, 2], (0..12).map(|i| 1.0 - i as f64 * 0.25).collect()).unwrap();
        let out = bmm(&a, &b).unwrap();
        for g in 0..2 {
            let ab = Tensor::new(vec![2, 3], a.data()[g * 6..(g + 1) * 6].to_vec()).unwrap();
            let bb = Tensor::new(vec![3, 2], b.data()[g * 6..(g + 1) * 6].to_vec()).unwrap();
            let expect = matmul(&ab, &bb).unwrap();
            assert_eq!(&out.data()[g * 4..(g + 1) * 4], expect.data());
        }
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn scalar_tensor_is_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn kernels_are_bitwise_deterministic() {
        let a = Tensor::new(vec![7, 11], (0..77).map(|i| (i as f64 * 0.731).tan()).collect()).unwrap();
        let b = Tensor::new(vec![11, 5], (0..55).map(|i| (i as f64 * 1.37).cos()).collect()).unwrap();
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1, c2);
    }
}
