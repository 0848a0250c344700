use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

/// Scalar element type for tensors. `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard that disables tape recording on the current thread.
pub struct GradGuard {
    prev: bool,
}

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Run `f` without recording any backward rules. Used by samplers and
/// evaluation, where graphs would otherwise accumulate across steps.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradGuard { prev };
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<F> = Box<dyn Fn(&[F])>;

struct Inner<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Vec<F>>, // empty = not yet allocated
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Value-like handle onto a node of the implicit tape. Cloning is cheap and
/// shares storage. A tensor is a leaf when it has no parents; leaves with
/// `requires_grad` accumulate gradients during [`Tensor::backward`].
pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.inner.shape)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        parents: Vec<Tensor<F>>,
        backward: Option<BackwardFn<F>>,
    ) -> Tensor<F> {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(Vec::new()),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Tensor<F>> {
        if numel(shape) != data.len() {
            return Err(NumericsError::Contract {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel(shape), data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<F> {
        Tensor::new_inner(shape.to_vec(), vec![F::zero(); numel(shape)], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: F) -> Tensor<F> {
        Tensor::new_inner(shape.to_vec(), vec![v; numel(shape)], false, Vec::new(), None)
    }

    /// Gaussian init, drawn in f64 so f32 and f64 models share weights bit-for-bit
    /// up to rounding.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
        let data = (0..numel(shape))
            .map(|_| {
                // Box-Muller on two uniform draws; avoids a rand_distr dependency
                // drift between scalar types.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                F::from_f64(z * std)
            })
            .collect();
        Tensor::new_inner(shape.to_vec(), data, false, Vec::new(), None)
    }

    pub fn requires_grad(mut self, on: bool) -> Tensor<F> {
        self.set_requires_grad(on);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    /// Toggle on a shared handle (leaf parameters during selective freezing).
    pub fn set_requires_grad_shared(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn data(&self) -> Vec<F> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> F {
        self.inner.data.borrow()[0]
    }

    /// Overwrite stored values in place (optimizer updates, FD probes).
    pub fn set_data(&self, data: &[F]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        let g = self.inner.grad.borrow();
        if g.is_empty() {
            None
        } else {
            Some(g.clone())
        }
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().clear();
    }

    fn accumulate_grad(&self, delta: &[F]) {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_empty() {
            g.resize(self.numel(), F::zero());
        }
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    fn tracked(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.backward.is_some()
    }

    /// Central constructor for op outputs: validates finiteness and attaches
    /// the backward rule only when the tape is live.
    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: impl Fn(&[F]) + 'static,
    ) -> Result<Tensor<F>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op });
        }
        let record = grad_enabled() && parents.iter().any(|p| p.tracked());
        if record {
            Ok(Tensor::new_inner(shape, data, false, parents, Some(Box::new(backward))))
        } else {
            Ok(Tensor::new_inner(shape, data, false, Vec::new(), None))
        }
    }

    /// Value copy detached from the tape.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::new_inner(self.inner.shape.clone(), self.data(), false, Vec::new(), None)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_op("add", other, |a, b| a + b, |_, _| (F::one(), F::one()))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_op("sub", other, |a, b| a - b, |_, _| (F::one(), -F::one()))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_op("mul", other, |a, b| a * b, |a, b| (b, a))
    }

    fn zip_op(
        &self,
        op: &'static str,
        other: &Tensor<F>,
        f: impl Fn(F, F) -> F,
        df: impl Fn(F, F) -> (F, F) + 'static,
    ) -> Result<Tensor<F>> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(op, self.shape().to_vec(), out, vec![pa.clone(), pb.clone()], move |g| {
            let av = pa.inner.data.borrow();
            let bv = pb.inner.data.borrow();
            let mut ga = vec![F::zero(); av.len()];
            let mut gb = vec![F::zero(); bv.len()];
            for i in 0..g.len() {
                let (da, db) = df(av[i], bv[i]);
                ga[i] = g[i] * da;
                gb[i] = g[i] * db;
            }
            drop(av);
            drop(bv);
            if pa.tracked() {
                pa.accumulate_grad(&ga);
            }
            if pb.tracked() {
                pb.accumulate_grad(&gb);
            }
        })
    }

    pub fn scale(&self, c: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.inner.data.borrow().iter().map(|&x| x * c).collect();
        let p = self.clone();
        Tensor::from_op("scale", self.shape().to_vec(), out, vec![p.clone()], move |g| {
            let gp: Vec<F> = g.iter().map(|&gi| gi * c).collect();
            p.accumulate_grad(&gp);
        })
    }

    pub fn add_scalar(&self, c: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.inner.data.borrow().iter().map(|&x| x + c).collect();
        let p = self.clone();
        Tensor::from_op("add_scalar", self.shape().to_vec(), out, vec![p.clone()], move |g| {
            p.accumulate_grad(g);
        })
    }

    /// SiLU activation x * sigmoid(x).
    pub fn silu(&self) -> Result<Tensor<F>> {
        let sigmoid = |x: F| F::one() / (F::one() + (-x).exp());
        let out: Vec<F> = self.inner.data.borrow().iter().map(|&x| x * sigmoid(x)).collect();
        let p = self.clone();
        Tensor::from_op("silu", self.shape().to_vec(), out, vec![p.clone()], move |g| {
            let xv = p.inner.data.borrow();
            let gp: Vec<F> = g
                .iter()
                .zip(xv.iter())
                .map(|(&gi, &x)| {
                    let s = F::one() / (F::one() + (-x).exp());
                    gi * s * (F::one() + x * (F::one() - s))
                })
                .collect();
            drop(xv);
            p.accumulate_grad(&gp);
        })
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let p = self.clone();
        Tensor::from_op("reshape", shape.to_vec(), self.data(), vec![p.clone()], move |g| {
            p.accumulate_grad(g);
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        let [m, n] = self.dims2("transpose")?;
        let a = self.inner.data.borrow();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        let p = self.clone();
        Tensor::from_op("transpose", vec![n, m], out, vec![p.clone()], move |g| {
            let mut gp = vec![F::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    gp[i * n + j] = g[j * m + i];
                }
            }
            p.accumulate_grad(&gp);
        })
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape() {
            [m, n] => Ok([*m, *n]),
            s => Err(NumericsError::Contract {
                op,
                msg: format!("expected a 2-D tensor, got shape {:?}", s),
            }),
        }
    }

    /// Element gather: out[i] = self[indices[i]]. Backward scatter-adds.
    /// Patchify, unpatchify, slicing and embedding lookups are all gathers.
    pub fn gather(&self, indices: &Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<F>> {
        if indices.len() != numel(out_shape) {
            return Err(NumericsError::Contract {
                op: "gather",
                msg: format!("{} indices for output shape {:?}", indices.len(), out_shape),
            });
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::Contract {
                op: "gather",
                msg: format!("index {} out of range for {} elements", bad, n),
            });
        }
        let a = self.inner.data.borrow();
        let out: Vec<F> = indices.iter().map(|&i| a[i]).collect();
        drop(a);
        let p = self.clone();
        let idx = Rc::clone(indices);
        Tensor::from_op("gather", out_shape.to_vec(), out, vec![p.clone()], move |g| {
            let mut gp = vec![F::zero(); p.numel()];
            for (k, &i) in idx.iter().enumerate() {
                gp[i] = gp[i] + g[k];
            }
            p.accumulate_grad(&gp);
        })
    }

    /// Column slice of a 2-D tensor: columns [lo, hi).
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor<F>> {
        let [m, n] = self.dims2("slice_cols")?;
        if lo >= hi || hi > n {
            return Err(NumericsError::Contract {
                op: "slice_cols",
                msg: format!("range {}..{} out of {} columns", lo, hi, n),
            });
        }
        let idx: Vec<usize> = (0..m).flat_map(|i| (lo..hi).map(move |j| i * n + j)).collect();
        self.gather(&Rc::new(idx), &[m, hi - lo])
    }

    /// Row slice of a 2-D tensor: rows [lo, hi).
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Tensor<F>> {
        let [m, n] = self.dims2("slice_rows")?;
        if lo >= hi || hi > m {
            return Err(NumericsError::Contract {
                op: "slice_rows",
                msg: format!("range {}..{} out of {} rows", lo, hi, m),
            });
        }
        let idx: Vec<usize> = (lo * n..hi * n).collect();
        self.gather(&Rc::new(idx), &[hi - lo, n])
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(NumericsError::Contract {
                op: "concat_cols",
                msg: "empty part list".into(),
            });
        }
        let [m, _] = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let [pm, pn] = p.dims2("concat_cols")?;
            if pm != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![F::zero(); m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.inner.data.borrow();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ps: Vec<Tensor<F>> = parts.to_vec();
        let widths_c = widths.clone();
        Tensor::from_op("concat_cols", vec![m, n], out, ps.clone(), move |g| {
            let mut off = 0;
            for (p, &w) in ps.iter().zip(&widths_c) {
                if p.tracked() {
                    let mut gp = vec![F::zero(); m * w];
                    for i in 0..m {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    p.accumulate_grad(&gp);
                }
                off += w;
            }
        })
    }

    // ---- linear algebra ----------------------------------------------

    /// Standard 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out = matmul_raw(&a, &b, m, k, n);
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op("matmul", vec![m, n], out, vec![pa.clone(), pb.clone()], move |g| {
            let av = pa.inner.data.borrow();
            let bv = pb.inner.data.borrow();
            if pa.tracked() {
                // grad_a = g . b^T
                let mut ga = vec![F::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for l in 0..k {
                            ga[i * k + l] = ga[i * k + l] + gij * bv[l * n + j];
                        }
                    }
                }
                drop(av);
                pa.accumulate_grad(&ga);
            } else {
                drop(av);
            }
            if pb.tracked() {
                // grad_b = a^T . g
                let av = pa.inner.data.borrow();
                let mut gb = vec![F::zero(); k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = av[i * k + l];
                        for j in 0..n {
                            gb[l * n + j] = gb[l * n + j] + ail * g[i * n + j];
                        }
                    }
                }
                drop(av);
                drop(bv);
                pb.accumulate_grad(&gb);
            }
        })
    }

    /// Add a [1, d] (or [d]) vector to every row of a [n, d] tensor.
    pub fn add_row(&self, v: &Tensor<F>) -> Result<Tensor<F>> {
        let [m, n] = self.dims2("add_row")?;
        if v.numel() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let a = self.inner.data.borrow();
        let b = v.inner.data.borrow();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), v.clone());
        Tensor::from_op("add_row", vec![m, n], out, vec![pa.clone(), pb.clone()], move |g| {
            if pa.tracked() {
                pa.accumulate_grad(g);
            }
            if pb.tracked() {
                let mut gv = vec![F::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gv[j] = gv[j] + g[i * n + j];
                    }
                }
                pb.accumulate_grad(&gv);
            }
        })
    }

    // ---- reductions and normalizations ---------------------------------

    pub fn sum_all(&self) -> Result<Tensor<F>> {
        let s: F = self.inner.data.borrow().iter().copied().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![s], vec![p.clone()], move |g| {
            p.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<F>> {
        let n = self.numel();
        if n == 0 {
            return Err(NumericsError::Contract {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let inv = F::from_f64(1.0 / n as f64);
        let s: F = self.inner.data.borrow().iter().copied().sum();
        let p = self.clone();
        Tensor::from_op("mean_all", vec![1], vec![s * inv], vec![p.clone()], move |g| {
            p.accumulate_grad(&vec![g[0] * inv; n]);
        })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.sub(other)?;
        d.mul(&d)?.mean_all()
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&self) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or(NumericsError::Contract {
            op: "softmax_lastdim",
            msg: "zero-rank tensor".into(),
        })?;
        if d == 0 {
            return Err(NumericsError::Contract {
                op: "softmax_lastdim",
                msg: "empty last dimension".into(),
            });
        }
        let a = self.inner.data.borrow();
        let rows = a.len() / d;
        let mut out = vec![F::zero(); a.len()];
        for r in 0..rows {
            let row = &a[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                out[r * d + j] = e;
                z = z + e;
            }
            for j in 0..d {
                out[r * d + j] = out[r * d + j] / z;
            }
        }
        drop(a);
        let p = self.clone();
        let y_saved = out.clone();
        Tensor::from_op("softmax_lastdim", shape, out, vec![p.clone()], move |g| {
            let mut gp = vec![F::zero(); g.len()];
            let rows = g.len() / d;
            for r in 0..rows {
                let mut dot = F::zero();
                for j in 0..d {
                    dot = dot + g[r * d + j] * y_saved[r * d + j];
                }
                for j in 0..d {
                    let y = y_saved[r * d + j];
                    gp[r * d + j] = y * (g[r * d + j] - dot);
                }
            }
            p.accumulate_grad(&gp);
        })
    }

    /// Layer norm over the last dimension with affine gain/bias (each [d]).
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(NumericsError::Contract {
                op: "layer_norm",
                msg: format!("normalization dimension must be >= 2, got {}", d),
            });
        }
        if gain.numel() != d || bias.numel() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = F::from_f64(1e-5);
        let a = self.inner.data.borrow();
        let gv = gain.inner.data.borrow();
        let bv = bias.inner.data.borrow();
        let rows = a.len() / d;
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut out = vec![F::zero(); a.len()];
        let mut xhat = vec![F::zero(); a.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &a[r * d..(r + 1) * d];
            let mean: F = row.iter().copied().sum::<F>() * inv_d;
            let var: F = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        drop(a);
        drop(gv);
        drop(bv);
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![px.clone(), pg.clone(), pb.clone()],
            move |g| {
                let gv = pg.inner.data.borrow();
                let rows = g.len() / d;
                if px.tracked() {
                    let mut gx = vec![F::zero(); g.len()];
                    for r in 0..rows {
                        let mut m1 = F::zero(); // mean of dxhat
                        let mut m2 = F::zero(); // mean of dxhat * xhat
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] = inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    px.accumulate_grad(&gx);
                }
                drop(gv);
                if pg.tracked() {
                    let mut gg = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    pg.accumulate_grad(&gg);
                }
                if pb.tracked() {
                    let mut gb = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            },
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// into every reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(NumericsError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape()),
            });
        }
        // Topological order by iterative DFS; parent order is deterministic.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<*const Inner<F>> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if visited.insert(Rc::as_ptr(&next.inner)) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        // `order` is now children-after-parents; reverse for the sweep.
        self.accumulate_grad(&[F::one()]);
        for node in order.iter().rev() {
            if let Some(bw) = &node.inner.backward {
                let g = node.inner.grad.borrow().clone();
                if !g.is_empty() {
                    bw(&g);
                }
            }
        }
        // Intermediate grads die with the graph; leaf grads persist.
        Ok(())
    }
}

pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + ail * brow[j];
            }
        }
    }
    out
}
