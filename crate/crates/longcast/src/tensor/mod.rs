//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable once created. Every differentiable operation
//! records its inputs and a backward closure on the tensor it produces,
//! so each forward pass builds a fresh op graph; [`Tensor::backward`]
//! walks it in reverse and accumulates gradients into the leaf
//! parameters. The element type is generic: `f32` for training, `f64`
//! for the verification suites.

mod autodiff;
pub mod gradcheck;
pub(crate) mod ops;
mod rng;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use autodiff::{backward, is_grad_enabled, no_grad};
pub use ops::{Activation, Padding};
pub use rng::Rng;

/// Element type for tensors; implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Precision tag used in checkpoint files.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn from_usize(n: usize) -> Self;
    fn as_f64(self) -> f64;

    /// Round-trip-exact parse of the textual form produced by `Display`.
    fn parse(s: &str) -> Option<Self>;

    /// `c = alpha * op(a) * op(b) + beta * c` where `op` transposes when the
    /// flag is set. `a` is stored row-major with its untransposed shape.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn from_usize(n: usize) -> Self {
                n as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn parse(s: &str) -> Option<Self> {
                s.parse::<$t>().ok()
            }

            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: out length");
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[Tensor<S>], &[S]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct Op<S: Scalar> {
    pub parents: Vec<Tensor<S>>,
    pub backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    op: Option<Op<S>>,
}

/// Dense n-dimensional array with an optional gradient slot.
///
/// Cloning is cheap (reference-counted); the value buffer is never
/// mutated after construction.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn make(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant (non-trainable) tensor. Rejects non-finite values and
    /// shape/length mismatches.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} in tensor data")));
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor; `backward` accumulates into its grad slot.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::make(t.inner.shape.clone(), t.inner.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::make(shape.to_vec(), vec![S::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self::make(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: S) -> Self {
        Self::make(vec![1], vec![v], false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::make(vec![n, n], data, false, None)
    }

    /// Result of an op: records the backward edge when gradients are
    /// enabled and some parent is trainable.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let track = autodiff::is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::make(shape, data, true, Some(Op { parents, backward }))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Column count of a 2-D tensor (1 for 1-D).
    pub fn cols(&self) -> usize {
        if self.inner.shape.len() >= 2 {
            self.inner.shape[1]
        } else {
            1
        }
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> S {
        self.inner.data[r * self.cols() + c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<S>> {
        self.inner.op.as_ref()
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached copy: same values, no history, not trainable.
    pub fn detach(&self) -> Self {
        Self::make(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Backward pass from a scalar loss; see [`autodiff::backward`].
    pub fn backward(&self) -> Result<()> {
        autodiff::backward(self)
    }
}

pub(crate) fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
