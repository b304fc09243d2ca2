//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a heap node holding row-major
//! data, an optional gradient buffer, and — for results of differentiable
//! ops — a backward closure plus parent handles. Calling [`Tensor::backward`]
//! on a scalar walks the graph once in reverse topological order,
//! accumulating `∂loss/∂node` into every tracked node, then detaches the
//! graph so intermediates can be dropped without recursive destructor
//! chains. Gradients on leaves persist until explicitly zeroed.
//!
//! Everything is f64: the verification suite leans on central finite
//! differences at `h = 1e-5`, which is only meaningful at double precision.
//!
//! Shape violations are programmer errors and panic with both shapes in the
//! message; user-input errors are handled in higher layers.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::rng::Rng;

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Empty vector means "all zeros, not yet allocated".
    grad: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    parents: RefCell<Vec<Tensor>>,
    backward: RefCell<Option<BackwardFn>>,
}

/// Handle to a tensor node. Cloning shares the underlying storage, which is
/// exactly what weight sharing across model branches relies on: every use of
/// the same handle accumulates into the same gradient buffer.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// C[m,n] += A[m,k] · B[k,n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// dA[m,k] += G[m,n] · Bᵀ (B is [k,n])
fn mm_acc_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            darow[p] += acc;
        }
    }
}

/// dB[k,n] += Aᵀ · G (A is [m,k], G is [m,n])
fn mm_acc_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
}

impl Tensor {
    // ── construction ────────────────────────────────────────────────

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(Vec::new()),
            requires_grad: Cell::new(false),
            parents: RefCell::new(Vec::new()),
            backward: RefCell::new(None),
        }))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[1])
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.normal() * std).collect();
        Tensor::new(data, shape)
    }

    /// Marks this leaf as a trainable parameter; gradients will accumulate.
    pub fn tracked(self) -> Tensor {
        self.0.requires_grad.set(true);
        self
    }

    /// A constant copy of this tensor, cut off from the graph. Gradients do
    /// not flow through the result.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), &self.0.shape)
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.0.shape);
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Current gradient (zeros if none has been accumulated).
    pub fn grad_vec(&self) -> Vec<f64> {
        let g = self.0.grad.borrow();
        if g.is_empty() {
            vec![0.0; self.numel()]
        } else {
            g.clone()
        }
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().clear();
    }

    /// Overwrites the stored values. Only sensible on leaves (optimizer
    /// updates, finite-difference probes).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// In-place update of one element. Used by finite-difference probing.
    pub fn nudge(&self, index: usize, delta: f64) {
        self.0.data.borrow_mut()[index] += delta;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        if g.is_empty() {
            g.resize(contrib.len(), 0.0);
        }
        for (gv, &c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    fn make(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, back: BackwardFn) -> Tensor {
        assert_eq!(data.len(), numel_of(&shape));
        let tracked = parents.iter().any(|p| p.0.requires_grad.get());
        let t = Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(Vec::new()),
            requires_grad: Cell::new(tracked),
            parents: RefCell::new(if tracked { parents } else { Vec::new() }),
            backward: RefCell::new(if tracked { Some(back) } else { None }),
        }));
        t
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.0.shape, other.0.shape,
            "{op}: shape {:?} vs {:?}",
            self.0.shape, other.0.shape
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data: Vec<f64> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(data, self.0.shape.clone(), vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(g);
            }
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data: Vec<f64> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(data, self.0.shape.clone(), vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accumulate_grad(&neg);
            }
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data: Vec<f64> =
            self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::make(data, self.0.shape.clone(), vec![self.clone(), other.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                let da: Vec<f64> = g.iter().zip(pb.data().iter()).map(|(gv, b)| gv * b).collect();
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let db: Vec<f64> = g.iter().zip(pa.data().iter()).map(|(gv, a)| gv * a).collect();
                pb.accumulate_grad(&db);
            }
        }))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accumulate_grad(&d);
            }
        }))
    }

    /// Adds a `[D]` vector over the last axis of `self`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let d = *self.0.shape.last().expect("add_bias on 0-d tensor");
        assert_eq!(
            bias.0.shape,
            vec![d],
            "add_bias: bias {:?} does not match last dim of {:?}",
            bias.0.shape,
            self.0.shape
        );
        let bd = bias.to_vec();
        let data: Vec<f64> =
            self.data().iter().enumerate().map(|(i, v)| v + bd[i % d]).collect();
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::make(data, self.0.shape.clone(), vec![self.clone(), bias.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                pa.accumulate_grad(g);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; d];
                for (i, gv) in g.iter().enumerate() {
                    db[i % d] += gv;
                }
                pb.accumulate_grad(&db);
            }
        }))
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let out = data.clone();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let d: Vec<f64> = g.iter().zip(&out).map(|(gv, e)| gv * e).collect();
                p.accumulate_grad(&d);
            }
        }))
    }

    /// Natural logarithm, elementwise.
    pub fn log(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let d: Vec<f64> =
                    g.iter().zip(p.data().iter()).map(|(gv, x)| gv / x).collect();
                p.accumulate_grad(&d);
            }
        }))
    }

    /// GELU in its exact Gaussian-CDF form: `x · Φ(x)`.
    pub fn gelu(&self) -> Tensor {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT2)))
            .collect();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
                let d: Vec<f64> = g
                    .iter()
                    .zip(p.data().iter())
                    .map(|(gv, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT2));
                        let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                p.accumulate_grad(&d);
            }
        }))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]·[k,n]`, batched `[B..,m,k]·[B..,k,n]`
    /// with identical batch prefixes, and `[B..,m,k]·[k,n]` where the
    /// right-hand side is broadcast over the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (ash, bsh) = (&self.0.shape, &rhs.0.shape);
        assert!(
            ash.len() >= 2 && bsh.len() >= 2,
            "matmul: ranks must be >= 2, got {ash:?} x {bsh:?}"
        );
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, kb, "matmul: inner dims disagree, {ash:?} x {bsh:?}");
        let abatch = &ash[..ash.len() - 2];
        let bbatch = &bsh[..bsh.len() - 2];
        let broadcast_rhs = bbatch.is_empty();
        assert!(
            broadcast_rhs || abatch == bbatch,
            "matmul: batch dims disagree, {ash:?} x {bsh:?}"
        );
        let batch = numel_of(abatch);
        let mut data = vec![0.0; batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for t in 0..batch {
                let bo = if broadcast_rhs { 0 } else { t * k * n };
                mm_acc(
                    &a[t * m * k..(t + 1) * m * k],
                    &b[bo..bo + k * n],
                    m,
                    k,
                    n,
                    &mut data[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut out_shape = abatch.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::make(data, out_shape, vec![self.clone(), rhs.clone()], Box::new(move |g| {
            if pa.requires_grad() {
                let mut da = vec![0.0; batch * m * k];
                let b = pb.data();
                for t in 0..batch {
                    let bo = if broadcast_rhs { 0 } else { t * k * n };
                    mm_acc_bt(
                        &g[t * m * n..(t + 1) * m * n],
                        &b[bo..bo + k * n],
                        m,
                        k,
                        n,
                        &mut da[t * m * k..(t + 1) * m * k],
                    );
                }
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let rhs_len = if broadcast_rhs { k * n } else { batch * k * n };
                let mut db = vec![0.0; rhs_len];
                let a = pa.data();
                for t in 0..batch {
                    let bo = if broadcast_rhs { 0 } else { t * k * n };
                    mm_acc_at(
                        &a[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[bo..bo + k * n],
                    );
                }
                pb.accumulate_grad(&db);
            }
        }))
    }

    // ── shape manipulation ──────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel_of(new_shape),
            "reshape: {:?} -> {:?} changes element count",
            self.0.shape,
            new_shape
        );
        let p = self.clone();
        Tensor::make(self.to_vec(), new_shape.to_vec(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                p.accumulate_grad(g);
            }
        }))
    }

    /// General axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.0.shape.len();
        assert_eq!(perm.len(), rank, "permute: perm {perm:?} vs rank {rank}");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: invalid perm {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.0.shape[p]).collect();
        let data = permute_copy(&self.data(), &self.0.shape, perm);
        let p_handle = self.clone();
        let inv: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            inv
        };
        let out_shape_b = out_shape.clone();
        Tensor::make(data, out_shape, vec![self.clone()], Box::new(move |g| {
            if p_handle.requires_grad() {
                let back = permute_copy(g, &out_shape_b, &inv);
                p_handle.accumulate_grad(&back);
            }
        }))
    }

    /// Swap two axes (transpose in the n-d sense).
    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut perm: Vec<usize> = (0..self.0.shape.len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = &self.0.shape;
        assert!(axis < shape.len(), "narrow: axis {axis} out of range for {shape:?}");
        assert!(
            start + len <= shape[axis],
            "narrow: [{start}, {start}+{len}) exceeds axis {axis} of {shape:?}"
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let src = self.data();
            for o in 0..outer {
                let base = o * axis_len * inner + start * inner;
                data.extend_from_slice(&src[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let p = self.clone();
        let in_numel = self.numel();
        Tensor::make(data, out_shape, vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let mut back = vec![0.0; in_numel];
                for o in 0..outer {
                    let dst = o * axis_len * inner + start * inner;
                    let src = o * len * inner;
                    back[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                p.accumulate_grad(&back);
            }
        }))
    }

    /// Concatenation along one axis; all parts must agree on the others.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].0.shape.len();
        assert!(axis < rank, "concat: axis {axis} out of range");
        for p in parts {
            assert_eq!(p.0.shape.len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.0.shape[d], parts[0].0.shape[d],
                        "concat: shape {:?} vs {:?} on axis {d}",
                        p.0.shape, parts[0].0.shape
                    );
                }
            }
        }
        let outer: usize = parts[0].0.shape[..axis].iter().product();
        let inner: usize = parts[0].0.shape[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.0.shape[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = vec![0.0; outer * total * inner];
        {
            let mut offset = 0usize;
            for (p, &len) in parts.iter().zip(&lens) {
                let src = p.data();
                for o in 0..outer {
                    let s = o * len * inner;
                    let d = o * total * inner + offset * inner;
                    data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
                }
                offset += len;
            }
        }
        let mut out_shape = parts[0].0.shape.clone();
        out_shape[axis] = total;
        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_handles = handles.clone();
        Tensor::make(data, out_shape, handles, Box::new(move |g| {
            let mut offset = 0usize;
            for (p, &len) in back_handles.iter().zip(&lens) {
                if p.requires_grad() {
                    let mut part = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let s = o * total * inner + offset * inner;
                        let d = o * len * inner;
                        part[d..d + len * inner].copy_from_slice(&g[s..s + len * inner]);
                    }
                    p.accumulate_grad(&part);
                }
                offset += len;
            }
        }))
    }

    /// Gather rows along an axis (also serves as embedding lookup). Indices
    /// may repeat; the backward pass scatter-adds.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor {
        let shape = &self.0.shape;
        assert!(axis < shape.len(), "index_select: axis {axis} out of range for {shape:?}");
        let axis_len = shape[axis];
        for &i in indices {
            assert!(i < axis_len, "index_select: index {i} out of range ({axis_len})");
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        {
            let src = self.data();
            for o in 0..outer {
                for &i in indices {
                    let base = o * axis_len * inner + i * inner;
                    data.extend_from_slice(&src[base..base + inner]);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let p = self.clone();
        let idx = indices.to_vec();
        let in_numel = self.numel();
        Tensor::make(data, out_shape, vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let mut back = vec![0.0; in_numel];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = o * axis_len * inner + i * inner;
                        let src = (o * idx.len() + j) * inner;
                        for t in 0..inner {
                            back[dst + t] += g[src + t];
                        }
                    }
                }
                p.accumulate_grad(&back);
            }
        }))
    }

    /// Repeat a size-1 axis `n` times. Backward sums over the repeats.
    pub fn expand(&self, axis: usize, n: usize) -> Tensor {
        let shape = &self.0.shape;
        assert!(axis < shape.len() && shape[axis] == 1, "expand: axis {axis} of {shape:?} must be 1");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        {
            let src = self.data();
            for o in 0..outer {
                for _ in 0..n {
                    data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let p = self.clone();
        let in_numel = self.numel();
        Tensor::make(data, out_shape, vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let mut back = vec![0.0; in_numel];
                for o in 0..outer {
                    for r in 0..n {
                        let src = (o * n + r) * inner;
                        for t in 0..inner {
                            back[o * inner + t] += g[src + t];
                        }
                    }
                }
                p.accumulate_grad(&back);
            }
        }))
    }

    // ── reductions and nonlinear maps ───────────────────────────────

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let shape = &self.0.shape;
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Numerically stable softmax along `axis`. Panics on non-finite input.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = self.axis_split(axis);
        let mut data = vec![0.0; self.numel()];
        {
            let src = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        let v = src[at(j)];
                        assert!(v.is_finite(), "softmax: non-finite input {v}");
                        mx = mx.max(v);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (src[at(j)] - mx).exp();
                        data[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        data[at(j)] /= sum;
                    }
                }
            }
        }
        let out = data.clone();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                // ds_j = s_j (g_j − Σ_k g_k s_k) per softmax group
                let mut back = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * out[at(j)];
                        }
                        for j in 0..len {
                            back[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                p.accumulate_grad(&back);
            }
        }))
    }

    /// `x − max − ln Σ exp(x − max)` along `axis`; the stable path to
    /// cross-entropy style losses.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = self.axis_split(axis);
        let mut data = vec![0.0; self.numel()];
        {
            let src = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        let v = src[at(j)];
                        assert!(v.is_finite(), "log_softmax: non-finite input {v}");
                        mx = mx.max(v);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        sum += (src[at(j)] - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for j in 0..len {
                        data[at(j)] = src[at(j)] - lse;
                    }
                }
            }
        }
        let out = data.clone();
        let p = self.clone();
        Tensor::make(data, self.0.shape.clone(), vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                // dx_j = g_j − softmax_j · Σ_k g_k per group
                let mut back = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut gsum = 0.0;
                        for j in 0..len {
                            gsum += g[at(j)];
                        }
                        for j in 0..len {
                            back[at(j)] = g[at(j)] - out[at(j)].exp() * gsum;
                        }
                    }
                }
                p.accumulate_grad(&back);
            }
        }))
    }

    /// Per-token standardization over the last axis, then affine gain/bias.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let d = *self.0.shape.last().expect("layernorm on 0-d tensor");
        assert_eq!(gain.0.shape, vec![d], "layernorm: gain {:?} vs D={d}", gain.0.shape);
        assert_eq!(bias.0.shape, vec![d], "layernorm: bias {:?} vs D={d}", bias.0.shape);
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        {
            let src = self.data();
            let gd = gain.data();
            let bd = bias.data();
            for r in 0..rows {
                let x = &src[r * d..(r + 1) * d];
                let mean = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = (x[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Tensor::make(
            data,
            self.0.shape.clone(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let src = px.data();
                let gd = pg.data();
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let x = &src[r * d..(r + 1) * d];
                    let go = &g[r * d..(r + 1) * d];
                    let mean = x.iter().sum::<f64>() / d as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = go.iter().zip(gd.iter()).map(|(gv, gn)| gv * gn).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgain[j] += go[j] * xhat[j];
                        dbias[j] += go[j];
                        dx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if px.requires_grad() {
                    px.accumulate_grad(&dx);
                }
                if pg.requires_grad() {
                    pg.accumulate_grad(&dgain);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&dbias);
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::make(vec![s], vec![1], vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                p.accumulate_grad(&vec![g[0]; n]);
            }
        }))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        let p = self.clone();
        Tensor::make(vec![s], vec![1], vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                p.accumulate_grad(&vec![g[0] / n as f64; n]);
            }
        }))
    }

    /// Select one element (by flat index) as a scalar.
    pub fn pick(&self, index: usize) -> Tensor {
        assert!(index < self.numel(), "pick: index {index} out of range ({})", self.numel());
        let v = self.data()[index];
        let n = self.numel();
        let p = self.clone();
        Tensor::make(vec![v], vec![1], vec![self.clone()], Box::new(move |g| {
            if p.requires_grad() {
                let mut back = vec![0.0; n];
                back[index] = g[0];
                p.accumulate_grad(&back);
            }
        }))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits each node exactly once
    /// in reverse topological order, accumulates gradients into every
    /// tracked tensor, then detaches the graph. Panics if `self` is not
    /// scalar.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.0.shape
        );
        // Iterative post-order DFS; parents precede children in `order`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.0);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in node.0.parents.borrow().iter() {
                if !visited.contains(&Rc::as_ptr(&parent.0)) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let back = node.0.backward.borrow_mut().take();
            if let Some(back) = back {
                let g = node.0.grad.borrow();
                if !g.is_empty() {
                    back(&g);
                }
                // Non-leaf grads are graph state, not results; drop them so
                // peak memory stays flat during training.
                drop(g);
                node.0.grad.borrow_mut().clear();
            }
            node.0.parents.borrow_mut().clear();
        }
    }
}

fn permute_copy(src: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = row_major_strides(in_shape);
    // Stride in the input for each output axis.
    let map: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel_of(in_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    let mut src_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = src[src_idx];
        // Advance the output coordinate odometer, keeping src_idx in sync.
        for d in (0..rank).rev() {
            coords[d] += 1;
            src_idx += map[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src_idx -= map[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}
