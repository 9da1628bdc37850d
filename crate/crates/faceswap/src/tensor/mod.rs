//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: every op allocates a fresh output tensor
//! holding its forward value, its parent handles, and a closure that knows
//! how to push gradients back to the parents. A training step builds the
//! graph, calls [`backward`] on the scalar loss, and drops the graph.
//!
//! Tensors are reference-counted handles (`Rc`), so they are cheap to clone
//! and confined to one thread; concurrent training runs each build their own
//! graphs. Data is immutable once an op has produced it — the only sanctioned
//! mutations are gradient accumulation and the optimizer rewriting leaf
//! parameters between steps, via [`Tensor::set_data`].
//!
//! Element type is generic: `f64` is the default everywhere (all oracles and
//! gradient checks are double precision), `f32` can be selected for faster
//! training runs.

mod ops;

pub mod gradcheck;

pub use ops::*;

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Scalar storage type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<DType> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            _ => Err(Error::Checkpoint {
                what: format!("unknown dtype tag {tag}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element: num_traits::Float + fmt::Debug + fmt::Display + Default + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// Row-major `C[m,n] = A[m,k] * B[k,n]` with explicit strides,
    /// accumulating when `acc` is true.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        acc: bool,
    );

    fn write_le(vals: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Result<Vec<Self>>;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        acc: bool,
    ) {
        let beta = if acc { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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

    fn write_le(vals: &[f64], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Result<Vec<f64>> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Checkpoint {
                what: format!("f64 payload length {} not a multiple of 8", bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        acc: bool,
    ) {
        let beta = if acc { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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

    fn write_le(vals: &[f32], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Result<Vec<f32>> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::Checkpoint {
                what: format!("f32 payload length {} not a multiple of 4", bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient closure: `(out_data, out_grad, parents)`.
pub(crate) type BackFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct Inner<E: Element> {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    back: Option<BackFn<E>>,
}

/// Dense row-major tensor. Cloning copies the handle, not the data.
pub struct Tensor<E: Element>(Rc<Inner<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(op={}, shape={:?}, requires_grad={})",
            self.0.op, self.0.shape, self.0.requires_grad
        )
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::DataLength {
            expected: n,
            got: len,
        });
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false, "leaf"))
    }

    /// Leaf parameter: tracked by backward, gradient accumulates across calls.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true, "param"))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![E::zero(); n], false, "leaf")
    }

    pub fn full(shape: &[usize], v: E) -> Tensor<E> {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![v; n], false, "leaf")
    }

    /// Rank-0 (scalar) constant.
    pub fn scalar(v: E) -> Tensor<E> {
        Self::leaf(vec![], vec![v], false, "leaf")
    }

    fn leaf(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: &'static str) -> Tensor<E> {
        Tensor(Rc::new(Inner {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            back: None,
        }))
    }

    /// Op output node. `requires_grad` is inherited from the parents.
    ///
    /// Ops never introduce NaN/Inf on their own (softmax is stabilized,
    /// norms carry eps, degenerate inputs are error contracts); divergence
    /// of *values* during training is the harness's loss-level NaN check,
    /// which must stay reachable, so nothing is asserted here.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        back: BackFn<E>,
    ) -> Tensor<E> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Inner {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            back: if requires_grad { Some(back) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.back.is_none() && self.0.parents.is_empty()
    }

    /// Name of the op that produced this node (`"leaf"`/`"param"` for leaves).
    pub fn op_kind(&self) -> &'static str {
        self.0.op
    }

    /// Creation-order id; parents always have smaller ids than children.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn parent_ids(&self) -> Vec<u64> {
        self.0.parents.iter().map(|p| p.id()).collect()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.0.data.borrow()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    pub fn item_f64(&self) -> f64 {
        self.item().into_f64()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the data of a leaf in place (optimizer update, checkpoint
    /// load). Must never be called between building a graph over this tensor
    /// and running its backward pass.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        check_len(&self.0.shape, data.len())?;
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// New no-grad leaf holding a copy of the current data.
    pub fn detach(&self) -> Tensor<E> {
        Self::leaf(
            self.0.shape.clone(),
            self.0.data.borrow().clone(),
            false,
            "leaf",
        )
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// The nodes reachable from a root, in reverse topological order.
///
/// Creation order is a topological order by construction (an op's parents
/// exist before the op), so reverse creation order is a valid backward
/// schedule. Only nodes that require grad are included.
pub struct Graph<E: Element> {
    nodes: Vec<Tensor<E>>,
}

impl<E: Element> Graph<E> {
    pub fn from_root(root: &Tensor<E>) -> Graph<E> {
        let mut nodes = Vec::new();
        if !root.requires_grad() {
            return Graph { nodes };
        }
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![root.clone()];
        seen.insert(root.id());
        while let Some(t) = stack.pop() {
            for p in &t.0.parents {
                if p.requires_grad() && seen.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.id()));
        Graph { nodes }
    }

    /// Reverse-topologically ordered nodes (root first).
    pub fn nodes(&self) -> &[Tensor<E>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Populates `grad` of every grad-requiring leaf reachable from `root` with
/// d root / d leaf.
///
/// Leaf gradients accumulate across calls; intermediate gradients are
/// transient and reset on every invocation. Visits each node exactly once.
pub fn backward<E: Element>(root: &Tensor<E>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    if !root.requires_grad() {
        return Ok(());
    }
    let graph = Graph::from_root(root);
    // Intermediates keep no state between backward passes.
    for node in graph.nodes() {
        if !node.is_leaf() {
            node.zero_grad();
        }
    }
    root.accumulate_grad(&[E::one()]);
    for node in graph.nodes() {
        if let Some(back) = &node.0.back {
            let grad = node
                .0
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![E::zero(); node.numel()]);
            let data = node.0.data.borrow();
            back(&data, &grad, &node.0.parents);
        }
    }
    Ok(())
}
