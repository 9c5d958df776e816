//! Reverse-mode differentiation over `ndarray` storage.
//!
//! [`Var`] is a handle to a node in a dynamically built computation graph.
//! Calling [`backward`] walks the graph in reverse creation order and pushes
//! vector-Jacobian products toward the requested inputs. The VJP of every op
//! is itself expressed through ops, so running backward with
//! `create_graph = true` yields gradients that are again differentiable —
//! this is what unrolled inner loops, gradient-matching losses, and
//! Hessian-vector products are built on.
//!
//! Graphs are thread-confined (`Var` is not `Send`); independent graphs on
//! different threads do not interact. Per-thread counters track live tensor
//! bytes and node counts, which the profiler reads as the storage high-water
//! mark.

mod conv;
mod func;
pub mod linalg;
mod ops;
mod sparse;

pub use func::{cross_entropy, log_softmax, mse_loss, softmax};
pub use sparse::PlaneMap;

use ndarray::{ArrayD, IxDyn, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Scalar element of the differentiable stack. Implemented for `f32`/`f64`.
pub trait Elem:
    ndarray::LinalgScalar
    + Float
    + NumAssignOps
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Sum<Self>
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Vector-Jacobian product of one op: given the output gradient, produce the
/// gradient for each parent (None for parents that need no gradient).
pub(crate) trait Vjp<E: Elem> {
    fn backward(&self, parents: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>>;
}

pub(crate) struct Node<E: Elem> {
    id: u64,
    value: Rc<ArrayD<E>>,
    parents: Vec<Var<E>>,
    vjp: Option<Box<dyn Vjp<E>>>,
    requires_grad: bool,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
    static LIVE_NODES: Cell<usize> = const { Cell::new(0) };
    static PEAK_NODES: Cell<usize> = const { Cell::new(0) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn with_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Thread-local tensor storage accounting, in bytes/nodes.
pub mod mem {
    use super::*;

    pub fn reset_peak() {
        LIVE_BYTES.with(|c| PEAK_BYTES.with(|p| p.set(c.get())));
        LIVE_NODES.with(|c| PEAK_NODES.with(|p| p.set(c.get())));
    }

    pub fn live_bytes() -> usize {
        LIVE_BYTES.with(|c| c.get())
    }

    pub fn peak_bytes() -> usize {
        PEAK_BYTES.with(|c| c.get())
    }

    pub fn live_nodes() -> usize {
        LIVE_NODES.with(|c| c.get())
    }

    pub fn peak_nodes() -> usize {
        PEAK_NODES.with(|c| c.get())
    }

    pub(super) fn on_create(bytes: usize) {
        LIVE_BYTES.with(|c| {
            let v = c.get() + bytes;
            c.set(v);
            PEAK_BYTES.with(|p| {
                if v > p.get() {
                    p.set(v)
                }
            });
        });
        LIVE_NODES.with(|c| {
            let v = c.get() + 1;
            c.set(v);
            PEAK_NODES.with(|p| {
                if v > p.get() {
                    p.set(v)
                }
            });
        });
    }

    pub(super) fn on_drop(bytes: usize) {
        LIVE_BYTES.with(|c| c.set(c.get().saturating_sub(bytes)));
        LIVE_NODES.with(|c| c.set(c.get().saturating_sub(1)));
    }
}

impl<E: Elem> Drop for Node<E> {
    fn drop(&mut self) {
        mem::on_drop(self.value.len() * std::mem::size_of::<E>());
        // Iterative teardown: deep graphs (long unrolled loops) would blow the
        // stack under the default recursive drop.
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(var.node) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

/// Handle to a graph node. Cheap to clone.
pub struct Var<E: Elem> {
    node: Rc<Node<E>>,
}

impl<E: Elem> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Elem> Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Var(id={}, shape={:?}, grad={})",
            self.node.id,
            self.shape(),
            self.node.requires_grad
        )
    }
}

impl<E: Elem> Var<E> {
    fn new_node(
        value: ArrayD<E>,
        parents: Vec<Var<E>>,
        vjp: Option<Box<dyn Vjp<E>>>,
        requires_grad: bool,
    ) -> Self {
        mem::on_create(value.len() * std::mem::size_of::<E>());
        Var {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: Rc::new(value),
                parents,
                vjp,
                requires_grad,
            }),
        }
    }

    /// A constant (no gradient ever flows into it).
    pub fn constant(value: ArrayD<E>) -> Self {
        Self::new_node(value, Vec::new(), None, false)
    }

    /// A leaf that participates in differentiation.
    pub fn param(value: ArrayD<E>) -> Self {
        Self::new_node(value, Vec::new(), None, true)
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(
        value: ArrayD<E>,
        parents: Vec<Var<E>>,
        vjp: Box<dyn Vjp<E>>,
    ) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.node.requires_grad) {
            Self::new_node(value, parents, Some(vjp), true)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<E> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn len(&self) -> usize {
        self.node.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        *self.node.value.iter().next().unwrap()
    }

    /// Same storage, fresh constant leaf: cuts the graph.
    pub fn detach(&self) -> Var<E> {
        Var::new_node(
            ArrayD::clone(&self.node.value),
            Vec::new(),
            None,
            false,
        )
    }

    pub fn to_owned_array(&self) -> ArrayD<E> {
        ArrayD::clone(&self.node.value)
    }
}

/// Reverse-mode sweep from a scalar `root`.
///
/// Returns one gradient per entry of `wrt`, in order (zeros when unreachable).
/// With `create_graph` the returned gradients carry their own graph and can be
/// differentiated again.
pub fn backward<E: Elem>(root: &Var<E>, wrt: &[&Var<E>], create_graph: bool) -> Vec<Var<E>> {
    assert_eq!(root.len(), 1, "backward requires a scalar root");

    let wrt_ids: HashMap<u64, usize> =
        wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();

    // Mark nodes from which some wrt leaf is reachable ("useful"), walking the
    // requires-grad subgraph from the root.
    let mut useful: HashMap<u64, bool> = HashMap::new();
    {
        // Iterative post-order DFS.
        let mut stack: Vec<(Var<E>, bool)> = vec![(root.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            let id = v.node.id;
            if expanded {
                let mut u = wrt_ids.contains_key(&id);
                for p in &v.node.parents {
                    if p.node.requires_grad {
                        u |= useful.get(&p.node.id).copied().unwrap_or(false);
                    }
                }
                useful.insert(id, u);
            } else {
                if useful.contains_key(&id) {
                    continue;
                }
                stack.push((v.clone(), true));
                for p in &v.node.parents {
                    if p.node.requires_grad && !useful.contains_key(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
    }

    // Collect useful nodes; creation ids give a topological order.
    let mut order: Vec<Var<E>> = Vec::new();
    {
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![root.clone()];
        while let Some(v) = stack.pop() {
            let id = v.node.id;
            if seen.contains_key(&id) || !useful.get(&id).copied().unwrap_or(false) {
                continue;
            }
            seen.insert(id, ());
            for p in &v.node.parents {
                if p.node.requires_grad {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
    }
    order.sort_by(|a, b| b.node.id.cmp(&a.node.id));

    let mut grads: HashMap<u64, Var<E>> = HashMap::new();
    let mut results: Vec<Option<Var<E>>> = vec![None; wrt.len()];

    with_mode(create_graph, || {
        grads.insert(
            root.id(),
            Var::constant(ArrayD::from_elem(root.value().raw_dim(), E::one())),
        );
        for node in &order {
            let Some(g) = grads.remove(&node.node.id) else {
                continue;
            };
            if let Some(slot) = wrt_ids.get(&node.node.id) {
                results[*slot] = Some(match results[*slot].take() {
                    // The same Var may appear twice in wrt.
                    Some(prev) => prev,
                    None => g.clone(),
                });
            }
            if let Some(vjp) = &node.node.vjp {
                let pgrads = vjp.backward(&node.node.parents, &g);
                debug_assert_eq!(pgrads.len(), node.node.parents.len());
                for (p, pg) in node.node.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !p.node.requires_grad || !useful.get(&p.node.id).copied().unwrap_or(false)
                    {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        p.shape(),
                        "vjp shape mismatch for parent {}",
                        p.node.id
                    );
                    match grads.remove(&p.node.id) {
                        Some(old) => {
                            grads.insert(p.node.id, old.add(&pg));
                        }
                        None => {
                            grads.insert(p.node.id, pg);
                        }
                    }
                }
            }
        }
    });

    results
        .into_iter()
        .enumerate()
        .map(|(i, g)| match g {
            Some(g) => g,
            None => Var::constant(ArrayD::zeros(wrt[i].value().raw_dim())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn v(data: &[f64]) -> Var<f64> {
        Var::param(arr1(data).into_dyn())
    }

    #[test]
    fn simple_chain() {
        let x = v(&[2.0, -3.0]);
        let y = x.sqr().sum_all(); // x0^2 + x1^2
        let g = backward(&y, &[&x], false);
        assert_eq!(g[0].value().as_slice().unwrap(), &[4.0, -6.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let x = v(&[1.5]);
        let y = x.add(&x).mul(&x); // 2x^2 -> dy/dx = 4x
        let g = backward(&y.sum_all(), &[&x], false);
        assert_eq!(g[0].value()[[0]], 6.0);
    }

    #[test]
    fn second_order_through_create_graph() {
        // f = x^3; f' = 3x^2; f'' = 6x
        let x = v(&[2.0]);
        let f = x.sqr().mul(&x).sum_all();
        let g = backward(&f, &[&x], true);
        let g2 = backward(&g[0].sum_all(), &[&x], false);
        assert_eq!(g[0].value()[[0]], 12.0);
        assert_eq!(g2[0].value()[[0]], 12.0);
    }

    #[test]
    fn mixed_second_order() {
        // f = (x*w)^2 ; df/dw = 2xw * x ; d2f/dwdx = 4xw... at x=3,w=5: df/dw=90, d/dx(df/dw)=2*2*x*w=60
        let x = v(&[3.0]);
        let w = v(&[5.0]);
        let f = x.mul(&w).sqr().sum_all();
        let gw = backward(&f, &[&w], true);
        assert_eq!(gw[0].value()[[0]], 90.0);
        let gx = backward(&gw[0].sum_all(), &[&x], false);
        assert_eq!(gx[0].value()[[0]], 60.0);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = v(&[1.0]);
        let y = no_grad(|| x.sqr());
        assert!(!y.requires_grad());
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let x = v(&[1.0, 2.0]);
        let z = v(&[5.0]);
        let y = x.sqr().sum_all();
        let g = backward(&y, &[&z], false);
        assert_eq!(g[0].value().as_slice().unwrap(), &[0.0]);
    }

    #[test]
    fn deep_graph_drops_without_overflow() {
        let mut x = v(&[1.0]);
        for _ in 0..200_000 {
            x = x.addf(1e-9);
        }
        drop(x);
    }

    #[test]
    fn memory_counters_track_live_tensors() {
        let before = mem::live_bytes();
        let x = Var::<f64>::param(ArrayD::zeros(IxDyn(&[64, 64])));
        assert!(mem::live_bytes() >= before + 64 * 64 * 8);
        drop(x);
        assert!(mem::live_bytes() <= before + 8);
    }
}
