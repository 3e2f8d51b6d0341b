//! Graph nodes and reverse-mode differentiation.
//!
//! Every differentiable op records its parents and a backward closure that is
//! itself written in terms of `Var` ops. Running [`grad`] with
//! `create_graph = true` therefore yields gradients that can be differentiated
//! again (needed for gradient penalties).

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

fn set_grad_mode(on: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(on));
    GradModeGuard { prev }
}

/// Stops graph recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_mode(false)
}

pub(crate) type BackwardFn = Box<dyn Fn(&[Var], &Var, &Var) -> Vec<Option<Var>>>;

struct Node {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    node: Option<Node>,
}

/// A tensor value participating in the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Inner>);

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Inner {
            id: next_id(),
            value,
            requires_grad: false,
            node: None,
        }))
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Inner {
            id: next_id(),
            value,
            requires_grad: true,
            node: None,
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&[Var], &Var, &Var) -> Vec<Option<Var>> + 'static,
    ) -> Var {
        if is_grad_enabled() && parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Inner {
                id: next_id(),
                value,
                requires_grad: true,
                node: Some(Node {
                    parents,
                    backward: Box::new(backward),
                }),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    // Cut from the graph but still reporting whether the original needed a
    // gradient, so backward closures can skip work for constants.
    fn detach_flagged(&self) -> Var {
        Var(Rc::new(Inner {
            id: next_id(),
            value: self.0.value.clone(),
            requires_grad: self.0.requires_grad,
            node: None,
        }))
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned vars carry their own graph and can be
/// differentiated again. Inputs that do not influence `output` get zeros.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(
        output.numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let wanted: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();

    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(node) = &v.0.node {
            stack.extend(node.parents.iter().cloned());
        }
        order.push(v);
    }
    // Parents are always created before children, so descending id is a
    // valid reverse topological order.
    order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let _mode = set_grad_mode(create_graph);
    let mut pending: HashMap<u64, Var> = HashMap::new();
    let mut found: HashMap<u64, Var> = HashMap::new();
    pending.insert(
        output.id(),
        Var::constant(Tensor::ones(output.shape())),
    );

    for v in &order {
        let Some(g) = pending.remove(&v.id()) else {
            continue;
        };
        if wanted.contains(&v.id()) {
            found.insert(v.id(), g.clone());
        }
        let Some(node) = &v.0.node else { continue };
        let (parents, out) = if create_graph {
            (node.parents.clone(), v.clone())
        } else {
            (
                node.parents.iter().map(Var::detach_flagged).collect::<Vec<_>>(),
                v.detach(),
            )
        };
        let grads = (node.backward)(&parents, &out, &g);
        debug_assert_eq!(grads.len(), node.parents.len());
        for (p, gp) in node.parents.iter().zip(grads) {
            let Some(gp) = gp else { continue };
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(gp.shape(), p.shape(), "gradient shape mismatch");
            let acc = match pending.remove(&p.id()) {
                Some(prev) => prev.add(&gp),
                None => gp,
            };
            pending.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|v| {
            found
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

/// First-order gradients as plain tensors.
pub fn backward(output: &Var, wrt: &[&Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}
