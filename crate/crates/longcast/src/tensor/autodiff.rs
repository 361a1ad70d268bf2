use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording op history (evaluation mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let guard = Guard(GRAD_ENABLED.with(|g| g.replace(false)));
    let out = f();
    drop(guard);
    out
}

/// Reverse-mode pass from a scalar loss: accumulates `d loss / d p` into
/// the grad slot of every trainable leaf the loss depends on. A loss
/// with no trainable ancestors is a no-op.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
    grads.insert(loss.id(), vec![S::one()]);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match node.op() {
            Some(op) => {
                let parent_grads = (op.backward)(&op.parents, &g);
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for (parent, pg) in op.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.len(), parent.len());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a += *v;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
            None => node.accumulate_grad(&g),
        }
    }
    Ok(())
}

/// Iterative post-order DFS over the op graph (children after parents).
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, expanded) pairs; a node is emitted once all parents are.
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        if let Some(op) = node.op() {
            stack.push((node.clone(), true));
            for p in &op.parents {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        } else {
            order.push(node);
        }
    }
    order
}
