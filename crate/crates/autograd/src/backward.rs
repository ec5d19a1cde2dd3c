use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{no_grad, with_grad_mode, Node, Tensor};

/// Gradients of a single-element `output` with respect to each of `inputs`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients carry their own history, so they
/// can be differentiated again (as a gradient penalty requires); otherwise
/// they are plain constants.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    inputs: &[&Tensor<T>],
    create_graph: bool,
) -> Vec<Tensor<T>> {
    assert_eq!(
        output.numel(),
        1,
        "grad() needs a single-element output, got shape {:?}",
        output.shape()
    );
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, seed, inputs, create_graph)
}

/// Vector-Jacobian product: gradients of `<output, seed>` w.r.t. `inputs`.
pub fn grad_with_seed<T: Scalar>(
    output: &Tensor<T>,
    seed: Tensor<T>,
    inputs: &[&Tensor<T>],
    create_graph: bool,
) -> Vec<Tensor<T>> {
    assert_eq!(seed.shape(), output.shape(), "seed shape mismatch");
    let run = || backprop(output, seed, inputs);
    if create_graph {
        with_grad_mode(true, run)
    } else {
        no_grad(run)
    }
}

fn backprop<T: Scalar>(output: &Tensor<T>, seed: Tensor<T>, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    let zeros = || inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let Some(root) = output.node.clone() else {
        return zeros();
    };
    let input_ids: HashSet<u64> = inputs.iter().filter_map(|t| t.node_id()).collect();
    if input_ids.is_empty() {
        return zeros();
    }

    let mut nodes: BTreeMap<u64, Arc<Node<T>>> = BTreeMap::new();
    let mut stack = vec![root.clone()];
    while let Some(node) = stack.pop() {
        if nodes.contains_key(&node.id) {
            continue;
        }
        for p in &node.parents {
            if let Some(pn) = &p.node {
                if !nodes.contains_key(&pn.id) {
                    stack.push(pn.clone());
                }
            }
        }
        nodes.insert(node.id, node);
    }

    // Parents always carry smaller ids than their children, so one
    // ascending sweep finds every node with an input among its ancestors.
    let mut needed: HashSet<u64> = HashSet::new();
    for (id, node) in &nodes {
        let reaches_input = input_ids.contains(id)
            || node
                .parents
                .iter()
                .any(|p| p.node_id().is_some_and(|pid| needed.contains(&pid)));
        if reaches_input {
            needed.insert(*id);
        }
    }

    let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut results: HashMap<u64, Tensor<T>> = HashMap::new();
    pending.insert(root.id, seed);
    for (id, node) in nodes.iter().rev() {
        if !needed.contains(id) {
            continue;
        }
        let Some(g) = pending.remove(id) else {
            continue;
        };
        if input_ids.contains(id) {
            results.insert(*id, g.clone());
        }
        let Some(backward) = &node.backward else {
            continue;
        };
        let need: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.node_id().is_some_and(|pid| needed.contains(&pid)))
            .collect();
        let parent_grads = backward(&g, &need);
        debug_assert_eq!(parent_grads.len(), node.parents.len());
        for ((parent, pg), want) in node.parents.iter().zip(parent_grads).zip(need) {
            let (Some(pg), true) = (pg, want) else {
                continue;
            };
            let pid = parent.node_id().expect("needed parent has a node");
            debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch in {}", node.op);
            let acc = match pending.remove(&pid) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            pending.insert(pid, acc);
        }
    }

    inputs
        .iter()
        .map(|t| {
            t.node_id()
                .and_then(|id| results.get(&id).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}
