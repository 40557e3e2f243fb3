//! The autodiff tape.
//!
//! A [`Tape`] records one computation graph. Leaves are constants or
//! parameters pulled from a [`ParamStore`]; every operation appends a node
//! holding its forward value plus a backward rule. [`Tape::backward`] walks
//! the nodes once in reverse creation order and accumulates gradients for the
//! parameter leaves.
//!
//! Shape errors are programming errors here, not user input, so the op
//! methods assert rather than return `Result`.

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};

pub type NodeId = usize;

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub parents: Vec<NodeId>,
    pub op: Option<Box<dyn BackwardOp>>,
    pub param: Option<ParamId>,
}

/// Backward rule of a recorded operation: given the gradient w.r.t. the
/// output, produce the gradient w.r.t. each parent (same order as `parents`).
pub(crate) trait BackwardOp {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
    ) -> Vec<ArrayD<f64>>;
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        crate::configure_blas();
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        op: Option<Box<dyn BackwardOp>>,
    ) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            parents,
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    /// Leaf holding a constant; gradients flowing into it are discarded.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value.as_standard_layout().to_owned(), Vec::new(), None)
    }

    /// Leaf bound to a parameter of `store`; `backward` reports its gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let n = self.constant(store.value(id).clone());
        self.nodes[n].param = Some(id);
        n
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Reverse pass from `root` (a scalar node). Returns per-parameter
    /// gradients; intermediate gradients are freed as soon as a node has
    /// been processed, and subgraphs that cannot reach a parameter are
    /// skipped entirely.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Gradients {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be scalar"
        );
        // forward sweep: which nodes transitively depend on a parameter
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = node.param.is_some() || node.parents.iter().any(|&p| needs[p]);
        }

        let mut node_grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        node_grads.resize_with(self.nodes.len(), || None);
        node_grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));

        let mut out = Gradients {
            by_param: Vec::with_capacity(store.len()),
        };
        out.by_param.resize_with(store.len(), || None);

        for i in (0..=root).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                accumulate(&mut out.by_param[pid.index()], &g);
            }
            if let Some(op) = &node.op {
                if !node.parents.iter().any(|&p| needs[p]) {
                    continue;
                }
                let inputs: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = op.backward(&g, &inputs, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !needs[p] {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut node_grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: &ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

/// Per-parameter gradients produced by one backward pass.
pub struct Gradients {
    by_param: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param[id.index()].as_ref()
    }
}
