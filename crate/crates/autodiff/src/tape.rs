//! Wengert-list tape. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and backward is a reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::param::{BufferId, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Storage precision of node values.
///
/// `F32` rounds every node value to the nearest `f32` as it is recorded;
/// arithmetic inside one op still runs in `f64`. `F64` is used for
/// finite-difference gradient checking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }
}

/// Whether normalization layers use batch statistics (and record running
/// averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Softmax(Var),
    RowNorm(Var),
    Sum(Var),
    SumRows(Var),
    SumLastAxis(Var),
    DivScalar { x: Var, s: Var },
    Gather { x: Var, idx: Rc<[usize]> },
    MaxNeighbors { x: Var, argmax: Vec<usize> },
    WeightedSum { x: Var, w: Var },
    MaxLastAxis { x: Var, argmax: Vec<usize> },
    Concat { parts: Vec<Var> },
    Norm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Polar {
        h: Var,
        u: [f64; 9],
        v: [f64; 9],
        sigma: [f64; 3],
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Running-statistic update produced by a normalization layer in train mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
    mode: Mode,
    param_vars: HashMap<ParamId, Var>,
    pub(crate) stat_updates: Vec<StatUpdate>,
}

impl Tape {
    pub fn new(precision: Precision, mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            mode,
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "item() on non-scalar node of shape {:?}", self.shape(v));
        d[0]
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_numel("constant", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Differentiable leaf, for inputs whose gradient is wanted.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_numel("input", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    /// Leaf holding a parameter. Repeated calls within one tape return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.param(id);
        let v = self.push(p.shape.clone(), p.data.clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Identity in the forward pass; the result never propagates gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub(crate) fn record_stats(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// reachable from `root` that requires grad.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = self.node(root);
        if rn.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        if !rn.requires_grad {
            return Ok(Gradients {
                grads,
                param_vars: self.param_vars.clone(),
            });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                crate::backward::vjp(self, node, &g, &mut grads);
            }
            // intermediate grads are dropped once propagated
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) if tape.requires_grad(v) => g.clone(),
            _ => vec![0.0; tape.data(v).len()],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that was placed on the tape. Parameters
    /// that did not reach the root get an all-zero entry.
    pub fn params(&self, store: &ParamStore) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (&id, &v) in &self.param_vars {
            let g = match self.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.param(id).data.len()],
            };
            out.insert(id, g);
        }
        out
    }
}

pub(crate) fn check_numel(op: &'static str, shape: &[usize], n: usize) -> Result<()> {
    if shape.iter().product::<usize>() != n || shape.is_empty() {
        return Err(TensorError::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![n],
        });
    }
    Ok(())
}
