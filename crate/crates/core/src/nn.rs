//! Small layer library on top of the tape: linear maps, normalized dense
//! layers and MLP stacks, all registered by dotted name in a `ParamStore`.

use egflow_autodiff::{ParamId, ParamStore, Tape, Var, BufferId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Parameter registration context: store, RNG for initialization, and the
/// current name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        Ok(self.store.register(&self.name(leaf), shape, data)?)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], data: Vec<f64>) -> Result<BufferId> {
        Ok(self.store.register_buffer(&self.name(leaf), shape, data)?)
    }

    /// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(bld: &mut Builder, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let wd = bld.uniform(cin * cout, cin);
        let w = bld.param("w", &[cin, cout], wd)?;
        let b = if bias {
            let bd = bld.uniform(cout, cin);
            Some(bld.param("b", &[cout], bd)?)
        } else {
            None
        };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl Norm {
    pub fn new(bld: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            scale: bld.param("scale", &[c], vec![1.0; c])?,
            shift: bld.param("shift", &[c], vec![0.0; c])?,
            mean: bld.buffer("running_mean", &[c], vec![0.0; c])?,
            var: bld.buffer("running_var", &[c], vec![1.0; c])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.scale);
        let b = tape.param(store, self.shift);
        Ok(tape.normalize_features(x, g, b, (self.mean, self.var), store)?)
    }
}

/// Linear → feature normalization → leaky ReLU.
#[derive(Clone, Debug)]
pub struct Dense {
    pub lin: Linear,
    pub norm: Norm,
}

impl Dense {
    pub fn new(bld: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        let lin = bld.scope("lin", |b| Linear::new(b, cin, cout, false))?;
        let norm = bld.scope("norm", |b| Norm::new(b, cout))?;
        Ok(Self { lin, norm })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lin.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h)?;
        Ok(tape.leaky_relu(h, LEAKY_SLOPE)?)
    }

    pub fn cout(&self) -> usize {
        self.lin.cout
    }
}

/// Stack of dense layers; with `plain_head` the last layer is a bare
/// linear map with bias (logits, flow vectors).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub head: Option<Linear>,
}

impl Mlp {
    pub fn new(bld: &mut Builder, dims: &[usize], plain_head: bool) -> Result<Self> {
        assert!(dims.len() >= 2, "mlp needs input and output widths");
        let n = dims.len() - 1;
        let dense_count = if plain_head { n - 1 } else { n };
        let mut hidden = Vec::with_capacity(dense_count);
        for i in 0..dense_count {
            hidden.push(bld.scope(&format!("l{i}"), |b| Dense::new(b, dims[i], dims[i + 1]))?);
        }
        let head = if plain_head {
            Some(bld.scope(&format!("l{}", n - 1), |b| Linear::new(b, dims[n - 1], dims[n], true))?)
        } else {
            None
        };
        Ok(Self { hidden, head })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for d in &self.hidden {
            h = d.forward(tape, store, h)?;
        }
        if let Some(head) = &self.head {
            h = head.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn cout(&self) -> usize {
        match &self.head {
            Some(h) => h.cout,
            None => self.hidden.last().map(|d| d.cout()).unwrap_or(0),
        }
    }
}
