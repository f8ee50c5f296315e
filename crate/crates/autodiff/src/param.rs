use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::NORM_MOMENTUM;
use crate::tape::{Precision, StatUpdate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Non-trainable state such as normalization running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// Owns every trainable parameter and buffer of a model, addressed by a
/// unique dotted name such as `backbone.enc0.lfa0.score.w`.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashMap<String, Slot>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        check_len(name, shape, &data)?;
        if self.names.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let id = self.params.len();
        let data = data.into_iter().map(|v| self.precision.round(v)).collect();
        let n = shape.iter().product();
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        });
        self.names.insert(name.to_string(), Slot::Param(id));
        Ok(ParamId(id))
    }

    pub fn register_buffer(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<BufferId> {
        check_len(name, shape, &data)?;
        if self.names.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let id = self.buffers.len();
        let data = data.into_iter().map(|v| self.precision.round(v)).collect();
        self.buffers.push(Buffer {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self.names.insert(name.to_string(), Slot::Buffer(id));
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn set_buffer(&mut self, id: BufferId, data: Vec<f64>) {
        let p = self.precision;
        let buf = &mut self.buffers[id.0];
        assert_eq!(buf.data.len(), data.len(), "buffer {} length", buf.name);
        buf.data = data.into_iter().map(|v| p.round(v)).collect();
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufferId(i), b))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Folds recorded batch statistics into the running averages, in the
    /// order they were recorded.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            for (buf, batch) in [(u.mean_buf, &u.batch_mean), (u.var_buf, &u.batch_var)] {
                let cur = &self.buffers[buf.0].data;
                let next = cur
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| NORM_MOMENTUM * r + (1.0 - NORM_MOMENTUM) * b)
                    .collect();
                self.set_buffer(buf, next);
            }
        }
    }

    /// Sorted parameter names; used to compare model variants.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names
    }
}

fn check_len(name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() || shape.contains(&0) {
        return Err(TensorError::InvalidParameter(format!(
            "{name}: shape {shape:?} does not hold {} values",
            data.len()
        )));
    }
    Ok(())
}
