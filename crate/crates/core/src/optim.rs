use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequentialModel;
use crate::numerics::{Graph, NodeId, Tensor};

/// Storage precision of trained parameters. Computation is always 64-bit;
/// `F32` rounds parameters after every update so checkpoints round-trip
/// exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// L2 penalty strength, applied as `l2 * w` added to each gradient.
    pub l2: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub precision: Precision,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            l2: 1e-5,
            epochs: 200,
            patience: 10,
            precision: Precision::F32,
        }
    }
}

impl OptimConfig {
    pub fn validate_as(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("{prefix}learning_rate"), "must be finite and > 0"));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::config(format!("{prefix}l2"), "must be finite and >= 0"));
        }
        if self.patience == 0 {
            return Err(Error::config(format!("{prefix}patience"), "must be >= 1"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with bias correction over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(config: &OptimConfig, params: &[(String, Tensor)]) -> Self {
        Adam {
            config: config.clone(),
            first: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            second: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            steps: 0,
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; `None` means no
    /// data gradient, in which case only the L2 term moves the parameter.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match the parameter list"));
        }
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        let lr = self.config.learning_rate;
        let l2 = self.config.l2;
        let round = self.config.precision == Precision::F32;
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                if g.dims() != p.dims() {
                    return Err(Error::Shape(format!("gradient of `{name}` has dims {:?}, expected {:?}", g.dims(), p.dims())));
                }
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = p.data_mut();
            for e in 0..data.len() {
                let g = grads[i].map_or(0.0, |g| g.data()[e]) + l2 * data[e];
                m[e] = BETA1 * m[e] + (1.0 - BETA1) * g;
                v[e] = BETA2 * v[e] + (1.0 - BETA2) * g * g;
                data[e] -= lr * (m[e] / c1) / ((v[e] / c2).sqrt() + EPS);
            }
            if round {
                p.round_to_f32();
            }
            p.check_finite(&format!("update of `{name}`"))?;
        }
        Ok(())
    }
}

/// Backpropagates `loss` through a recorded forward pass of `model` and
/// applies one optimizer update. `params` are the graph nodes of the
/// model's parameters, in model order.
pub fn descend(
    adam: &mut Adam,
    model: &mut SequentialModel,
    graph: &Graph,
    params: &[NodeId],
    loss: NodeId,
) -> Result<()> {
    let grads = graph.backward(loss)?;
    let refs: Vec<Option<&Tensor>> = params
        .iter()
        .map(|id| grads.get(id.index()).and_then(|g| g.as_ref()))
        .collect();
    adam.step(model.params_mut(), &refs)
}
