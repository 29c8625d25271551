//! Sequential recommenders: a pre-norm causal self-attention encoder and a
//! mean-of-embeddings encoder, both scoring items against a tied item
//! embedding table.

mod checkpoint;

use rand::distr::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::numerics::{segments_for, Graph, NodeId, Segments, Tensor};

/// Parameter tensors per attention block.
const PER_LAYER: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Attention,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            heads: 2,
            layers: 2,
            max_len: 50,
            dropout: 0.1,
            architecture: Architecture::Attention,
        }
    }
}

impl ModelConfig {
    /// Validates the config; `prefix` is prepended to key names in errors.
    pub fn validate_as(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        for (k, v) in [
            ("embedding_dim", self.embedding_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(key(k), "must be positive"));
            }
        }
        if !self.embedding_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                key("embedding_dim"),
                format!("{} is not divisible by {} heads", self.embedding_dim, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(key("dropout"), format!("must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_as("model.")
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self, vocab: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.embedding_dim;
        let mut shapes = vec![("item_emb".to_string(), vec![vocab, d])];
        if self.architecture == Architecture::MeanPool {
            return shapes;
        }
        shapes.push(("pos_emb".to_string(), vec![self.max_len, d]));
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            shapes.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("query.weight"), vec![d, d]),
                (p("query.bias"), vec![d]),
                (p("key.weight"), vec![d, d]),
                (p("value.weight"), vec![d, d]),
                (p("value.bias"), vec![d]),
                (p("out.weight"), vec![d, d]),
                (p("out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn1.weight"), vec![d, d]),
                (p("ffn1.bias"), vec![d]),
                (p("ffn2.weight"), vec![d, d]),
                (p("ffn2.bias"), vec![d]),
            ]);
        }
        shapes.push(("final_ln.gain".to_string(), vec![d]));
        shapes.push(("final_ln.bias".to_string(), vec![d]));
        shapes
    }

    pub fn param_count(&self, vocab: usize) -> usize {
        self.param_shapes(vocab)
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }
}

/// Whether dropout is active. Training mode carries the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequentialModel {
    config: ModelConfig,
    vocab: usize,
    params: Vec<(String, Tensor)>,
}

/// Graph nodes of one recorded forward pass over a packed batch.
pub struct Forward {
    /// Parameter nodes, aligned with [`SequentialModel::params`].
    pub params: Vec<NodeId>,
    pub item_table: NodeId,
    /// Encoder output at every position, rows packed per `segments`.
    pub hidden: NodeId,
    /// Encoder output at the last position of each sequence.
    pub users: NodeId,
    pub segments: Segments,
}

pub fn init_model(config: &ModelConfig, vocab: usize, seed: u64) -> Result<SequentialModel> {
    config.validate()?;
    if vocab == 0 {
        return Err(Error::invalid("model vocabulary must be nonempty"));
    }
    let bound = 1.0 / (config.embedding_dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .param_shapes(vocab)
        .into_iter()
        .map(|(name, dims)| {
            let len = dims.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; len]
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                (0..len).map(|_| dist.sample(&mut rng) as f32 as f64).collect()
            };
            (name, Tensor::new(dims, data).expect("finite init"))
        })
        .collect();
    Ok(SequentialModel {
        config: config.clone(),
        vocab,
        params,
    })
}

impl SequentialModel {
    /// Rebuilds a model from named tensors, checking them against `config`.
    pub fn from_params(config: &ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let vocab = params
            .iter()
            .find(|(n, _)| n == "item_emb")
            .map(|(_, t)| t.rows())
            .ok_or_else(|| Error::invalid("missing parameter `item_emb`"))?;
        let expected = config.param_shapes(vocab);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors for this config, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, dims), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || dims.as_slice() != t.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(SequentialModel {
            config: config.clone(),
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.params[0].1
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if seq.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!("item id {bad} outside vocabulary of {}", self.vocab)));
        }
        Ok(())
    }

    /// Records the encoder over a packed batch of sequences into `graph`.
    pub fn forward(&self, graph: &mut Graph, seqs: &[&[usize]], mode: Mode<'_>) -> Result<Forward> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let params = self
            .params
            .iter()
            .map(|(name, t)| graph.param(name, t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let segments = segments_for(seqs.iter().map(|s| s.len()));
        let flat: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let last: Vec<usize> = segments.iter().map(|s| s.start + s.len - 1).collect();
        let item_table = params[0];
        let rate = self.config.dropout;
        let mut mode = mode;
        let mut drop = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            match &mut mode {
                Mode::Train(rng) if rate > 0.0 => g.dropout(x, rate, &mut **rng),
                _ => Ok(x),
            }
        };

        let hidden = match self.config.architecture {
            Architecture::MeanPool => {
                let x = graph.gather(item_table, &flat)?;
                let x = drop(graph, x)?;
                graph.prefix_mean(x, segments.clone())?
            }
            Architecture::Attention => {
                let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
                let items = graph.gather(item_table, &flat)?;
                let pos = graph.gather(params[1], &positions)?;
                let x = graph.add(items, pos)?;
                let mut x = drop(graph, x)?;
                let linear = |g: &mut Graph, x: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
                    let y = g.matmul(x, w)?;
                    g.add_row(y, b)
                };
                for l in 0..self.config.layers {
                    let p = &params[2 + PER_LAYER * l..2 + PER_LAYER * (l + 1)];
                    let h = graph.layer_norm(x, p[0], p[1])?;
                    let q = linear(graph, h, p[2], p[3])?;
                    // A key bias only shifts each query's logits uniformly,
                    // which softmax cancels, so keys have none.
                    let k = graph.matmul(h, p[4])?;
                    let v = linear(graph, h, p[5], p[6])?;
                    let a = graph.attention(q, k, v, self.config.heads, segments.clone())?;
                    let o = linear(graph, a, p[7], p[8])?;
                    let o = drop(graph, o)?;
                    x = graph.add(x, o)?;
                    let h = graph.layer_norm(x, p[9], p[10])?;
                    let f = linear(graph, h, p[11], p[12])?;
                    let f = graph.gelu(f)?;
                    let f = linear(graph, f, p[13], p[14])?;
                    let f = drop(graph, f)?;
                    x = graph.add(x, f)?;
                }
                let n = params.len();
                graph.layer_norm(x, params[n - 2], params[n - 1])?
            }
        };
        let users = graph.gather(hidden, &last)?;
        Ok(Forward {
            params,
            item_table,
            hidden,
            users,
            segments,
        })
    }

    /// User representation of one sequence.
    pub fn encode_sequence(&self, seq: &[usize], mode: Mode<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &[seq], mode)?;
        Ok(g.value(f.users).data().to_vec())
    }

    /// User representations of many sequences in eval mode, one row each.
    pub fn encode_batch(&self, seqs: &[&[usize]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, seqs, Mode::Eval)?;
        Ok(g.value(f.users).clone())
    }

    /// Dot products of `user` with the embeddings of `items`, in input order.
    pub fn score_items(&self, user: &[f64], items: &[usize]) -> Result<Vec<f64>> {
        let d = self.config.embedding_dim;
        if user.len() != d {
            return Err(Error::Shape(format!("user vector has {} entries, model dim is {d}", user.len())));
        }
        let table = self.item_embeddings();
        items
            .iter()
            .map(|&j| {
                if j >= self.vocab {
                    return Err(Error::invalid(format!("item id {j} outside vocabulary of {}", self.vocab)));
                }
                Ok(table.row(j).iter().zip(user).map(|(a, b)| a * b).sum())
            })
            .collect()
    }

    /// Scores of every item for each row of `users`, shape `[rows, vocab]`.
    pub fn score_all(&self, users: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let u = g.input(users.clone());
        let t = g.input(self.item_embeddings().clone());
        let s = g.matmul_nt(u, t)?;
        Ok(g.value(s).clone())
    }
}
