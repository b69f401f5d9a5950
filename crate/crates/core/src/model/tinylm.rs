use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::lora::LoraAdapter;
use crate::model::registry::{BoundParams, Gradients, ParameterRegistry};

/// Architecture of the residual MLP language model.
///
/// Each position sees the embeddings of the last `window` tokens (itself
/// included), concatenated into a `window * embed_dim` feature. Slots before
/// the start of the sequence are zero. The feature goes through `depth`
/// residual blocks `h + fc2(relu(fc1(h)))` and a linear head over the vocab.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub context: usize,
    pub window: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            embed_dim: 8,
            depth: 1,
            context: 32,
            window: 4,
            hidden: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 2 {
            problems.push(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("context", self.context),
            ("window", self.window),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Width of the residual stream.
    pub fn feature_dim(&self) -> usize {
        self.window * self.embed_dim
    }

    /// Closed-form scalar count of [`TinyLm::build`]'s registry.
    pub fn parameter_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.feature_dim(), self.hidden);
        v * self.embed_dim + self.depth * (2 * d * h + h + d) + v * d + v
    }
}

pub const EMBED: &str = "embed.weight";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn block_param(block: usize, layer: &str, kind: &str) -> String {
    format!("blocks.{block}.{layer}.{kind}")
}

/// Tiny next-token model plus its parameters and any attached adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub(crate) config: ModelConfig,
    pub(crate) seed: u64,
    pub(crate) registry: ParameterRegistry,
    pub(crate) adapters: Vec<LoraAdapter>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(Tensor::new(shape, data)?.with_grad(true))
}

impl TinyLm {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, d, h) = (
            config.vocab_size,
            config.embed_dim,
            config.feature_dim(),
            config.hidden,
        );
        let mut registry = ParameterRegistry::new();
        registry.insert(EMBED, uniform(&mut rng, &[v, e], 1.0)?)?;
        for b in 0..config.depth {
            registry.insert(
                block_param(b, "fc1", "weight"),
                uniform(&mut rng, &[h, d], 1.0 / (d as f64).sqrt())?,
            )?;
            registry.insert(block_param(b, "fc1", "bias"), Tensor::zeros(&[h])?.with_grad(true))?;
            registry.insert(
                block_param(b, "fc2", "weight"),
                uniform(&mut rng, &[d, h], 0.5 / (h as f64).sqrt())?,
            )?;
            registry.insert(block_param(b, "fc2", "bias"), Tensor::zeros(&[d])?.with_grad(true))?;
        }
        registry.insert(HEAD_WEIGHT, uniform(&mut rng, &[v, d], 1.0 / (d as f64).sqrt())?)?;
        registry.insert(HEAD_BIAS, Tensor::zeros(&[v])?.with_grad(true))?;
        debug_assert_eq!(registry.total_scalars(), config.parameter_count());
        Ok(TinyLm {
            config: config.clone(),
            seed,
            registry,
            adapters: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Every 2-D weight inside the residual blocks.
    pub fn block_weight_ids(&self) -> Vec<String> {
        (0..self.config.depth)
            .flat_map(|b| {
                [
                    block_param(b, "fc1", "weight"),
                    block_param(b, "fc2", "weight"),
                ]
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Binds parameters onto `graph` and builds adapted weights for every
    /// attached adapter.
    pub fn bind(&self, graph: &mut Graph) -> Result<BoundParams> {
        let mut bound = self.registry.bind(graph);
        for adapter in &self.adapters {
            let base = bound.var(&adapter.target)?;
            let a = bound.var(&adapter.a_id())?;
            let b = bound.var(&adapter.b_id())?;
            let ba = graph.matmul(b, a)?;
            let delta = graph.scale(ba, adapter.scale())?;
            let w = graph.add(base, delta)?;
            bound.set_effective(&adapter.target, w);
        }
        Ok(bound)
    }

    /// Logits for every position of every sequence, stacked row-wise.
    pub fn forward_graph(&self, graph: &mut Graph, bound: &BoundParams, seqs: &[&[usize]]) -> Result<Var> {
        let w = self.config.window;
        let mut ids = Vec::new();
        let mut rows = 0;
        for seq in seqs {
            self.check_tokens(seq)?;
            for t in 0..seq.len() {
                for slot in 0..w {
                    let back = w - 1 - slot;
                    ids.push(t.checked_sub(back).map(|p| seq[p]));
                }
            }
            rows += seq.len();
        }
        if rows == 0 {
            return Err(Error::Input("no sequences".into()));
        }
        let gathered = graph.embedding_lookup_padded(bound.effective(EMBED)?, &ids)?;
        let mut h = graph.reshape(gathered, &[rows, self.config.feature_dim()])?;
        for b in 0..self.config.depth {
            let w1 = graph.transpose(bound.effective(&block_param(b, "fc1", "weight"))?)?;
            let z = graph.matmul(h, w1)?;
            let z = graph.add_row(z, bound.effective(&block_param(b, "fc1", "bias"))?)?;
            let z = graph.relu(z)?;
            let w2 = graph.transpose(bound.effective(&block_param(b, "fc2", "weight"))?)?;
            let u = graph.matmul(z, w2)?;
            let u = graph.add_row(u, bound.effective(&block_param(b, "fc2", "bias"))?)?;
            h = graph.add(h, u)?;
        }
        let head = graph.transpose(bound.effective(HEAD_WEIGHT)?)?;
        let logits = graph.matmul(h, head)?;
        graph.add_row(logits, bound.effective(HEAD_BIAS)?)
    }

    /// Mean next-token cross-entropy over every position of `batch`.
    pub fn loss_graph(&self, graph: &mut Graph, bound: &BoundParams, batch: &[Sample]) -> Result<Var> {
        let xs: Vec<&[usize]> = batch.iter().map(|s| s.x.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.y.iter().copied()).collect();
        if batch.iter().any(|s| s.x.len() != s.y.len()) {
            return Err(Error::Input("sample x and y lengths differ".into()));
        }
        let logits = self.forward_graph(graph, bound, &xs)?;
        graph.softmax_cross_entropy(logits, &targets)
    }

    /// `L×V` logits for one sequence, without keeping the graph.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let logits = self.forward_graph(&mut g, &bound, &[tokens])?;
        Ok(g.value(logits).clone())
    }

    /// Loss and trainable-parameter gradients for one batch.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let loss = self.loss_graph(&mut g, &bound, batch)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), bound.gradients(&g, &self.registry)))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &[Sample]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let loss = self.loss_graph(&mut g, &bound, batch)?;
        Ok(g.value(loss).item())
    }

    /// Bytes held by parameter values, frozen or not.
    pub fn param_bytes(&self) -> usize {
        self.registry.total_scalars() * std::mem::size_of::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            embed_dim: 2,
            depth: 1,
            context: 8,
            window: 2,
            hidden: 4,
        }
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = small();
        let m = TinyLm::build(&cfg, 1).unwrap();
        // 4*2 embed + (2*4*4 + 4 + 4) block + 4*4 + 4 head
        assert_eq!(cfg.parameter_count(), 68);
        assert_eq!(m.registry().total_scalars(), 68);
        let counted: usize = m.registry().iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        assert_eq!(counted, 68);
        let ids: Vec<&str> = m.registry().ids().collect();
        assert_eq!(
            ids,
            [
                "embed.weight",
                "blocks.0.fc1.weight",
                "blocks.0.fc1.bias",
                "blocks.0.fc2.weight",
                "blocks.0.fc2.bias",
                "head.weight",
                "head.bias"
            ]
        );
    }

    #[test]
    fn build_is_deterministic() {
        let a = TinyLm::build(&small(), 7).unwrap();
        let b = TinyLm::build(&small(), 7).unwrap();
        assert!(a.registry().bitwise_eq(b.registry()));
        let c = TinyLm::build(&small(), 8).unwrap();
        assert!(!a.registry().bitwise_eq(c.registry()));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small();
        cfg.depth = 0;
        assert!(matches!(TinyLm::build(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.vocab_size = 1;
        assert!(matches!(TinyLm::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shape_and_input_errors() {
        let m = TinyLm::build(&small(), 3).unwrap();
        let out = m.forward(&[0, 1, 2, 3, 1]).unwrap();
        assert_eq!(out.shape(), &[5, 4]);
        assert!(matches!(m.forward(&[0, 4]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[0; 9]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut m = TinyLm::build(&small(), 3).unwrap();
        for id in [HEAD_WEIGHT, HEAD_BIAS] {
            m.registry_mut().get_mut(id).unwrap().data_mut().fill(0.0);
        }
        let s = Sample {
            x: vec![0, 1, 2, 3],
            y: vec![1, 2, 3, 0],
        };
        assert!((m.loss(&[s]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn embedding_row_only_reaches_positions_whose_window_holds_it() {
        let mut m = TinyLm::build(&small(), 5).unwrap();
        let tokens = [0, 1, 2, 1, 3, 3, 0];
        let before = m.forward(&tokens).unwrap();
        let v = m.config().vocab_size;
        m.registry_mut().get_mut(EMBED).unwrap().data_mut()[2 * 2] += 0.25;
        let after = m.forward(&tokens).unwrap();
        let w = m.config().window;
        for t in 0..tokens.len() {
            let sees = (t.saturating_sub(w - 1)..=t).any(|p| tokens[p] == 2);
            let row_b = &before.data()[t * v..(t + 1) * v];
            let row_a = &after.data()[t * v..(t + 1) * v];
            assert_eq!(row_a != row_b, sees, "position {t}");
        }
    }
}
