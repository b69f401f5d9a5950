use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::tinylm::TinyLm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `alpha / r`
    Standard,
    /// `alpha / sqrt(r)`
    RankStabilized,
}

impl ScaleMode {
    pub fn scale(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScaleMode::Standard => alpha / rank as f64,
            ScaleMode::RankStabilized => alpha / (rank as f64).sqrt(),
        }
    }
}

/// Low-rank update `scale * B·A` on one `d_out × d_in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.scale_mode.scale(self.alpha, self.rank)
    }

    pub fn a_id(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_id(&self) -> String {
        format!("{}.lora_b", self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl TinyLm {
    /// Attaches zero-initialised adapters and freezes every base parameter.
    ///
    /// `A` is drawn uniformly from `±1/sqrt(d_in)`, `B` starts at zero, so the
    /// adapted forward pass equals the base one until `B` is trained.
    pub fn attach_lora(&mut self, spec: &LoraSpec) -> Result<()> {
        if spec.targets.is_empty() {
            return Err(Error::Config("no LoRA targets".into()));
        }
        if spec.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        let mut shapes = Vec::with_capacity(spec.targets.len());
        for target in &spec.targets {
            let tensor = self
                .registry
                .get(target)
                .ok_or_else(|| Error::Config(format!("unknown LoRA target {target}")))?;
            let (d_out, d_in) = tensor
                .dims2()
                .ok_or_else(|| Error::Config(format!("LoRA target {target} is not a matrix")))?;
            if spec.rank > d_out.min(d_in) {
                return Err(Error::Config(format!(
                    "LoRA rank {} exceeds min dimension of {target} ({d_out}x{d_in})",
                    spec.rank
                )));
            }
            if self.adapters.iter().any(|a| &a.target == target) {
                return Err(Error::Config(format!("{target} already has an adapter")));
            }
            shapes.push((d_out, d_in));
        }

        let ids: Vec<String> = self.registry.ids().map(str::to_string).collect();
        for id in ids {
            self.registry.set_trainable(&id, false)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (target, (d_out, d_in)) in spec.targets.iter().zip(shapes) {
            let adapter = LoraAdapter {
                target: target.clone(),
                rank: spec.rank,
                alpha: spec.alpha,
                scale_mode: spec.scale_mode,
            };
            let bound = 1.0 / (d_in as f64).sqrt();
            let a_data = (0..spec.rank * d_in).map(|_| rng.gen_range(-bound..bound)).collect();
            let a = Tensor::matrix(spec.rank, d_in, a_data)?.with_grad(true);
            let b = Tensor::zeros(&[d_out, spec.rank])?.with_grad(true);
            self.registry.insert(adapter.a_id(), a)?;
            self.registry.insert(adapter.b_id(), b)?;
            self.adapters.push(adapter);
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and drops the adapters.
    ///
    /// The merged weight is computed with the same arithmetic as the adapted
    /// forward pass. All remaining parameters become trainable again.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::Config("no LoRA adapters to merge".into()));
        }
        for adapter in std::mem::take(&mut self.adapters) {
            let a = self.registry.remove(&adapter.a_id()).expect("adapter A registered");
            let b = self.registry.remove(&adapter.b_id()).expect("adapter B registered");
            let mut g = crate::autodiff::Graph::new();
            let (av, bv) = (g.constant(a), g.constant(b));
            let ba = g.matmul(bv, av)?;
            let delta = g.scale(ba, adapter.scale())?;
            let delta = g.value(delta).data().to_vec();
            let w = self
                .registry
                .get_mut(&adapter.target)
                .ok_or_else(|| Error::Contract(format!("adapter target {} missing", adapter.target)))?;
            w.data_mut().iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
        }
        let ids: Vec<String> = self.registry.ids().map(str::to_string).collect();
        for id in ids {
            self.registry.set_trainable(&id, true)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tinylm::ModelConfig;

    fn model() -> TinyLm {
        let cfg = ModelConfig {
            vocab_size: 6,
            embed_dim: 3,
            depth: 2,
            context: 10,
            window: 3,
            hidden: 12,
        };
        TinyLm::build(&cfg, 11).unwrap()
    }

    fn spec(m: &TinyLm, rank: usize, mode: ScaleMode) -> LoraSpec {
        LoraSpec {
            targets: m.block_weight_ids(),
            rank,
            alpha: 32.0,
            scale_mode: mode,
            seed: 4,
        }
    }

    #[test]
    fn scale_modes() {
        assert_eq!(ScaleMode::Standard.scale(32.0, 8), 4.0);
        let rs = ScaleMode::RankStabilized.scale(32.0, 8);
        assert!((rs - 11.313708498984761).abs() < 1e-12);
    }

    #[test]
    fn attach_preserves_outputs_bitwise() {
        let mut m = model();
        let tokens = [1, 5, 0, 3, 3, 2, 4];
        let before = m.forward(&tokens).unwrap();
        m.attach_lora(&spec(&m, 2, ScaleMode::Standard)).unwrap();
        let after = m.forward(&tokens).unwrap();
        assert!(before.bitwise_eq(&after));
        assert_eq!(m.registry().trainable().count(), 8);
        assert!(m.registry().trainable().all(|(id, _)| id.contains(".lora_")));
    }

    #[test]
    fn attach_errors() {
        let mut m = model();
        let mut s = spec(&m, 2, ScaleMode::Standard);
        s.rank = 10;
        assert!(matches!(m.attach_lora(&s), Err(Error::Config(_))));
        s.rank = 2;
        s.targets = vec!["nope".into()];
        assert!(matches!(m.attach_lora(&s), Err(Error::Config(_))));
        s.targets = vec!["head.bias".into()];
        assert!(matches!(m.attach_lora(&s), Err(Error::Config(_))));
        // failed attaches leave the model untouched
        assert!(m.adapters().is_empty());
        assert_eq!(m.registry().trainable_scalars(), m.registry().total_scalars());
    }

    #[test]
    fn merge_untrained_is_exact_and_double_merge_fails() {
        let base = model();
        let mut m = base.clone();
        m.attach_lora(&spec(&m, 2, ScaleMode::RankStabilized)).unwrap();
        m.merge_lora().unwrap();
        assert!(m.registry().bitwise_eq(base.registry()));
        assert!(m.merge_lora().is_err());
    }
}
