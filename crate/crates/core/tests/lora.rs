use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfreeze_core::model::{LoraSpec, ModelConfig, ScaleMode, TinyLm};

fn model() -> TinyLm {
    let cfg = ModelConfig {
        vocab_size: 10,
        embed_dim: 4,
        depth: 2,
        context: 12,
        window: 3,
        hidden: 16,
    };
    TinyLm::build(&cfg, 8).unwrap()
}

fn spec(m: &TinyLm, mode: ScaleMode) -> LoraSpec {
    LoraSpec {
        targets: m.block_weight_ids(),
        rank: 8,
        alpha: 32.0,
        scale_mode: mode,
        seed: 3,
    }
}

const TOKENS: [usize; 9] = [1, 4, 9, 0, 3, 3, 7, 2, 5];

#[test]
fn scales_for_rank_eight_alpha_thirty_two() {
    assert_eq!(ScaleMode::Standard.scale(32.0, 8), 4.0);
    let rs = ScaleMode::RankStabilized.scale(32.0, 8);
    assert!((rs - 32.0 / 8f64.sqrt()).abs() < 1e-12);
    assert!((rs - 11.3137).abs() < 1e-4);
}

#[test]
fn fresh_adapters_change_nothing() {
    for mode in [ScaleMode::Standard, ScaleMode::RankStabilized] {
        let base = model();
        let mut adapted = base.clone();
        adapted.attach_lora(&spec(&base, mode)).unwrap();
        let a = base.forward(&TOKENS).unwrap();
        let b = adapted.forward(&TOKENS).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(adapted.registry().trainable().count(), 2 * base.block_weight_ids().len());
    }
}

#[test]
fn merge_matches_adapted_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for mode in [ScaleMode::Standard, ScaleMode::RankStabilized] {
        let base = model();
        let mut adapted = base.clone();
        adapted.attach_lora(&spec(&base, mode)).unwrap();
        for (id, t) in adapted.registry_mut().iter_mut() {
            if id.ends_with("lora_b") || id.ends_with("lora_a") {
                t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
            }
        }
        let before = adapted.forward(&TOKENS).unwrap();
        let mut merged = adapted.clone();
        merged.merge_lora().unwrap();
        assert!(merged.adapters().is_empty());
        assert_eq!(merged.registry().len(), base.registry().len());
        let after = merged.forward(&TOKENS).unwrap();
        let worst = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-10, "merge drift {worst}");
        assert!(!after.bitwise_eq(&base.forward(&TOKENS).unwrap()));
    }
}

#[test]
fn rank_above_min_dimension_is_rejected() {
    let base = model();
    let mut m = base.clone();
    let mut s = spec(&base, ScaleMode::Standard);
    s.rank = 17;
    assert!(m.attach_lora(&s).is_err());
    assert_eq!(m, base);
}
