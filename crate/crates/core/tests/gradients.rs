use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfreeze_core::autodiff::{Graph, Tensor};
use selfreeze_core::data::Sample;
use selfreeze_core::gradcheck::{central_difference, first_mismatch};
use selfreeze_core::model::{LoraSpec, ModelConfig, ScaleMode, TinyLm};
use selfreeze_core::training::{loss_with_penalty, PenaltyConfig};

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-7;

fn flat_trainable(model: &TinyLm) -> Vec<f64> {
    model.registry().trainable().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn set_flat(model: &mut TinyLm, flat: &[f64]) {
    let mut off = 0;
    for (_, t) in model.registry_mut().iter_mut() {
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn micro_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        vocab_size: rng.gen_range(3..6),
        embed_dim: rng.gen_range(1..4),
        depth: rng.gen_range(1..3),
        context: 6,
        window: rng.gen_range(1..4),
        hidden: rng.gen_range(2..6),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, n: usize, len: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            x: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
            y: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
        })
        .collect()
}

fn check_model(model: &TinyLm, batch: &[Sample]) -> Result<(), String> {
    let (_, grads) = model.loss_and_grads(batch).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.iter().flat_map(|(_, g)| g.to_vec()).collect();
    let mut probe = model.clone();
    let mut x = flat_trainable(model);
    let numeric = central_difference(&mut x, H, |x| {
        set_flat(&mut probe, x);
        probe.loss(batch).unwrap()
    });
    match first_mismatch(&analytic, &numeric, REL, ABS) {
        None => Ok(()),
        Some((i, a, n)) => Err(format!("scalar {i}: analytic {a}, numeric {n}")),
    }
}

#[test]
fn tiny_lm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seed in 0..24u64 {
        let cfg = micro_config(&mut rng);
        let model = TinyLm::build(&cfg, seed).unwrap();
        let batch = random_batch(&mut rng, cfg.vocab_size, 2, 5);
        check_model(&model, &batch).unwrap_or_else(|e| panic!("seed {seed} {cfg:?}: {e}"));
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..6u64 {
        let mut cfg = micro_config(&mut rng);
        cfg.embed_dim = 2;
        cfg.window = 2;
        cfg.hidden = 4;
        let mut model = TinyLm::build(&cfg, seed).unwrap();
        let mode = if seed % 2 == 0 { ScaleMode::Standard } else { ScaleMode::RankStabilized };
        model
            .attach_lora(&LoraSpec {
                targets: model.block_weight_ids(),
                rank: 2,
                alpha: 4.0,
                scale_mode: mode,
                seed,
            })
            .unwrap();
        // move B off zero so gradients reach A
        for (id, t) in model.registry_mut().iter_mut() {
            if id.ends_with("lora_b") {
                t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
            }
        }
        let batch = random_batch(&mut rng, cfg.vocab_size, 2, 4);
        check_model(&model, &batch).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn penalised_loss_gradient_matches_finite_differences() {
    let mut g = Graph::new();
    let x0 = vec![0.4, -1.2, 2.0];
    let anchor = vec![0.0, 1.0, -0.5];
    let weight = vec![2.0, 0.5, 3.0];
    let pen = PenaltyConfig::new(
        1.7,
        [("x".to_string(), anchor.clone())].into_iter().collect(),
        [("x".to_string(), weight.clone())].into_iter().collect(),
    )
    .unwrap();
    let mut reg = selfreeze_core::model::ParameterRegistry::new();
    reg.insert("x", Tensor::vector(x0.clone()).unwrap().with_grad(true)).unwrap();
    let bound = reg.bind(&mut g);
    let task = g.constant(Tensor::scalar(0.0));
    let out = loss_with_penalty(&mut g, task, &bound, &pen).unwrap();
    g.backward(out.total).unwrap();
    let analytic = g.grad(bound.var("x").unwrap()).unwrap().to_vec();
    let mut x = x0;
    let numeric = central_difference(&mut x, H, |x| {
        0.85 * x.iter().zip(&anchor).zip(&weight).map(|((x, a), w)| w * (x - a).powi(2)).sum::<f64>()
    });
    assert_eq!(first_mismatch(&analytic, &numeric, REL, ABS), None);
}

mod composed {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_assume, proptest, ProptestConfig};

    // relu(x·W + b) summed with a scaled transpose path, then cross-entropy
    fn loss(x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, n: usize, targets: &[usize]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::matrix(rows, k, x.to_vec()).unwrap().with_grad(true));
        let wv = g.leaf(Tensor::matrix(k, n, w.to_vec()).unwrap().with_grad(true));
        let bv = g.leaf(Tensor::vector(b.to_vec()).unwrap().with_grad(true));
        let z = g.matmul(xv, wv).unwrap();
        let z = g.add_row(z, bv).unwrap();
        let r = g.relu(z).unwrap();
        let m = g.mul(z, z).unwrap();
        let m = g.scale(m, 0.3).unwrap();
        let s = g.add(r, m).unwrap();
        let l = g.softmax_cross_entropy(s, targets).unwrap();
        g.backward(l).unwrap();
        let mut grad = g.grad(xv).unwrap().to_vec();
        grad.extend_from_slice(g.grad(wv).unwrap());
        grad.extend_from_slice(g.grad(bv).unwrap());
        (g.value(l).item(), grad)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn composed_ops_match_finite_differences(
            rows in 1usize..4, k in 1usize..4, n in 2usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params: Vec<f64> = (0..rows * k + k * n + n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..n)).collect();
            let split = |p: &[f64]| {
                let (x, rest) = p.split_at(rows * k);
                let (w, b) = rest.split_at(k * n);
                (x.to_vec(), w.to_vec(), b.to_vec())
            };
            let (x, w, b) = split(&params);
            let (_, analytic) = loss(&x, &w, &b, rows, k, n, &targets);
            let numeric = central_difference(&mut params, H, |p| {
                let (x, w, b) = split(p);
                loss(&x, &w, &b, rows, k, n, &targets).0
            });
            // skip draws that land within h of a relu kink
            let (x, w, _) = split(&params);
            let near_kink = (0..rows).any(|r| (0..n).any(|j| {
                let z: f64 = (0..k).map(|i| x[r * k + i] * w[i * n + j]).sum::<f64>() + params[rows * k + k * n + j];
                z.abs() < 1e-4
            }));
            prop_assume!(!near_kink);
            prop_assert_eq!(first_mismatch(&analytic, &numeric, REL, ABS), None);
        }
    }
}
