//! Small models, batches, and check suites shared by the test targets.
#![allow(dead_code)]

use doprompt_core::model::{Model, ModelConfig};
use doprompt_core::objectives::{total_loss, DomainBatch, Objective, WEIGHT_LOG_EPS};
use doprompt_core::tensor::{Graph, ParamStore, Real, Tensor};
use doprompt_core::vit::{Mode, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_op, check_params_against, default_step, random_tensor};
use super::reference as oracle;

pub const K: usize = 3;
pub const L: usize = 2;

pub fn config(dropout: Real) -> ModelConfig {
    ModelConfig {
        vit: ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            dropout,
            num_classes: 3,
        },
        prompt_len: L,
        num_domains: K,
        adapter_hidden: 0,
    }
}

pub fn setup(seed: u64, dropout: Real) -> (ParamStore, Model) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(config(dropout), &mut store, &mut rng).unwrap();
    // nonzero biases and norms so every parameter shapes the output
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("gamma") {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    (store, model)
}

pub fn batch(seed: u64, b: usize) -> DomainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = random_tensor(&mut rng, &[b, 3, 8, 8], 1.0);
    let labels = (0..b).map(|i| (i + seed as usize) % 3).collect();
    let domains = (0..b).map(|i| (i * 2 + seed as usize) % K).collect();
    DomainBatch::new(images, labels, domains).unwrap()
}

pub fn image_f64(t: &Tensor, i: usize) -> Vec<f64> {
    let per: usize = t.shape()[1..].iter().product();
    t.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect()
}

pub fn param_names(pred: impl Fn(&str) -> bool) -> Vec<String> {
    let (store, _) = setup(0, 0.1);
    store.iter().map(|(_, n, _)| n.to_string()).filter(|n| pred(n)).collect()
}

/// Relative error per parameter of the training loss gradient against
/// central differences of the dense f64 loss. Backbone parameters are probed
/// with the adapter weights of the unperturbed store, since the adapter reads
/// a detached feature.
pub fn total_loss_oracle_errors(seed: u64) -> Vec<(String, f64)> {
    let names = param_names(|_| true);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let lambda = 0.7;
    let (store, model) = setup(seed, 0.0);
    let data = batch(seed + 100, 2);
    let images: Vec<Vec<f64>> = (0..2).map(|i| image_f64(&data.images, i)).collect();
    let cfg = &model.config.vit;
    let held: Vec<_> = images.iter().map(|x| oracle::image_weights(cfg, &store, x, L, K)).collect();
    let analytic = |g: &mut Graph, s: &ParamStore| {
        total_loss(g, s, &model, &data, Objective::full(lambda), &mut Mode::Eval).map(|(l, _)| l)
    };
    let numeric = |name: &str, s: &ParamStore| {
        let weights = name.starts_with("vit.").then_some(held.as_slice());
        oracle::total_loss(
            cfg,
            s,
            weights,
            &images,
            &data.labels,
            &data.domains,
            lambda as f64,
            L,
            K,
            WEIGHT_LOG_EPS,
        )
    };
    check_params_against(&store, &names, 1e-5, analytic, numeric)
}

/// Worst relative error of every graph op for one seed.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let h = default_step();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    vec![
        ("add", check_op(&[r(&[2, 3]), r(&[2, 3])], seed, h, |g, v| g.add(v[0], v[1]))),
        ("add_suffix", check_op(&[r(&[2, 3, 4]), r(&[3, 4])], seed, h, |g, v| g.add_suffix(v[0], v[1]))),
        ("mul", check_op(&[r(&[5]), r(&[5])], seed, h, |g, v| g.mul(v[0], v[1]))),
        ("scale", check_op(&[r(&[4])], seed, h, |g, v| Ok(g.scale(v[0], -1.7)))),
        ("linear", check_op(&[r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], seed, h, |g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("bmm", check_op(&[r(&[2, 3, 4]), r(&[2, 4, 2])], seed, h, |g, v| g.bmm(v[0], v[1], false, false))),
        ("bmm_ta", check_op(&[r(&[2, 4, 3]), r(&[2, 4, 2])], seed, h, |g, v| g.bmm(v[0], v[1], true, false))),
        ("bmm_tb", check_op(&[r(&[2, 3, 4]), r(&[2, 2, 4])], seed, h, |g, v| g.bmm(v[0], v[1], false, true))),
        ("bmm_tab", check_op(&[r(&[2, 4, 3]), r(&[2, 2, 4])], seed, h, |g, v| g.bmm(v[0], v[1], true, true))),
        ("reshape", check_op(&[r(&[2, 6])], seed, h, |g, v| g.reshape(v[0], vec![3, 4]))),
        ("permute", check_op(&[r(&[2, 3, 4])], seed, h, |g, v| g.permute(v[0], &[2, 0, 1]))),
        ("concat", check_op(&[r(&[2, 1, 3]), r(&[2, 4, 3])], seed, h, |g, v| g.concat(&[v[0], v[1]], 1))),
        ("narrow", check_op(&[r(&[2, 5, 3])], seed, h, |g, v| g.narrow(v[0], 1, 1, 3))),
        ("expand", check_op(&[r(&[1, 3])], seed, h, |g, v| g.expand(v[0], 4))),
        ("gather", check_op(&[r(&[3, 2, 2])], seed, h, |g, v| g.gather(v[0], &[2, 0, 2, 1]))),
        ("softmax0", check_op(&[r(&[3, 4])], seed, h, |g, v| g.softmax(v[0], 0))),
        ("softmax1", check_op(&[r(&[3, 4])], seed, h, |g, v| g.softmax(v[0], 1))),
        ("layer_norm", check_op(&[r(&[3, 6]), r(&[6]), r(&[6])], seed, h, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("gelu", check_op(&[r(&[8])], seed, h, |g, v| Ok(g.gelu(v[0])))),
        ("sum", check_op(&[r(&[2, 3])], seed, h, |g, v| Ok(g.sum(v[0])))),
        ("mean", check_op(&[r(&[2, 3])], seed, h, |g, v| Ok(g.mean(v[0])))),
        ("cross_entropy", check_op(&[r(&[4, 5])], seed, h, |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]))),
        ("weight_bce", check_op(&[r(&[2, 3, 4])], seed, h, |g, v| {
            let w = g.softmax(v[0], 2)?;
            g.weight_bce(w, &[1, 3], 1e-7)
        })),
        ("dropout", check_op(&[r(&[10])], seed, h, |g, v| {
            // fixed mask stream so every evaluation sees the same mask
            let mut mrng = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(v[0], 0.3, &mut mrng)
        })),
    ]
}
