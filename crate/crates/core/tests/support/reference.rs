//! Plain-loop f64 transcription of the transformer forward pass, read
//! straight from the parameter store. Shares no code with the graph engine.
#![allow(dead_code, clippy::needless_range_loop)]

use doprompt_core::tensor::ParamStore;
use doprompt_core::vit::ViTConfig;

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().iter().map(|&v| v as f64).collect()
}

/// `x[n, i] -> x w + b` for row-major `w[i, o]`.
pub fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let o = b.len();
    x.iter()
        .map(|row| {
            (0..o)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * o + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Tokens of one image: class token, then patches, with positions added.
pub fn embed(cfg: &ViTConfig, store: &ParamStore, image: &[f64]) -> Vec<Vec<f64>> {
    let (p, n, c, s) = (cfg.patch_size, cfg.grid(), cfg.channels, cfg.image_size);
    let w = param(store, "vit.patch.weight");
    let b = param(store, "vit.patch.bias");
    let cls = param(store, "vit.cls");
    let pos = param(store, "vit.pos");
    let d = cfg.embed_dim;
    let mut patches = Vec::new();
    for gy in 0..n {
        for gx in 0..n {
            let mut v = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        v.push(image[(ch * s + gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut tokens = vec![cls.clone()];
    tokens.extend(affine(&patches, &w, &b));
    for (t, row) in tokens.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v += pos[t * d + k];
        }
    }
    tokens
}

pub fn block(cfg: &ViTConfig, store: &ParamStore, i: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pre = format!("vit.block{i}");
    let get = |s: &str| param(store, &format!("{pre}.{s}"));
    let (d, heads) = (cfg.embed_dim, cfg.num_heads);
    let dh = d / heads;
    let t = x.len();
    let (g1, b1) = (get("norm1.gamma"), get("norm1.beta"));
    let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
    let qkv = affine(&h, &get("attn.qkv.weight"), &get("attn.qkv.bias"));
    let mut ctx = vec![vec![0.0; d]; t];
    for hd in 0..heads {
        let q = |r: usize, k: usize| qkv[r][hd * dh + k];
        let kk = |r: usize, k: usize| qkv[r][d + hd * dh + k];
        let v = |r: usize, k: usize| qkv[r][2 * d + hd * dh + k];
        for a in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|b| (0..dh).map(|k| q(a, k) * kk(b, k)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let att = softmax(&scores);
            for k in 0..dh {
                ctx[a][hd * dh + k] = (0..t).map(|b| att[b] * v(b, k)).sum();
            }
        }
    }
    let attn = affine(&ctx, &get("attn.proj.weight"), &get("attn.proj.bias"));
    let x1: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let (g2, b2) = (get("norm2.gamma"), get("norm2.beta"));
    let h: Vec<Vec<f64>> = x1.iter().map(|r| layer_norm(r, &g2, &b2)).collect();
    let h = affine(&h, &get("mlp.fc1.weight"), &get("mlp.fc1.bias"));
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let h = affine(&h, &get("mlp.fc2.weight"), &get("mlp.fc2.bias"));
    x1.iter()
        .zip(&h)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect()
}

/// Class-token feature of one image with `prompts` (`P x D`) appended.
pub fn feature(cfg: &ViTConfig, store: &ParamStore, image: &[f64], prompts: &[Vec<f64>]) -> Vec<f64> {
    let mut x = embed(cfg, store, image);
    x.extend(prompts.iter().cloned());
    for i in 0..cfg.depth {
        x = block(cfg, store, i, &x);
    }
    layer_norm(&x[0], &param(store, "vit.norm.gamma"), &param(store, "vit.norm.beta"))
}

pub fn logits(_cfg: &ViTConfig, store: &ParamStore, feature: &[f64]) -> Vec<f64> {
    affine(
        &[feature.to_vec()],
        &param(store, "classifier.weight"),
        &param(store, "classifier.bias"),
    )
    .remove(0)
}

/// Adapter weights `L x K` for one feature.
pub fn adapter(store: &ParamStore, feature: &[f64], l: usize, k: usize) -> Vec<Vec<f64>> {
    let h = affine(
        &[feature.to_vec()],
        &param(store, "adapter.fc1.weight"),
        &param(store, "adapter.fc1.bias"),
    );
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let o = affine(&h, &param(store, "adapter.fc2.weight"), &param(store, "adapter.fc2.bias")).remove(0);
    (0..l).map(|j| softmax(&o[j * k..(j + 1) * k])).collect()
}

/// `sum_d w[j][d] * bank[d][j]` for `bank` stored `K x L x D`.
pub fn compose(bank: &[f64], w: &[Vec<f64>], k: usize, l: usize, d: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|j| {
            (0..d)
                .map(|e| (0..k).map(|dd| w[j][dd] * bank[(dd * l + j) * d + e]).sum())
                .collect()
        })
        .collect()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    lse - logits[target]
}

/// Mean over positions and domains of the per-weight binary cross-entropy
/// against the one-hot `target`, log arguments clamped at `eps`.
pub fn weight_bce(w: &[Vec<f64>], target: usize, eps: f64) -> f64 {
    let k = w[0].len();
    let total: f64 = w
        .iter()
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(move |(d, &v)| -(if d == target { v } else { 1.0 - v }).max(eps).ln())
        })
        .sum();
    total / (w.len() * k) as f64
}

/// Adapter weights `L x K` for one image, from its prompt-free feature.
pub fn image_weights(cfg: &ViTConfig, store: &ParamStore, image: &[f64], l: usize, k: usize) -> Vec<Vec<f64>> {
    adapter(store, &feature(cfg, store, image, &[]), l, k)
}

/// Full three-term training loss over a batch with no dropout. With
/// `held_weights` the adapter weights are taken as given instead of being
/// computed from `store`, which reproduces a loss whose adapter input is
/// cut from the parameters being probed.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    cfg: &ViTConfig,
    store: &ParamStore,
    held_weights: Option<&[Vec<Vec<f64>>]>,
    images: &[Vec<f64>],
    labels: &[usize],
    domains: &[usize],
    lambda: f64,
    l: usize,
    k: usize,
    eps: f64,
) -> f64 {
    let d = cfg.embed_dim;
    let bank = param(store, "prompts.bank");
    let n = images.len() as f64;
    let (mut lp, mut la, mut lw) = (0.0, 0.0, 0.0);
    for (i, ((x, &y), &dom)) in images.iter().zip(labels).zip(domains).enumerate() {
        let own: Vec<Vec<f64>> = (0..l)
            .map(|j| bank[(dom * l + j) * d..(dom * l + j + 1) * d].to_vec())
            .collect();
        lp += cross_entropy(&logits(cfg, store, &feature(cfg, store, x, &own)), y);
        let w = match held_weights {
            Some(h) => h[i].clone(),
            None => image_weights(cfg, store, x, l, k),
        };
        lw += weight_bce(&w, dom, eps);
        let mixed = compose(&bank, &w, k, l, d);
        la += cross_entropy(&logits(cfg, store, &feature(cfg, store, x, &mixed)), y);
    }
    (lp + la + lambda * lw) / n
}
