//! A small pre-norm vision transformer whose encoder accepts extra prompt
//! tokens appended after the patch tokens.
//!
//! Token order is `[CLS]`, the `k` patch tokens in raster order, then any
//! prompt tokens. Positional embeddings cover `[CLS]` and the patches only.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: Real,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            num_classes: 5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `k`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Whether dropout is active. Training mode carries the RNG that draws masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut rand_chacha::ChaCha8Rng),
}

impl Mode<'_> {
    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: Real) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, p, &mut **rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Parameter handles of the featurizer and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ViT {
    pub config: ViTConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Output of one transformer block; `attention` holds the `[B*heads, T, T]`
/// attention weights.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(&[fan_in, fan_out], std, rng)
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches data")
}

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Config(format!("parameter {name} missing from store")))?;
    if store.get(id).shape() != shape {
        return Err(Error::shape(
            "bind",
            format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                store.get(id).shape()
            ),
        ));
    }
    Ok(id)
}

impl ViT {
    /// Registers freshly initialized parameters in `store`.
    pub fn init<R: Rng + ?Sized>(
        config: ViTConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        store.add("vit.patch.weight", xavier(config.patch_dim(), d, rng))?;
        store.add("vit.patch.bias", Tensor::zeros(&[d]))?;
        store.add("vit.cls", normal_tensor(&[1, d], 0.02, rng))?;
        store.add("vit.pos", normal_tensor(&[1 + config.num_patches(), d], 0.02, rng))?;
        for i in 0..config.depth {
            let p = format!("vit.block{i}");
            store.add(format!("{p}.norm1.gamma"), ones(d))?;
            store.add(format!("{p}.norm1.beta"), Tensor::zeros(&[d]))?;
            store.add(format!("{p}.attn.qkv.weight"), xavier(d, 3 * d, rng))?;
            store.add(format!("{p}.attn.qkv.bias"), Tensor::zeros(&[3 * d]))?;
            store.add(format!("{p}.attn.proj.weight"), xavier(d, d, rng))?;
            store.add(format!("{p}.attn.proj.bias"), Tensor::zeros(&[d]))?;
            store.add(format!("{p}.norm2.gamma"), ones(d))?;
            store.add(format!("{p}.norm2.beta"), Tensor::zeros(&[d]))?;
            store.add(format!("{p}.mlp.fc1.weight"), xavier(d, hidden, rng))?;
            store.add(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            store.add(format!("{p}.mlp.fc2.weight"), xavier(hidden, d, rng))?;
            store.add(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
        }
        store.add("vit.norm.gamma", ones(d))?;
        store.add("vit.norm.beta", Tensor::zeros(&[d]))?;
        store.add("classifier.weight", xavier(d, config.num_classes, rng))?;
        store.add("classifier.bias", Tensor::zeros(&[config.num_classes]))?;
        Self::bind(config, store)
    }

    /// Looks up existing parameters by name, checking their shapes.
    pub fn bind(config: ViTConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("vit.block{i}");
                let n = |s: &str| format!("{p}.{s}");
                Ok(BlockParams {
                    norm1_gamma: lookup(store, &n("norm1.gamma"), &[d])?,
                    norm1_beta: lookup(store, &n("norm1.beta"), &[d])?,
                    qkv_w: lookup(store, &n("attn.qkv.weight"), &[d, 3 * d])?,
                    qkv_b: lookup(store, &n("attn.qkv.bias"), &[3 * d])?,
                    proj_w: lookup(store, &n("attn.proj.weight"), &[d, d])?,
                    proj_b: lookup(store, &n("attn.proj.bias"), &[d])?,
                    norm2_gamma: lookup(store, &n("norm2.gamma"), &[d])?,
                    norm2_beta: lookup(store, &n("norm2.beta"), &[d])?,
                    fc1_w: lookup(store, &n("mlp.fc1.weight"), &[d, hidden])?,
                    fc1_b: lookup(store, &n("mlp.fc1.bias"), &[hidden])?,
                    fc2_w: lookup(store, &n("mlp.fc2.weight"), &[hidden, d])?,
                    fc2_b: lookup(store, &n("mlp.fc2.bias"), &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ViT {
            patch_w: lookup(store, "vit.patch.weight", &[config.patch_dim(), d])?,
            patch_b: lookup(store, "vit.patch.bias", &[d])?,
            cls: lookup(store, "vit.cls", &[1, d])?,
            pos: lookup(store, "vit.pos", &[1 + config.num_patches(), d])?,
            blocks,
            norm_gamma: lookup(store, "vit.norm.gamma", &[d])?,
            norm_beta: lookup(store, "vit.norm.beta", &[d])?,
            head_w: lookup(store, "classifier.weight", &[d, config.num_classes])?,
            head_b: lookup(store, "classifier.bias", &[config.num_classes])?,
            config,
        })
    }

    /// `[B, C, H, W]` images to `[B, k, D]` patch tokens.
    pub fn patch_embed(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4
            || shape[1] != c.channels
            || shape[2] != c.image_size
            || shape[3] != c.image_size
        {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "images {shape:?}, expected [B, {}, {}, {}]",
                    c.channels, c.image_size, c.image_size
                ),
            ));
        }
        let (b, p, n) = (shape[0], c.patch_size, c.grid());
        let x = g.reshape(images, vec![b, c.channels, n, p, n, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, vec![b, n * n, c.patch_dim()])?;
        let w = g.param(store, self.patch_w);
        let bias = g.param(store, self.patch_b);
        g.linear(x, w, Some(bias))
    }

    /// `[CLS]` followed by patch tokens, with positional embeddings added:
    /// `[B, 1+k, D]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let patches = self.patch_embed(g, store, images)?;
        let b = g.shape(patches)[0];
        let cls = g.param(store, self.cls);
        let cls = g.expand(cls, b)?;
        let tokens = g.concat(&[cls, patches], 1)?;
        let pos = g.param(store, self.pos);
        g.add_suffix(tokens, pos)
    }

    /// Pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
    pub fn attention_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        index: usize,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<BlockOutput> {
        let bp = &self.blocks[index];
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (heads, dh) = (c.num_heads, c.head_dim());

        let gamma = g.param(store, bp.norm1_gamma);
        let beta = g.param(store, bp.norm1_beta);
        let h = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
        let w = g.param(store, bp.qkv_w);
        let bias = g.param(store, bp.qkv_b);
        let qkv = g.linear(h, w, Some(bias))?;
        let qkv = g.reshape(qkv, vec![b, t, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut split = |i: usize| -> Result<Var> {
            let part = g.narrow(qkv, 0, i, 1)?;
            g.reshape(part, vec![b * heads, t, dh])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as Real).sqrt());
        let attention = g.softmax(scores, 2)?;
        let ctx = g.bmm(attention, v, false, false)?;
        let ctx = g.reshape(ctx, vec![b, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, t, d])?;
        let w = g.param(store, bp.proj_w);
        let bias = g.param(store, bp.proj_b);
        let attn_out = g.linear(ctx, w, Some(bias))?;
        let attn_out = mode.dropout(g, attn_out, c.dropout)?;
        let x = g.add(x, attn_out)?;

        let gamma = g.param(store, bp.norm2_gamma);
        let beta = g.param(store, bp.norm2_beta);
        let h = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
        let w = g.param(store, bp.fc1_w);
        let bias = g.param(store, bp.fc1_b);
        let h = g.linear(h, w, Some(bias))?;
        let h = g.gelu(h);
        let w = g.param(store, bp.fc2_w);
        let bias = g.param(store, bp.fc2_b);
        let h = g.linear(h, w, Some(bias))?;
        let h = mode.dropout(g, h, c.dropout)?;
        let out = g.add(x, h)?;
        Ok(BlockOutput { out, attention })
    }

    /// Runs the encoder on embedded tokens with optional `[B, P, D]` prompts
    /// appended, returning the normalized class-token feature `[B, D]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        prompts: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let ts = g.shape(tokens).to_vec();
        if ts.len() != 3 || ts[1] != 1 + self.config.num_patches() || ts[2] != d {
            return Err(Error::shape(
                "encode",
                format!("tokens {ts:?}, expected [B, {}, {d}]", 1 + self.config.num_patches()),
            ));
        }
        let mut x = tokens;
        if let Some(p) = prompts {
            let ps = g.shape(p);
            if ps.len() != 3 || ps[0] != ts[0] || ps[2] != d {
                return Err(Error::shape(
                    "encode",
                    format!("prompt tokens {ps:?} for batch {} and dim {d}", ts[0]),
                ));
            }
            x = g.concat(&[tokens, p], 1)?;
        }
        for i in 0..self.blocks.len() {
            x = self.attention_block(g, store, i, x, mode)?.out;
        }
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, vec![ts[0], d])?;
        let gamma = g.param(store, self.norm_gamma);
        let beta = g.param(store, self.norm_beta);
        g.layer_norm(cls, gamma, beta, LAYER_NORM_EPS)
    }

    /// The classifier applied to a class-token feature.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, feature: Var) -> Result<Var> {
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        g.linear(feature, w, Some(b))
    }

    /// Full forward: returns `(cls_feature [B, D], logits [B, C])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: Var,
        prompts: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let tokens = self.embed(g, store, images)?;
        let feature = self.encode(g, store, tokens, prompts, mode)?;
        let logits = self.classify(g, store, feature)?;
        Ok((feature, logits))
    }
}
