//! Domain prompt bank, the prompt adapter, and adapted-prompt composition.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vit::{lookup, normal_tensor, xavier};

/// Standard deviation of the initial prompt tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// `K x L x D` learnable domain tokens stored as parameter `prompts.bank`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub id: ParamId,
    pub num_domains: usize,
    pub length: usize,
    pub dim: usize,
}

impl PromptBank {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_domains: usize,
        length: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_domains == 0 || length == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "prompt bank needs positive sizes, got K={num_domains} L={length} D={dim}"
            )));
        }
        let t = normal_tensor(&[num_domains, length, dim], PROMPT_INIT_STD, rng);
        let id = store.add("prompts.bank", t)?;
        Ok(PromptBank {
            id,
            num_domains,
            length,
            dim,
        })
    }

    pub fn bind(store: &ParamStore, num_domains: usize, length: usize, dim: usize) -> Result<Self> {
        Ok(PromptBank {
            id: lookup(store, "prompts.bank", &[num_domains, length, dim])?,
            num_domains,
            length,
            dim,
        })
    }

    /// Records the bank in `g`. Reuse the returned handle for every use within
    /// one graph so gradients accumulate on a single node.
    pub fn var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.id)
    }

    /// The `L x D` tokens of domain `d`.
    pub fn domain_prompts(&self, g: &mut Graph, bank: Var, d: usize) -> Result<Var> {
        if d >= self.num_domains {
            return Err(Error::Index(format!(
                "domain {d} out of range for {} prompt domains",
                self.num_domains
            )));
        }
        let rows = g.gather(bank, &[d])?;
        g.reshape(rows, vec![self.length, self.dim])
    }

    /// `[B, L, D]` prompts where sample `b` gets its own domain's tokens.
    pub fn per_sample_prompts(&self, g: &mut Graph, bank: Var, domains: &[usize]) -> Result<Var> {
        if let Some(&d) = domains.iter().find(|&&d| d >= self.num_domains) {
            return Err(Error::Index(format!(
                "domain {d} out of range for {} prompt domains",
                self.num_domains
            )));
        }
        g.gather(bank, domains)
    }

    /// The same domain's tokens repeated for a batch of `batch` samples.
    pub fn batch_prompts(&self, g: &mut Graph, bank: Var, d: usize, batch: usize) -> Result<Var> {
        self.per_sample_prompts(g, bank, &vec![d; batch])
    }
}

/// Two affine layers `D -> H -> L*K` with GELU between, followed by a
/// softmax over the `K` axis of the `[B, L, K]` output.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptAdapter {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub dim: usize,
    pub hidden: usize,
    pub length: usize,
    pub num_domains: usize,
}

impl PromptAdapter {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        length: usize,
        num_domains: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let out = length * num_domains;
        store.add("adapter.fc1.weight", xavier(dim, hidden, rng))?;
        store.add("adapter.fc1.bias", Tensor::zeros(&[hidden]))?;
        store.add("adapter.fc2.weight", xavier(hidden, out, rng))?;
        store.add("adapter.fc2.bias", Tensor::zeros(&[out]))?;
        Self::bind(store, dim, hidden, length, num_domains)
    }

    pub fn bind(
        store: &ParamStore,
        dim: usize,
        hidden: usize,
        length: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let out = length * num_domains;
        Ok(PromptAdapter {
            fc1_w: lookup(store, "adapter.fc1.weight", &[dim, hidden])?,
            fc1_b: lookup(store, "adapter.fc1.bias", &[hidden])?,
            fc2_w: lookup(store, "adapter.fc2.weight", &[hidden, out])?,
            fc2_b: lookup(store, "adapter.fc2.bias", &[out])?,
            dim,
            hidden,
            length,
            num_domains,
        })
    }

    /// Maps `[B, D]` features to `[B, L, K]` combination weights, each
    /// `(b, j)` row on the `K`-simplex.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feature: Var) -> Result<Var> {
        let fs = g.shape(feature).to_vec();
        if fs.len() != 2 || fs[1] != self.dim {
            return Err(Error::shape(
                "adapter_forward",
                format!("feature {fs:?}, expected [B, {}]", self.dim),
            ));
        }
        let w1 = g.param(store, self.fc1_w);
        let b1 = g.param(store, self.fc1_b);
        let h = g.linear(feature, w1, Some(b1))?;
        let h = g.gelu(h);
        let w2 = g.param(store, self.fc2_w);
        let b2 = g.param(store, self.fc2_b);
        let o = g.linear(h, w2, Some(b2))?;
        let o = g.reshape(o, vec![fs[0], self.length, self.num_domains])?;
        g.softmax(o, 2)
    }
}

/// `out[b, j, :] = sum_d w[b, j, d] * bank[d, j, :]` for `bank: [K, L, D]`
/// and `w: [B, L, K]`.
pub fn compose_adapted_prompts(g: &mut Graph, bank: Var, w: Var) -> Result<Var> {
    let (bs, ws) = (g.shape(bank).to_vec(), g.shape(w).to_vec());
    if bs.len() != 3 || ws.len() != 3 || bs[0] != ws[2] || bs[1] != ws[1] {
        return Err(Error::shape(
            "compose_adapted_prompts",
            format!("bank {bs:?} (K, L, D) with weights {ws:?} (B, L, K)"),
        ));
    }
    let bank_l = g.permute(bank, &[1, 0, 2])?; // [L, K, D]
    let w_l = g.permute(w, &[1, 0, 2])?; // [L, B, K]
    let mixed = g.bmm(w_l, bank_l, false, false)?; // [L, B, D]
    g.permute(mixed, &[1, 0, 2])
}
