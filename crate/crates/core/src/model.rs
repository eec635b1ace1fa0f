use rand::Rng;

use crate::error::{Error, Result};
use crate::prompting::{PromptAdapter, PromptBank};
use crate::tensor::ParamStore;
use crate::vit::{ViT, ViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    /// Prompt tokens per domain, `L`.
    pub prompt_len: usize,
    /// Number of source domains, `K`.
    pub num_domains: usize,
    /// Adapter hidden width; 0 means "same as the embedding width".
    pub adapter_hidden: usize,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        if self.adapter_hidden == 0 {
            self.vit.embed_dim
        } else {
            self.adapter_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        if self.num_domains == 0 {
            return Err(Error::Config("need at least one source domain".into()));
        }
        Ok(())
    }
}

/// Featurizer, classifier, prompt bank, and adapter handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vit: ViT,
    pub bank: PromptBank,
    pub adapter: PromptAdapter,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.vit.embed_dim;
        let vit = ViT::init(config.vit.clone(), store, rng)?;
        let bank = PromptBank::init(store, config.num_domains, config.prompt_len, d, rng)?;
        let adapter = PromptAdapter::init(
            store,
            d,
            config.hidden(),
            config.prompt_len,
            config.num_domains,
            rng,
        )?;
        Ok(Model {
            config,
            vit,
            bank,
            adapter,
        })
    }

    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.vit.embed_dim;
        let vit = ViT::bind(config.vit.clone(), store)?;
        let bank = PromptBank::bind(store, config.num_domains, config.prompt_len, d)?;
        let adapter = PromptAdapter::bind(
            store,
            d,
            config.hidden(),
            config.prompt_len,
            config.num_domains,
        )?;
        Ok(Model {
            config,
            vit,
            bank,
            adapter,
        })
    }
}
