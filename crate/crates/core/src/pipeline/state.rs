//! Trainable state and its checkpoint encoding.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{
    decode_records, encode_records, AdamState, ParamStore, Real, Tensor,
};
use crate::vit::ViTConfig;

const META_MODEL: &str = "meta.model";
const META_SOURCES: &str = "meta.sources";
const META_STEP: &str = "meta.step";
const ADAM_M: &str = "adamw.m.";
const ADAM_V: &str = "adamw.v.";
const ADAM_STEPS: &str = "adamw.steps";

/// Parameters, optimizer moments, step counter, and the dataset domains the
/// prompt bank rows correspond to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub store: ParamStore,
    pub model: Model,
    pub optimizer: Vec<AdamState>,
    pub step: u64,
    /// Dataset domain index of each prompt-bank row.
    pub sources: Vec<usize>,
}

fn exact(v: u64, what: &str) -> Result<Real> {
    // Integers travel as f32 in checkpoints.
    if v > (1 << 24) {
        return Err(Error::Contract(format!("{what} {v} too large to store exactly")));
    }
    Ok(v as Real)
}

fn as_count(v: Real, what: &str, origin: &Path) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::format(origin, format!("{what} is not a count: {v}")));
    }
    Ok(v as usize)
}

impl ModelState {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, sources: Vec<usize>, seed: u64) -> Result<Self> {
        if sources.len() != config.num_domains {
            return Err(Error::Config(format!(
                "{} source domains for a bank of {}",
                sources.len(),
                config.num_domains
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(config, &mut store, &mut rng)?;
        let optimizer = store
            .iter()
            .map(|(_, _, t)| AdamState::zeros(t.numel()))
            .collect();
        Ok(ModelState {
            store,
            model,
            optimizer,
            step: 0,
            sources,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn meta_model(&self) -> Result<Tensor> {
        let c = &self.model.config;
        let v = &c.vit;
        let vals = [
            v.image_size,
            v.patch_size,
            v.channels,
            v.embed_dim,
            v.depth,
            v.num_heads,
            v.mlp_ratio,
            v.num_classes,
            c.prompt_len,
            c.num_domains,
            c.hidden(),
        ];
        let data = vals
            .iter()
            .map(|&x| exact(x as u64, "model size"))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![vals.len()], data)
    }

    /// Serialized checkpoint. Identical states encode to identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Tensor)> = vec![
            (META_MODEL.into(), self.meta_model()?),
            (
                META_SOURCES.into(),
                Tensor::new(
                    vec![self.sources.len()],
                    self.sources
                        .iter()
                        .map(|&s| exact(s as u64, "source index"))
                        .collect::<Result<_>>()?,
                )?,
            ),
            (META_STEP.into(), Tensor::new(vec![1], vec![exact(self.step, "step")?])?),
        ];
        let mut steps = Vec::with_capacity(self.optimizer.len());
        for ((_, name, t), st) in self.store.iter().zip(&self.optimizer) {
            owned.push((format!("{ADAM_M}{name}"), Tensor::new(t.shape().to_vec(), st.m.clone())?));
            owned.push((format!("{ADAM_V}{name}"), Tensor::new(t.shape().to_vec(), st.v.clone())?));
            steps.push(exact(st.step, "optimizer step")?);
        }
        owned.push((ADAM_STEPS.into(), Tensor::new(vec![steps.len().max(1)], {
            if steps.is_empty() {
                vec![0.0]
            } else {
                steps
            }
        })?));
        let params = self.store.iter().map(|(_, n, t)| (n, t));
        let extra = owned.iter().map(|(n, t)| (n.as_str(), t));
        Ok(encode_records(params.chain(extra)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let records = decode_records(buf, origin)?;
        let find = |name: &str| -> Result<&Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(origin, format!("missing record {name:?}")))
        };
        let meta = find(META_MODEL)?;
        if meta.numel() != 11 {
            return Err(Error::format(origin, format!("{META_MODEL} has {} values", meta.numel())));
        }
        let m = meta
            .data()
            .iter()
            .map(|&v| as_count(v, META_MODEL, origin))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            vit: ViTConfig {
                image_size: m[0],
                patch_size: m[1],
                channels: m[2],
                embed_dim: m[3],
                depth: m[4],
                num_heads: m[5],
                mlp_ratio: m[6],
                dropout: 0.0,
                num_classes: m[7],
            },
            prompt_len: m[8],
            num_domains: m[9],
            adapter_hidden: m[10],
        };
        let sources = find(META_SOURCES)?
            .data()
            .iter()
            .map(|&v| as_count(v, META_SOURCES, origin))
            .collect::<Result<Vec<_>>>()?;
        let step = as_count(find(META_STEP)?.data()[0], META_STEP, origin)? as u64;

        let mut store = ParamStore::new();
        for (name, t) in &records {
            if name.starts_with("meta.") || name.starts_with("adamw.") {
                continue;
            }
            store.add(name.clone(), Tensor::new(t.shape().to_vec(), t.data().to_vec())?)?;
        }
        let model = Model::bind(config, &store)
            .map_err(|e| Error::format(origin, format!("parameters do not fit model: {e}")))?;
        let steps = find(ADAM_STEPS)?;
        let mut optimizer = Vec::with_capacity(store.len());
        for (i, (_, name, t)) in store.iter().enumerate() {
            let mm = find(&format!("{ADAM_M}{name}"))?;
            let vv = find(&format!("{ADAM_V}{name}"))?;
            if mm.shape() != t.shape() || vv.shape() != t.shape() {
                return Err(Error::format(origin, format!("optimizer moments of {name} have wrong shape")));
            }
            let st = steps
                .data()
                .get(i)
                .ok_or_else(|| Error::format(origin, "optimizer step table too short"))?;
            optimizer.push(AdamState {
                m: mm.data().to_vec(),
                v: vv.data().to_vec(),
                step: as_count(*st, ADAM_STEPS, origin)? as u64,
            });
        }
        Ok(ModelState {
            store,
            model,
            optimizer,
            step,
            sources,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
