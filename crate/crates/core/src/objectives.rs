//! Training losses: domain-prompt cross-entropy, adapter weight loss, and
//! adapted-prompt cross-entropy, plus their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompting::compose_adapted_prompts;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::vit::Mode;

/// Lower clamp applied inside every log of the weight loss.
pub const WEIGHT_LOG_EPS: f64 = 1e-7;

/// Images with class labels and source-domain indices (`0..K`).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl DomainBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, domains: Vec<usize>) -> Result<Self> {
        let b = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 || labels.len() != b || domains.len() != b {
            return Err(Error::shape(
                "domain_batch",
                format!(
                    "images {:?} with {} labels and {} domains",
                    images.shape(),
                    labels.len(),
                    domains.len()
                ),
            ));
        }
        Ok(DomainBatch {
            images,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[DomainBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("no batches to concatenate".into()))?;
        let tail = &first.images.shape()[1..];
        let mut data = Vec::new();
        let (mut labels, mut domains) = (Vec::new(), Vec::new());
        for p in parts {
            if &p.images.shape()[1..] != tail {
                return Err(Error::shape(
                    "domain_batch",
                    format!("{:?} vs {:?}", p.images.shape(), first.images.shape()),
                ));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
            domains.extend_from_slice(&p.domains);
        }
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(tail);
        DomainBatch::new(Tensor::new(shape, data)?, labels, domains)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_prompt: f64,
    pub l_w: f64,
    pub l_adapt: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,l_prompt,l_w,l_adapt,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{}",
            self.l_prompt, self.l_w, self.l_adapt, self.total
        )
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_prompt", self.l_prompt),
            ("l_w", self.l_w),
            ("l_adapt", self.l_adapt),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Which terms enter the total and with what weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda: Real,
    pub prompt: bool,
    pub adapt: bool,
}

impl Objective {
    pub fn full(lambda: Real) -> Self {
        Objective {
            lambda,
            prompt: true,
            adapt: true,
        }
    }
}

/// Graph handles shared by all loss terms of one step: the embedded tokens
/// (class token, patches, positions) and the prompt bank.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    pub tokens: Var,
    pub bank: Var,
}

pub fn prepare(g: &mut Graph, store: &ParamStore, model: &Model, images: &Tensor) -> Result<Prepared> {
    let img = g.leaf(images);
    let tokens = model.vit.embed(g, store, img)?;
    let bank = model.bank.var(g, store);
    Ok(Prepared { tokens, bank })
}

fn check_domains(model: &Model, domains: &[usize]) -> Result<()> {
    match domains.iter().find(|&&d| d >= model.config.num_domains) {
        Some(d) => Err(Error::Index(format!(
            "domain index {d} out of range for {} source domains",
            model.config.num_domains
        ))),
        None => Ok(()),
    }
}

/// Cross-entropy with each sample forwarded under its own domain's prompts.
pub fn prompt_term(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    prep: Prepared,
    batch: &DomainBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    check_domains(model, &batch.domains)?;
    let prompts = model.bank.per_sample_prompts(g, prep.bank, &batch.domains)?;
    let feature = model.vit.encode(g, store, prep.tokens, Some(prompts), mode)?;
    let logits = model.vit.classify(g, store, feature)?;
    g.cross_entropy(logits, &batch.labels)
}

/// Adapter weights computed from the prompt-free class feature, with the
/// gradient path into the featurizer cut at the adapter input.
pub fn adapter_weights(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    prep: Prepared,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let feature = model.vit.encode(g, store, prep.tokens, None, mode)?;
    let h = g.detach(feature);
    model.adapter.forward(g, store, h)
}

/// Cross-entropy with adapted prompts built from weights `w: [B, L, K]`.
pub fn adapt_term(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    prep: Prepared,
    w: Var,
    labels: &[usize],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let prompts = compose_adapted_prompts(g, prep.bank, w)?;
    let feature = model.vit.encode(g, store, prep.tokens, Some(prompts), mode)?;
    let logits = model.vit.classify(g, store, feature)?;
    g.cross_entropy(logits, labels)
}

pub fn loss_prompt(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    batch: &DomainBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    check_domains(model, &batch.domains)?;
    let prep = prepare(g, store, model, &batch.images)?;
    prompt_term(g, store, model, prep, batch, mode)
}

/// Binary cross-entropy on each adapter weight against the one-hot true
/// domain, averaged over positions, domains, and the batch.
pub fn loss_w(g: &mut Graph, w: Var, true_domains: &[usize]) -> Result<Var> {
    g.weight_bce(w, true_domains, WEIGHT_LOG_EPS)
}

pub fn loss_adapt(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    batch: &DomainBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    check_domains(model, &batch.domains)?;
    let prep = prepare(g, store, model, &batch.images)?;
    let w = adapter_weights(g, store, model, prep, mode)?;
    adapt_term(g, store, model, prep, w, &batch.labels, mode)
}

/// Plain cross-entropy without prompts.
pub fn loss_erm(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    batch: &DomainBatch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let img = g.leaf(&batch.images);
    let (_, logits) = model.vit.forward(g, store, img, None, mode)?;
    g.cross_entropy(logits, &batch.labels)
}

/// `l_prompt + l_adapt + lambda * l_w`, with terms switched off per
/// `objective`. The returned breakdown reports 0 for disabled terms.
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    batch: &DomainBatch,
    objective: Objective,
    mode: &mut Mode<'_>,
) -> Result<(Var, LossBreakdown)> {
    if objective.lambda < 0.0 || !objective.lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {}",
            objective.lambda
        )));
    }
    check_domains(model, &batch.domains)?;
    let prep = prepare(g, store, model, &batch.images)?;
    let mut terms = Vec::new();
    let mut report = LossBreakdown {
        lambda: objective.lambda as f64,
        ..LossBreakdown::default()
    };
    if objective.prompt {
        let l = prompt_term(g, store, model, prep, batch, mode)?;
        report.l_prompt = g.value(l)[0] as f64;
        terms.push(l);
    }
    let needs_weights = objective.adapt || objective.lambda > 0.0;
    if needs_weights {
        let w = adapter_weights(g, store, model, prep, mode)?;
        let lw = loss_w(g, w, &batch.domains)?;
        report.l_w = g.value(lw)[0] as f64;
        if objective.lambda > 0.0 {
            terms.push(g.scale(lw, objective.lambda));
        }
        if objective.adapt {
            let la = adapt_term(g, store, model, prep, w, &batch.labels, mode)?;
            report.l_adapt = g.value(la)[0] as f64;
            terms.push(la);
        }
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Config("objective has no active terms".into()))?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    report.total = report.l_prompt + report.l_adapt + report.lambda * report.l_w;
    Ok((total, report))
}
