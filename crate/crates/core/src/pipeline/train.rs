use rand_chacha::ChaCha8Rng;

use super::config::{TrainConfig, Variant};
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::objectives::{loss_erm, total_loss, DomainBatch, LossBreakdown, Objective};
use crate::tensor::{AdamW, Graph, Real};
use crate::vit::Mode;

/// Loss terms a variant trains with; `None` for plain cross-entropy.
pub fn objective_for(variant: Variant, lambda: Real) -> Option<Objective> {
    let full = Objective::full(lambda);
    match variant {
        Variant::Erm => None,
        Variant::Doprompt | Variant::FrozenBackbone => Some(full),
        Variant::NoAdapter => Some(Objective {
            lambda: 0.0,
            adapt: false,
            ..full
        }),
        Variant::NoLw => Some(Objective { lambda: 0.0, ..full }),
        Variant::NoLadapt => Some(Objective { adapt: false, ..full }),
    }
}

/// Freezes parameters the variant must not update.
pub fn apply_variant(state: &mut ModelState, variant: Variant) {
    let frozen = variant == Variant::FrozenBackbone;
    state.store.set_trainable("vit.", !frozen);
}

pub fn optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW {
        lr: cfg.lr as Real,
        weight_decay: cfg.weight_decay as Real,
        ..AdamW::default()
    }
}

/// One optimizer step on the concatenation of `batches` (one per source
/// domain). Fails with `NonFinite` naming the first offending loss term, in
/// which case parameters are left unchanged.
pub fn train_step(
    state: &mut ModelState,
    batches: &[DomainBatch],
    variant: Variant,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let batch = DomainBatch::concat(batches)?;
    let mut g = Graph::new();
    let mut mode = Mode::Train(rng);
    let (loss, report) = match objective_for(variant, cfg.lambda as Real) {
        Some(obj) => total_loss(&mut g, &state.store, &state.model, &batch, obj, &mut mode)?,
        None => {
            let l = loss_erm(&mut g, &state.store, &state.model, &batch, &mut mode)?;
            let v = g.value(l)[0] as f64;
            let r = LossBreakdown {
                l_prompt: v,
                total: v,
                ..LossBreakdown::default()
            };
            (l, r)
        }
    };
    if let Some(component) = report.non_finite_component() {
        return Err(Error::NonFinite {
            component: component.to_string(),
            detail: format!("at step {}", state.step + 1),
        });
    }
    let grads = g.backward(loss)?;
    if let Some((id, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            component: format!("gradient of {}", state.store.name(id)),
            detail: format!("at step {}", state.step + 1),
        });
    }
    state.store.zero_grad();
    state.store.accumulate_grads(&grads)?;
    optimizer(cfg).step(&mut state.store, &mut state.optimizer)?;
    state.store.zero_grad();
    state.step += 1;
    Ok(report)
}
