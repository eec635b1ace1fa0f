//! Gradient-free prediction paths.

use super::config::Variant;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::objectives::{adapter_weights, prepare};
use crate::prompting::compose_adapted_prompts;
use crate::tensor::{Graph, Real, Tensor};
use crate::vit::Mode;

/// Default number of images per inference chunk.
pub const EVAL_CHUNK: usize = 64;

/// Adapted-prompt predictions with the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    /// `[N, C]`
    pub logits: Tensor,
    /// `[N, L, K]`
    pub weights: Tensor,
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec())
}

fn stack(parts: Vec<Tensor>, tail: &[usize]) -> Result<Tensor> {
    let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * tail.iter().product::<usize>());
    for p in parts {
        data.extend(p.into_data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

fn check_images(state: &ModelState, images: &Tensor) -> Result<()> {
    let v = &state.model.config.vit;
    let want = [v.channels, v.image_size, v.image_size];
    if images.shape().len() != 4 || images.shape()[1..] != want {
        return Err(Error::shape(
            "infer",
            format!("images {:?}, expected [N, {}, {}, {}]", images.shape(), want[0], want[1], want[2]),
        ));
    }
    Ok(())
}

/// Runs `f` on consecutive chunks of at most `chunk` images.
fn chunked<F>(images: &Tensor, chunk: usize, mut f: F) -> Result<()>
where
    F: FnMut(&Tensor) -> Result<()>,
{
    let n = images.shape()[0];
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        f(&rows(images, start, len)?)?;
        start += len;
    }
    Ok(())
}

/// Two passes: the prompt-free feature drives the adapter, whose weights
/// compose the prompts for the second pass.
pub fn infer(state: &ModelState, images: &Tensor, chunk: usize) -> Result<Adapted> {
    check_images(state, images)?;
    let (m, s) = (&state.model, &state.store);
    let (mut logits, mut weights) = (Vec::new(), Vec::new());
    chunked(images, chunk, |x| {
        let mut g = Graph::inference();
        let mut mode = Mode::Eval;
        let prep = prepare(&mut g, s, m, x)?;
        let w = adapter_weights(&mut g, s, m, prep, &mut mode)?;
        let p = compose_adapted_prompts(&mut g, prep.bank, w)?;
        let f = m.vit.encode(&mut g, s, prep.tokens, Some(p), &mut mode)?;
        let y = m.vit.classify(&mut g, s, f)?;
        logits.push(g.to_tensor(y));
        weights.push(g.to_tensor(w));
        Ok(())
    })?;
    let c = &m.config;
    Ok(Adapted {
        logits: stack(logits, &[c.vit.num_classes])?,
        weights: stack(weights, &[c.prompt_len, c.num_domains])?,
    })
}

/// Logits with every image forwarded under source domain `d`'s prompts.
pub fn infer_with_domain_prompt(
    state: &ModelState,
    images: &Tensor,
    d: usize,
    chunk: usize,
) -> Result<Tensor> {
    check_images(state, images)?;
    let (m, s) = (&state.model, &state.store);
    let mut out = Vec::new();
    chunked(images, chunk, |x| {
        let mut g = Graph::inference();
        let prep = prepare(&mut g, s, m, x)?;
        let p = m.bank.batch_prompts(&mut g, prep.bank, d, x.shape()[0])?;
        let f = m.vit.encode(&mut g, s, prep.tokens, Some(p), &mut Mode::Eval)?;
        let y = m.vit.classify(&mut g, s, f)?;
        out.push(g.to_tensor(y));
        Ok(())
    })?;
    stack(out, &[m.config.vit.num_classes])
}

/// Mean of the per-domain-prompt logits over all source domains.
pub fn infer_prompt_averaged(state: &ModelState, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let k = state.model.config.num_domains;
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for d in 0..k {
        let l = infer_with_domain_prompt(state, images, d, chunk)?;
        shape = l.shape().to_vec();
        let a = acc.get_or_insert_with(|| vec![0.0; l.numel()]);
        for (s, v) in a.iter_mut().zip(l.data()) {
            *s += *v as f64;
        }
    }
    let data = acc
        .unwrap_or_default()
        .into_iter()
        .map(|s| (s / k as f64) as Real)
        .collect();
    Tensor::new(shape, data)
}

/// Logits without any prompt tokens.
pub fn infer_plain(state: &ModelState, images: &Tensor, chunk: usize) -> Result<Tensor> {
    check_images(state, images)?;
    let (m, s) = (&state.model, &state.store);
    let mut out = Vec::new();
    chunked(images, chunk, |x| {
        let mut g = Graph::inference();
        let img = g.leaf(x);
        let (_, y) = m.vit.forward(&mut g, s, img, None, &mut Mode::Eval)?;
        out.push(g.to_tensor(y));
        Ok(())
    })?;
    stack(out, &[m.config.vit.num_classes])
}

/// The prediction path a variant is evaluated with.
pub fn predict(state: &ModelState, images: &Tensor, variant: Variant, chunk: usize) -> Result<Tensor> {
    match variant {
        Variant::Erm => infer_plain(state, images, chunk),
        Variant::NoAdapter => infer_prompt_averaged(state, images, chunk),
        _ => infer(state, images, chunk).map(|a| a.logits),
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label, in `[0, 1]`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}
