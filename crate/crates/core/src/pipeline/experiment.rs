//! Leave-one-domain-out training runs with validation-based selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::infer::{accuracy, predict};
use super::state::ModelState;
use super::train::{apply_variant, train_step};
use crate::datagen::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{DomainBatch, LossBreakdown};

const STREAM_SPLIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Per-source train/validation indices and the held-out test indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Dataset domain of each source, ascending.
    pub sources: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn val_all(&self) -> Vec<usize> {
        self.val.concat()
    }

    pub fn train_all(&self) -> Vec<usize> {
        self.train.concat()
    }
}

/// Holds out `target`; each source domain keeps `val_fraction` of its images
/// (at least one, never all) for validation.
pub fn split_sources(
    ds: &SyntheticDataset,
    target: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if target >= ds.num_domains {
        return Err(Error::Config(format!(
            "target domain {target} out of range for {} domains",
            ds.num_domains
        )));
    }
    let mut rng = stream(seed, STREAM_SPLIT);
    let sources: Vec<usize> = (0..ds.num_domains).filter(|&d| d != target).collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &d in &sources {
        let mut idx = ds.domain_indices(d);
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "source domain {d} has {} images; need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let nv = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.push(idx[..nv].to_vec());
        train.push(idx[nv..].to_vec());
    }
    Ok(Split {
        sources,
        train,
        val,
        test: ds.domain_indices(target),
    })
}

/// Cycles through each source's indices in freshly shuffled epochs.
pub struct DomainSampler {
    pools: Vec<Vec<usize>>,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rng: ChaCha8Rng,
}

impl DomainSampler {
    pub fn new(pools: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if pools.iter().any(Vec::is_empty) {
            return Err(Error::Config("a source domain has no training images".into()));
        }
        let n = pools.len();
        Ok(DomainSampler {
            order: vec![Vec::new(); n],
            cursor: vec![0; n],
            pools,
            rng: stream(seed, STREAM_SAMPLER),
        })
    }

    /// `count` indices from source `k`.
    pub fn draw(&mut self, k: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor[k] == self.order[k].len() {
                self.order[k] = self.pools[k].clone();
                self.order[k].shuffle(&mut self.rng);
                self.cursor[k] = 0;
            }
            out.push(self.order[k][self.cursor[k]]);
            self.cursor[k] += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub step: u64,
    pub val_acc: f64,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// State at the selected step.
    pub best: ModelState,
    pub chosen_step: u64,
    pub val_acc: f64,
    pub history: Vec<SelectionPoint>,
    pub losses: Vec<LossBreakdown>,
}

/// Model layout for `cfg` on `ds` with `k` source domains.
pub fn model_config(cfg: &RunConfig, ds: &SyntheticDataset, prompt_len: usize, k: usize) -> ModelConfig {
    ModelConfig {
        vit: cfg.vit_config(ds.channels, ds.num_classes),
        prompt_len,
        num_domains: k,
        adapter_hidden: cfg.adapter_hidden,
    }
}

/// Trains on per-source index pools and keeps the state with the best pooled
/// validation accuracy, checked every `eval_interval` steps and at the end.
/// Ties keep the earliest step.
pub fn fit(
    ds: &SyntheticDataset,
    sources: &[usize],
    train: &[Vec<usize>],
    val: &[usize],
    cfg: &RunConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let k = sources.len();
    if k == 0 {
        return Err(Error::Config("no source domains".into()));
    }
    if cfg.variant.uses_adapter() && k < 2 {
        return Err(Error::Config(format!(
            "variant {} needs at least 2 source domains, got {k}",
            cfg.variant
        )));
    }
    if train.len() != k {
        return Err(Error::Contract(format!("{} train pools for {k} sources", train.len())));
    }
    let mut source_of = vec![None; ds.num_domains];
    for (i, &d) in sources.iter().enumerate() {
        *source_of
            .get_mut(d)
            .ok_or_else(|| Error::Config(format!("source domain {d} not in dataset")))? = Some(i);
    }
    let mcfg = model_config(cfg, ds, t.prompt_len, k);
    let mut state = ModelState::init(mcfg, sources.to_vec(), t.seed)?;
    apply_variant(&mut state, cfg.variant);
    let mut sampler = DomainSampler::new(train.to_vec(), t.seed)?;
    let mut dropout_rng = stream(t.seed, STREAM_DROPOUT);
    let val_images = ds.images_tensor(val)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| ds.labels[i]).collect();
    let evaluate = |s: &ModelState| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let logits = predict(s, &val_images, cfg.variant, cfg.eval_batch)?;
        Ok(accuracy(&logits, &val_labels))
    };

    let mut losses = Vec::with_capacity(t.steps as usize);
    let mut history = Vec::new();
    let mut best: Option<(ModelState, f64)> = None;
    for step in 1..=t.steps {
        let batches = (0..k)
            .map(|i| ds.batch(&sampler.draw(i, t.batch_size), &source_of))
            .collect::<Result<Vec<DomainBatch>>>()?;
        let report = train_step(&mut state, &batches, cfg.variant, t, &mut dropout_rng)?;
        losses.push(report);
        if step % t.eval_interval == 0 || step == t.steps {
            let acc = evaluate(&state)?;
            log::info!(
                "{} step {step}: loss {:.4} val_acc {:.4}",
                cfg.variant,
                report.total,
                acc
            );
            history.push(SelectionPoint { step, val_acc: acc });
            if best.as_ref().is_none_or(|(_, b)| acc > *b) {
                best = Some((state.clone(), acc));
            }
        }
    }
    let (best, val_acc) = best.expect("at least one evaluation runs");
    Ok(FitOutcome {
        chosen_step: best.step,
        best,
        val_acc,
        history,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub target_domain: usize,
    pub seed: u64,
    pub chosen_step: u64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub loss_curve_csv_path: String,
    pub val_fraction: f64,
    pub prompt_len: usize,
    pub lambda: f64,
    pub steps: u64,
    pub selection: Vec<SelectionPoint>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: RunReport,
    pub fit: FitOutcome,
    pub split: Split,
}

/// Trains on every domain except `cfg.target_domain` and scores the selected
/// state on the held-out domain.
pub fn run_experiment(ds: &SyntheticDataset, cfg: &RunConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let split = split_sources(ds, cfg.target_domain, cfg.val_fraction, cfg.train.seed)?;
    let fit = fit(ds, &split.sources, &split.train, &split.val_all(), cfg)?;
    let test_images = ds.images_tensor(&split.test)?;
    let test_labels: Vec<usize> = split.test.iter().map(|&i| ds.labels[i]).collect();
    let logits = predict(&fit.best, &test_images, cfg.variant, cfg.eval_batch)?;
    let report = RunReport {
        variant: cfg.variant,
        target_domain: cfg.target_domain,
        seed: cfg.train.seed,
        chosen_step: fit.chosen_step,
        val_acc: fit.val_acc,
        test_acc: accuracy(&logits, &test_labels),
        loss_curve_csv_path: "loss.csv".into(),
        val_fraction: cfg.val_fraction,
        prompt_len: cfg.train.prompt_len,
        lambda: cfg.train.lambda,
        steps: cfg.train.steps,
        selection: fit.history.clone(),
    };
    Ok(ExperimentOutcome { report, fit, split })
}

pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from(LossBreakdown::csv_header());
    s.push('\n');
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&l.csv_row(i as u64 + 1));
        s.push('\n');
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `model.dpt`, `loss.csv`, `report.json`, and `config.txt` into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.fit.best.save(&dir.join("model.dpt"))?;
    write(&dir.join("loss.csv"), loss_csv(&outcome.fit.losses).as_bytes())?;
    let json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| Error::format(dir.join("report.json"), e.to_string()))?;
    write(&dir.join("report.json"), format!("{json}\n").as_bytes())?;
    write(&dir.join("config.txt"), cfg.to_text().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = generate_dataset(3, 20, 0).unwrap();
        let s = split_sources(&ds, 1, 0.2, 7).unwrap();
        assert_eq!(s.sources, vec![0, 2]);
        assert_eq!(s.val[0].len(), 4);
        assert_eq!(s.train[0].len(), 16);
        let mut all = s.train_all();
        all.extend(s.val_all());
        all.extend(&s.test);
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(split_sources(&ds, 1, 0.2, 7).unwrap(), s);
        assert_ne!(split_sources(&ds, 1, 0.2, 8).unwrap(), s);
        assert!(split_sources(&ds, 3, 0.2, 7).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = DomainSampler::new(vec![vec![1, 2, 3], vec![7, 8]], 0).unwrap();
        let mut a = s.draw(0, 3);
        a.sort_unstable();
        assert_eq!(a, vec![1, 2, 3]);
        let b = s.draw(1, 4);
        assert_eq!(b.iter().filter(|&&i| i == 7).count(), 2);
        assert!(DomainSampler::new(vec![vec![]], 0).is_err());
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let l = LossBreakdown {
            l_prompt: 1.0,
            l_w: 0.5,
            l_adapt: 2.0,
            lambda: 1.0,
            total: 3.5,
        };
        assert_eq!(loss_csv(&[l]), "step,l_prompt,l_w,l_adapt,total\n1,1,0.5,2,3.5\n");
    }
}
