use std::path::{Path, PathBuf};

use doprompt_core::analysis::{
    adapter_weight_stats, distance_report, distance_text, matrix_csv, per_prompt_accuracy_table,
    prompt_free_features, prompt_table_text, raw_pixel_features, text_table, weights_text,
};
use doprompt_core::datagen::{generate_dataset, load_dataset, save_cache, save_raw_dir, SyntheticDataset};
use doprompt_core::pipeline::{
    accuracy, predict, run_experiment, split_sources, write_artifacts, ModelState, RunConfig, Variant,
};
use doprompt_core::{Error, Result};
use serde_json::json;

use crate::runner::{run_jobs, Grid};
use crate::{AnalyzeMode, Command, Common, FeatureKind};

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { common, raw } => gen_data(&common, raw),
        Command::Train { common } => train(&common),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Ablate { common } => ablate(&common),
        Command::SweepLength { common, lengths } => sweep_length(&common, lengths),
        Command::Analyze {
            common,
            mode,
            checkpoint,
            features,
        } => analyze(&common, mode, checkpoint.as_deref(), features),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            RunConfig::from_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(common: &Common, cfg: &RunConfig) -> Result<SyntheticDataset> {
    let ds = match &common.data {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(cfg.num_domains, cfg.per_domain_count, cfg.data_seed)?,
    };
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn out_root() -> PathBuf {
    std::env::var_os("DOPROMPT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| out_root().join(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write(path, &format!("{s}\n"))
}

fn domain_names(ds: &SyntheticDataset) -> Vec<String> {
    (0..ds.num_domains).map(|d| ds.domain_name(d)).collect()
}

fn gen_data(common: &Common, raw: bool) -> Result<u8> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.data_seed = seed;
    }
    let ds = generate_dataset(cfg.num_domains, cfg.per_domain_count, cfg.data_seed)?;
    let default = if raw { "data" } else { "data.dpd" };
    let path = out_dir(common, default);
    if raw {
        save_raw_dir(&ds, &path)?;
    } else {
        if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
        }
        save_cache(&ds, &path)?;
    }
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let header = vec!["domain".to_string(), "images".into(), "per class".into()];
    let rows: Vec<Vec<String>> = (0..ds.num_domains)
        .map(|d| {
            let h = ds.class_histogram(d);
            vec![
                ds.domain_name(d),
                h.iter().sum::<usize>().to_string(),
                h.iter().map(usize::to_string).collect::<Vec<_>>().join("/"),
            ]
        })
        .collect();
    print!("{}", text_table(&header, &rows));
    println!("wrote {}", path.display());
    Ok(0)
}

fn train(common: &Common) -> Result<u8> {
    let cfg = load_config(common)?;
    let ds = load_data(common, &cfg)?;
    let dir = out_dir(
        common,
        &format!("train/{}-t{}-s{}", cfg.variant, cfg.target_domain, cfg.train.seed),
    );
    let outcome = run_experiment(&ds, &cfg)?;
    write_artifacts(&outcome, &cfg, &dir)?;
    let r = &outcome.report;
    println!(
        "{} target {} ({}) seed {}: val {:.2}% test {:.2}% at step {}",
        r.variant,
        r.target_domain,
        ds.domain_name(r.target_domain),
        r.seed,
        100.0 * r.val_acc,
        100.0 * r.test_acc,
        r.chosen_step
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

fn eval(common: &Common, checkpoint: &Path) -> Result<u8> {
    let cfg = load_config(common)?;
    let ds = load_data(common, &cfg)?;
    let state = ModelState::load(checkpoint)?;
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for d in 0..ds.num_domains {
        let idx = ds.domain_indices(d);
        if idx.is_empty() {
            continue;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let logits = predict(&state, &ds.images_tensor(&idx)?, cfg.variant, cfg.eval_batch)?;
        let acc = 100.0 * accuracy(&logits, &labels);
        let role = if state.sources.contains(&d) { "source" } else { "target" };
        rows.push(vec![ds.domain_name(d), role.into(), format!("{acc:.2}")]);
        entries.push(json!({"domain": ds.domain_name(d), "role": role, "accuracy": acc}));
    }
    print!(
        "{}",
        text_table(&["domain".into(), "role".into(), "acc %".into()], &rows)
    );
    if let Some(dir) = &common.out {
        write_json(
            &dir.join("eval.json"),
            &json!({"variant": cfg.variant.as_str(), "domains": entries}),
        )?;
    }
    Ok(0)
}

struct RunJob {
    row: usize,
    target: usize,
    seed_index: usize,
    cfg: RunConfig,
    dir: PathBuf,
}

struct RunResult {
    test_acc: f64,
    error: Option<(u8, String)>,
}

/// Runs every job, writing artifacts into each job's directory. Failed runs
/// yield NaN and their error.
fn execute(jobs: Vec<RunJob>, ds: &SyntheticDataset, workers: usize) -> Vec<(RunJob, RunResult)> {
    let jobs_meta: Vec<_> = jobs
        .iter()
        .map(|j| (j.row, j.target, j.seed_index, j.cfg.clone(), j.dir.clone()))
        .collect();
    let results = run_jobs(jobs, workers, |_, job| {
        let res = run_experiment(ds, &job.cfg)
            .and_then(|o| write_artifacts(&o, &job.cfg, &job.dir).map(|_| o.report.test_acc));
        match res {
            Ok(acc) => {
                eprintln!(
                    "{} target {} seed {}: {:.2}%",
                    job.cfg.variant,
                    job.target,
                    job.cfg.train.seed,
                    100.0 * acc
                );
                RunResult {
                    test_acc: 100.0 * acc,
                    error: None,
                }
            }
            Err(e) => {
                eprintln!(
                    "error: {} target {} seed {}: {e}",
                    job.cfg.variant, job.target, job.cfg.train.seed
                );
                RunResult {
                    test_acc: f64::NAN,
                    error: Some((crate::exit_code(&e), e.to_string())),
                }
            }
        }
    });
    jobs_meta
        .into_iter()
        .zip(results)
        .map(|((row, target, seed_index, cfg, dir), r)| {
            (
                RunJob {
                    row,
                    target,
                    seed_index,
                    cfg,
                    dir,
                },
                r,
            )
        })
        .collect()
}

/// Where a grid summary goes: directory, file stem, and row header.
struct SummaryOut<'a> {
    dir: &'a Path,
    stem: &'a str,
    first: &'a str,
}

/// Fills a grid from finished runs and writes CSV, text, and JSON summaries.
fn summarize(
    done: &[(RunJob, RunResult)],
    row_names: Vec<String>,
    targets: &[usize],
    seeds: usize,
    ds: &SyntheticDataset,
    out: SummaryOut,
) -> Result<u8> {
    let SummaryOut { dir, stem, first } = out;
    let mut values = vec![vec![vec![f64::NAN; seeds]; targets.len()]; row_names.len()];
    let mut runs = Vec::new();
    let mut code = 0;
    for (job, r) in done {
        let t = targets.iter().position(|&t| t == job.target).expect("target listed");
        values[job.row][t][job.seed_index] = r.test_acc;
        if let Some((c, _)) = &r.error {
            if code == 0 {
                code = *c;
            }
        }
        runs.push(json!({
            first: row_names[job.row],
            "target_domain": job.target,
            "seed": job.cfg.train.seed,
            "test_acc": if r.test_acc.is_nan() { serde_json::Value::Null } else { json!(r.test_acc) },
            "error": r.error.as_ref().map(|(_, m)| m.clone()),
            "dir": job.dir.strip_prefix(dir).unwrap_or(&job.dir).display().to_string(),
        }));
    }
    let grid = Grid {
        row_names,
        target_names: targets.iter().map(|&t| ds.domain_name(t)).collect(),
        values,
    };
    write(&dir.join(format!("{stem}.csv")), &grid.csv(first))?;
    let text = grid.text(first);
    write(&dir.join(format!("{stem}.txt")), &text)?;
    write_json(&dir.join(format!("{stem}.json")), &json!({ "runs": runs }))?;
    print!("{text}");
    println!("wrote {}", dir.join(format!("{stem}.csv")).display());
    Ok(code)
}

fn check_targets(targets: &[usize], ds: &SyntheticDataset) -> Result<()> {
    match targets.iter().find(|&&t| t >= ds.num_domains) {
        Some(t) => Err(Error::Config(format!(
            "target domain {t} out of range for {} domains",
            ds.num_domains
        ))),
        None => Ok(()),
    }
}

fn ablate(common: &Common) -> Result<u8> {
    let cfg = load_config(common)?;
    let ds = load_data(common, &cfg)?;
    let dir = out_dir(common, "ablate");
    let targets = cfg.target_list(ds.num_domains);
    check_targets(&targets, &ds)?;
    let seeds = cfg.seed_list();
    let mut jobs = Vec::new();
    for (row, v) in Variant::ALL.into_iter().enumerate() {
        for &t in &targets {
            for (si, &seed) in seeds.iter().enumerate() {
                let mut c = cfg.clone();
                c.variant = v;
                c.target_domain = t;
                c.train.seed = seed;
                jobs.push(RunJob {
                    row,
                    target: t,
                    seed_index: si,
                    dir: dir.join(v.as_str()).join(format!("t{t}-s{seed}")),
                    cfg: c,
                });
            }
        }
    }
    let done = execute(jobs, &ds, common.workers);
    let rows = Variant::ALL.iter().map(|v| v.to_string()).collect();
    summarize(&done, rows, &targets, seeds.len(), &ds, SummaryOut { dir: &dir, stem: "ablation", first: "variant" })
}

fn sweep_length(common: &Common, lengths: Vec<usize>) -> Result<u8> {
    let mut cfg = load_config(common)?;
    if !lengths.is_empty() {
        cfg.lengths = lengths;
    }
    cfg.validate()?;
    let ds = load_data(common, &cfg)?;
    let dir = out_dir(common, "sweep");
    let targets = cfg.target_list(ds.num_domains);
    check_targets(&targets, &ds)?;
    let seeds = cfg.seed_list();
    let mut jobs = Vec::new();
    for (row, &len) in cfg.lengths.iter().enumerate() {
        for &t in &targets {
            for (si, &seed) in seeds.iter().enumerate() {
                let mut c = cfg.clone();
                c.train.prompt_len = len;
                c.target_domain = t;
                c.train.seed = seed;
                jobs.push(RunJob {
                    row,
                    target: t,
                    seed_index: si,
                    dir: dir.join(format!("L{len}")).join(format!("t{t}-s{seed}")),
                    cfg: c,
                });
            }
        }
    }
    let done = execute(jobs, &ds, common.workers);
    let rows = cfg.lengths.iter().map(usize::to_string).collect();
    summarize(&done, rows, &targets, seeds.len(), &ds, SummaryOut { dir: &dir, stem: "sweep", first: "L" })
}

fn held_out(state: &ModelState, ds: &SyntheticDataset, cfg: &RunConfig) -> usize {
    (0..ds.num_domains)
        .find(|d| !state.sources.contains(d))
        .unwrap_or(cfg.target_domain)
}

fn analyze(
    common: &Common,
    mode: AnalyzeMode,
    checkpoint: Option<&Path>,
    features: FeatureKind,
) -> Result<u8> {
    let cfg = load_config(common)?;
    let ds = load_data(common, &cfg)?;
    let dir = out_dir(common, "analyze");
    let state = checkpoint.map(ModelState::load).transpose()?;
    let need_state = || {
        state
            .as_ref()
            .ok_or_else(|| Error::Config("this mode needs --checkpoint".into()))
    };
    match mode {
        AnalyzeMode::Distance => {
            let rows = match features {
                FeatureKind::Raw => raw_pixel_features(&ds),
                FeatureKind::Model => {
                    let all: Vec<usize> = (0..ds.len()).collect();
                    prompt_free_features(need_state()?, &ds.images_tensor(&all)?, cfg.eval_batch)?
                }
            };
            let names = domain_names(&ds);
            let report = distance_report(&rows, &ds.domains, &ds.labels, names.clone(), ds.num_classes)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            write(&dir.join("domain_dist.csv"), &matrix_csv(&names, &report.domain_dist))?;
            write(&dir.join("class_dist.csv"), &matrix_csv(&names, &report.class_dist))?;
            write_json(&dir.join("distance.json"), &json!(report))?;
            print!("{}", distance_text(&report));
        }
        AnalyzeMode::Weights => {
            let state = need_state()?;
            let target = held_out(state, &ds, &cfg);
            let split = split_sources(&ds, target, cfg.val_fraction, cfg.train.seed)?;
            let mut groups: Vec<(String, Vec<usize>)> = split
                .sources
                .iter()
                .zip(&split.val)
                .map(|(&d, v)| (ds.domain_name(d), v.clone()))
                .collect();
            if !state.sources.contains(&target) {
                groups.push((ds.domain_name(target), split.test.clone()));
            }
            let stats = adapter_weight_stats(state, &ds, &groups, cfg.eval_batch)?;
            let mut csv = format!(
                "domain,{},{}\n",
                stats.source_names.iter().map(|n| format!("pct_{n}")).collect::<Vec<_>>().join(","),
                stats.source_names.iter().map(|n| format!("avg_{n}")).collect::<Vec<_>>().join(",")
            );
            for r in &stats.rows {
                let p: Vec<String> = r.percentage.iter().map(|v| format!("{v:.4}")).collect();
                let a: Vec<String> = r.average.iter().map(|v| format!("{v:.6}")).collect();
                csv.push_str(&format!("{},{},{}\n", r.domain, p.join(","), a.join(",")));
            }
            write(&dir.join("weights.csv"), &csv)?;
            write_json(&dir.join("weights.json"), &json!(stats))?;
            print!("{}", weights_text(&stats));
        }
        AnalyzeMode::PromptTable => {
            let state = need_state()?;
            let target = held_out(state, &ds, &cfg);
            let idx = ds.domain_indices(target);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let names: Vec<String> = state.sources.iter().map(|&d| ds.domain_name(d)).collect();
            let table =
                per_prompt_accuracy_table(state, &ds.images_tensor(&idx)?, &labels, &names, cfg.eval_batch)?;
            let cells: Vec<String> = table.accuracy.iter().map(|v| format!("{v:.4}")).collect();
            write(
                &dir.join("prompt_table.csv"),
                &format!("target,{}\n{},{}\n", table.columns.join(","), ds.domain_name(target), cells.join(",")),
            )?;
            write_json(
                &dir.join("prompt_table.json"),
                &json!({"target": ds.domain_name(target), "table": table}),
            )?;
            print!("{}", prompt_table_text(&table));
        }
    }
    println!("wrote {}", dir.display());
    Ok(0)
}
