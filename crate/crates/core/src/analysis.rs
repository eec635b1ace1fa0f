//! Centroid cosine distances between domains, adapter weight statistics, and
//! per-prompt accuracy tables.

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticDataset;
use crate::error::{Error, Result};
use crate::objectives::prepare;
use crate::pipeline::{accuracy, infer, infer_with_domain_prompt, ModelState};
use crate::tensor::{Graph, Tensor};
use crate::vit::Mode;

/// Spreads below this make the normalized distance meaningless.
pub const MIN_SPREAD: f64 = 1e-9;

/// `1 - a.b / (|a| |b|)`, clamped at 0 against rounding.
pub fn cosine_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_dist", format!("{} vs {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Contract("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - ab / (aa.sqrt() * bb.sqrt())).max(0.0))
}

pub fn centroid(vs: &[Vec<f64>]) -> Vec<f64> {
    let dim = vs.first().map_or(0, Vec::len);
    let mut c = vec![0.0; dim];
    for v in vs {
        for (s, x) in c.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vs.len().max(1) as f64;
    c.iter_mut().for_each(|s| *s /= n);
    c
}

/// Mean cosine distance of each vector to the set's centroid.
pub fn in_dist(vs: &[Vec<f64>]) -> Result<f64> {
    let c = centroid(vs);
    let mut s = 0.0;
    for v in vs {
        s += cosine_dist(v, &c)?;
    }
    Ok(s / vs.len().max(1) as f64)
}

/// Centroid distance normalized by the mean of the two spreads.
fn normalized(ci: &[f64], cj: &[f64], si: f64, sj: f64) -> Result<f64> {
    Ok(cosine_dist(ci, cj)? / (0.5 * (si + sj)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDistances {
    /// Symmetric, zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// In-domain spread of each domain.
    pub spread: Vec<f64>,
}

/// Pairwise normalized centroid distances of `by_domain[d]` feature sets.
pub fn domain_distance(by_domain: &[Vec<Vec<f64>>]) -> Result<DomainDistances> {
    let n = by_domain.len();
    let mut cents = Vec::with_capacity(n);
    let mut spread = Vec::with_capacity(n);
    for (d, vs) in by_domain.iter().enumerate() {
        if vs.len() < 2 {
            return Err(Error::DegenerateDomain { domain: d, spread: 0.0 });
        }
        let s = in_dist(vs)?;
        if s < MIN_SPREAD {
            return Err(Error::DegenerateDomain { domain: d, spread: s });
        }
        cents.push(centroid(vs));
        spread.push(s);
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = normalized(&cents[i], &cents[j], spread[i], spread[j])?;
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    Ok(DomainDistances { matrix, spread })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistances {
    /// Symmetric, zero diagonal; NaN where no class was usable.
    pub matrix: Vec<Vec<f64>>,
    /// Number of classes averaged for each pair.
    pub classes_used: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

type ClassStat = (Vec<f64>, f64);

/// Mean over classes of the normalized distance between per-class subsets,
/// for features indexed `[domain][class][vector]`. A class missing from
/// either domain, or too small or too tight to normalize, is skipped for that
/// pair and the mean is taken over the remaining classes.
pub fn class_distance(by_domain_class: &[Vec<Vec<Vec<f64>>>]) -> Result<ClassDistances> {
    let n = by_domain_class.len();
    let mut warnings = Vec::new();
    // (centroid, spread) per usable (domain, class)
    let mut stats: Vec<Vec<Option<ClassStat>>> = Vec::with_capacity(n);
    for (d, classes) in by_domain_class.iter().enumerate() {
        let mut row = Vec::with_capacity(classes.len());
        for (c, vs) in classes.iter().enumerate() {
            if vs.len() < 2 {
                if !vs.is_empty() {
                    warnings.push(format!("domain {d} class {c}: one vector, skipped"));
                }
                row.push(None);
                continue;
            }
            let s = in_dist(vs)?;
            if s < MIN_SPREAD {
                warnings.push(format!("domain {d} class {c}: spread {s:e}, skipped"));
                row.push(None);
                continue;
            }
            row.push(Some((centroid(vs), s)));
        }
        stats.push(row);
    }
    let mut matrix = vec![vec![0.0; n]; n];
    let mut used = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (mut sum, mut count) = (0.0, 0);
            let nc = stats[i].len().max(stats[j].len());
            for c in 0..nc {
                let a = stats[i].get(c).and_then(Option::as_ref);
                let b = stats[j].get(c).and_then(Option::as_ref);
                match (a, b) {
                    (Some((ci, si)), Some((cj, sj))) => {
                        sum += normalized(ci, cj, *si, *sj)?;
                        count += 1;
                    }
                    _ => warnings.push(format!("pair ({i}, {j}): class {c} unavailable, skipped")),
                }
            }
            let v = if count == 0 { f64::NAN } else { sum / count as f64 };
            matrix[i][j] = v;
            matrix[j][i] = v;
            used[i][j] = count;
            used[j][i] = count;
        }
    }
    Ok(ClassDistances {
        matrix,
        classes_used: used,
        warnings,
    })
}

/// Domain and class distances with their off-diagonal means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub domain_names: Vec<String>,
    pub domain_dist: Vec<Vec<f64>>,
    pub class_dist: Vec<Vec<f64>>,
    pub spread: Vec<f64>,
    /// Mean off-diagonal domain distance; above 1 means domains sit farther
    /// apart than their members sit from their own centroid.
    pub mean_cross_in_ratio: f64,
    pub mean_class_cross_in_ratio: f64,
    pub warnings: Vec<String>,
}

fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let (mut s, mut k) = (0.0, 0);
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j && v.is_finite() {
                s += v;
                k += 1;
            }
        }
    }
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

/// Builds a report from flat rows with their domain and class labels.
pub fn distance_report(
    rows: &[Vec<f64>],
    domains: &[usize],
    labels: &[usize],
    domain_names: Vec<String>,
    num_classes: usize,
) -> Result<DistanceReport> {
    let nd = domain_names.len();
    if rows.len() != domains.len() || rows.len() != labels.len() {
        return Err(Error::shape(
            "distance_report",
            format!("{} rows, {} domains, {} labels", rows.len(), domains.len(), labels.len()),
        ));
    }
    let mut by_domain = vec![Vec::new(); nd];
    let mut by_class = vec![vec![Vec::new(); num_classes]; nd];
    for ((r, &d), &c) in rows.iter().zip(domains).zip(labels) {
        if d >= nd || c >= num_classes {
            return Err(Error::Index(format!("row labelled domain {d} class {c}")));
        }
        by_domain[d].push(r.clone());
        by_class[d][c].push(r.clone());
    }
    let dd = domain_distance(&by_domain)?;
    let cd = class_distance(&by_class)?;
    Ok(DistanceReport {
        domain_names,
        mean_cross_in_ratio: off_diagonal_mean(&dd.matrix),
        mean_class_cross_in_ratio: off_diagonal_mean(&cd.matrix),
        domain_dist: dd.matrix,
        class_dist: cd.matrix,
        spread: dd.spread,
        warnings: cd.warnings,
    })
}

/// Flattened pixels of every image.
pub fn raw_pixel_features(ds: &SyntheticDataset) -> Vec<Vec<f64>> {
    (0..ds.len())
        .map(|i| ds.image(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Prompt-free class-token features `[N, D]`, the adapter's input.
pub fn prompt_free_features(state: &ModelState, images: &Tensor, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let per: usize = images.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(n);
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = len;
        let x = Tensor::new(shape, images.data()[start * per..(start + len) * per].to_vec())?;
        let mut g = Graph::inference();
        let prep = prepare(&mut g, &state.store, &state.model, &x)?;
        let f = state
            .model
            .vit
            .encode(&mut g, &state.store, prep.tokens, None, &mut Mode::Eval)?;
        let d = g.shape(f)[1];
        out.extend(g.value(f).chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub domain: String,
    pub samples: usize,
    /// Share of samples (percent) whose largest position-averaged weight
    /// falls on each source domain.
    pub percentage: Vec<f64>,
    /// Mean position-averaged weight per source domain.
    pub average: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeightStats {
    pub source_names: Vec<String>,
    pub rows: Vec<WeightRow>,
}

/// Statistics over `weights: [N, L, K]` for named groups of row indices.
/// Each sample's weights are first averaged over the `L` positions; argmax
/// ties go to the lowest source index. Empty groups are skipped.
pub fn weight_stats_from(
    weights: &Tensor,
    groups: &[(String, Vec<usize>)],
    source_names: Vec<String>,
) -> Result<AdapterWeightStats> {
    let s = weights.shape();
    if s.len() != 3 || s[2] != source_names.len() {
        return Err(Error::shape(
            "adapter_weight_stats",
            format!("weights {s:?} for {} sources", source_names.len()),
        ));
    }
    let (n, l, k) = (s[0], s[1], s[2]);
    let w = weights.data();
    let mut rows = Vec::new();
    for (name, idx) in groups {
        if idx.is_empty() {
            continue;
        }
        let mut count = vec![0usize; k];
        let mut total = vec![0.0f64; k];
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("sample {i} of {n}")));
            }
            let mut avg = vec![0.0f64; k];
            for j in 0..l {
                for (d, a) in avg.iter_mut().enumerate() {
                    *a += w[(i * l + j) * k + d] as f64;
                }
            }
            avg.iter_mut().for_each(|a| *a /= l as f64);
            let mut best = 0;
            for d in 1..k {
                if avg[d] > avg[best] {
                    best = d;
                }
            }
            count[best] += 1;
            for (t, a) in total.iter_mut().zip(&avg) {
                *t += a;
            }
        }
        let m = idx.len() as f64;
        rows.push(WeightRow {
            domain: name.clone(),
            samples: idx.len(),
            percentage: count.iter().map(|&c| 100.0 * c as f64 / m).collect(),
            average: total.iter().map(|t| t / m).collect(),
        });
    }
    Ok(AdapterWeightStats { source_names, rows })
}

/// Adapter statistics for the images of each dataset domain in `domains`
/// (or of explicit index lists), using the same weights as inference.
pub fn adapter_weight_stats(
    state: &ModelState,
    ds: &SyntheticDataset,
    groups: &[(String, Vec<usize>)],
    chunk: usize,
) -> Result<AdapterWeightStats> {
    let all: Vec<usize> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let adapted = infer(state, &ds.images_tensor(&all)?, chunk)?;
    let mut offset = 0;
    let local: Vec<(String, Vec<usize>)> = groups
        .iter()
        .map(|(name, v)| {
            let r = (offset..offset + v.len()).collect();
            offset += v.len();
            (name.clone(), r)
        })
        .collect();
    let names = state.sources.iter().map(|&d| ds.domain_name(d)).collect();
    weight_stats_from(&adapted.weights, &local, names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTable {
    /// `adapted` followed by one column per source prompt.
    pub columns: Vec<String>,
    /// Accuracy in percent per column.
    pub accuracy: Vec<f64>,
    #[serde(skip)]
    pub logits: Vec<Tensor>,
}

/// Held-out accuracy of the adapted prompt and of each single source prompt.
pub fn per_prompt_accuracy_table(
    state: &ModelState,
    images: &Tensor,
    labels: &[usize],
    source_names: &[String],
    chunk: usize,
) -> Result<PromptTable> {
    let mut columns = vec!["adapted".to_string()];
    let mut logits = vec![infer(state, images, chunk)?.logits];
    for d in 0..state.model.config.num_domains {
        columns.push(
            source_names
                .get(d)
                .cloned()
                .unwrap_or_else(|| format!("prompt{d}")),
        );
        logits.push(infer_with_domain_prompt(state, images, d, chunk)?);
    }
    let accuracy = logits.iter().map(|l| 100.0 * accuracy(l, labels)).collect();
    Ok(PromptTable {
        columns,
        accuracy,
        logits,
    })
}

/// One CSV matrix with a header row and row labels.
pub fn matrix_csv(names: &[String], m: &[Vec<f64>]) -> String {
    let mut s = format!("domain,{}\n", names.join(","));
    for (name, row) in names.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    s
}

/// Right-aligned text table.
pub fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = (0..cols)
            .map(|i| {
                let c = cells.get(i).map(String::as_str).unwrap_or("");
                if i == 0 {
                    format!("{c:<w$}", w = width[0])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut s = line(header);
    s.push('\n');
    s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Domain distance and class distance matrices side by side.
pub fn distance_text(r: &DistanceReport) -> String {
    let mut header = vec!["domain".to_string()];
    header.extend(r.domain_names.iter().cloned());
    let fmt = |m: &[Vec<f64>]| -> Vec<Vec<String>> {
        r.domain_names
            .iter()
            .zip(m)
            .map(|(n, row)| {
                let mut cells = vec![n.clone()];
                cells.extend(row.iter().map(|v| format!("{v:.3}")));
                cells
            })
            .collect()
    };
    format!(
        "domain distance (cross/in ratio, mean {:.3})\n{}\nclass distance (mean {:.3})\n{}",
        r.mean_cross_in_ratio,
        text_table(&header, &fmt(&r.domain_dist)),
        r.mean_class_cross_in_ratio,
        text_table(&header, &fmt(&r.class_dist)),
    )
}

pub fn weights_text(s: &AdapterWeightStats) -> String {
    let mut header = vec!["domain".to_string()];
    header.extend(s.source_names.iter().map(|n| format!("%{n}")));
    header.extend(s.source_names.iter().map(|n| format!("avg {n}")));
    let rows: Vec<Vec<String>> = s
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.domain.clone()];
            cells.extend(r.percentage.iter().map(|v| format!("{v:.1}")));
            cells.extend(r.average.iter().map(|v| format!("{v:.3}")));
            cells
        })
        .collect();
    text_table(&header, &rows)
}

pub fn prompt_table_text(t: &PromptTable) -> String {
    let cells = vec![t.accuracy.iter().map(|v| format!("{v:.1}")).collect()];
    text_table(&t.columns, &cells)
}
