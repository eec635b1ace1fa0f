#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]
mod support {
    pub mod distance;
}

use doprompt_core::analysis::{
    class_distance, cosine_dist, distance_report, domain_distance, per_prompt_accuracy_table, weight_stats_from,
};
use doprompt_core::model::ModelConfig;
use doprompt_core::pipeline::{accuracy, infer, infer_with_domain_prompt, ModelState};
use doprompt_core::tensor::{Real, Tensor};
use doprompt_core::vit::ViTConfig;
use doprompt_core::Error;
use proptest::prelude::*;
use support::distance::{flat, instance, o_class_dist, o_dist, o_in};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distances_match_brute_force(seed in 0u64..100_000, nd in 2usize..5, nc in 1usize..6, dim in 2usize..7) {
        let inst = instance(seed, nd, nc, dim);
        let by_domain: Vec<_> = inst.iter().map(|d| flat(d)).collect();
        prop_assume!(by_domain.iter().all(|d| d.len() <= 20));
        let dd = domain_distance(&by_domain).unwrap();
        let cd = class_distance(&inst).unwrap();
        for i in 0..nd {
            prop_assert!((dd.spread[i] - o_in(&by_domain[i])).abs() <= 1e-6);
            for j in 0..nd {
                let want = o_dist(&by_domain[i], &by_domain[j]);
                prop_assert!((dd.matrix[i][j] - want).abs() <= 1e-6, "{} vs {}", dd.matrix[i][j], want);
                let want = o_class_dist(&inst[i], &inst[j]);
                prop_assert!((cd.matrix[i][j] - want).abs() <= 1e-6, "{} vs {}", cd.matrix[i][j], want);
            }
        }
    }

    #[test]
    fn distances_are_scale_invariant_and_symmetric(seed in 0u64..100_000, scale in 1e-3f64..1e3) {
        let inst = instance(seed, 3, 4, 5);
        let scaled: Vec<Vec<Vec<Vec<f64>>>> = inst
            .iter()
            .map(|d| d.iter().map(|c| c.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect()).collect())
            .collect();
        let a = class_distance(&inst).unwrap().matrix;
        let b = class_distance(&scaled).unwrap().matrix;
        let da = domain_distance(&inst.iter().map(|d| flat(d)).collect::<Vec<_>>()).unwrap().matrix;
        let db = domain_distance(&scaled.iter().map(|d| flat(d)).collect::<Vec<_>>()).unwrap().matrix;
        for i in 0..3 {
            prop_assert!(da[i][i].abs() <= 1e-6);
            for j in 0..3 {
                prop_assert!((a[i][j] - b[i][j]).abs() <= 1e-6);
                prop_assert!((da[i][j] - db[i][j]).abs() <= 1e-6);
                prop_assert!((a[i][j] - a[j][i]).abs() <= 1e-6);
                prop_assert!((da[i][j] - da[j][i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn vector_order_does_not_matter(seed in 0u64..100_000) {
        let inst = instance(seed, 3, 2, 4);
        let mut shuffled = inst.clone();
        for d in shuffled.iter_mut() {
            for c in d.iter_mut() {
                c.reverse();
            }
            d.reverse();
        }
        shuffled.iter_mut().for_each(|d| d.reverse());
        let a = domain_distance(&inst.iter().map(|d| flat(d)).collect::<Vec<_>>()).unwrap();
        let b = domain_distance(&shuffled.iter().map(|d| flat(d)).collect::<Vec<_>>()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((a.matrix[i][j] - b.matrix[i][j]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn cosine_distance_examples() {
    assert_eq!(cosine_dist(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), 0.0);
    assert!((cosine_dist(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((cosine_dist(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() - 2.0).abs() < 1e-12);
    assert!(matches!(cosine_dist(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Contract(_))));
}

#[test]
fn single_class_collapse_is_degenerate() {
    let tight = vec![vec![1.0, 2.0]; 5];
    let loose = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    assert!(matches!(
        domain_distance(&[tight.clone(), loose.clone()]),
        Err(Error::DegenerateDomain { .. })
    ));
    assert!(matches!(
        domain_distance(&[vec![vec![1.0, 0.0]], loose]),
        Err(Error::DegenerateDomain { .. })
    ));
}

#[test]
fn thin_classes_are_skipped_with_warnings() {
    let inst = instance(4, 2, 3, 4);
    let mut thin = inst.clone();
    thin[1][2].truncate(1);
    let cd = class_distance(&thin).unwrap();
    assert_eq!(cd.classes_used[0][1], 2);
    assert!(!cd.warnings.is_empty());
    let want = (o_dist(&inst[0][0], &inst[1][0]) + o_dist(&inst[0][1], &inst[1][1])) / 2.0;
    assert!((cd.matrix[0][1] - want).abs() <= 1e-9);
}

#[test]
fn report_from_flat_rows() {
    let inst = instance(8, 2, 2, 3);
    let (mut rows, mut doms, mut labels) = (vec![], vec![], vec![]);
    for (d, dom) in inst.iter().enumerate() {
        for (c, class) in dom.iter().enumerate() {
            for v in class {
                rows.push(v.clone());
                doms.push(d);
                labels.push(c);
            }
        }
    }
    let r = distance_report(&rows, &doms, &labels, vec!["a".into(), "b".into()], 2).unwrap();
    let want = o_dist(&flat(&inst[0]), &flat(&inst[1]));
    assert!((r.mean_cross_in_ratio - want).abs() <= 1e-9);
    assert!((r.mean_class_cross_in_ratio - o_class_dist(&inst[0], &inst[1])).abs() <= 1e-9);
    assert!(matches!(
        distance_report(&rows, &doms[1..], &labels, vec!["a".into(), "b".into()], 2),
        Err(Error::Shape { .. })
    ));
}

// ---- adapter weight statistics ---------------------------------------------

#[test]
fn weight_stats_for_one_hot_and_uniform_weights() {
    let (n, l, k) = (6, 2, 3);
    let mut w = vec![0.0 as Real; n * l * k];
    for i in 0..3 {
        for j in 0..l {
            w[(i * l + j) * k + i % k] = 1.0;
        }
    }
    for i in 3..n {
        for j in 0..l {
            for d in 0..k {
                w[(i * l + j) * k + d] = 1.0 / 3.0;
            }
        }
    }
    let t = Tensor::new(vec![n, l, k], w).unwrap();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let groups = vec![
        ("onehot".to_string(), vec![0, 1, 2]),
        ("uniform".to_string(), vec![3, 4, 5]),
        ("empty".to_string(), vec![]),
    ];
    let s = weight_stats_from(&t, &groups, names).unwrap();
    assert_eq!(s.rows.len(), 2);
    for d in 0..3 {
        assert!((s.rows[0].percentage[d] - 100.0 / 3.0).abs() < 1e-9);
        assert!((s.rows[0].average[d] - 1.0 / 3.0).abs() < 1e-9);
        assert!((s.rows[1].average[d] - 1.0 / 3.0).abs() < 1e-6);
    }
    // exact ties resolve to the first source
    assert_eq!(s.rows[1].percentage, vec![100.0, 0.0, 0.0]);
}

#[test]
fn weight_stats_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, l, k) = (30, 3, 4);
    let mut w = Vec::new();
    for _ in 0..n * l {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        w.extend(raw.iter().map(|v| (v / s) as Real));
    }
    let t = Tensor::new(vec![n, l, k], w.clone()).unwrap();
    let idx: Vec<usize> = (0..n).step_by(3).collect();
    let s = weight_stats_from(&t, &[("g".into(), idx.clone())], vec!["s".into(); k]).unwrap();
    let mut pct = vec![0.0; k];
    let mut avg = vec![0.0; k];
    for &i in &idx {
        let mut m = vec![0.0; k];
        for j in 0..l {
            for d in 0..k {
                m[d] += w[(i * l + j) * k + d] as f64 / l as f64;
            }
        }
        let best = (0..k).fold(0, |b, d| if m[d] > m[b] { d } else { b });
        pct[best] += 100.0 / idx.len() as f64;
        for d in 0..k {
            avg[d] += m[d] / idx.len() as f64;
        }
    }
    for d in 0..k {
        assert!((s.rows[0].percentage[d] - pct[d]).abs() < 1e-9);
        assert!((s.rows[0].average[d] - avg[d]).abs() < 1e-9);
    }
    assert!(matches!(
        weight_stats_from(&t, &[("g".into(), vec![n])], vec!["s".into(); k]),
        Err(Error::Index(_))
    ));
}

// ---- per-prompt table --------------------------------------------------------

fn tiny_state(k: usize, seed: u64) -> ModelState {
    let config = ModelConfig {
        vit: ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
            num_classes: 3,
        },
        prompt_len: 2,
        num_domains: k,
        adapter_hidden: 0,
    };
    ModelState::init(config, (0..k).collect(), seed).unwrap()
}

fn images(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * 64).map(|_| rng.gen_range(0.0..1.0) as Real).collect();
    (Tensor::new(vec![n, 3, 8, 8], data).unwrap(), (0..n).map(|i| i % 3).collect())
}

#[test]
fn prompt_table_replays_inference() {
    let state = tiny_state(3, 1);
    let (x, y) = images(10, 2);
    let names: Vec<String> = ["p", "q", "r"].iter().map(|s| s.to_string()).collect();
    let t = per_prompt_accuracy_table(&state, &x, &y, &names, 4).unwrap();
    assert_eq!(t.columns, vec!["adapted", "p", "q", "r"]);
    assert_eq!(t.logits[0], infer(&state, &x, 7).unwrap().logits);
    for d in 0..3 {
        assert_eq!(t.logits[d + 1], infer_with_domain_prompt(&state, &x, d, 3).unwrap());
    }
    for (acc, l) in t.accuracy.iter().zip(&t.logits) {
        assert_eq!(*acc, 100.0 * accuracy(l, &y));
    }
}

#[test]
fn single_source_adapted_equals_its_prompt() {
    let state = tiny_state(1, 3);
    let (x, y) = images(6, 4);
    let t = per_prompt_accuracy_table(&state, &x, &y, &["only".into()], 6).unwrap();
    for (a, b) in t.logits[0].data().iter().zip(t.logits[1].data()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(t.accuracy[0], t.accuracy[1]);
}
