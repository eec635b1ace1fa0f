//! Loop-by-loop transcription of the domain and class distance definitions,
//! and random instances for it.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn o_cos(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for i in 0..x.len() {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    1.0 - dot / (nx.sqrt() * ny.sqrt())
}

pub fn o_cent(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; vs[0].len()];
    for v in vs {
        for i in 0..c.len() {
            c[i] += v[i];
        }
    }
    for x in c.iter_mut() {
        *x /= vs.len() as f64;
    }
    c
}

pub fn o_in(vs: &[Vec<f64>]) -> f64 {
    let c = o_cent(vs);
    let mut s = 0.0;
    for v in vs {
        s += o_cos(v, &c);
    }
    s / vs.len() as f64
}

pub fn o_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    o_cos(&o_cent(a), &o_cent(b)) / (0.5 * (o_in(a) + o_in(b)))
}

pub fn o_class_dist(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for c in 0..a.len() {
        s += o_dist(&a[c], &b[c]);
        n += 1;
    }
    s / n as f64
}

/// Domains of per-class vectors with every class holding at least two.
pub fn instance(seed: u64, domains: usize, classes: usize, dim: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..domains)
        .map(|d| {
            let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..classes)
                .map(|_| {
                    let n = rng.gen_range(2..=20 / classes);
                    (0..n)
                        .map(|_| {
                            shift
                                .iter()
                                .map(|s| s * (1.0 + d as f64) + rng.gen_range(-0.8..0.8))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn flat(domain: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    domain.iter().flatten().cloned().collect()
}
