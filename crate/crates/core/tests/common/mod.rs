//! Straight-line reference implementations shared by the integration tests.
//! Nothing here calls into the library's scoring or ranking code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scan_core::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// One random scoring instance: `k` regions, `n` words, width `h`.
pub struct Instance {
    pub v: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn instances(seed: u64, count: usize) -> Vec<Instance> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let k = r.random_range(1..=8);
            let n = r.random_range(1..=10);
            let h = r.random_range(4..=16);
            Instance {
                v: random_rows(&mut r, k, h),
                e: random_rows(&mut r, n, h),
                lambda1: r.random_range(1.0..20.0),
                lambda2: r.random_range(1.0..20.0),
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dir {
    ImageText,
    TextImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Lse,
    Avg,
    Sum,
    Max,
}

/// Stacked cross attention written out index by index.
pub fn naive_scan(v: &[Vec<f64>], e: &[Vec<f64>], dir: Dir, pool: Pool, l1: f64, l2: f64) -> f64 {
    let k = v.len();
    let n = e.len();
    let mut s = vec![vec![0.0; n]; k];
    for i in 0..k {
        for j in 0..n {
            s[i][j] = cos(&v[i], &e[j]);
        }
    }
    let mut rel = Vec::new();
    match dir {
        Dir::ImageText => {
            // normalize each word's column over regions
            let mut sbar = vec![vec![0.0; n]; k];
            for j in 0..n {
                let mut ss = 0.0;
                for i in 0..k {
                    let c = if s[i][j] > 0.0 { s[i][j] } else { 0.0 };
                    ss += c * c;
                }
                let norm = ss.sqrt();
                for i in 0..k {
                    let c = if s[i][j] > 0.0 { s[i][j] } else { 0.0 };
                    sbar[i][j] = if norm > 0.0 { c / norm } else { 0.0 };
                }
            }
            for i in 0..k {
                let mut z = 0.0;
                for j in 0..n {
                    z += (l1 * sbar[i][j]).exp();
                }
                let mut a = vec![0.0; e[0].len()];
                for j in 0..n {
                    let w = (l1 * sbar[i][j]).exp() / z;
                    for d in 0..a.len() {
                        a[d] += w * e[j][d];
                    }
                }
                rel.push(cos(&v[i], &a));
            }
        }
        Dir::TextImage => {
            // normalize each region's row over words
            let mut sbar = vec![vec![0.0; n]; k];
            for i in 0..k {
                let mut ss = 0.0;
                for j in 0..n {
                    let c = if s[i][j] > 0.0 { s[i][j] } else { 0.0 };
                    ss += c * c;
                }
                let norm = ss.sqrt();
                for j in 0..n {
                    let c = if s[i][j] > 0.0 { s[i][j] } else { 0.0 };
                    sbar[i][j] = if norm > 0.0 { c / norm } else { 0.0 };
                }
            }
            for j in 0..n {
                let mut z = 0.0;
                for i in 0..k {
                    z += (l1 * sbar[i][j]).exp();
                }
                let mut a = vec![0.0; v[0].len()];
                for i in 0..k {
                    let w = (l1 * sbar[i][j]).exp() / z;
                    for d in 0..a.len() {
                        a[d] += w * v[i][d];
                    }
                }
                rel.push(cos(&e[j], &a));
            }
        }
    }
    match pool {
        Pool::Lse => {
            let mut z = 0.0;
            for r in &rel {
                z += (l2 * r).exp();
            }
            z.ln() / l2
        }
        Pool::Avg => rel.iter().sum::<f64>() / rel.len() as f64,
        Pool::Sum => rel.iter().sum(),
        Pool::Max => {
            let mut m = rel[0];
            for &r in &rel {
                if r > m {
                    m = r;
                }
            }
            m
        }
    }
}

/// Sum-Max with raw dot products.
pub fn naive_sum_max(v: &[Vec<f64>], e: &[Vec<f64>], dir: Dir) -> f64 {
    let mut total = 0.0;
    match dir {
        Dir::TextImage => {
            for ej in e {
                let mut best = f64::NEG_INFINITY;
                for vi in v {
                    best = best.max(dot(vi, ej));
                }
                total += best;
            }
        }
        Dir::ImageText => {
            for vi in v {
                let mut best = f64::NEG_INFINITY;
                for ej in e {
                    best = best.max(dot(vi, ej));
                }
                total += best;
            }
        }
    }
    total
}

/// Recall@K by fully sorting candidates for every query.
/// `scores[i][j]` is image `i` against sentence `j`.
pub fn sorted_recall(scores: &[Vec<f64>], truth: &[usize], k: usize, sentence_retrieval: bool) -> f64 {
    let m = scores.len();
    let n = truth.len();
    let mut hits = 0usize;
    let mut queries = 0usize;
    if sentence_retrieval {
        for (i, row) in scores.iter().enumerate() {
            if !truth.contains(&i) {
                continue;
            }
            queries += 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if order.iter().take(k).any(|&j| truth[j] == i) {
                hits += 1;
            }
        }
    } else {
        for j in 0..n {
            queries += 1;
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| scores[b][j].partial_cmp(&scores[a][j]).unwrap().then(a.cmp(&b)));
            if order.iter().take(k).any(|&i| i == truth[j]) {
                hits += 1;
            }
        }
    }
    100.0 * hits as f64 / queries as f64
}
