//! Brute-force reference computations shared by the integration tests. They
//! only read logits from the library and recompute everything else.
#![allow(dead_code)]

use catgrad_core::Factorisation;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Calls `visit` on every joint assignment, last variable fastest.
pub fn for_each_assignment(cards: &[usize], mut visit: impl FnMut(&[usize])) {
    let mut x = vec![0usize; cards.len()];
    loop {
        visit(&x);
        let mut d = cards.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            x[d] += 1;
            if x[d] < cards[d] {
                break;
            }
            x[d] = 0;
        }
    }
}

fn row_of(fact: &Factorisation, d: usize, x: &[usize]) -> usize {
    if fact.is_independent() {
        0
    } else {
        let mut r = 0;
        for e in 0..d {
            r = r * fact.cards()[e] + x[e];
        }
        r
    }
}

/// Offset of each variable's block in the flattened gradient.
pub fn block_offsets(fact: &Factorisation) -> Vec<usize> {
    let mut off = Vec::new();
    let mut at = 0;
    for d in 0..fact.dims() {
        off.push(at);
        at += fact.rows_of(d) * fact.cards()[d];
    }
    off.push(at);
    off
}

pub fn prob(fact: &Factorisation, x: &[usize]) -> f64 {
    (0..x.len())
        .map(|d| softmax(fact.logits(d, row_of(fact, d, x)))[x[d]])
        .product()
}

pub fn expectation(fact: &Factorisation, f: &dyn Fn(&[usize]) -> f64) -> f64 {
    let mut total = 0.0;
    for_each_assignment(fact.cards(), |x| total += prob(fact, x) * f(x));
    total
}

/// `sum_x p(x) f(x) d log p(x) / d logits`, flattened by variable, row, category.
pub fn gradient(fact: &Factorisation, f: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
    let off = block_offsets(fact);
    let mut g = vec![0.0; *off.last().unwrap()];
    for_each_assignment(fact.cards(), |x| {
        let w = prob(fact, x) * f(x);
        for d in 0..x.len() {
            let row = row_of(fact, d, x);
            let k = fact.cards()[d];
            let q = softmax(fact.logits(d, row));
            for j in 0..k {
                let ind = if j == x[d] { 1.0 } else { 0.0 };
                g[off[d] + row * k + j] += w * (ind - q[j]);
            }
        }
    });
    g
}

/// Per-coordinate mean, summed variance and the standard error of that sum,
/// from stored per-trial vectors.
pub struct TrialStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub variance_sum: f64,
    pub variance_sum_se: f64,
    pub trials: usize,
}

pub fn trial_stats(samples: &[Vec<f64>]) -> TrialStats {
    let t = samples.len();
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / t as f64;
        }
    }
    let mut variance = vec![0.0; dim];
    let sq: Vec<f64> = samples
        .iter()
        .map(|s| {
            let mut tot = 0.0;
            for ((v, m), var) in s.iter().zip(&mean).zip(variance.iter_mut()) {
                let d2 = (v - m) * (v - m);
                *var += d2 / (t - 1) as f64;
                tot += d2;
            }
            tot
        })
        .collect();
    let sq_mean = sq.iter().sum::<f64>() / t as f64;
    let sq_var = sq.iter().map(|s| (s - sq_mean) * (s - sq_mean)).sum::<f64>() / (t - 1) as f64;
    TrialStats {
        variance_sum: variance.iter().sum(),
        variance_sum_se: (sq_var / t as f64).sqrt() * t as f64 / (t - 1) as f64,
        mean,
        variance,
        trials: t,
    }
}
