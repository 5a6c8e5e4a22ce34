//! Gradient estimators for `d E[f(X)] / d logits`.
//!
//! Every Monte Carlo estimator comes in two forms: one that draws its own
//! samples from a generator, and a `*_with_*` form that takes the samples
//! explicitly so that estimators can be compared on identical draws.
//!
//! The CatLog estimators (SCateR, IndeCateR) sum each variable over its
//! categories exactly and only sample the remaining variables. SCateR samples
//! downstream variables conditionally on the summed value; it does so with
//! common random numbers, reusing the uniforms of the pivot draw, so on an
//! independent factorisation the downstream values coincide with the pivot
//! and SCateR reproduces IndeCateR exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorical::{
    exact_gradient, softmax_unchecked, Factorisation, GradTable, LogitTable, Objective,
    RelaxedObjective, SampleBatch,
};
use crate::error::{Error, Result};
use crate::rng;

/// Lower/upper clamp for uniforms feeding the Gumbel transform.
const GUMBEL_EPS: f64 = 1e-12;

/// A gradient estimate together with its sampling cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub grad: GradTable,
    /// The estimator's own unbiased (or, for Gumbel-Softmax, relaxed)
    /// estimate of `E[f(X)]` from the same function evaluations.
    pub value: f64,
    pub samples_drawn: u64,
    pub function_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Reinforce,
    Rloo,
    Scater,
    Indecater,
    Leg,
    #[serde(rename = "gs")]
    GumbelSoftmax,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Reinforce,
        EstimatorKind::Rloo,
        EstimatorKind::Scater,
        EstimatorKind::Indecater,
        EstimatorKind::Leg,
        EstimatorKind::GumbelSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Rloo => "rloo",
            EstimatorKind::Scater => "scater",
            EstimatorKind::Indecater => "indecater",
            EstimatorKind::Leg => "leg",
            EstimatorKind::GumbelSoftmax => "gs",
        }
    }

    /// Whether the estimator only needs values of `f` at discrete points.
    pub fn is_score_based(self) -> bool {
        self != EstimatorKind::GumbelSoftmax
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reinforce" => Ok(EstimatorKind::Reinforce),
            "rloo" => Ok(EstimatorKind::Rloo),
            "scater" => Ok(EstimatorKind::Scater),
            "indecater" => Ok(EstimatorKind::Indecater),
            "leg" => Ok(EstimatorKind::Leg),
            "gs" | "gumbel" | "gumbel-softmax" | "gumbelsoftmax" => Ok(EstimatorKind::GumbelSoftmax),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Exponential temperature decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub period: u64,
    pub floor: f64,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.initial >= self.floor) {
            return Err(Error::InvalidArgument(format!(
                "anneal schedule needs initial >= floor > 0 (initial {}, floor {})",
                self.initial, self.floor
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.period == 0 {
            return Err(Error::InvalidArgument("anneal period must be positive".into()));
        }
        Ok(())
    }
}

/// `max(floor, initial * decay_factor^floor(step / period))`.
pub fn anneal(schedule: &AnnealSchedule, step: u64) -> f64 {
    let decays = (step / schedule.period.max(1)) as f64;
    (schedule.initial * schedule.decay_factor.powf(decays)).max(schedule.floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub n_samples: usize,
    #[serde(default)]
    pub fresh_per_variable: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub anneal: Option<AnnealSchedule>,
}

fn default_temperature() -> f64 {
    1.0
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, n_samples: usize) -> Self {
        Self {
            kind,
            n_samples,
            fresh_per_variable: false,
            temperature: 1.0,
            anneal: None,
        }
    }

    pub fn fresh(mut self, on: bool) -> Self {
        self.fresh_per_variable = on;
        self
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn with_anneal(mut self, schedule: AnnealSchedule) -> Self {
        self.temperature = schedule.initial;
        self.anneal = Some(schedule);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        if self.kind == EstimatorKind::Rloo && self.n_samples < 2 {
            return Err(Error::RlooTooFewSamples);
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(s) = &self.anneal {
            s.validate()?;
        }
        Ok(())
    }

    /// Temperature in effect at optimisation step `step`.
    pub fn temperature_at(&self, step: u64) -> f64 {
        match &self.anneal {
            Some(s) => anneal(s, step),
            None => self.temperature,
        }
    }

    /// Samples and function evaluations one estimate costs on `cards`.
    pub fn cost(&self, cards: &[usize]) -> (u64, u64) {
        let n = self.n_samples as u64;
        let dk: u64 = cards.iter().map(|&k| k as u64).sum();
        let d = cards.len() as u64;
        match self.kind {
            EstimatorKind::Reinforce | EstimatorKind::Rloo | EstimatorKind::GumbelSoftmax => (n, n),
            EstimatorKind::Leg => (n, dk * n),
            EstimatorKind::Indecater | EstimatorKind::Scater => {
                let samples = if self.fresh_per_variable { n * d } else { n };
                (samples, dk * n)
            }
        }
    }

    /// Short label such as `indecater-2` or `rloo-800`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-{}", self.kind, self.n_samples);
        if self.fresh_per_variable {
            s.push_str("-fresh");
        }
        s
    }
}

/// Runs the configured estimator at optimisation step `step`.
pub fn estimate<R: Rng + ?Sized>(
    config: &EstimatorConfig,
    fact: &Factorisation,
    f: &dyn Objective,
    step: u64,
    rng: &mut R,
) -> Result<GradEstimate> {
    config.validate()?;
    let n = config.n_samples;
    match config.kind {
        EstimatorKind::Reinforce => reinforce(fact, f, n, rng),
        EstimatorKind::Rloo => rloo(fact, f, n, rng),
        EstimatorKind::Scater => scater(fact, f, n, config.fresh_per_variable, rng),
        EstimatorKind::Indecater => indecater(fact, f, n, config.fresh_per_variable, rng),
        EstimatorKind::Leg => leg(fact, f, n, rng),
        EstimatorKind::GumbelSoftmax => {
            if !fact.is_independent() {
                return Err(Error::NotIndependent);
            }
            let table = logit_table(fact)?;
            gumbel_softmax_grad(&table, f, n, config.temperature_at(step), rng)
        }
    }
}

fn logit_table(fact: &Factorisation) -> Result<LogitTable> {
    LogitTable::new((0..fact.dims()).map(|d| fact.logits(d, 0).to_vec()).collect())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("sample count must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Contracts `sum_delta dp(delta)/dlogits * values[delta]` for one softmax row
/// and adds it to `out`: entry j gains `p_j (values_j - sum_delta p_delta values_delta)`.
/// Returns `sum_delta p_delta values_delta`.
fn add_softmax_jacobian(probs: &[f64], values: &[f64], out: &mut [f64]) -> f64 {
    let mean: f64 = probs.iter().zip(values).map(|(p, v)| p * v).sum();
    for ((o, p), v) in out.iter_mut().zip(probs).zip(values) {
        *o += p * (v - mean);
    }
    mean
}

fn mean_over_vars(total: f64, dims: usize, f: &dyn Objective) -> f64 {
    if dims == 0 {
        f.eval(&[])
    } else {
        total / dims as f64
    }
}

pub fn reinforce<R: Rng + ?Sized>(
    fact: &Factorisation,
    f: &dyn Objective,
    n: usize,
    rng: &mut R,
) -> Result<GradEstimate> {
    check_n(n)?;
    let samples = fact.sample_ancestral(n, rng)?;
    reinforce_with_samples(fact, f, &samples)
}

/// `(1/N) sum_n f(x_n) d log p(x_n)`.
pub fn reinforce_with_samples(
    fact: &Factorisation,
    f: &dyn Objective,
    samples: &SampleBatch,
) -> Result<GradEstimate> {
    check_n(samples.len())?;
    samples.validate(fact)?;
    let values = f.eval_batch(samples);
    let mut grad = fact.zero_grad();
    for (x, v) in samples.iter().zip(&values) {
        if *v != 0.0 {
            fact.add_score(x, *v, &mut grad);
        }
    }
    grad.scale(1.0 / samples.len() as f64);
    Ok(GradEstimate {
        grad,
        value: values.iter().sum::<f64>() / samples.len() as f64,
        samples_drawn: samples.len() as u64,
        function_evals: samples.len() as u64,
    })
}

pub fn rloo<R: Rng + ?Sized>(
    fact: &Factorisation,
    f: &dyn Objective,
    n: usize,
    rng: &mut R,
) -> Result<GradEstimate> {
    if n < 2 {
        return Err(Error::RlooTooFewSamples);
    }
    let samples = fact.sample_ancestral(n, rng)?;
    rloo_with_samples(fact, f, &samples)
}

/// REINFORCE with the leave-one-out baseline `b_n = mean_{m != n} f(x_m)`.
pub fn rloo_with_samples(
    fact: &Factorisation,
    f: &dyn Objective,
    samples: &SampleBatch,
) -> Result<GradEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::RlooTooFewSamples);
    }
    samples.validate(fact)?;
    let values = f.eval_batch(samples);
    let total: f64 = values.iter().sum();
    let mut grad = fact.zero_grad();
    for (x, v) in samples.iter().zip(&values) {
        let baseline = (total - v) / (n - 1) as f64;
        let w = v - baseline;
        if w != 0.0 {
            fact.add_score(x, w, &mut grad);
        }
    }
    grad.scale(1.0 / n as f64);
    Ok(GradEstimate {
        grad,
        value: total / n as f64,
        samples_drawn: n as u64,
        function_evals: n as u64,
    })
}

pub fn indecater<R: Rng + ?Sized>(
    fact: &Factorisation,
    f: &dyn Objective,
    n: usize,
    fresh_per_variable: bool,
    rng: &mut R,
) -> Result<GradEstimate> {
    check_n(n)?;
    if !fact.is_independent() {
        return Err(Error::NotIndependent);
    }
    let blocks = if fresh_per_variable {
        (0..fact.dims())
            .map(|_| fact.sample_ancestral(n, rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![fact.sample_ancestral(n, rng)?]
    };
    indecater_with_samples(fact, f, &blocks)
}

/// IndeCateR on explicit samples. `samples` holds either one batch shared by
/// every variable or one batch per variable; only the entries `x_{!=d}` of the
/// batch used for variable `d` matter.
pub fn indecater_with_samples(
    fact: &Factorisation,
    f: &dyn Objective,
    samples: &[SampleBatch],
) -> Result<GradEstimate> {
    if !fact.is_independent() {
        return Err(Error::NotIndependent);
    }
    let dims = fact.dims();
    let fresh = match samples.len() {
        1 => false,
        l if l == dims => true,
        l => {
            return Err(Error::Shape(format!(
                "{l} sample batches for {dims} variables (expected 1 or {dims})"
            )))
        }
    };
    let n = samples[0].len();
    check_n(n)?;
    for b in samples {
        if b.len() != n {
            return Err(Error::Shape("sample batches differ in size".into()));
        }
        b.validate(fact)?;
    }

    let cards = fact.cards();
    let mut queries = SampleBatch::with_capacity(dims, cards.iter().sum::<usize>() * n);
    let mut x = vec![0; dims];
    for d in 0..dims {
        let batch = &samples[if fresh { d } else { 0 }];
        for delta in 0..cards[d] {
            for pivot in batch.iter() {
                x.copy_from_slice(pivot);
                x[d] = delta;
                queries.push(&x);
            }
        }
    }
    let values = f.eval_batch(&queries);

    let mut grad = fact.zero_grad();
    let mut offset = 0;
    let mut total = 0.0;
    for d in 0..dims {
        let means: Vec<f64> = (0..cards[d])
            .map(|delta| {
                let start = offset + delta * n;
                values[start..start + n].iter().sum::<f64>() / n as f64
            })
            .collect();
        offset += cards[d] * n;
        total += add_softmax_jacobian(fact.probs(d, 0), &means, &mut grad.blocks[d][0]);
    }
    Ok(GradEstimate {
        grad,
        value: mean_over_vars(total, dims, f),
        samples_drawn: (n * samples.len()) as u64,
        function_evals: queries.len() as u64,
    })
}

/// `n` rows of `dims` uniforms, drawn row by row.
pub fn draw_uniforms<R: Rng + ?Sized>(n: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect())
        .collect()
}

pub fn scater<R: Rng + ?Sized>(
    fact: &Factorisation,
    f: &dyn Objective,
    n: usize,
    fresh_per_variable: bool,
    rng: &mut R,
) -> Result<GradEstimate> {
    check_n(n)?;
    let dims = fact.dims();
    let blocks = if fresh_per_variable {
        (0..dims).map(|_| draw_uniforms(n, dims, rng)).collect()
    } else {
        vec![draw_uniforms(n, dims, rng)]
    };
    scater_with_uniforms(fact, f, &blocks)
}

/// SCateR driven by explicit uniforms: one `N x D` block shared by all
/// variables or one block per variable. For variable `d` and draw `n`, the
/// prefix `x_{<d}` decodes from `u[n][..d]` and, for every category `delta`,
/// the suffix `x_{>d}` decodes from `u[n][d+1..]` conditioned on `(x_{<d}, delta)`.
pub fn scater_with_uniforms(
    fact: &Factorisation,
    f: &dyn Objective,
    uniforms: &[Vec<Vec<f64>>],
) -> Result<GradEstimate> {
    let dims = fact.dims();
    let fresh = match uniforms.len() {
        1 => false,
        l if l == dims => true,
        l => {
            return Err(Error::Shape(format!(
                "{l} uniform blocks for {dims} variables (expected 1 or {dims})"
            )))
        }
    };
    let n = uniforms[0].len();
    check_n(n)?;
    for block in uniforms {
        if block.len() != n || block.iter().any(|u| u.len() != dims) {
            return Err(Error::Shape("uniform blocks must all be N x D".into()));
        }
    }

    let cards = fact.cards();
    // Pivot draws per block; prefixes are read off these.
    let pivots: Vec<Vec<Vec<usize>>> = uniforms
        .iter()
        .map(|block| {
            block
                .iter()
                .map(|u| {
                    let mut x = vec![0; dims];
                    fact.sample_from_uniforms(u, &mut x);
                    x
                })
                .collect()
        })
        .collect();

    let mut queries = SampleBatch::with_capacity(dims, cards.iter().sum::<usize>() * n);
    let mut x = vec![0; dims];
    for d in 0..dims {
        let b = if fresh { d } else { 0 };
        for delta in 0..cards[d] {
            for (pivot, u) in pivots[b].iter().zip(&uniforms[b]) {
                x[..d].copy_from_slice(&pivot[..d]);
                x[d] = delta;
                fact.complete_from(d + 1, u, &mut x);
                queries.push(&x);
            }
        }
    }
    let values = f.eval_batch(&queries);

    let mut grad = fact.zero_grad();
    let mut offset = 0;
    let mut total = 0.0;
    for d in 0..dims {
        let b = if fresh { d } else { 0 };
        let rows = fact.rows_of(d);
        // Per conditional row: accumulated f-values for every category.
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; rows];
        for delta in 0..cards[d] {
            for (i, pivot) in pivots[b].iter().enumerate() {
                let r = fact.parent_index(d, pivot);
                let acc = sums[r].get_or_insert_with(|| vec![0.0; cards[d]]);
                acc[delta] += values[offset + delta * n + i];
            }
        }
        offset += cards[d] * n;
        for (r, acc) in sums.into_iter().enumerate() {
            if let Some(acc) = acc {
                let means: Vec<f64> = acc.iter().map(|s| s / n as f64).collect();
                total += add_softmax_jacobian(fact.probs(d, r), &means, &mut grad.blocks[d][r]);
            }
        }
    }
    Ok(GradEstimate {
        grad,
        value: mean_over_vars(total, dims, f),
        samples_drawn: (n * uniforms.len()) as u64,
        function_evals: queries.len() as u64,
    })
}

/// Weighting distribution `p(x_d = delta | x_{!=d})` for every `delta`, given
/// a pivot assignment. Costs `O(D)` factor lookups per category.
pub fn leg_weights(fact: &Factorisation, pivot: &[usize], d: usize) -> Result<Vec<f64>> {
    fact.validate(pivot)?;
    if d >= fact.dims() {
        return Err(Error::InvalidArgument(format!("variable {d} out of range")));
    }
    let mut x = pivot.to_vec();
    let mut logw = Vec::with_capacity(fact.cards()[d]);
    let row = fact.parent_index(d, pivot);
    for delta in 0..fact.cards()[d] {
        x[d] = delta;
        let mut lw = fact.log_probs(d, row)[delta];
        for j in d + 1..fact.dims() {
            lw += fact.log_probs(j, fact.parent_index(j, &x))[x[j]];
        }
        logw.push(lw);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("LEG weights".into()));
    }
    Ok(softmax_unchecked(&logw))
}

pub fn leg<R: Rng + ?Sized>(
    fact: &Factorisation,
    f: &dyn Objective,
    n: usize,
    rng: &mut R,
) -> Result<GradEstimate> {
    check_n(n)?;
    let pivots = fact.sample_ancestral(n, rng)?;
    leg_with_samples(fact, f, &pivots)
}

/// Local expectation gradients with pivot samples shared across variables:
/// `(1/N) sum_n sum_d sum_delta w_delta f(x_{!=d}, delta) d log p(delta | x_{<d})`.
pub fn leg_with_samples(
    fact: &Factorisation,
    f: &dyn Objective,
    pivots: &SampleBatch,
) -> Result<GradEstimate> {
    let n = pivots.len();
    check_n(n)?;
    pivots.validate(fact)?;
    let dims = fact.dims();
    let cards = fact.cards();

    let mut queries = SampleBatch::with_capacity(dims, cards.iter().sum::<usize>() * n);
    let mut weights = Vec::with_capacity(queries.len());
    let mut x = vec![0; dims];
    for pivot in pivots.iter() {
        for d in 0..dims {
            weights.extend(leg_weights(fact, pivot, d)?);
            for delta in 0..cards[d] {
                x.copy_from_slice(pivot);
                x[d] = delta;
                queries.push(&x);
            }
        }
    }
    let values = f.eval_batch(&queries);

    let mut grad = fact.zero_grad();
    let mut q = 0;
    let mut total = 0.0;
    for pivot in pivots.iter() {
        for d in 0..dims {
            let row = fact.parent_index(d, pivot);
            let p = fact.probs(d, row);
            let out = &mut grad.blocks[d][row];
            for delta in 0..cards[d] {
                let c = weights[q] * values[q];
                q += 1;
                total += c;
                if c == 0.0 {
                    continue;
                }
                for (j, (o, pj)) in out.iter_mut().zip(p).enumerate() {
                    let ind = if j == delta { 1.0 } else { 0.0 };
                    *o += c * (ind - pj);
                }
            }
        }
    }
    grad.scale(1.0 / n as f64);
    Ok(GradEstimate {
        grad,
        value: mean_over_vars(total / n as f64, dims, f),
        samples_drawn: n as u64,
        function_evals: queries.len() as u64,
    })
}

/// Standard Gumbel noise, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::EmptyLogitRow);
    }
    if logits.len() != noise.len() {
        return Err(Error::Shape("noise length differs from logits".into()));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gumbel-Softmax input".into()));
    }
    Ok(softmax_unchecked(&z))
}

/// One relaxed sample from the concrete distribution.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, tau)
}

pub fn gumbel_softmax_grad<R: Rng + ?Sized>(
    table: &LogitTable,
    f: &dyn Objective,
    n: usize,
    tau: f64,
    rng: &mut R,
) -> Result<GradEstimate> {
    let relaxed = f.relaxed().ok_or(Error::NoRelaxation)?;
    check_n(n)?;
    check_tau(tau)?;
    let mut acc = GsAccumulator::new(table);
    let mut noise: Vec<Vec<f64>> = table.rows().iter().map(|r| vec![0.0; r.len()]).collect();
    for _ in 0..n {
        for g in noise.iter_mut() {
            for v in g.iter_mut() {
                let u = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
                *v = -(-u.ln()).ln();
            }
        }
        acc.add(table, relaxed, &noise, tau)?;
    }
    Ok(acc.finish(n))
}

/// Pathwise gradient of `(1/N) sum_n f~(softmax((logits + g_n) / tau))` for
/// frozen noise `g_n`. Non-finite gradient entries are zeroed.
pub fn gumbel_softmax_grad_with_noise(
    table: &LogitTable,
    relaxed: &dyn RelaxedObjective,
    noise: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<GradEstimate> {
    let n = noise.len();
    check_n(n)?;
    check_tau(tau)?;
    let mut acc = GsAccumulator::new(table);
    for g in noise {
        acc.add(table, relaxed, g, tau)?;
    }
    Ok(acc.finish(n))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

struct GsAccumulator {
    acc: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    total: f64,
}

impl GsAccumulator {
    fn new(table: &LogitTable) -> Self {
        let zeros: Vec<Vec<f64>> = table.rows().iter().map(|r| vec![0.0; r.len()]).collect();
        Self {
            acc: zeros.clone(),
            y: zeros,
            total: 0.0,
        }
    }

    fn add(&mut self, table: &LogitTable, relaxed: &dyn RelaxedObjective, g: &[Vec<f64>], tau: f64) -> Result<()> {
        if g.len() != table.dims() {
            return Err(Error::Shape("noise does not match logit table".into()));
        }
        for ((yd, r), gd) in self.y.iter_mut().zip(table.rows()).zip(g) {
            if gd.len() != r.len() {
                return Err(Error::Shape("noise length differs from logits".into()));
            }
            let mut max = f64::NEG_INFINITY;
            for ((o, l), e) in yd.iter_mut().zip(r).zip(gd) {
                *o = (l + e) / tau;
                if !o.is_finite() {
                    return Err(Error::NonFinite("Gumbel-Softmax input".into()));
                }
                max = max.max(*o);
            }
            let mut total = 0.0;
            for o in yd.iter_mut() {
                *o = (*o - max).exp();
                total += *o;
            }
            yd.iter_mut().for_each(|o| *o /= total);
        }
        let (v, dy) = relaxed.value_and_grad(&self.y);
        self.total += v;
        for ((out, yd), dyd) in self.acc.iter_mut().zip(&self.y).zip(&dy) {
            // d y_k / d logit_j = y_k (1[k = j] - y_j) / tau
            let inner: f64 = yd.iter().zip(dyd).map(|(a, b)| a * b).sum();
            for ((o, yj), dj) in out.iter_mut().zip(yd).zip(dyd) {
                *o += yj * (dj - inner) / tau;
            }
        }
        Ok(())
    }

    fn finish(self, n: usize) -> GradEstimate {
        let mut grad = GradTable {
            blocks: self
                .acc
                .into_iter()
                .map(|mut row| {
                    row.iter_mut().for_each(|v| *v /= n as f64);
                    vec![row]
                })
                .collect(),
        };
        grad.zero_non_finite();
        GradEstimate {
            grad,
            value: self.total / n as f64,
            samples_drawn: n as u64,
            function_evals: n as u64,
        }
    }
}

pub const BIAS_BAND_SE: f64 = 5.0;
/// Absolute slack added to the bias band for round-off in zero-variance estimators.
pub const BIAS_BAND_FLOOR: f64 = 1e-12;

/// Empirical bias and variance of an estimator against the enumeration oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub trials: usize,
    pub mean: Vec<f64>,
    pub exact: Vec<f64>,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub bias_norm: f64,
    pub variance_sum: f64,
    pub samples_drawn: u64,
    pub function_evals: u64,
}

impl BiasVarianceReport {
    /// Standard error of the mean estimate, per coordinate.
    pub fn std_errors(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.trials as f64).sqrt())
            .collect()
    }

    /// `BIAS_BAND_SE` times the L2 norm of the standard-error vector, plus
    /// `BIAS_BAND_FLOOR`. An unbiased estimator's `bias_norm` is about one
    /// standard-error norm.
    pub fn bias_band(&self) -> f64 {
        BIAS_BAND_SE * (self.variance_sum / self.trials as f64).sqrt() + BIAS_BAND_FLOOR
    }

    /// Largest `|bias_c| / se_c` over coordinates with positive variance, and
    /// the largest `|bias_c|` over coordinates with zero variance.
    pub fn worst_z(&self) -> (f64, f64) {
        let mut z: f64 = 0.0;
        let mut flat: f64 = 0.0;
        for (b, se) in self.bias.iter().zip(self.std_errors()) {
            if se > 0.0 {
                z = z.max(b.abs() / se);
            } else {
                flat = flat.max(b.abs());
            }
        }
        (z, flat)
    }
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / c;
            *s += delta * (v - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Unbiased sample variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / denom).max(0.0)).collect()
    }
}

/// Trials per parallel chunk; fixed so the reduction order never depends on
/// the thread count.
const CHUNK: usize = 256;

/// Runs `trial(i)` for `i in 0..trials` in parallel and folds the resulting
/// vectors into moments in a fixed order.
pub fn parallel_moments<F>(trials: usize, dim: usize, trial: F) -> Result<Moments>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<Moments> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(dim);
            for i in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                m.push(&trial(i as u64)?);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Moments::new(dim);
    for m in &chunks {
        total.merge(m);
    }
    Ok(total)
}

/// Runs `config` for `trials` independent streams derived from `seed` and
/// compares the mean estimate with [`exact_gradient`].
pub fn bias_variance(
    config: &EstimatorConfig,
    fact: &Factorisation,
    f: &dyn Objective,
    trials: usize,
    seed: u64,
    budget: u128,
) -> Result<BiasVarianceReport> {
    if trials < 2 {
        return Err(Error::InvalidArgument("bias/variance needs at least two trials".into()));
    }
    config.validate()?;
    let exact = exact_gradient(fact, f, budget)?.flatten();
    let dim = exact.len();
    let moments = parallel_moments(trials, dim, |i| {
        let mut r = rng::stream(seed, i);
        let est = estimate(config, fact, f, 0, &mut r)?;
        Ok(est.grad.flatten())
    })?;
    let variance = moments.variance();
    let bias: Vec<f64> = moments.mean.iter().zip(&exact).map(|(m, e)| m - e).collect();
    let (samples, evals) = config.cost(fact.cards());
    Ok(BiasVarianceReport {
        trials,
        bias_norm: bias.iter().map(|b| b * b).sum::<f64>().sqrt(),
        variance_sum: variance.iter().sum(),
        mean: moments.mean,
        exact,
        bias,
        variance,
        samples_drawn: samples * trials as u64,
        function_evals: evals * trials as u64,
    })
}
