//! Multivariate categorical distributions.
//!
//! A [`Factorisation`] is an ordered list of categorical factors. Independent
//! factorisations hold one logit row per variable; chain factorisations hold a
//! dense conditional table per variable with one row per joint assignment of
//! the preceding variables (row-major, last parent fastest). Gradients with
//! respect to the logits are stored in a [`GradTable`] with exactly the same
//! `[variable][row][category]` layout.

use rand::Rng;

use crate::error::{Error, Result};

/// Default cap on the number of outcomes the enumeration oracle will visit.
pub const DEFAULT_BUDGET: u128 = 10_000_000;

/// Numerically stable softmax of one logit row.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogitRow);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit row".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Log-softmax of one logit row.
pub fn log_softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogitRow);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit row".into()));
    }
    Ok(log_softmax_unchecked(logits))
}

fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Inverse-CDF draw: the first category whose cumulative mass strictly
/// exceeds `u`.
pub fn draw_category(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if cum > u {
            return k;
        }
    }
    // Rounding left the cumulative sum at or below u.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Per-variable logit rows for a product of independent categoricals.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    rows: Vec<Vec<f64>>,
}

impl LogitTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (d, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::EmptyLogitRow);
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logits of variable {d}")));
            }
        }
        Ok(Self { rows })
    }

    /// All-zero logits, i.e. uniform factors.
    pub fn uniform(cards: &[usize]) -> Result<Self> {
        Self::new(cards.iter().map(|&k| vec![0.0; k]).collect())
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(cards: &[usize], scale: f64, rng: &mut R) -> Result<Self> {
        Self::new(
            cards
                .iter()
                .map(|&k| (0..k).map(|_| rng.gen_range(-scale..=scale)).collect())
                .collect(),
        )
    }

    pub fn cards(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn dims(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.rows[d]
    }

    /// `self += scale * grad` where `grad` has the independent layout.
    pub fn add_scaled(&mut self, grad: &GradTable, scale: f64) -> Result<()> {
        if grad.blocks.len() != self.rows.len() {
            return Err(Error::Shape("gradient does not match logit table".into()));
        }
        for (row, block) in self.rows.iter_mut().zip(&grad.blocks) {
            if block.len() != 1 || block[0].len() != row.len() {
                return Err(Error::Shape("gradient does not match logit table".into()));
            }
            for (v, g) in row.iter_mut().zip(&block[0]) {
                *v += scale * g;
            }
        }
        Ok(())
    }

    pub fn rows_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Independent,
    Chain,
}

/// An ordered factorisation `p(x) = prod_d p(x_d | x_<d)`.
#[derive(Debug, Clone)]
pub struct Factorisation {
    kind: FactorKind,
    cards: Vec<usize>,
    logits: Vec<Vec<Vec<f64>>>,
    probs: Vec<Vec<Vec<f64>>>,
    log_probs: Vec<Vec<Vec<f64>>>,
}

impl Factorisation {
    pub fn independent(table: &LogitTable) -> Self {
        let logits: Vec<Vec<Vec<f64>>> = table.rows.iter().map(|r| vec![r.clone()]).collect();
        Self::build(FactorKind::Independent, table.cards(), logits)
    }

    /// Chain factorisation from dense conditional tables: `tables[d]` must have
    /// `prod_{j<d} cards[j]` rows, each of length `cards[d]`.
    pub fn chain(cards: Vec<usize>, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if tables.len() != cards.len() {
            return Err(Error::Shape(format!(
                "{} conditional tables for {} variables",
                tables.len(),
                cards.len()
            )));
        }
        let mut parents: usize = 1;
        for (d, table) in tables.iter().enumerate() {
            if cards[d] == 0 {
                return Err(Error::EmptyLogitRow);
            }
            if table.len() != parents {
                return Err(Error::Shape(format!(
                    "table for variable {d} has {} rows, expected {parents}",
                    table.len()
                )));
            }
            for row in table {
                if row.len() != cards[d] {
                    return Err(Error::Shape(format!(
                        "row of variable {d} has length {}, expected {}",
                        row.len(),
                        cards[d]
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("table of variable {d}")));
                }
            }
            parents = parents
                .checked_mul(cards[d])
                .ok_or_else(|| Error::Shape("conditional table too large".into()))?;
        }
        Ok(Self::build(FactorKind::Chain, cards, tables))
    }

    /// Chain factorisation with logits uniform in `[-scale, scale]`.
    pub fn random_chain<R: Rng + ?Sized>(cards: &[usize], scale: f64, rng: &mut R) -> Result<Self> {
        let mut parents = 1usize;
        let mut tables = Vec::with_capacity(cards.len());
        for &k in cards {
            let table: Vec<Vec<f64>> = (0..parents)
                .map(|_| (0..k).map(|_| rng.gen_range(-scale..=scale)).collect())
                .collect();
            tables.push(table);
            parents *= k;
        }
        Self::chain(cards.to_vec(), tables)
    }

    fn build(kind: FactorKind, cards: Vec<usize>, logits: Vec<Vec<Vec<f64>>>) -> Self {
        let probs = logits
            .iter()
            .map(|t| t.iter().map(|r| softmax_unchecked(r)).collect())
            .collect();
        let log_probs = logits
            .iter()
            .map(|t| t.iter().map(|r| log_softmax_unchecked(r)).collect())
            .collect();
        Self {
            kind,
            cards,
            logits,
            probs,
            log_probs,
        }
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn is_independent(&self) -> bool {
        self.kind == FactorKind::Independent
    }

    pub fn dims(&self) -> usize {
        self.cards.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn max_card(&self) -> usize {
        self.cards.iter().copied().max().unwrap_or(0)
    }

    /// Number of conditional rows of variable `d`.
    pub fn rows_of(&self, d: usize) -> usize {
        self.logits[d].len()
    }

    pub fn logits(&self, d: usize, row: usize) -> &[f64] {
        &self.logits[d][row]
    }

    pub fn probs(&self, d: usize, row: usize) -> &[f64] {
        &self.probs[d][row]
    }

    pub fn log_probs(&self, d: usize, row: usize) -> &[f64] {
        &self.log_probs[d][row]
    }

    /// Row of variable `d`'s table selected by the parent values `x[..d]`.
    pub fn parent_index(&self, d: usize, x: &[usize]) -> usize {
        match self.kind {
            FactorKind::Independent => 0,
            FactorKind::Chain => x[..d]
                .iter()
                .zip(&self.cards)
                .fold(0, |idx, (&v, &k)| idx * k + v),
        }
    }

    pub fn validate(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.cards.len() {
            return Err(Error::Shape(format!(
                "assignment of length {} for {} variables",
                x.len(),
                self.cards.len()
            )));
        }
        for (var, (&value, &card)) in x.iter().zip(&self.cards).enumerate() {
            if value >= card {
                return Err(Error::OutOfRange { var, value, card });
            }
        }
        Ok(())
    }

    pub fn log_prob(&self, x: &[usize]) -> Result<f64> {
        self.validate(x)?;
        Ok(self.log_prob_unchecked(x))
    }

    pub(crate) fn log_prob_unchecked(&self, x: &[usize]) -> f64 {
        (0..x.len())
            .map(|d| self.log_probs[d][self.parent_index(d, x)][x[d]])
            .sum()
    }

    /// Score function `d log p(x) / d logits`.
    pub fn score(&self, x: &[usize]) -> Result<GradTable> {
        self.validate(x)?;
        let mut g = self.zero_grad();
        self.add_score(x, 1.0, &mut g);
        Ok(g)
    }

    /// `grad += weight * score(x)` without validation.
    pub(crate) fn add_score(&self, x: &[usize], weight: f64, grad: &mut GradTable) {
        for d in 0..x.len() {
            let row = self.parent_index(d, x);
            let p = &self.probs[d][row];
            let out = &mut grad.blocks[d][row];
            for (k, (o, pk)) in out.iter_mut().zip(p).enumerate() {
                let ind = if k == x[d] { 1.0 } else { 0.0 };
                *o += weight * (ind - pk);
            }
        }
    }

    pub fn zero_grad(&self) -> GradTable {
        GradTable {
            blocks: self
                .logits
                .iter()
                .map(|t| t.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
        }
    }

    /// Decodes one sample from `D` uniforms by ancestral inverse-CDF sampling.
    pub fn sample_from_uniforms(&self, u: &[f64], out: &mut [usize]) {
        self.complete_from(0, u, out);
    }

    /// Fills `out[start..]` ancestrally given `out[..start]`, using `u[start..]`.
    pub(crate) fn complete_from(&self, start: usize, u: &[f64], out: &mut [usize]) {
        for d in start..self.cards.len() {
            let row = self.parent_index(d, out);
            out[d] = draw_category(&self.probs[d][row], u[d]);
        }
    }

    /// Draws `n` samples variable by variable in factorisation order.
    pub fn sample_ancestral<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let dims = self.dims();
        let mut batch = SampleBatch::with_capacity(dims, n);
        let mut u = vec![0.0; dims];
        let mut x = vec![0; dims];
        for _ in 0..n {
            u.iter_mut().for_each(|v| *v = rng.gen::<f64>());
            self.sample_from_uniforms(&u, &mut x);
            batch.push(&x);
        }
        Ok(batch)
    }

    /// Applies `logits += scale * grad` and recomputes the cached probabilities.
    pub fn add_scaled(&mut self, grad: &GradTable, scale: f64) -> Result<()> {
        grad.check_shape(self)?;
        for (t, gt) in self.logits.iter_mut().zip(&grad.blocks) {
            for (r, gr) in t.iter_mut().zip(gt) {
                for (v, g) in r.iter_mut().zip(gr) {
                    *v += scale * g;
                }
            }
        }
        *self = Self::build(self.kind, std::mem::take(&mut self.cards), std::mem::take(&mut self.logits));
        Ok(())
    }
}

/// Gradient with respect to every logit of a factorisation, laid out as
/// `[variable][conditional row][category]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl GradTable {
    pub fn len(&self) -> usize {
        self.blocks.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().flatten().copied().collect()
    }

    /// Inverse of [`GradTable::flatten`] using `self` as the shape template.
    pub fn with_values(&self, flat: &[f64]) -> Result<GradTable> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!("{} values for {} coordinates", flat.len(), self.len())));
        }
        let mut out = self.clone();
        for (o, v) in out.blocks.iter_mut().flatten().flatten().zip(flat) {
            *o = *v;
        }
        Ok(out)
    }

    /// Row `row` of variable `d`.
    pub fn row(&self, d: usize, row: usize) -> &[f64] {
        &self.blocks[d][row]
    }

    pub fn scale(&mut self, c: f64) {
        self.blocks.iter_mut().flatten().flatten().for_each(|v| *v *= c);
    }

    pub fn add_assign(&mut self, other: &GradTable) {
        for (a, b) in self
            .blocks
            .iter_mut()
            .flatten()
            .flatten()
            .zip(other.blocks.iter().flatten().flatten())
        {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &GradTable) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flatten()
            .zip(other.blocks.iter().flatten().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().flatten().all(|v| v.is_finite())
    }

    /// Replaces every non-finite entry by zero.
    pub fn zero_non_finite(&mut self) -> usize {
        let mut n = 0;
        for v in self.blocks.iter_mut().flatten().flatten() {
            if !v.is_finite() {
                *v = 0.0;
                n += 1;
            }
        }
        n
    }

    pub(crate) fn check_shape(&self, fact: &Factorisation) -> Result<()> {
        let ok = self.blocks.len() == fact.logits.len()
            && self.blocks.iter().zip(&fact.logits).all(|(g, t)| {
                g.len() == t.len() && g.iter().zip(t).all(|(a, b)| a.len() == b.len())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradient does not match factorisation".into()))
        }
    }
}

/// `n` assignments stored row-major as an `n x dims` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBatch {
    dims: usize,
    n: usize,
    data: Vec<usize>,
}

impl SampleBatch {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            n: 0,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dims: usize, n: usize) -> Self {
        Self {
            dims,
            n: 0,
            data: Vec::with_capacity(dims * n),
        }
    }

    pub fn from_rows(dims: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut b = Self::with_capacity(dims, rows.len());
        for r in rows {
            if r.len() != dims {
                return Err(Error::Shape(format!("row of length {} in a {dims}-variable batch", r.len())));
            }
            b.push(r);
        }
        Ok(b)
    }

    pub fn push(&mut self, x: &[usize]) {
        debug_assert_eq!(x.len(), self.dims);
        self.data.extend_from_slice(x);
        self.n += 1;
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn validate(&self, fact: &Factorisation) -> Result<()> {
        self.iter().try_for_each(|x| fact.validate(x))
    }
}

/// Black-box function of a discrete assignment, with an optional continuous
/// relaxation for pathwise estimators.
pub trait Objective: Sync {
    fn eval(&self, x: &[usize]) -> f64;

    fn eval_batch(&self, xs: &SampleBatch) -> Vec<f64> {
        xs.iter().map(|x| self.eval(x)).collect()
    }

    fn relaxed(&self) -> Option<&dyn RelaxedObjective> {
        None
    }
}

/// Relaxed form of an objective evaluated on one probability vector per
/// variable.
pub trait RelaxedObjective: Sync {
    /// Returns the value and its gradient with respect to every entry of `y`.
    fn value_and_grad(&self, y: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>);
}

/// Objective backed by a closure.
pub struct FnObjective<F> {
    f: F,
}

impl<F: Fn(&[usize]) -> f64 + Sync> FnObjective<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F: Fn(&[usize]) -> f64 + Sync> Objective for FnObjective<F> {
    fn eval(&self, x: &[usize]) -> f64 {
        (self.f)(x)
    }
}

/// Objective with an explicit value for every outcome, stored row-major.
#[derive(Debug, Clone)]
pub struct TableObjective {
    cards: Vec<usize>,
    values: Vec<f64>,
}

impl TableObjective {
    pub fn new(cards: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let size = support_size(&cards);
        if size != values.len() as u128 {
            return Err(Error::Shape(format!("{} values for a support of {size}", values.len())));
        }
        Ok(Self { cards, values })
    }

    /// Values uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(cards: &[usize], rng: &mut R) -> Result<Self> {
        let size = support_size(cards);
        if size > DEFAULT_BUDGET {
            return Err(Error::SupportTooLarge { size, budget: DEFAULT_BUDGET });
        }
        let values = (0..size).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self::new(cards.to_vec(), values)
    }

    fn index(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.cards).fold(0, |idx, (&v, &k)| idx * k + v)
    }
}

impl Objective for TableObjective {
    fn eval(&self, x: &[usize]) -> f64 {
        self.values[self.index(x)]
    }
}

pub fn support_size(cards: &[usize]) -> u128 {
    cards
        .iter()
        .try_fold(1u128, |acc, &k| acc.checked_mul(k as u128))
        .unwrap_or(u128::MAX)
}

/// Row-major (last variable fastest) walk over a finite product space.
#[derive(Debug, Clone)]
pub struct SupportIter {
    cards: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl Iterator for SupportIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut d = succ.len();
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            succ[d] += 1;
            if succ[d] < self.cards[d] {
                self.next = Some(succ);
                break;
            }
            succ[d] = 0;
        }
        Some(current)
    }
}

/// Enumerates every assignment of `cards`, failing when there are more than
/// `budget` of them.
pub fn enumerate_support(cards: &[usize], budget: u128) -> Result<SupportIter> {
    let size = support_size(cards);
    if size > budget {
        return Err(Error::SupportTooLarge { size, budget });
    }
    Ok(SupportIter {
        cards: cards.to_vec(),
        next: (size > 0).then(|| vec![0; cards.len()]),
    })
}

/// `E[f(X)]` by explicit summation over the support.
pub fn exact_expectation(fact: &Factorisation, f: &dyn Objective, budget: u128) -> Result<f64> {
    let mut total = 0.0;
    for x in enumerate_support(fact.cards(), budget)? {
        total += fact.log_prob_unchecked(&x).exp() * f.eval(&x);
    }
    Ok(total)
}

/// `d E[f(X)] / d logits` by explicit summation of `f(x) p(x) score(x)`.
pub fn exact_gradient(fact: &Factorisation, f: &dyn Objective, budget: u128) -> Result<GradTable> {
    let mut grad = fact.zero_grad();
    for x in enumerate_support(fact.cards(), budget)? {
        let w = fact.log_prob_unchecked(&x).exp() * f.eval(&x);
        if w != 0.0 {
            fact.add_score(&x, w, &mut grad);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(cards: &[usize]) -> Factorisation {
        Factorisation::independent(&LogitTable::uniform(cards).unwrap())
    }

    /// X_2 copies X_1 (logit +50 on the matching value).
    fn copy_chain() -> Factorisation {
        Factorisation::chain(
            vec![2, 2],
            vec![vec![vec![0.0, 0.0]], vec![vec![50.0, -50.0], vec![-50.0, 50.0]]],
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_row(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = softmax_row(&[1e4, -1e4]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_row(&[]), Err(Error::EmptyLogitRow)));
        assert_eq!(softmax_row(&[]).unwrap_err().to_string(), "empty logit row");
        assert!(softmax_row(&[0.0, f64::NAN]).is_err());
        assert!(softmax_row(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_prob_examples() {
        let f = uniform(&[2, 2]);
        for x in [[0, 0], [0, 1], [1, 1]] {
            assert!((f.log_prob(&x).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        }
        assert_eq!(uniform(&[]).log_prob(&[]).unwrap(), 0.0);
        let lp = copy_chain().log_prob(&[0, 0]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            f.log_prob(&[0, 2]),
            Err(Error::OutOfRange { var: 1, value: 2, card: 2 })
        ));
    }

    #[test]
    fn score_examples() {
        let f = uniform(&[2]);
        assert_eq!(f.score(&[1]).unwrap().row(0, 0), &[-0.5, 0.5]);
        assert_eq!(f.score(&[0]).unwrap().row(0, 0), &[0.5, -0.5]);
    }

    #[test]
    fn score_touches_only_selected_rows() {
        let f = copy_chain();
        let g = f.score(&[1, 0]).unwrap();
        assert_eq!(g.row(1, 0), &[0.0, 0.0]);
        assert!(g.row(1, 1).iter().sum::<f64>().abs() < 1e-12);
        assert!(g.row(1, 1)[0] > 0.99);
    }

    #[test]
    fn degenerate_sampling() {
        let f = Factorisation::independent(&LogitTable::new(vec![vec![50.0, -50.0]]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = f.sample_ancestral(1000, &mut rng).unwrap();
        assert!(b.iter().all(|x| x[0] == 0));
        assert!(f.sample_ancestral(0, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let f = uniform(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = f.sample_ancestral(100_000, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        b.iter().for_each(|x| counts[x[0]] += 1);
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn deterministic_chain_sampling() {
        let f = copy_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = f.sample_ancestral(500, &mut rng).unwrap();
        assert!(b.iter().all(|x| x[0] == x[1]));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let f = Factorisation::random_chain(&[3, 2, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a = f.sample_ancestral(50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = f.sample_ancestral(50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_matches_exact_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Factorisation::random_chain(&[3, 2, 3], 1.5, &mut rng).unwrap();
        let n = 100_000;
        let b = f.sample_ancestral(n, &mut rng).unwrap();
        for d in 0..3 {
            for k in 0..f.cards()[d] {
                let ind = FnObjective::new(move |x: &[usize]| if x[d] == k { 1.0 } else { 0.0 });
                let p = exact_expectation(&f, &ind, DEFAULT_BUDGET).unwrap();
                let freq = b.iter().filter(|x| x[d] == k).count() as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((freq - p).abs() <= 5.0 * se, "d={d} k={k} freq={freq} p={p}");
            }
        }
    }

    #[test]
    fn enumeration_order_and_budget() {
        let all: Vec<_> = enumerate_support(&[2, 3], DEFAULT_BUDGET).unwrap().collect();
        assert_eq!(
            all,
            vec![vec![0, 0], vec![0, 1], vec![0, 2], vec![1, 0], vec![1, 1], vec![1, 2]]
        );
        let empty: Vec<_> = enumerate_support(&[], DEFAULT_BUDGET).unwrap().collect();
        assert_eq!(empty, vec![Vec::<usize>::new()]);
        match enumerate_support(&[10; 8], DEFAULT_BUDGET) {
            Err(Error::SupportTooLarge { size, .. }) => assert_eq!(size, 100_000_000),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn exact_expectation_examples() {
        let f = uniform(&[2, 2]);
        let sum = FnObjective::new(|x: &[usize]| (x[0] + x[1]) as f64);
        assert!((exact_expectation(&f, &sum, DEFAULT_BUDGET).unwrap() - 1.0).abs() < 1e-12);
        let c = FnObjective::new(|_: &[usize]| 3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Factorisation::random_chain(&[2, 3, 2], 2.0, &mut rng).unwrap();
        assert!((exact_expectation(&r, &c, DEFAULT_BUDGET).unwrap() - 3.5).abs() < 1e-12);
        let point = Factorisation::independent(
            &LogitTable::new(vec![vec![-1e4, 1e4], vec![1e4, -1e4, -1e4]]).unwrap(),
        );
        let g = FnObjective::new(|x: &[usize]| 10.0 * x[0] as f64 + x[1] as f64);
        assert_eq!(exact_expectation(&point, &g, DEFAULT_BUDGET).unwrap(), 10.0);
    }

    #[test]
    fn exact_gradient_examples() {
        let f = uniform(&[2, 2]);
        let sum = FnObjective::new(|x: &[usize]| (x[0] + x[1]) as f64);
        let g = exact_gradient(&f, &sum, DEFAULT_BUDGET).unwrap();
        for d in 0..2 {
            assert!((g.row(d, 0)[0] + 0.25).abs() < 1e-12);
            assert!((g.row(d, 0)[1] - 0.25).abs() < 1e-12);
        }
        let one = uniform(&[2]);
        let id = FnObjective::new(|x: &[usize]| x[0] as f64);
        let g = exact_gradient(&one, &id, DEFAULT_BUDGET).unwrap();
        assert!((g.row(0, 0)[0] + 0.25).abs() < 1e-12 && (g.row(0, 0)[1] - 0.25).abs() < 1e-12);
        let c = FnObjective::new(|_: &[usize]| 2.0);
        let r = Factorisation::random_chain(&[3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(exact_gradient(&r, &c, DEFAULT_BUDGET).unwrap().flatten().iter().all(|v| v.abs() < 1e-12));
        assert!(exact_gradient(&uniform(&[10; 8]), &c, DEFAULT_BUDGET).is_err());
    }

    #[test]
    fn score_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let dims = rng.gen_range(1..=4);
            let cards: Vec<usize> = (0..dims).map(|_| rng.gen_range(2..=4)).collect();
            let f = Factorisation::random_chain(&cards, 2.0, &mut rng).unwrap();
            let mut total = f.zero_grad();
            for x in enumerate_support(&cards, DEFAULT_BUDGET).unwrap() {
                let p = f.log_prob(&x).unwrap().exp();
                f.add_score(&x, p, &mut total);
            }
            assert!(total.flatten().iter().all(|v| v.abs() < 1e-10));
        }
    }

    /// Central differences of the enumerated expectation against the
    /// enumerated score-function gradient.
    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let dims = rng.gen_range(1..=3);
            let cards: Vec<usize> = (0..dims).map(|_| rng.gen_range(2..=3)).collect();
            let fact = Factorisation::random_chain(&cards, 1.5, &mut rng).unwrap();
            let f = TableObjective::random(&cards, &mut rng).unwrap();
            let g = exact_gradient(&fact, &f, DEFAULT_BUDGET).unwrap();
            let flat = g.flatten();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut e = vec![0.0; flat.len()];
                e[i] = h;
                let step = g.with_values(&e).unwrap();
                let mut plus = fact.clone();
                plus.add_scaled(&step, 1.0).unwrap();
                let mut minus = fact.clone();
                minus.add_scaled(&step, -1.0).unwrap();
                let fd = (exact_expectation(&plus, &f, DEFAULT_BUDGET).unwrap()
                    - exact_expectation(&minus, &f, DEFAULT_BUDGET).unwrap())
                    / (2.0 * h);
                let rel = (fd - flat[i]).abs() / flat[i].abs().max(1e-3);
                assert!(rel < 1e-6, "coord {i}: fd {fd} analytic {}", flat[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            v in prop::collection::vec(-50.0f64..50.0, 1..8),
            c in -100.0f64..100.0,
        ) {
            let a = softmax_row(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax_row(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn score_rows_sum_to_zero(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cards: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=4)).collect();
            let f = Factorisation::random_chain(&cards, 3.0, &mut rng).unwrap();
            let x = f.sample_ancestral(1, &mut rng).unwrap();
            let g = f.score(x.row(0)).unwrap();
            for block in &g.blocks {
                for row in block {
                    prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
                }
            }
        }
    }
}
