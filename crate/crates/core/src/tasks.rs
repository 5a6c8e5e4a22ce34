//! Desk-scale objectives and training pipelines for the four experiments.

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::categorical::{
    softmax_row, Factorisation, GradTable, LogitTable, Objective, RelaxedObjective, SampleBatch,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate, gumbel_softmax_with_noise, gumbel_noise, EstimatorConfig, EstimatorKind};
use crate::harness::gradient_variance_probe;
use crate::nn::{self, Activation, Graph, LayerSpec, Matrix, OptimState, Optimizer, ParamStore};
use crate::report::{ArmRun, ArmStatus, StepRecord};
use crate::rng;

/// `sum_d |x_d - b_d|`, with the relaxation `sum_d sum_k y_dk |k - b_d|`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsDistance {
    targets: Vec<usize>,
}

impl AbsDistance {
    pub fn new(targets: Vec<usize>) -> Self {
        Self { targets }
    }
}

impl Objective for AbsDistance {
    fn eval(&self, x: &[usize]) -> f64 {
        x.iter()
            .zip(&self.targets)
            .map(|(&v, &b)| v.abs_diff(b) as f64)
            .sum()
    }

    fn relaxed(&self) -> Option<&dyn RelaxedObjective> {
        Some(self)
    }
}

impl RelaxedObjective for AbsDistance {
    fn value_and_grad(&self, y: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let grad: Vec<Vec<f64>> = y
            .iter()
            .zip(&self.targets)
            .map(|(yd, &b)| (0..yd.len()).map(|k| k.abs_diff(b) as f64).collect())
            .collect();
        let value = y
            .iter()
            .zip(&grad)
            .map(|(yd, gd)| yd.iter().zip(gd).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        (value, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExactTask {
    pub targets: Vec<usize>,
    pub logits: LogitTable,
}

impl SynthExactTask {
    pub fn new(targets: Vec<usize>, logits: LogitTable) -> Result<Self> {
        let cards = logits.cards();
        if targets.len() != cards.len() {
            return Err(Error::Shape(format!("{} targets for {} variables", targets.len(), cards.len())));
        }
        for (d, (&b, &k)) in targets.iter().zip(&cards).enumerate() {
            if b >= k {
                return Err(Error::OutOfRange { var: d, value: b, card: k });
            }
        }
        Ok(Self { targets, logits })
    }

    /// `dims` variables of cardinality `card`, random targets and logits
    /// uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(dims: usize, card: usize, rng: &mut R) -> Result<Self> {
        if card == 0 {
            return Err(Error::InvalidArgument("cardinality must be positive".into()));
        }
        let targets = (0..dims).map(|_| rng.gen_range(0..card)).collect();
        let logits = LogitTable::random(&vec![card; dims], 1.0, rng)?;
        Self::new(targets, logits)
    }

    /// Named configuration: `fig1a` (D=12, K=3), `fig1b` (D=6, K=10) or
    /// `fig1c` (D=3, K=100).
    pub fn preset<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<Self> {
        let (d, k) = synth_exact_shape(name)?;
        Self::random(d, k, rng)
    }

    pub fn objective(&self) -> AbsDistance {
        AbsDistance::new(self.targets.clone())
    }

    pub fn factorisation(&self) -> Factorisation {
        Factorisation::independent(&self.logits)
    }
}

pub fn synth_exact_shape(preset: &str) -> Result<(usize, usize)> {
    match preset {
        "fig1a" => Ok((12, 3)),
        "fig1b" => Ok((6, 10)),
        "fig1c" => Ok((3, 100)),
        other => Err(Error::Config(format!("unknown bench-exact preset `{other}`"))),
    }
}

pub fn synth_exact_f(task: &SynthExactTask, x: &[usize]) -> Result<f64> {
    task.factorisation().validate(x)?;
    Ok(task.objective().eval(x))
}

/// `(1/D) sum_d (x_d - c)^2` on binary variables, relaxed as
/// `(1/D) sum_d (y_d1 - c)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquaredOffset {
    pub c: f64,
}

impl Objective for SquaredOffset {
    fn eval(&self, x: &[usize]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        x.iter().map(|&v| (v as f64 - self.c).powi(2)).sum::<f64>() / x.len() as f64
    }

    fn relaxed(&self) -> Option<&dyn RelaxedObjective> {
        Some(self)
    }
}

impl RelaxedObjective for SquaredOffset {
    fn value_and_grad(&self, y: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let d = y.len().max(1) as f64;
        let mut value = 0.0;
        let grad = y
            .iter()
            .map(|yd| {
                let r = yd[1] - self.c;
                value += r * r / d;
                vec![0.0, 2.0 * r / d]
            })
            .collect();
        (value, grad)
    }
}

pub const SYNTH_OPT_C: f64 = 0.499;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptTask {
    pub c: f64,
    pub logits: LogitTable,
}

impl SynthOptTask {
    /// `dims` binary variables at uniform initialisation.
    pub fn new(dims: usize) -> Result<Self> {
        Ok(Self {
            c: SYNTH_OPT_C,
            logits: LogitTable::uniform(&vec![2; dims])?,
        })
    }

    pub fn dims(&self) -> usize {
        self.logits.dims()
    }

    pub fn objective(&self) -> SquaredOffset {
        SquaredOffset { c: self.c }
    }

    /// Closed-form expectation `(1/D) sum_d [p_d(1)(1-c)^2 + p_d(0)c^2]`.
    pub fn exact_objective(&self, logits: &LogitTable) -> Result<f64> {
        let (hi, lo) = ((1.0 - self.c).powi(2), self.c.powi(2));
        let d = logits.dims();
        if d == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for row in logits.rows() {
            let p = softmax_row(row)?;
            total += p[1] * hi + p[0] * lo;
        }
        Ok(total / d as f64)
    }

    /// Closed-form gradient of [`Self::exact_objective`] with respect to the logits.
    pub fn exact_gradient(&self, logits: &LogitTable) -> Result<GradTable> {
        let gap = ((1.0 - self.c).powi(2) - self.c.powi(2)) / logits.dims().max(1) as f64;
        let blocks = logits
            .rows()
            .iter()
            .map(|row| {
                let p = softmax_row(row)?;
                let s = gap * p[0] * p[1];
                Ok(vec![vec![-s, s]])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradTable { blocks })
    }
}

pub fn synth_opt_objective(task: &SynthOptTask, x: &[usize]) -> Result<f64> {
    if x.len() != task.dims() {
        return Err(Error::Shape(format!("assignment of length {} for {} variables", x.len(), task.dims())));
    }
    if let Some(d) = x.iter().position(|&v| v > 1) {
        return Err(Error::OutOfRange { var: d, value: x[d], card: 2 });
    }
    Ok(task.objective().eval(x))
}

/// Logging options shared by the optimisation loops.
#[derive(Debug, Clone, PartialEq)]
pub struct LogOptions {
    /// Record every `log_every` steps (and always the final one).
    pub log_every: u64,
    /// Gradient re-estimates per variance probe; fewer than 2 disables probing.
    pub variance_probes: usize,
    /// Seed for probe randomness, kept apart from the training stream.
    pub probe_seed: u64,
}

impl Default for LogOptions {
    fn default() -> Self {
        Self {
            log_every: 10,
            variance_probes: 0,
            probe_seed: 0,
        }
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFiniteGradient(_) | Error::NonFinite(_))
}

fn elapsed_ms(t: &Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Maximises the synthetic objective by gradient ascent on the logits.
pub fn run_synth_opt<R: Rng + ?Sized>(
    task: &SynthOptTask,
    name: &str,
    config: &EstimatorConfig,
    optimizer: Optimizer,
    iterations: u64,
    log: &LogOptions,
    rng: &mut R,
) -> Result<ArmRun> {
    config.validate()?;
    let mut run = ArmRun::new(name, &config.label());
    let f = task.objective();
    let mut logits = task.logits.clone();
    let mut opt = OptimState::new(optimizer, logits.cards().iter().sum());
    let probe = |logits: &LogitTable, step: u64| -> Result<Option<f64>> {
        if log.variance_probes < 2 {
            return Ok(None);
        }
        let fact = Factorisation::independent(logits);
        gradient_variance_probe(log.variance_probes, |i| {
            let mut r = rng::stream(log.probe_seed, step.wrapping_mul(1 << 20) + i);
            Ok(estimate(config, &fact, &f, step, &mut r)?.grad.flatten())
        })
        .map(Some)
    };
    let mut clock = Instant::now();
    run.push(StepRecord {
        arm: name.to_string(),
        step: 0,
        objective: task.exact_objective(&logits)?,
        metric: None,
        grad_variance: probe(&logits, 0)?,
        samples: 0,
        function_evals: 0,
        elapsed_ms: 0.0,
    });
    let (mut samples, mut evals) = (0u64, 0u64);
    let log_every = log.log_every.max(1);
    for step in 1..=iterations {
        let fact = Factorisation::independent(&logits);
        let est = estimate(config, &fact, &f, step - 1, rng)?;
        samples += est.samples_drawn;
        evals += est.function_evals;
        let mut flat: Vec<f64> = logits.rows().iter().flatten().copied().collect();
        let ascent: Vec<f64> = est.grad.flatten().iter().map(|g| -g).collect();
        let outcome = opt
            .step_flat(&mut flat, &ascent, |i| format!("logit[{}][{}]", i / 2, i % 2))
            .and_then(|_| {
                let rows = flat.chunks(2).map(<[f64]>::to_vec).collect();
                LogitTable::new(rows)
            });
        match outcome {
            Ok(t) => logits = t,
            Err(e) if is_divergence(&e) => {
                run.halt(ArmStatus::Diverged, format!("step {step}: {e}"), samples, evals);
                return Ok(run);
            }
            Err(e) => return Err(e),
        }
        if step % log_every == 0 || step == iterations {
            run.push(StepRecord {
                arm: name.to_string(),
                step,
                objective: task.exact_objective(&logits)?,
                metric: None,
                grad_variance: probe(&logits, step)?,
                samples,
                function_evals: evals,
                elapsed_ms: elapsed_ms(&clock),
            });
            samples = 0;
            evals = 0;
            clock = Instant::now();
        }
    }
    Ok(run)
}

/// `v > 0.5 -> 1`, otherwise 0.
pub fn binarize(images: &Matrix) -> Result<Matrix> {
    if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(images.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

/// `n` binary images of `pixels` entries: each is a copy of one of
/// `prototypes` random patterns (pixel density `density`) with every pixel
/// flipped with probability `flip`.
pub fn synthetic_patterns<R: Rng + ?Sized>(
    n: usize,
    pixels: usize,
    prototypes: usize,
    density: f64,
    flip: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if prototypes == 0 {
        return Err(Error::InvalidArgument("need at least one prototype".into()));
    }
    let protos: Vec<Vec<bool>> = (0..prototypes)
        .map(|_| (0..pixels).map(|_| rng.gen_bool(density)).collect())
        .collect();
    let mut out = Matrix::zeros((n, pixels));
    for mut row in out.rows_mut() {
        let p = &protos[rng.gen_range(0..prototypes)];
        for (o, &on) in row.iter_mut().zip(p) {
            let bit = on ^ rng.gen_bool(flip);
            *o = if bit { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `-[t log s(z) + (1 - t) log(1 - s(z))]`.
fn bce(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// KL divergence of `Bernoulli(q)` from `Bernoulli(0.5)`.
pub fn kl_bernoulli_half(q: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { p * (2.0 * p).ln() } else { 0.0 };
    term(q) + term(1.0 - q)
}

/// Encoder and decoder of a Bernoulli-latent VAE. The encoder emits one logit
/// `a` per latent bit; bit `l` is a two-category factor with logits `(0, a_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DvaeModel {
    pub data_dim: usize,
    pub latent: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

impl DvaeModel {
    pub fn new(data_dim: usize, hidden: &[usize], latent: usize) -> Result<Self> {
        if data_dim == 0 || latent == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut enc = vec![data_dim];
        enc.extend_from_slice(hidden);
        enc.push(latent);
        let mut dec = vec![latent];
        dec.extend(hidden.iter().rev());
        dec.push(data_dim);
        Ok(Self {
            data_dim,
            latent,
            encoder: nn::mlp("enc", &enc, Activation::Linear),
            decoder: nn::mlp("dec", &dec, Activation::Linear),
        })
    }

    pub const DESK_HIDDEN: [usize; 2] = [128, 64];

    /// 8x8 data, hidden 128/64, latent 16.
    pub fn desk() -> Self {
        Self::new(64, &Self::DESK_HIDDEN, 16).expect("valid sizes")
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        nn::init_layers(&mut p, &self.encoder, rng);
        nn::init_layers(&mut p, &self.decoder, rng);
        p
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.ncols() != self.data_dim {
            return Err(Error::Shape(format!(
                "batch width {} but model data width {}",
                batch.ncols(),
                self.data_dim
            )));
        }
        Ok(())
    }

    /// Latent factorisation for one row of encoder logits.
    pub fn latent_factors(&self, a: &[f64]) -> Result<Factorisation> {
        let rows = a.iter().map(|&v| vec![0.0, v]).collect();
        Ok(Factorisation::independent(&LogitTable::new(rows)?))
    }
}

/// `log p(x | z)` for one data row as a function of the latent bits.
pub struct DecoderLikelihood<'a> {
    params: &'a ParamStore,
    layers: &'a [LayerSpec],
    x: Vec<f64>,
}

impl<'a> DecoderLikelihood<'a> {
    pub fn new(model: &'a DvaeModel, params: &'a ParamStore, x: &[f64]) -> Self {
        Self {
            params,
            layers: &model.decoder,
            x: x.to_vec(),
        }
    }

    fn log_lik_rows(&self, z: &Matrix) -> Vec<f64> {
        let logits = nn::predict(self.params, self.layers, z).expect("decoder shapes checked");
        logits
            .rows()
            .into_iter()
            .map(|r| -r.iter().zip(&self.x).map(|(&zv, &t)| bce(zv, t)).sum::<f64>())
            .collect()
    }
}

impl Objective for DecoderLikelihood<'_> {
    fn eval(&self, z: &[usize]) -> f64 {
        let m = Matrix::from_shape_fn((1, z.len()), |(_, j)| z[j] as f64);
        self.log_lik_rows(&m)[0]
    }

    fn eval_batch(&self, xs: &SampleBatch) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let m = Matrix::from_shape_fn((xs.len(), xs.dims()), |(i, j)| xs.row(i)[j] as f64);
        self.log_lik_rows(&m)
    }

    fn relaxed(&self) -> Option<&dyn RelaxedObjective> {
        Some(self)
    }
}

impl RelaxedObjective for DecoderLikelihood<'_> {
    /// The decoder receives `y_l[1]` as the relaxed bit `l`.
    fn value_and_grad(&self, y: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let z = Matrix::from_shape_fn((1, y.len()), |(_, j)| y[j][1]);
        let t = Matrix::from_shape_vec((1, self.x.len()), self.x.clone()).expect("row shape");
        let mut g = Graph::new();
        let zi = g.input(z);
        let out = nn::apply_layers(&mut g, self.params, self.layers, zi).expect("decoder shapes checked");
        let ti = g.input(t);
        let b = g.bce_with_logits(out, ti).expect("decoder output width");
        let s = g.sum(b);
        let value = -g.value(s)[[0, 0]];
        let grads = g
            .backward_detached(s, &Matrix::from_elem((1, 1), -1.0))
            .expect("fresh tape");
        let gz = grads.get(zi).cloned().unwrap_or_else(|| Matrix::zeros((1, y.len())));
        (value, (0..y.len()).map(|j| vec![0.0, gz[[0, j]]]).collect())
    }
}

/// Batch-mean negated ELBO and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub neg_elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub samples: u64,
    pub function_evals: u64,
}

/// Estimates the batch-mean negated ELBO and writes its gradient into
/// `params` (previous gradients are cleared).
///
/// The encoder gradient of the reconstruction term comes from the configured
/// estimator applied to `z -> log p(x | z)` for each row; the KL term is
/// differentiated in closed form. Decoder gradients use `N` further latent
/// draws from `q(z | x)` (relaxed draws for Gumbel-Softmax). `step` selects
/// the annealed temperature.
pub fn dvae_elbo<R: Rng + ?Sized>(
    model: &DvaeModel,
    params: &mut ParamStore,
    batch: &Matrix,
    config: &EstimatorConfig,
    step: u64,
    rng: &mut R,
) -> Result<ElboEstimate> {
    config.validate()?;
    model.check_batch(batch)?;
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    params.zero_grad();
    let (a, mut enc_tape) = nn::forward(params, &model.encoder, batch)?;
    let mut upstream = Matrix::zeros(a.raw_dim());
    let (mut rec, mut kl) = (0.0, 0.0);
    let (mut samples, mut evals) = (0u64, 0u64);
    for (i, row) in batch.rows().into_iter().enumerate() {
        let ai: Vec<f64> = a.row(i).to_vec();
        let fact = model.latent_factors(&ai)?;
        let x: Vec<f64> = row.to_vec();
        let f = DecoderLikelihood::new(model, params, &x);
        let est = estimate(config, &fact, &f, step, rng)?;
        samples += est.samples_drawn;
        evals += est.function_evals;
        rec += est.value;
        for (l, &al) in ai.iter().enumerate() {
            let q = sigmoid(al);
            kl += kl_bernoulli_half(q);
            let dkl = q * (1.0 - q) * al;
            upstream[[i, l]] = (-est.grad.blocks[l][0][1] + dkl) / b as f64;
        }
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("encoder output".into()));
    }
    enc_tape.backward(&upstream, params)?;

    let n = config.n_samples;
    let tau = config.temperature_at(step);
    let mut z = Matrix::zeros((b * n, model.latent));
    let mut t = Matrix::zeros((b * n, model.data_dim));
    for i in 0..b {
        for s in 0..n {
            let r = i * n + s;
            t.row_mut(r).assign(&batch.row(i));
            for l in 0..model.latent {
                let al = a[[i, l]];
                z[[r, l]] = if config.kind == EstimatorKind::GumbelSoftmax {
                    gumbel_softmax_with_noise(&[0.0, al], &gumbel_noise(2, rng), tau)?[1]
                } else if rng.gen::<f64>() < sigmoid(al) {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    let mut g = Graph::new();
    let zi = g.input(z);
    let out = nn::apply_layers(&mut g, params, &model.decoder, zi)?;
    let ti = g.input(t);
    let loss = g.bce_with_logits(out, ti)?;
    let total = g.sum(loss);
    g.backward_from(total, &Matrix::from_elem((1, 1), 1.0 / (b * n) as f64), params)?;

    let rec = rec / b as f64;
    let kl = kl / b as f64;
    Ok(ElboEstimate {
        neg_elbo: -rec + kl,
        reconstruction: rec,
        kl,
        samples,
        function_evals: evals,
    })
}

/// Monte Carlo negated ELBO averaged over `data`, with `draws` latent samples
/// per row from a generator seeded by `seed`.
pub fn dvae_evaluate(model: &DvaeModel, params: &ParamStore, data: &Matrix, draws: usize, seed: u64) -> Result<f64> {
    model.check_batch(data)?;
    if data.nrows() == 0 || draws == 0 {
        return Err(Error::InvalidArgument("evaluation needs data and at least one draw".into()));
    }
    let mut r = rng::seeded(seed);
    let a = nn::predict(params, &model.encoder, data)?;
    let mut total = 0.0;
    for (i, row) in data.rows().into_iter().enumerate() {
        let q: Vec<f64> = a.row(i).iter().map(|&v| sigmoid(v)).collect();
        let z = Matrix::from_shape_fn((draws, model.latent), |(_, l)| if r.gen::<f64>() < q[l] { 1.0 } else { 0.0 });
        let x: Vec<f64> = row.to_vec();
        let f = DecoderLikelihood::new(model, params, &x);
        let ll = f.log_lik_rows(&z).iter().sum::<f64>() / draws as f64;
        total += -ll + q.iter().map(|&v| kl_bernoulli_half(v)).sum::<f64>();
    }
    Ok(total / data.nrows() as f64)
}

/// Exact negated ELBO of one data row by enumerating the latent space.
pub fn dvae_neg_elbo_exact(model: &DvaeModel, params: &ParamStore, x: &[f64], budget: u128) -> Result<f64> {
    let row = Matrix::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    model.check_batch(&row)?;
    let a = nn::predict(params, &model.encoder, &row)?;
    let ai: Vec<f64> = a.row(0).to_vec();
    let fact = model.latent_factors(&ai)?;
    let f = DecoderLikelihood::new(model, params, x);
    let rec = crate::categorical::exact_expectation(&fact, &f, budget)?;
    let kl: f64 = ai.iter().map(|&v| kl_bernoulli_half(sigmoid(v))).sum();
    Ok(-rec + kl)
}

/// Sizes and hyperparameters of a DVAE run.
#[derive(Debug, Clone, PartialEq)]
pub struct DvaeSetup {
    pub model: DvaeModel,
    pub train: Matrix,
    pub eval: Matrix,
    pub batch_size: usize,
    pub eval_draws: usize,
}

impl DvaeSetup {
    /// Synthetic 8x8 pattern data: `train` rows for training, `eval` held out.
    pub fn synthetic(train: usize, eval: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, DATA_STREAM);
        let data = synthetic_patterns(train + eval, 64, 8, 0.5, 0.05, &mut r)?;
        let (tr, ev) = data.view().split_at(Axis(0), train);
        Ok(Self {
            model: DvaeModel::desk(),
            train: tr.to_owned(),
            eval: ev.to_owned(),
            batch_size: 16,
            eval_draws: 16,
        })
    }
}

/// Stream ids used by the pipelines.
pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;

/// Stateful DVAE optimisation with one estimator.
#[derive(Debug, Clone)]
pub struct DvaeTrainer {
    pub setup: DvaeSetup,
    pub params: ParamStore,
    pub config: EstimatorConfig,
    pub step: u64,
    opt: OptimState,
    order: Vec<usize>,
    cursor: usize,
    rng: rng::StreamRng,
}

impl DvaeTrainer {
    pub fn new(setup: DvaeSetup, params: ParamStore, config: EstimatorConfig, optimizer: Optimizer, rng: rng::StreamRng) -> Result<Self> {
        config.validate()?;
        if setup.batch_size == 0 || setup.train.nrows() == 0 {
            return Err(Error::InvalidArgument("DVAE needs training data and a positive batch size".into()));
        }
        let opt = OptimState::new(optimizer, params.size());
        Ok(Self {
            order: (0..setup.train.nrows()).collect(),
            cursor: usize::MAX,
            setup,
            params,
            config,
            step: 0,
            opt,
            rng,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.setup.train.nrows().div_ceil(self.setup.batch_size) as u64
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    fn next_batch(&mut self) -> Matrix {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.setup.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        self.setup.train.select(Axis(0), idx)
    }

    /// One optimiser step; the temperature follows the epoch count.
    pub fn train_step(&mut self) -> Result<ElboEstimate> {
        let epoch = self.epoch();
        let batch = self.next_batch();
        let est = dvae_elbo(&self.setup.model, &mut self.params, &batch, &self.config, epoch, &mut self.rng)?;
        self.opt.step_store(&mut self.params)?;
        self.step += 1;
        Ok(est)
    }

    pub fn evaluate(&self, seed: u64) -> Result<f64> {
        dvae_evaluate(&self.setup.model, &self.params, &self.setup.eval, self.setup.eval_draws, seed)
    }

    /// Summed variance of the encoder gradient under `config`, re-estimated
    /// `probes` times on a fixed batch at the current parameters.
    pub fn probe_variance(&self, config: &EstimatorConfig, probes: usize, seed: u64) -> Result<f64> {
        let b = self.setup.batch_size.min(self.setup.train.nrows());
        let batch = self.setup.train.slice(ndarray::s![..b, ..]).to_owned();
        let epoch = self.epoch();
        gradient_variance_probe(probes, |i| {
            let mut p = self.params.clone();
            let mut r = rng::stream(seed, i);
            dvae_elbo(&self.setup.model, &mut p, &batch, config, epoch, &mut r)?;
            Ok(p.flat_grads_with_prefix("enc"))
        })
    }
}

/// Options of a DVAE arm beyond [`LogOptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct DvaeLog {
    pub log: LogOptions,
    /// Steps at which the gradient variance is probed (when probes >= 2).
    pub probe_steps: Vec<u64>,
    pub eval_seed: u64,
}

pub fn run_dvae(trainer: &mut DvaeTrainer, name: &str, iterations: u64, opts: &DvaeLog) -> Result<ArmRun> {
    let mut run = ArmRun::new(name, &trainer.config.label());
    let probe = |t: &DvaeTrainer| -> Result<Option<f64>> {
        if opts.log.variance_probes >= 2 && opts.probe_steps.contains(&t.step) {
            let cfg = t.config.clone();
            t.probe_variance(&cfg, opts.log.variance_probes, opts.log.probe_seed.wrapping_add(t.step))
                .map(Some)
        } else {
            Ok(None)
        }
    };
    run.push(StepRecord {
        arm: name.to_string(),
        step: 0,
        objective: trainer.evaluate(opts.eval_seed)?,
        metric: None,
        grad_variance: probe(trainer)?,
        samples: 0,
        function_evals: 0,
        elapsed_ms: 0.0,
    });
    let log_every = opts.log.log_every.max(1);
    let (mut samples, mut evals) = (0u64, 0u64);
    let (mut batch_obj, mut batches) = (0.0, 0usize);
    let mut clock = Instant::now();
    for _ in 0..iterations {
        match trainer.train_step() {
            Ok(e) => {
                samples += e.samples;
                evals += e.function_evals;
                batch_obj += e.neg_elbo;
                batches += 1;
            }
            Err(e) if is_divergence(&e) => {
                run.halt(ArmStatus::Diverged, format!("step {}: {e}", trainer.step + 1), samples, evals);
                return Ok(run);
            }
            Err(e) => return Err(e),
        }
        let step = trainer.step;
        if step % log_every == 0 || step == iterations || opts.probe_steps.contains(&step) {
            let objective = trainer.evaluate(opts.eval_seed)?;
            if !objective.is_finite() {
                run.halt(ArmStatus::Diverged, format!("step {step}: non-finite ELBO"), samples, evals);
                return Ok(run);
            }
            run.push(StepRecord {
                arm: name.to_string(),
                step,
                objective,
                metric: Some(batch_obj / batches.max(1) as f64),
                grad_variance: probe(trainer)?,
                samples,
                function_evals: evals,
                elapsed_ms: elapsed_ms(&clock),
            });
            samples = 0;
            evals = 0;
            batch_obj = 0.0;
            batches = 0;
            clock = Instant::now();
        }
    }
    Ok(run)
}

const GLYPHS: [[u8; 16]; 4] = [
    [0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0],
    [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
    [1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1],
];

pub const GLYPH_CLASSES: usize = GLYPHS.len();
pub const GLYPH_PIXELS: usize = 16;

pub const GLYPH_FLIP: f64 = 0.05;

/// `n` noisy 4x4 glyphs with uniformly drawn classes; every pixel of the
/// class template is flipped with probability `flip`.
pub fn glyph_dataset<R: Rng + ?Sized>(n: usize, classes: usize, flip: f64, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
    if classes == 0 || classes > GLYPH_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "glyph data supports 1 to {GLYPH_CLASSES} classes, got {classes}"
        )));
    }
    let mut images = Matrix::zeros((n, GLYPH_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for mut row in images.rows_mut() {
        let c = rng.gen_range(0..classes);
        labels.push(c);
        for (o, &bit) in row.iter_mut().zip(&GLYPHS[c]) {
            let on = (bit == 1) ^ rng.gen_bool(flip);
            *o = if on { 1.0 } else { 0.0 };
        }
    }
    Ok((images, labels))
}

/// Disjoint sequences of source indices and their digit sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NesyDataset {
    pub seq_len: usize,
    pub sequences: Vec<Vec<usize>>,
    pub sums: Vec<usize>,
}

impl NesyDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Partitions a random permutation of the `M` source images into `floor(M / D)`
/// sequences of length `D`.
pub fn nesy_build_dataset<R: Rng + ?Sized>(labels: &[usize], seq_len: usize, rng: &mut R) -> Result<NesyDataset> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be positive".into()));
    }
    if seq_len > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq_len} exceeds the {} source images",
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(rng);
    let sequences: Vec<Vec<usize>> = idx.chunks_exact(seq_len).map(<[usize]>::to_vec).collect();
    let sums = sequences.iter().map(|s| s.iter().map(|&i| labels[i]).sum()).collect();
    Ok(NesyDataset {
        seq_len,
        sequences,
        sums,
    })
}

/// `1` when the digits sum to `target`, else `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SumIndicator {
    pub target: usize,
}

impl Objective for SumIndicator {
    fn eval(&self, x: &[usize]) -> f64 {
        if x.iter().sum::<usize>() == self.target {
            1.0
        } else {
            0.0
        }
    }
}

/// Distribution of the sum of independent digits with the given marginals.
pub fn sum_distribution(probs: &[Vec<f64>]) -> Vec<f64> {
    let mut dist = vec![1.0];
    for p in probs {
        let mut next = vec![0.0; dist.len() + p.len().saturating_sub(1)];
        for (s, &ds) in dist.iter().enumerate() {
            for (k, &pk) in p.iter().enumerate() {
                next[s + k] += ds * pk;
            }
        }
        dist = next;
    }
    dist
}

pub const NLL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NesyLoss {
    pub loss: f64,
    pub estimate: f64,
    pub samples: u64,
    pub function_evals: u64,
}

/// `-log max(E_hat, eps)` for `E = P(sum of digits = target)` and its
/// gradient, scaled by `weight` and added to the classifier gradients.
#[allow(clippy::too_many_arguments)]
pub fn nesy_nll<R: Rng + ?Sized>(
    params: &mut ParamStore,
    classifier: &[LayerSpec],
    images: &Matrix,
    target: usize,
    config: &EstimatorConfig,
    step: u64,
    weight: f64,
    rng: &mut R,
) -> Result<NesyLoss> {
    if !config.kind.is_score_based() {
        return Err(Error::ZeroDerivative);
    }
    let (logits, mut tape) = nn::forward(params, classifier, images)?;
    let table = LogitTable::new(logits.rows().into_iter().map(|r| r.to_vec()).collect())?;
    let fact = Factorisation::independent(&table);
    let est = estimate(config, &fact, &SumIndicator { target }, step, rng)?;
    let e = est.value.max(NLL_FLOOR);
    let mut upstream = Matrix::zeros(logits.raw_dim());
    for (d, block) in est.grad.blocks.iter().enumerate() {
        for (k, g) in block[0].iter().enumerate() {
            upstream[[d, k]] = -weight * g / e;
        }
    }
    tape.backward(&upstream, params)?;
    Ok(NesyLoss {
        loss: -e.ln(),
        estimate: est.value,
        samples: est.samples_drawn,
        function_evals: est.function_evals,
    })
}

/// Exact `-log max(P(sum = target), eps)` under the classifier.
pub fn nesy_nll_exact(params: &ParamStore, classifier: &[LayerSpec], images: &Matrix, target: usize) -> Result<f64> {
    let logits = nn::predict(params, classifier, images)?;
    let probs = logits
        .rows()
        .into_iter()
        .map(|r| softmax_row(&r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let p = sum_distribution(&probs).get(target).copied().unwrap_or(0.0);
    Ok(-p.max(NLL_FLOOR).ln())
}

/// Data and classifier of a digit-sum run.
#[derive(Debug, Clone, PartialEq)]
pub struct NesySetup {
    pub classes: usize,
    pub classifier: Vec<LayerSpec>,
    pub train_images: Matrix,
    pub train: NesyDataset,
    pub test_images: Matrix,
    pub test: NesyDataset,
    pub batch_size: usize,
}

impl NesySetup {
    /// Synthetic glyph data with `train_images` and `test_images` source images.
    pub fn glyphs(
        classes: usize,
        seq_len: usize,
        train_images: usize,
        test_images: usize,
        flip: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, DATA_STREAM);
        let (tr_x, tr_y) = glyph_dataset(train_images, classes, flip, &mut r)?;
        let (te_x, te_y) = glyph_dataset(test_images, classes, flip, &mut r)?;
        Self::from_images(classes, seq_len, tr_x, &tr_y, te_x, &te_y, &mut r)
    }

    pub fn from_images<R: Rng + ?Sized>(
        classes: usize,
        seq_len: usize,
        train_images: Matrix,
        train_labels: &[usize],
        test_images: Matrix,
        test_labels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&l) = train_labels.iter().chain(test_labels).find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        let train = nesy_build_dataset(train_labels, seq_len, rng)?;
        let test = nesy_build_dataset(test_labels, seq_len, rng)?;
        let pixels = train_images.ncols();
        Ok(Self {
            classes,
            classifier: nn::mlp("cls", &[pixels, 32, classes], Activation::Linear),
            train_images,
            train,
            test_images,
            test,
            batch_size: 8,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        nn::init_layers(&mut p, &self.classifier, rng);
        p
    }
}

/// Fraction of sequences whose predicted digits (argmax per image) sum to
/// the label.
pub fn sum_accuracy(params: &ParamStore, classifier: &[LayerSpec], images: &Matrix, data: &NesyDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = nn::predict(params, classifier, images)?;
    let digits: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    let hits = data
        .sequences
        .iter()
        .zip(&data.sums)
        .filter(|(seq, &s)| seq.iter().map(|&i| digits[i]).sum::<usize>() == s)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Stateful digit-sum training with one estimator.
#[derive(Debug, Clone)]
pub struct NesyTrainer {
    pub setup: NesySetup,
    pub params: ParamStore,
    pub config: EstimatorConfig,
    pub epoch: u64,
    opt: OptimState,
    rng: rng::StreamRng,
}

/// Totals of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub samples: u64,
    pub function_evals: u64,
}

impl NesyTrainer {
    pub fn new(setup: NesySetup, params: ParamStore, config: EstimatorConfig, optimizer: Optimizer, rng: rng::StreamRng) -> Result<Self> {
        config.validate()?;
        if !config.kind.is_score_based() {
            return Err(Error::ZeroDerivative);
        }
        let opt = OptimState::new(optimizer, params.size());
        Ok(Self {
            setup,
            params,
            config,
            epoch: 0,
            opt,
            rng,
        })
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.setup.train.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.setup.batch_size.max(1);
        let mut stats = EpochStats {
            mean_loss: 0.0,
            samples: 0,
            function_evals: 0,
        };
        for chunk in order.chunks(bs) {
            self.params.zero_grad();
            for &s in chunk {
                let seq = &self.setup.train.sequences[s];
                let images = self.setup.train_images.select(Axis(0), seq);
                let l = nesy_nll(
                    &mut self.params,
                    &self.setup.classifier,
                    &images,
                    self.setup.train.sums[s],
                    &self.config,
                    self.epoch,
                    1.0 / chunk.len() as f64,
                    &mut self.rng,
                )?;
                stats.mean_loss += l.loss;
                stats.samples += l.samples;
                stats.function_evals += l.function_evals;
            }
            self.opt.step_store(&mut self.params)?;
        }
        stats.mean_loss /= order.len().max(1) as f64;
        self.epoch += 1;
        Ok(stats)
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        sum_accuracy(&self.params, &self.setup.classifier, &self.setup.test_images, &self.setup.test)
    }

    /// Exact mean training NLL.
    pub fn train_nll(&self) -> Result<f64> {
        let logits = nn::predict(&self.params, &self.setup.classifier, &self.setup.train_images)?;
        let probs = logits
            .rows()
            .into_iter()
            .map(|r| softmax_row(&r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for (seq, &s) in self.setup.train.sequences.iter().zip(&self.setup.train.sums) {
            let ps: Vec<Vec<f64>> = seq.iter().map(|&i| probs[i].clone()).collect();
            total += -sum_distribution(&ps).get(s).copied().unwrap_or(0.0).max(NLL_FLOOR).ln();
        }
        Ok(total / self.setup.train.len().max(1) as f64)
    }
}

pub fn run_nesy(trainer: &mut NesyTrainer, name: &str, epochs: u64) -> Result<ArmRun> {
    let mut run = ArmRun::new(name, &trainer.config.label());
    run.push(StepRecord {
        arm: name.to_string(),
        step: 0,
        objective: trainer.train_nll()?,
        metric: Some(trainer.test_accuracy()?),
        grad_variance: None,
        samples: 0,
        function_evals: 0,
        elapsed_ms: 0.0,
    });
    for _ in 0..epochs {
        let clock = Instant::now();
        let stats = match trainer.train_epoch() {
            Ok(s) => s,
            Err(e) if is_divergence(&e) => {
                run.halt(ArmStatus::Diverged, format!("epoch {}: {e}", trainer.epoch + 1), 0, 0);
                return Ok(run);
            }
            Err(e) => return Err(e),
        };
        run.push(StepRecord {
            arm: name.to_string(),
            step: trainer.epoch,
            objective: trainer.train_nll()?,
            metric: Some(trainer.test_accuracy()?),
            grad_variance: None,
            samples: stats.samples,
            function_evals: stats.function_evals,
            elapsed_ms: elapsed_ms(&clock),
        });
    }
    Ok(run)
}
