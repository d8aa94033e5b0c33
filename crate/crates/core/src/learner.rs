//! Replay buffer, loss assembly and multiplier auto-tuning.
//!
//! One batch builds a single graph holding every loss term. Graph cuts and
//! the gradient reversal keep each parameter group on its own objective, so
//! one backward pass over the summed losses serves all optimizers.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, SIGMA0};
use crate::flows::{
    Adversary, ClippedGaussianPrior, DisturbancePrior, FlowSpec, UniformPrior, WorldModel, WorldModelDims,
};
use crate::neural::{Adam, AdamConfig, Head, Mlp, MlpSpec, Optimizer};
use crate::tensor::{Array, Gradients, Param, Tape, Var};
use crate::{LiraError, LiraRng, Result};

/// One replayed experience. Plain values, no graph history.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
}

/// Ring store with oldest-first eviction.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Disjoint index batches covering the buffer once in random order.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch::from_transitions(idx.iter().map(|&i| &self.items[i]))
    }
}

/// Column-stacked batch: states, actions, targets `(s', r)` and disturbances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Array,
    pub a: Array,
    pub y: Array,
    pub d: Array,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let (mut s, mut a, mut y, mut d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        let mut dims = (0, 0, 0, 0);
        for t in items {
            s.extend_from_slice(&t.s);
            a.extend_from_slice(&t.a);
            y.extend_from_slice(&t.s_next);
            y.extend_from_slice(&t.r);
            d.extend_from_slice(&t.d);
            dims = (t.s.len(), t.a.len(), t.s_next.len() + t.r.len(), t.d.len());
            n += 1;
        }
        Self {
            s: Array::matrix(n, dims.0, s),
            a: Array::matrix(n, dims.1, a),
            y: Array::matrix(n, dims.2, y),
            d: Array::matrix(n, dims.3, d),
        }
    }

    pub fn len(&self) -> usize {
        self.s.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let pick = |x: &Array| {
            let (_, c) = x.dims2();
            Array::matrix(rows.len(), c, rows.iter().flat_map(|&r| x.row(r).to_vec()).collect())
        };
        Batch { s: pick(&self.s), a: pick(&self.a), y: pick(&self.y), d: pick(&self.d) }
    }
}

/// Training mode: the three main settings plus four ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LiraMode {
    /// Model learned only with prior disturbances (`lambda = 1`).
    Nominal,
    /// Fully adversarial (`lambda = 0`, no prior regularization).
    Full,
    /// Auto-tuned light-robust learning.
    Proposal,
    /// Constraint omitted: `lambda = 0` with prior regularization.
    AblateLira,
    /// Unrestricted conditional flow instead of the odd residual flow.
    AblateRnf,
    /// Likelihood-ratio adversary gradient instead of reparameterization.
    AblateHrg,
    /// Batch mean only, no midrange balancing.
    AblateMmb,
}

impl LiraMode {
    pub const ALL: [LiraMode; 7] = [
        LiraMode::Nominal,
        LiraMode::Full,
        LiraMode::Proposal,
        LiraMode::AblateLira,
        LiraMode::AblateRnf,
        LiraMode::AblateHrg,
        LiraMode::AblateMmb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LiraMode::Nominal => "nominal",
            LiraMode::Full => "full",
            LiraMode::Proposal => "proposal",
            LiraMode::AblateLira => "ablate_lira",
            LiraMode::AblateRnf => "ablate_rnf",
            LiraMode::AblateHrg => "ablate_hrg",
            LiraMode::AblateMmb => "ablate_mmb",
        }
    }

    /// `lambda` pinned by the mode, if any.
    pub fn fixed_lambda(&self) -> Option<f64> {
        match self {
            LiraMode::Nominal => Some(1.0),
            LiraMode::Full | LiraMode::AblateLira => Some(0.0),
            _ => None,
        }
    }

    pub fn trains_adversary(&self) -> bool {
        *self != LiraMode::Nominal
    }

    pub fn odd_rnf(&self) -> bool {
        *self != LiraMode::AblateRnf
    }

    pub fn uses_hrg(&self) -> bool {
        *self != LiraMode::AblateHrg
    }

    pub fn uses_mmb(&self) -> bool {
        *self != LiraMode::AblateMmb
    }

    /// Prior regularization gain in this mode.
    pub fn beta(&self, configured: f64) -> f64 {
        match self {
            LiraMode::Nominal | LiraMode::Full => 0.0,
            _ => configured,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    ClippedGaussian,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiraConfig {
    /// Tolerated likelihood degradation.
    pub rho: f64,
    /// Prior regularization gain; defaults to 1e-3 (scalar lambda) or 5e-3
    /// (state-dependent lambda).
    pub beta: Option<f64>,
    /// Switching threshold of the slack loss.
    pub epsilon: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lambda_init: f64,
    pub gamma_init: f64,
    pub state_lambda: bool,
    /// Pins lambda regardless of mode.
    pub lambda_override: Option<f64>,
    /// Caps the batches replayed per epoch; `None` replays the whole buffer.
    pub max_batches_per_epoch: Option<usize>,
    pub prior: PriorKind,
    pub prior_sigma: f64,
    /// Steps fitting the fresh adversary to the prior before learning.
    pub adversary_warmup: usize,
    pub adam: AdamConfig,
}

impl Default for LiraConfig {
    fn default() -> Self {
        Self {
            rho: 1.5,
            beta: None,
            epsilon: 0.1,
            batch_size: 32,
            buffer_capacity: 102_400,
            lambda_init: 0.5,
            gamma_init: 0.01,
            state_lambda: false,
            lambda_override: None,
            max_batches_per_epoch: None,
            prior: PriorKind::ClippedGaussian,
            prior_sigma: SIGMA0,
            adversary_warmup: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl LiraConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(if self.state_lambda { 5e-3 } else { 1e-3 })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.rho < 0.0 {
            return Err(LiraError::config("lira.rho", "must be non-negative"));
        }
        if self.beta() < 0.0 {
            return Err(LiraError::config("lira.beta", "must be non-negative"));
        }
        if self.epsilon < 0.0 {
            return Err(LiraError::config("lira.epsilon", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(LiraError::config("lira.batch_size", "must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(LiraError::config("lira.buffer_capacity", "must be positive"));
        }
        if !unit(self.lambda_init) || !unit(self.gamma_init) {
            return Err(LiraError::config("lira.lambda_init", "lambda and gamma initial values must lie in [0, 1]"));
        }
        if let Some(l) = self.lambda_override {
            if !unit(l) {
                return Err(LiraError::config("lira.lambda_override", "must lie in [0, 1]"));
            }
        }
        if self.prior_sigma <= 0.0 {
            return Err(LiraError::config("lira.prior_sigma", "must be positive"));
        }
        Ok(())
    }

    pub fn build_prior(&self, d_max: f64) -> Box<dyn DisturbancePrior> {
        match self.prior {
            PriorKind::ClippedGaussian => Box::new(ClippedGaussianPrior { sigma: self.prior_sigma, d_max }),
            PriorKind::Uniform => Box::new(UniformPrior { d_max }),
        }
    }
}

/// Scalar multiplier or a state network with a bounded head.
#[derive(Clone, Debug)]
pub enum Lambda {
    /// Projected directly onto `[0, 1]` after each step.
    Scalar(Param),
    State(Mlp),
}

/// Auto-tuned multipliers and the slack network.
#[derive(Clone, Debug)]
pub struct LagrangeState {
    pub lambda: Lambda,
    pub gamma: Param,
    pub slack: Mlp,
}

impl LagrangeState {
    pub fn new(config: &LiraConfig, state_dim: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let lambda = if config.state_lambda {
            let mut net = Mlp::new(MlpSpec::common(state_dim, width, 1, Head::Bounded01), "lambda", rng)?;
            // start near the configured value: zero output weights, bias at the
            // preimage of lambda_init under squmoid
            net.scale_output_layer(0.0);
            let n = net.params().len();
            let y = 2.0 * config.lambda_init - 1.0;
            let pre = y / (1.0 - y * y).max(1e-12).sqrt();
            net.params_mut()[n - 1].value.data_mut()[0] = pre;
            Lambda::State(net)
        } else {
            Lambda::Scalar(Param::new("lambda", Array::scalar(config.lambda_init)))
        };
        Ok(Self {
            lambda,
            gamma: Param::new("gamma", Array::scalar(config.gamma_init)),
            slack: Mlp::new(MlpSpec::common(state_dim, width, 1, Head::Positive), "slack", rng)?,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.value.item()
    }

    /// `lambda(s_i)` per row.
    pub fn lambda_values(&self, s: &Array) -> Result<Vec<f64>> {
        let (n, _) = s.dims2();
        Ok(match &self.lambda {
            Lambda::Scalar(p) => vec![p.value.item(); n],
            Lambda::State(net) => net.forward(s)?.into_data(),
        })
    }

    pub fn lambda_graph<'t>(&self, tape: &'t Tape, s: Var<'t>) -> Result<Var<'t>> {
        let (n, _) = s.dims2();
        Ok(match &self.lambda {
            Lambda::Scalar(p) => tape.param(p).expand_scalar(&[n, 1]),
            Lambda::State(net) => net.forward_graph(tape, s)?,
        })
    }

    pub fn lambda_params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.lambda {
            Lambda::Scalar(p) => vec![p],
            Lambda::State(net) => net.params_mut().iter_mut().collect(),
        }
    }

    pub fn lambda_params(&self) -> Vec<&Param> {
        match &self.lambda {
            Lambda::Scalar(p) => vec![p],
            Lambda::State(net) => net.params().iter().collect(),
        }
    }
}

/// Midrange-mean balancing. Returns `(L^{θ,φ}, L^γ)`; with balancing off, or
/// fewer than two samples, the plain mean and a zero multiplier loss.
pub fn mmb<'t>(ell: Var<'t>, gamma: Var<'t>, enabled: bool) -> (Var<'t>, Var<'t>) {
    let n = ell.value().len();
    let mean = ell.mean();
    if !enabled || n < 2 {
        if enabled {
            log::debug!("mmb: batch of {n} sample(s), falling back to the mean");
        }
        return (mean, gamma.scale(0.0));
    }
    let mid = (ell.min() + ell.max()).scale(0.5);
    let g = gamma.stop_gradient();
    let combined = g * mid + g.rsub(1.0) * mean;
    let l_gamma = gamma * (mean - mid).stop_gradient();
    (combined, l_gamma)
}

/// `(L^λ, L^η)` from the constraint residual.
///
/// `gap` holds `ℓ^m − ℓ^a − ρ` per sample (no graph), so that
/// `δ = gap + Δ`. Inside the `epsilon` band the slack is pulled down with
/// weight `λ`; outside it tracks `|δ|` with the gradient reaching only `Δ`.
pub fn lambda_and_slack_losses<'t>(
    tape: &'t Tape,
    gap: &[f64],
    lambda: Var<'t>,
    slack: Var<'t>,
    epsilon: f64,
) -> (Var<'t>, Var<'t>) {
    let n = gap.len();
    let col = |v: Vec<f64>| tape.constant(Array::matrix(n, 1, v));
    let slack_v = slack.value();
    let delta: Vec<f64> = gap.iter().zip(slack_v.data()).map(|(g, s)| g + s).collect();
    let inside: Vec<f64> = delta.iter().map(|d| if d.abs() <= epsilon { 1.0 } else { 0.0 }).collect();
    let outside: Vec<f64> = inside.iter().map(|v| 1.0 - v).collect();
    let l_lambda = (lambda * col(delta)).mean().scale(-1.0);
    let in_term = col(inside) * lambda.stop_gradient() * slack;
    let out_term = col(outside) * (col(gap.to_vec()) + slack).abs();
    (l_lambda, (in_term + out_term).mean())
}

/// Per-sample quantities of one batch on a shared tape.
pub struct PerSample<'t> {
    /// `λ_i ℓ^m_i + (1 − λ_i) ℓ^a_i` with `λ` cut, `[n, 1]`.
    pub ell: Var<'t>,
    pub ell_m: Var<'t>,
    pub ell_a: Var<'t>,
    /// Reparameterized (or stored) disturbance.
    pub d_hat: Var<'t>,
    /// `ln π(d_hat | s)`, `[n, 1]`.
    pub log_q: Var<'t>,
    pub lambda: Var<'t>,
    pub slack: Var<'t>,
    /// `ℓ^m − ℓ^a − ρ` without graph.
    pub gap: Vec<f64>,
}

impl PerSample<'_> {
    /// `δ_i = ℓ^m_i − ℓ^a_i − ρ + Δ_i`.
    pub fn delta(&self) -> Vec<f64> {
        self.gap.iter().zip(self.slack.value().data()).map(|(g, s)| g + s).collect()
    }
}

/// All loss terms of one batch. `total` is what gets differentiated.
pub struct LossTerms<'t> {
    pub per_sample: PerSample<'t>,
    pub l_theta_phi: Var<'t>,
    pub l_phi: Var<'t>,
    pub l_lambda: Var<'t>,
    pub l_eta: Var<'t>,
    pub l_gamma: Var<'t>,
    /// Likelihood-ratio surrogate (only without reparameterization).
    pub l_score: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Averages over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub batches: usize,
    pub loss_marginal: f64,
    pub loss_aware: f64,
    /// Mean of `ℓ^m − ℓ^a`.
    pub gap: f64,
    pub lambda_mean: f64,
    pub gamma: f64,
    pub adversary_scale: f64,
    pub kl: f64,
    pub dropped: u64,
}

/// Everything trained by the algorithm, with one optimizer per group.
pub struct Learner {
    pub mode: LiraMode,
    pub config: LiraConfig,
    pub model: WorldModel,
    pub adversary: Adversary,
    pub lagrange: LagrangeState,
    pub prior: Box<dyn DisturbancePrior>,
    opt_theta: Adam,
    opt_phi: Adam,
    opt_eta: Adam,
    opt_lambda: Adam,
    opt_gamma: Adam,
    dropped: u64,
    steps: u64,
}

/// Network sizes of a learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Width of the common two-layer architecture.
    pub width: usize,
    pub flow: FlowSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { width: 100, flow: FlowSpec::default() }
    }
}

impl Learner {
    pub fn new(
        mode: LiraMode,
        config: LiraConfig,
        net: &NetworkConfig,
        dims: WorldModelDims,
        d_max: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let model = WorldModel::new(dims, net.width, &net.flow, mode.odd_rnf(), rng)?;
        let adversary = Adversary::new(dims.state, dims.disturbance, d_max, net.width, &net.flow, rng)?;
        let lagrange = LagrangeState::new(&config, dims.state, net.width, rng)?;
        let prior = config.build_prior(d_max);
        let adam = config.adam;
        let warmup = config.adversary_warmup;
        let mut learner = Self {
            mode,
            config,
            model,
            adversary,
            lagrange,
            prior,
            opt_theta: Adam::new(adam),
            opt_phi: Adam::new(adam),
            opt_eta: Adam::new(adam),
            opt_lambda: Adam::new(adam),
            opt_gamma: Adam::new(adam),
            dropped: 0,
            steps: 0,
        };
        if warmup > 0 && mode.trains_adversary() {
            learner.fit_adversary_to_prior(warmup, rng)?;
        }
        Ok(learner)
    }

    /// Minimizes the reparameterized KL to the prior on fresh samples at
    /// standard-normal states, with its own optimizer.
    pub fn fit_adversary_to_prior(&mut self, steps: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut opt = Adam::new(self.config.adam);
        let (n, ds) = (64, self.model.dims().state);
        let mut kl = f64::NAN;
        for _ in 0..steps {
            let s = Array::matrix(n, ds, (0..n * ds).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect());
            let d = self.adversary.sample(&s, rng)?;
            let tape = Tape::new();
            let (d_hat, log_q) = self.adversary.hrg(&tape, &d, tape.constant(s))?;
            let loss = (log_q - self.prior.log_prob_graph(d_hat)).mean();
            kl = loss.item();
            let grads = tape.backward(loss)?;
            opt.step(self.adversary.params_mut(), &grads, None);
        }
        Ok(kl)
    }

    /// The pinned `λ`, if the mode or the configuration fixes one.
    pub fn fixed_lambda(&self) -> Option<f64> {
        self.config.lambda_override.or(self.mode.fixed_lambda())
    }

    pub fn beta(&self) -> f64 {
        self.mode.beta(self.config.beta())
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Every trainable parameter, in a fixed order with unique names.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.model.params().collect();
        out.extend(self.adversary.params());
        out.extend(self.lagrange.lambda_params());
        out.push(&self.lagrange.gamma);
        out.extend(self.lagrange.slack.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.model.params_mut().collect();
        out.extend(self.adversary.params_mut().iter_mut());
        let LagrangeState { lambda, gamma, slack } = &mut self.lagrange;
        match lambda {
            Lambda::Scalar(p) => out.push(p),
            Lambda::State(net) => out.extend(net.params_mut().iter_mut()),
        }
        out.push(gamma);
        out.extend(slack.params_mut().iter_mut());
        out
    }

    /// Named parameter values for checkpointing.
    pub fn named_values(&self) -> Vec<(String, Array)> {
        self.params().into_iter().map(|p| (p.name().to_string(), p.value.clone())).collect()
    }

    /// Overwrites every parameter from `values`; all names must be present
    /// with matching shapes.
    pub fn load_values(&mut self, values: &[(String, Array)]) -> Result<()> {
        for p in self.params_mut() {
            let v = values
                .iter()
                .find(|(n, _)| n == p.name())
                .map(|(_, a)| a)
                .ok_or_else(|| LiraError::Checkpoint(format!("missing parameter {}", p.name())))?;
            if v.shape() != p.value.shape() {
                return Err(LiraError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name(),
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// `λ(s)` per row as used in the losses.
    pub fn lambda_values(&self, s: &Array) -> Result<Vec<f64>> {
        match self.fixed_lambda() {
            Some(l) => Ok(vec![l; s.dims2().0]),
            None => self.lagrange.lambda_values(s),
        }
    }

    /// Disturbance to apply while collecting data from state `s`.
    pub fn disturbance(&self, s: &[f64], rng: &mut LiraRng) -> Result<Vec<f64>> {
        if self.mode.trains_adversary() {
            Ok(self.adversary.sample(&Array::matrix(1, s.len(), s.to_vec()), rng)?.into_data())
        } else {
            Ok(self.prior.sample(self.adversary.dim(), rng))
        }
    }

    /// Per-sample losses: `ℓ^m`, `ℓ^a` through the reversed reparameterized
    /// disturbance, and their `λ`-blend.
    pub fn per_sample_losses<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<PerSample<'t>> {
        let n = batch.len();
        let s = tape.constant(batch.s.clone());
        let a = tape.constant(batch.a.clone());
        let y = tape.constant(batch.y.clone());
        let (loc, scale) = self.model.marginal_graph(tape, s, a)?;
        let ell_m = WorldModel::marginal_log_prob_graph(loc, scale, y).scale(-1.0);

        let (d_hat, log_q, d_bar) = if !self.mode.trains_adversary() {
            let d = tape.constant(batch.d.clone());
            let lq = self.adversary.log_prob(&batch.d, &batch.s)?;
            (d, tape.constant(Array::matrix(n, 1, lq)), d)
        } else if self.mode.uses_hrg() {
            let (d_hat, lq) = self.adversary.hrg(tape, &batch.d, s)?;
            (d_hat, lq, d_hat.grl())
        } else {
            let d = tape.constant(batch.d.clone());
            let lq = self.adversary.log_prob_graph(tape, &batch.d, s)?;
            (d, lq, d)
        };
        let ell_a = self.model.aware_log_prob_graph(tape, loc, scale, y, d_bar)?.scale(-1.0);

        let lambda = match self.fixed_lambda() {
            Some(l) => tape.constant(Array::full(&[n, 1], l)),
            None => self.lagrange.lambda_graph(tape, s)?,
        };
        let lam = lambda.stop_gradient();
        let ell = lam * ell_m + lam.rsub(1.0) * ell_a;
        let slack = self.lagrange.slack.forward_graph(tape, s)?;
        let rho = self.config.rho;
        let gap = ell_m.value().data().iter().zip(ell_a.value().data()).map(|(m, a)| m - a - rho).collect();
        Ok(PerSample { ell, ell_m, ell_a, d_hat, log_q, lambda, slack, gap })
    }

    /// Assembles every loss term of the algorithm for one batch.
    pub fn losses<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<LossTerms<'t>> {
        let ps = self.per_sample_losses(tape, batch)?;
        let gamma = tape.param(&self.lagrange.gamma);
        let (l_theta_phi, l_gamma) = mmb(ps.ell, gamma, self.mode.uses_mmb());

        let beta = self.beta();
        let zero = tape.scalar(0.0);
        let mut l_score = None;
        let l_phi = if beta > 0.0 && self.mode.trains_adversary() {
            let log_p = self.prior.log_prob_graph(ps.d_hat);
            if self.mode.uses_hrg() {
                (ps.log_q - log_p).mean().scale(beta)
            } else {
                let weight = (ps.log_q - log_p).stop_gradient();
                (ps.log_q * weight).mean().scale(beta)
            }
        } else {
            zero
        };
        if self.mode.trains_adversary() && !self.mode.uses_hrg() {
            let (n, _) = ps.ell_a.dims2();
            let ell_a = ps.ell_a.value();
            let baseline = ell_a.data().iter().sum::<f64>() / n as f64;
            let advantage = tape.constant(ell_a.map(|v| v - baseline));
            let weight = ps.lambda.stop_gradient().rsub(1.0);
            l_score = Some((weight * ps.log_q * advantage).mean().scale(-1.0));
        }

        let (l_lambda, l_eta) = if self.fixed_lambda().is_none() {
            lambda_and_slack_losses(tape, &ps.gap, ps.lambda, ps.slack, self.config.epsilon)
        } else {
            (zero, zero)
        };
        let mut total = l_theta_phi + l_phi + l_lambda + l_eta + l_gamma;
        if let Some(s) = l_score {
            total = total + s;
        }
        Ok(LossTerms { per_sample: ps, l_theta_phi, l_phi, l_lambda, l_eta, l_gamma, l_score, total })
    }

    /// Rows whose likelihoods are finite.
    fn finite_rows(terms: &LossTerms<'_>) -> Vec<usize> {
        let m = terms.per_sample.ell_m.value();
        let a = terms.per_sample.ell_a.value();
        (0..m.len()).filter(|&i| m.data()[i].is_finite() && a.data()[i].is_finite()).collect()
    }

    /// Applies one optimizer step per parameter group from `grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients) {
        let mut theta: Vec<&mut Param> = self.model.params_mut().collect();
        self.opt_theta.step_refs(&mut theta, grads, None);
        if self.mode.trains_adversary() {
            self.opt_phi.step(self.adversary.params_mut(), grads, None);
        }
        if self.fixed_lambda().is_none() {
            self.opt_eta.step(self.lagrange.slack.params_mut(), grads, None);
            let bounds = match self.lagrange.lambda {
                Lambda::Scalar(_) => Some((0.0, 1.0)),
                Lambda::State(_) => None,
            };
            let mut lam = self.lagrange.lambda_params_mut();
            self.opt_lambda.step_refs(&mut lam, grads, bounds);
        }
        if self.mode.uses_mmb() {
            self.opt_gamma.step(std::slice::from_mut(&mut self.lagrange.gamma), grads, Some((0.0, 1.0)));
        }
        self.steps += 1;
    }

    /// One optimization step on `batch`; returns per-batch diagnostics
    /// `(ℓ^m mean, ℓ^a mean, λ mean)` or `None` if nothing finite remained.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<Option<(f64, f64, f64)>> {
        let tape = Tape::new();
        let mut terms = self.losses(&tape, batch)?;
        let keep = Self::finite_rows(&terms);
        let filtered;
        if keep.len() < batch.len() {
            let lost = (batch.len() - keep.len()) as u64;
            self.dropped += lost;
            log::warn!("dropped {lost} samples with non-finite likelihood ({} total)", self.dropped);
            if keep.is_empty() {
                return Ok(None);
            }
            filtered = batch.select(&keep);
            terms = self.losses(&tape, &filtered)?;
        }
        let mean = |v: Var<'_>| {
            let a = v.value();
            a.data().iter().sum::<f64>() / a.len() as f64
        };
        let diag = (mean(terms.per_sample.ell_m), mean(terms.per_sample.ell_a), mean(terms.per_sample.lambda));
        let grads = tape.backward(terms.total)?;
        self.apply_gradients(&grads);
        Ok(Some(diag))
    }

    /// Replays the buffer once in disjoint random batches.
    pub fn train_epoch(&mut self, buffer: &ReplayBuffer, rng: &mut LiraRng) -> Result<EpochDiagnostics> {
        if buffer.is_empty() {
            log::warn!("train_epoch on an empty buffer");
            return Ok(EpochDiagnostics { gamma: self.lagrange.gamma(), ..Default::default() });
        }
        let mut batches = buffer.epoch_batches(self.config.batch_size, rng);
        if let Some(cap) = self.config.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut diag = EpochDiagnostics::default();
        let mut states = Vec::new();
        for idx in &batches {
            let batch = buffer.batch(idx);
            if let Some((m, a, l)) = self.train_batch(&batch)? {
                diag.batches += 1;
                diag.loss_marginal += m;
                diag.loss_aware += a;
                diag.lambda_mean += l;
            }
            if states.len() < 256 {
                states.extend(idx.iter().map(|&i| buffer.get(i).s.clone()));
            }
        }
        if diag.batches > 0 {
            let k = diag.batches as f64;
            diag.loss_marginal /= k;
            diag.loss_aware /= k;
            diag.lambda_mean /= k;
        }
        diag.gap = diag.loss_marginal - diag.loss_aware;
        diag.gamma = self.lagrange.gamma();
        diag.dropped = self.dropped;
        let ds = states[0].len();
        let s = Array::matrix(states.len(), ds, states.concat());
        let d = self.adversary.sample(&s, rng)?;
        diag.adversary_scale = crate::flows::column_std(&d).iter().sum::<f64>() / d.dims2().1 as f64;
        diag.kl = crate::flows::kl_mc(&self.adversary, self.prior.as_ref(), &d, &s).map(|(k, _)| k).unwrap_or(f64::NAN);
        Ok(diag)
    }
}

/// Outcome of one data-collection episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    /// Sum of all reward coordinates over the episode.
    pub ret: f64,
    pub steps: usize,
    pub terminated: bool,
}

/// Runs one episode, choosing actions with `act` and disturbances with
/// `disturb`, and stores every transition when a buffer is given.
pub fn collect_episode(
    env: &dyn Env,
    act: &mut dyn FnMut(usize, &[f64], &mut LiraRng) -> Result<Vec<f64>>,
    disturb: &mut dyn FnMut(usize, &[f64], &mut LiraRng) -> Result<Vec<f64>>,
    mut buffer: Option<&mut ReplayBuffer>,
    rng: &mut LiraRng,
) -> Result<EpisodeResult> {
    let spec = env.spec();
    let mut s = env.reset(rng);
    let mut ret = 0.0;
    for t in 0..spec.t_max {
        let a = act(t, &s, rng)?;
        let d = disturb(t, &s, rng)?;
        let step = env.step(&s, &a, &d);
        ret += step.reward.iter().sum::<f64>();
        if let Some(buf) = buffer.as_deref_mut() {
            let clip = |v: &[f64], b: f64| v.iter().map(|x| x.clamp(-b, b)).collect::<Vec<_>>();
            buf.push(Transition {
                s: s.clone(),
                a: clip(&a, spec.action_bound),
                s_next: step.next.clone(),
                r: step.reward.clone(),
                d: clip(&d, spec.d_max),
            });
        }
        s = step.next;
        if step.terminated {
            return Ok(EpisodeResult { ret, steps: t + 1, terminated: true });
        }
    }
    Ok(EpisodeResult { ret, steps: spec.t_max, terminated: false })
}
