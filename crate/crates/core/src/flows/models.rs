use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

use super::stack::{FlowSpec, FlowStack};
use super::{gauss_log_prob_graph, std_normal_log_prob_graph, UniformBox, LN_SQRT_2PI};
use crate::neural::{squish, Activation, Head, Mlp, MlpSpec};
use crate::tensor::{Array, Param, Tape, Var};
use crate::{LiraError, Result};

/// Spline bound of the residual flow, in standardized units.
pub const RNF_BOUND: f64 = 5.0;
const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldModelDims {
    pub state: usize,
    pub action: usize,
    pub reward: usize,
    pub disturbance: usize,
}

impl WorldModelDims {
    /// Dimension of the predicted target `(s', r)`.
    pub fn target(&self) -> usize {
        self.state + self.reward
    }
}

/// Disturbance-marginalized Gaussian over `(s', r)` plus a conditional flow
/// on the standardized residual that yields the disturbance-aware density.
///
/// With the odd restriction the aware density stays symmetric about the
/// marginalized mean, so conditioning on `d` cannot bias the prediction.
#[derive(Clone, Debug)]
pub struct WorldModel {
    dims: WorldModelDims,
    marginal: Mlp,
    rnf: FlowStack,
}

impl WorldModel {
    pub fn new(
        dims: WorldModelDims,
        width: usize,
        flow: &FlowSpec,
        odd: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let marginal = Mlp::new(
            MlpSpec::common(dims.state + dims.action, width, 2 * dims.target(), Head::Linear),
            "model",
            rng,
        )?;
        let hidden = vec![(flow.width, Activation::Squaresign), (flow.width, Activation::Squaresign)];
        let rnf = FlowStack::new("rnf", dims.target(), dims.disturbance, hidden, flow, RNF_BOUND, odd, rng)?;
        Ok(Self { dims, marginal, rnf })
    }

    pub fn dims(&self) -> WorldModelDims {
        self.dims
    }

    pub fn rnf(&self) -> &FlowStack {
        &self.rnf
    }

    pub fn rnf_mut(&mut self) -> &mut FlowStack {
        &mut self.rnf
    }

    pub fn marginal_net(&self) -> &Mlp {
        &self.marginal
    }

    /// Parameters of the marginalized Gaussian.
    pub fn marginal_params(&self) -> &[Param] {
        self.marginal.params()
    }

    /// All model parameters: the Gaussian network then the flow conditioner.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.marginal.params().iter().chain(self.rnf.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.marginal.params_mut().iter_mut().chain(self.rnf.params_mut())
    }

    fn check_inputs(&self, s: &Array, a: &Array) -> Result<()> {
        let (ns, ds) = s.dims2();
        let (na, da) = a.dims2();
        if ds != self.dims.state || da != self.dims.action || ns != na {
            return Err(LiraError::Contract(format!(
                "model expects states [n, {}] and actions [n, {}], got {:?} and {:?}",
                self.dims.state,
                self.dims.action,
                s.shape(),
                a.shape()
            )));
        }
        Ok(())
    }

    /// Marginalized `(loc, scale)`, both `[n, state + reward]`.
    pub fn marginal(&self, s: &Array, a: &Array) -> Result<(Array, Array)> {
        self.check_inputs(s, a)?;
        let out = self.marginal.forward(&Array::hstack(&[s, a]))?;
        let t = self.dims.target();
        let mut loc = out.cols(0, t);
        let (n, _) = loc.dims2();
        for r in 0..n {
            for j in 0..self.dims.state {
                loc.data_mut()[r * t + j] += s.data()[r * self.dims.state + j];
            }
        }
        let scale = out.cols(t, 2 * t).map(|v| SCALE_FLOOR + squish(v));
        Ok((loc, scale))
    }

    /// Mean prediction split into next states `[n, state]` and rewards `[n, reward]`.
    pub fn predict_mean(&self, s: &Array, a: &Array) -> Result<(Array, Array)> {
        let (loc, _) = self.marginal(s, a)?;
        Ok((loc.cols(0, self.dims.state), loc.cols(self.dims.state, self.dims.target())))
    }

    /// Recorded marginalized `(loc, scale)`.
    pub fn marginal_graph<'t>(
        &self,
        tape: &'t Tape,
        s: Var<'t>,
        a: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.check_inputs(&s.value(), &a.value())?;
        let out = self.marginal.forward_graph(tape, Var::concat_cols(&[s, a]))?;
        let t = self.dims.target();
        let delta = out.slice_cols(0, t);
        let (n, _) = delta.dims2();
        let base = if self.dims.reward > 0 {
            Var::concat_cols(&[s, tape.constant(Array::zeros(&[n, self.dims.reward]))])
        } else {
            s
        };
        let loc = delta + base;
        let scale = out.slice_cols(t, 2 * t).squish().offset(SCALE_FLOOR);
        Ok((loc, scale))
    }

    /// `ln p(y | s, a)` under the marginalized model, `[n, 1]`.
    pub fn marginal_log_prob_graph<'t>(loc: Var<'t>, scale: Var<'t>, y: Var<'t>) -> Var<'t> {
        gauss_log_prob_graph(loc, scale, y)
    }

    /// `ln p(y | s, a; d)` under the aware model, `[n, 1]`.
    pub fn aware_log_prob_graph<'t>(
        &self,
        tape: &'t Tape,
        loc: Var<'t>,
        scale: Var<'t>,
        y: Var<'t>,
        d: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.rnf.tau() == 0.0 {
            return Ok(Self::marginal_log_prob_graph(loc, scale, y));
        }
        let u = (y - loc) / scale;
        let (z, ld_inv) = self.rnf.inverse_graph(tape, u, d)?;
        Ok(std_normal_log_prob_graph(z) - scale.ln().sum_cols() + ld_inv)
    }

    /// Per-row marginalized log density.
    pub fn marginal_log_prob(&self, s: &Array, a: &Array, y: &Array) -> Result<Vec<f64>> {
        let (loc, scale) = self.marginal(s, a)?;
        let t = self.dims.target();
        Ok((0..loc.dims2().0)
            .map(|r| {
                (0..t)
                    .map(|j| {
                        let i = r * t + j;
                        let z = (y.data()[i] - loc.data()[i]) / scale.data()[i];
                        -0.5 * z * z - scale.data()[i].ln() - LN_SQRT_2PI
                    })
                    .sum()
            })
            .collect())
    }

    /// Per-row aware log density.
    pub fn aware_log_prob(&self, s: &Array, a: &Array, y: &Array, d: &Array) -> Result<Vec<f64>> {
        let (loc, scale) = self.marginal(s, a)?;
        let u = y.zip_map(&loc, |y, m| y - m).zip_map(&scale, |r, sc| r / sc);
        let z = self.rnf.inverse(&u, d)?;
        let (_, ld) = self.rnf.forward(&z, d)?;
        let t = self.dims.target();
        Ok((0..loc.dims2().0)
            .map(|r| {
                let row = r * t..(r + 1) * t;
                let base: f64 = row.map(|i| -0.5 * z.data()[i].powi(2) - scale.data()[i].ln() - LN_SQRT_2PI).sum();
                base - ld[r]
            })
            .collect())
    }

    /// Draws `(s', r)` from the aware model.
    pub fn sample_aware(&self, s: &Array, a: &Array, d: &Array, rng: &mut impl Rng) -> Result<Array> {
        let (loc, scale) = self.marginal(s, a)?;
        let (n, t) = loc.dims2();
        let z = Array::matrix(n, t, (0..n * t).map(|_| StandardNormal.sample(rng)).collect());
        let (u, _) = self.rnf.forward(&z, d)?;
        Ok(loc.zip_map(&scale.zip_map(&u, |sc, v| sc * v), |m, r| m + r))
    }
}

/// State-conditioned disturbance generator over the box `[-d_max, d_max]^dim`.
#[derive(Clone, Debug)]
pub struct Adversary {
    flow: FlowStack,
    base: UniformBox,
}

impl Adversary {
    /// The conditioner extracts state features with two `feature_width`
    /// squish layers, then feeds two smaller squaresign layers.
    pub fn new(
        state_dim: usize,
        dim: usize,
        d_max: f64,
        feature_width: usize,
        flow: &FlowSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_max <= 0.0 {
            return Err(LiraError::config("d_max", "must be positive"));
        }
        let hidden = vec![
            (feature_width, Activation::SquishRms),
            (feature_width, Activation::SquishRms),
            (flow.width, Activation::Squaresign),
            (flow.width, Activation::Squaresign),
        ];
        let flow = FlowStack::new("adversary", dim, state_dim, hidden, flow, d_max, false, rng)?;
        Ok(Self { flow, base: UniformBox::new(d_max, dim) })
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn d_max(&self) -> f64 {
        self.base.half_width
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn params(&self) -> &[Param] {
        self.flow.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        self.flow.params_mut()
    }

    fn clip(&self, d: Array) -> Array {
        let m = self.d_max();
        d.map(|v| v.clamp(-m, m))
    }

    /// One disturbance per row of `s`.
    pub fn sample(&self, s: &Array, rng: &mut impl Rng) -> Result<Array> {
        let (n, _) = s.dims2();
        let u: Vec<f64> = (0..n).flat_map(|_| self.base.sample(rng)).collect();
        let (d, _) = self.flow.forward(&Array::matrix(n, self.dim(), u), s)?;
        Ok(self.clip(d))
    }

    /// `ln pi(d | s)` per row.
    pub fn log_prob(&self, d: &Array, s: &Array) -> Result<Vec<f64>> {
        let u = self.flow.inverse(d, s)?;
        let (_, ld) = self.flow.forward(&u, s)?;
        let base = self.base.log_density();
        Ok(ld.into_iter().map(|v| base - v).collect())
    }

    /// Hindsight reparameterization: `d_hat = g(g^{-1}(d; s); s)` with the
    /// base point held constant, so `d_hat` equals `d` in value but carries
    /// the pathwise gradient to the conditioner. Also returns `ln pi(d_hat | s)`.
    pub fn hrg<'t>(&self, tape: &'t Tape, d: &Array, s: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let u = self.flow.inverse(d, &s.value())?;
        let (d_hat, ld) = self.flow.forward_graph(tape, tape.constant(u), s)?;
        Ok((d_hat, ld.scale(-1.0).offset(self.base.log_density())))
    }

    /// Recorded `ln pi(d | s)` at fixed `d` (the likelihood-ratio path).
    pub fn log_prob_graph<'t>(&self, tape: &'t Tape, d: &Array, s: Var<'t>) -> Result<Var<'t>> {
        let (_, ld_inv) = self.flow.inverse_graph(tape, tape.constant(d.clone()), s)?;
        Ok(ld_inv.offset(self.base.log_density()))
    }

    /// Per-coordinate sample standard deviation over `samples` draws per state.
    pub fn sample_std(&self, s: &Array, samples: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let (n, ds) = s.dims2();
        let rows: Vec<f64> = (0..samples).flat_map(|i| s.row(i % n).to_vec()).collect();
        let d = self.sample(&Array::matrix(samples, ds, rows), rng)?;
        Ok(column_std(&d))
    }
}

/// Per-column sample standard deviation.
pub fn column_std(x: &Array) -> Vec<f64> {
    let (n, c) = x.dims2();
    (0..c)
        .map(|j| {
            let mean = (0..n).map(|i| x.data()[i * c + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.data()[i * c + j] - mean).powi(2)).sum::<f64>() / (n - 1).max(1) as f64;
            var.sqrt()
        })
        .collect()
}

/// Reference distribution the adversary is regularized toward.
pub trait DisturbancePrior: Send + Sync {
    /// Log density of one disturbance vector.
    fn log_prob(&self, d: &[f64]) -> f64;

    /// Row-wise recorded log density, `[n, dim] -> [n, 1]`.
    fn log_prob_graph<'t>(&self, d: Var<'t>) -> Var<'t>;

    fn sample(&self, dim: usize, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Zero-mean Gaussian restricted to the box. Samples are clipped onto the box
/// (as the nominal environment noise is); the density is the truncated one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClippedGaussianPrior {
    pub sigma: f64,
    pub d_max: f64,
}

impl ClippedGaussianPrior {
    fn log_norm(&self) -> f64 {
        -self.sigma.ln() - LN_SQRT_2PI - erf(self.d_max / (self.sigma * std::f64::consts::SQRT_2)).ln()
    }
}

impl DisturbancePrior for ClippedGaussianPrior {
    fn log_prob(&self, d: &[f64]) -> f64 {
        if d.iter().any(|v| v.abs() > self.d_max) {
            return f64::NEG_INFINITY;
        }
        d.iter().map(|v| -0.5 * (v / self.sigma).powi(2) + self.log_norm()).sum()
    }

    fn log_prob_graph<'t>(&self, d: Var<'t>) -> Var<'t> {
        let (_, c) = d.dims2();
        d.scale(1.0 / self.sigma).square().scale(-0.5).sum_cols().offset(c as f64 * self.log_norm())
    }

    fn sample(&self, dim: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                (self.sigma * e).clamp(-self.d_max, self.d_max)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformPrior {
    pub d_max: f64,
}

impl DisturbancePrior for UniformPrior {
    fn log_prob(&self, d: &[f64]) -> f64 {
        UniformBox::new(self.d_max, d.len()).log_prob(d)
    }

    fn log_prob_graph<'t>(&self, d: Var<'t>) -> Var<'t> {
        let (n, c) = d.dims2();
        d.tape().constant(Array::full(&[n, 1], -(c as f64) * (2.0 * self.d_max).ln()))
    }

    fn sample(&self, dim: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-self.d_max..=self.d_max)).collect()
    }
}

/// Monte-Carlo KL estimate `mean[ln pi(d | s) - ln prior(d)]` over paired
/// `(d, s)` rows drawn from the adversary. Rows where the prior density
/// vanishes are excluded; their count is returned alongside the estimate.
pub fn kl_mc(adversary: &Adversary, prior: &dyn DisturbancePrior, d: &Array, s: &Array) -> Result<(f64, usize)> {
    let lq = adversary.log_prob(d, s)?;
    let (n, c) = d.dims2();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (r, q) in lq.iter().enumerate() {
        let p = prior.log_prob(&d.data()[r * c..(r + 1) * c]);
        if p.is_finite() && q.is_finite() {
            sum += q - p;
            kept += 1;
        }
    }
    let dropped = n - kept;
    if dropped > 0 {
        log::warn!("kl_mc: excluded {dropped} samples with zero prior density");
    }
    if kept == 0 {
        return Err(LiraError::Contract("kl_mc: no sample with positive prior density".into()));
    }
    Ok((sum / kept as f64, dropped))
}
