//! Sampling-based model predictive control with elite selection,
//! softmax-weighted averaging, momentum and warm starts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::flows::WorldModel;
use crate::tensor::{softmax_in_place, Array};
use crate::{LiraError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub candidates: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub inv_temperature: f64,
    /// Weight on repelling from rejected candidates. Kept for completeness;
    /// the update below does not use it.
    pub negative_ratio: f64,
    /// Damping of the momentum term.
    pub slowdown: f64,
    pub horizon: usize,
    /// Scale of the fresh policy each step starts from.
    pub init_scale: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            candidates: 256,
            elite_fraction: 0.25,
            iterations: 4,
            step_size: 0.25,
            inv_temperature: 1.0,
            negative_ratio: 1.0,
            slowdown: 0.5,
            horizon: 12,
            init_scale: 1.0,
        }
    }
}

impl PlannerConfig {
    pub fn elites(&self) -> usize {
        ((self.candidates as f64 * self.elite_fraction).round() as usize).min(self.candidates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates < 8 {
            return Err(LiraError::config("planner.candidates", "must be at least 8"));
        }
        if self.elites() < 2 {
            return Err(LiraError::config("planner.elite_fraction", "must keep at least two elites"));
        }
        if self.horizon == 0 {
            return Err(LiraError::config("planner.horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.step_size) {
            return Err(LiraError::config("planner.step_size", "must lie in [0, 1]"));
        }
        if self.init_scale <= 0.0 {
            return Err(LiraError::config("planner.init_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Mean-prediction dynamics used for rollouts: `(s [n, ds], a [n, da]) ->
/// (s' [n, ds], r [n, dr])`.
pub trait Dynamics {
    fn predict(&self, s: &Array, a: &Array) -> Result<(Array, Array)>;
}

impl Dynamics for WorldModel {
    fn predict(&self, s: &Array, a: &Array) -> Result<(Array, Array)> {
        self.predict_mean(s, a)
    }
}

impl<F> Dynamics for F
where
    F: Fn(&Array, &Array) -> Result<(Array, Array)>,
{
    fn predict(&self, s: &Array, a: &Array) -> Result<(Array, Array)> {
        self(s, a)
    }
}

/// Per-step diagonal Gaussian over action sequences, `[horizon, action_dim]`
/// flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerPolicy {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    velocity: Vec<f64>,
    pub horizon: usize,
    pub action_dim: usize,
}

impl PlannerPolicy {
    pub fn new(horizon: usize, action_dim: usize, scale: f64) -> Self {
        let n = horizon * action_dim;
        Self { mean: vec![0.0; n], scale: vec![scale; n], velocity: vec![0.0; n], horizon, action_dim }
    }

    pub fn first_mean(&self) -> &[f64] {
        &self.mean[..self.action_dim]
    }

    pub fn first_scale(&self) -> &[f64] {
        &self.scale[..self.action_dim]
    }

    fn shifted(&self) -> Self {
        let a = self.action_dim;
        let shift = |v: &[f64]| {
            let mut out = v[a..].to_vec();
            out.extend_from_slice(&v[v.len() - a..]);
            out
        };
        Self {
            mean: shift(&self.mean),
            scale: shift(&self.scale),
            velocity: vec![0.0; self.mean.len()],
            horizon: self.horizon,
            action_dim: a,
        }
    }
}

/// Shifts `prev` one step forward in time (repeating its last step) and
/// blends `init` toward it by `step_size`.
pub fn warm_start(prev: &PlannerPolicy, init: &PlannerPolicy, step_size: f64) -> PlannerPolicy {
    let shifted = prev.shifted();
    let blend = |i: &[f64], s: &[f64]| i.iter().zip(s).map(|(a, b)| (1.0 - step_size) * a + step_size * b).collect();
    PlannerPolicy {
        mean: blend(&init.mean, &shifted.mean),
        scale: blend(&init.scale, &shifted.scale),
        velocity: vec![0.0; init.mean.len()],
        horizon: init.horizon,
        action_dim: init.action_dim,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub actions: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub ret: f64,
}

/// Propagates the mean prediction along one action sequence. The return is
/// the plain sum of predicted rewards over steps and reward coordinates;
/// non-finite predictions score `-inf`.
pub fn rollout(model: &dyn Dynamics, s0: &[f64], actions: &[Vec<f64>]) -> Result<Rollout> {
    let mut s = s0.to_vec();
    let mut states = Vec::with_capacity(actions.len());
    let mut rewards = Vec::with_capacity(actions.len());
    let mut ret = 0.0;
    for a in actions {
        let (sn, r) = model.predict(&Array::matrix(1, s.len(), s.clone()), &Array::matrix(1, a.len(), a.clone()))?;
        s = sn.into_data();
        let r = r.into_data();
        ret += r.iter().sum::<f64>();
        states.push(s.clone());
        rewards.push(r);
    }
    if !ret.is_finite() {
        ret = f64::NEG_INFINITY;
    }
    Ok(Rollout { actions: actions.to_vec(), states, rewards, ret })
}

/// Returns of `n` candidate sequences stored as `[n, horizon * action_dim]`.
pub fn batch_returns(model: &dyn Dynamics, s0: &[f64], seqs: &Array, horizon: usize, action_dim: usize) -> Result<Vec<f64>> {
    let (n, _) = seqs.dims2();
    let ds = s0.len();
    let mut s = Array::matrix(n, ds, s0.repeat(n));
    let mut ret = vec![0.0; n];
    for t in 0..horizon {
        let a = seqs.cols(t * action_dim, (t + 1) * action_dim);
        let (sn, r) = model.predict(&s, &a)?;
        let (_, dr) = r.dims2();
        for (i, acc) in ret.iter_mut().enumerate() {
            *acc += r.data()[i * dr..(i + 1) * dr].iter().sum::<f64>();
        }
        s = sn;
    }
    for (i, r) in ret.iter_mut().enumerate() {
        let row_ok = s.row(i).iter().all(|v| v.is_finite());
        if !r.is_finite() || !row_ok {
            *r = f64::NEG_INFINITY;
        }
    }
    Ok(ret)
}

/// Diagnostics of one planning call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanTrace {
    /// `(min elite return, max rejected return)` per iteration.
    pub separation: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
    pub action_dim: usize,
    pub action_bound: f64,
}

impl Planner {
    pub fn new(config: PlannerConfig, action_dim: usize, action_bound: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, action_dim, action_bound })
    }

    pub fn initial_policy(&self) -> PlannerPolicy {
        PlannerPolicy::new(self.config.horizon, self.action_dim, self.config.init_scale)
    }

    fn clip(&self, v: f64) -> f64 {
        v.clamp(-self.action_bound, self.action_bound)
    }

    /// Refines `policy` in place and returns the action to execute: the
    /// first-step mean, or with `explore` a draw from the first-step Gaussian.
    pub fn plan(
        &self,
        s0: &[f64],
        model: &dyn Dynamics,
        policy: &mut PlannerPolicy,
        explore: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        self.plan_traced(s0, model, policy, explore, rng).map(|(a, _)| a)
    }

    pub fn plan_traced(
        &self,
        s0: &[f64],
        model: &dyn Dynamics,
        policy: &mut PlannerPolicy,
        explore: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, PlanTrace)> {
        let cfg = &self.config;
        let n = cfg.candidates;
        let width = cfg.horizon * self.action_dim;
        let floor = 1e-2 * 2.0 * self.action_bound;
        let mut trace = PlanTrace::default();
        for _ in 0..cfg.iterations {
            let mut seqs = Vec::with_capacity(n * width);
            for _ in 0..n {
                for j in 0..width {
                    let e: f64 = StandardNormal.sample(rng);
                    seqs.push(self.clip(policy.mean[j] + policy.scale[j] * e));
                }
            }
            let seqs = Array::matrix(n, width, seqs);
            let returns = batch_returns(model, s0, &seqs, cfg.horizon, self.action_dim)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let (ra, rb) = (returns[a], returns[b]);
                rb.partial_cmp(&ra).unwrap_or_else(|| rb.is_nan().cmp(&ra.is_nan()))
            });
            let k = cfg.elites();
            let elite_min = returns[order[k - 1]];
            let rejected_max = order.get(k).map_or(f64::NEG_INFINITY, |&i| returns[i]);
            trace.separation.push((elite_min, rejected_max));
            let elites: Vec<usize> = order[..k].iter().copied().filter(|&i| returns[i].is_finite()).collect();
            if elites.is_empty() {
                log::warn!("planner: every candidate rollout was non-finite");
                continue;
            }
            let best = returns[elites[0]];
            let mut w: Vec<f64> = elites.iter().map(|&i| cfg.inv_temperature * (returns[i] - best)).collect();
            softmax_in_place(&mut w);
            for j in 0..width {
                let m: f64 = elites.iter().zip(&w).map(|(&i, wi)| wi * seqs.data()[i * width + j]).sum();
                let var: f64 = elites
                    .iter()
                    .zip(&w)
                    .map(|(&i, wi)| wi * (seqs.data()[i * width + j] - m).powi(2))
                    .sum();
                let v = cfg.slowdown * policy.velocity[j] + cfg.step_size * (m - policy.mean[j]);
                policy.velocity[j] = v;
                policy.mean[j] = self.clip(policy.mean[j] + v);
                let sc = (1.0 - cfg.step_size) * policy.scale[j] + cfg.step_size * var.sqrt();
                policy.scale[j] = if cfg.step_size > 0.0 { sc.max(floor) } else { sc };
            }
        }
        let action = if explore {
            policy
                .first_mean()
                .iter()
                .zip(policy.first_scale())
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    self.clip(m + s * e)
                })
                .collect()
        } else {
            policy.first_mean().to_vec()
        };
        Ok((action, trace))
    }
}
