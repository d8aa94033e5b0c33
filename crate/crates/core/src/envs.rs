//! Disturbable environments and test-time disturbance generators.
//!
//! An environment step is a pure function of `(s, a, d)`. Out-of-range
//! actions and disturbances are clamped (and counted), never rejected.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::softmax_in_place;
use crate::{LiraError, Result};

/// Standard deviation of the nominal disturbance prior.
pub const SIGMA0: f64 = 0.2 / 3.0;

/// Static description of an environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub disturbance_dim: usize,
    pub reward_dim: usize,
    /// Actions live in `[-action_bound, action_bound]`.
    pub action_bound: f64,
    pub d_max: f64,
    pub dt: f64,
    pub t_max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    pub reward: Vec<f64>,
    pub terminated: bool,
}

pub trait Env: Send + Sync {
    fn spec(&self) -> EnvSpec;

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn step(&self, s: &[f64], a: &[f64], d: &[f64]) -> Step;

    /// Number of clamped action or disturbance coordinates so far.
    fn clamp_count(&self) -> u64;
}

fn clamp_into(v: &[f64], bound: f64, counter: &AtomicU64) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let c = x.clamp(-bound, bound);
            if c != x {
                counter.fetch_add(1, Ordering::Relaxed);
                log::debug!("clamped input {x} to {c}");
            }
            c
        })
        .collect()
}

/// Parameters of [`PointMassPush`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassParams {
    pub damping: f64,
    pub action_gain: f64,
    pub disturbance_gain: f64,
    pub dt: f64,
    pub t_max: usize,
    /// Episode ends once the distance from the origin exceeds this.
    pub fail_radius: f64,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            damping: 1.0,
            action_gain: 1.0,
            disturbance_gain: 0.5,
            dt: 0.05,
            t_max: 200,
            fail_radius: 0.5,
        }
    }
}

/// A damped planar point mass that should stay near the origin while an
/// external force pushes it around.
///
/// State `[px, py, vx, vy]`, action and disturbance are 2-d forces. Forces
/// are held constant over a step and the linear dynamics are integrated
/// exactly. Rewards are `[1 - min(1, |p'| / fail_radius), 0.1 - |a|_1 / 20]`.
#[derive(Debug, Default)]
pub struct PointMassPush {
    pub params: PointMassParams,
    clamped: AtomicU64,
}

impl PointMassPush {
    pub fn new(params: PointMassParams) -> Self {
        Self { params, clamped: AtomicU64::new(0) }
    }

    /// Exact one-axis update of `x'' = f - c x'` over `dt`.
    pub fn integrate_axis(p: f64, v: f64, force: f64, damping: f64, dt: f64) -> (f64, f64) {
        if damping == 0.0 {
            return (p + v * dt + 0.5 * force * dt * dt, v + force * dt);
        }
        let decay = (-damping * dt).exp();
        let one_minus = -(-damping * dt).exp_m1();
        let v_inf = force / damping;
        let v_next = v * decay + v_inf * one_minus;
        let p_next = p + v * one_minus / damping + v_inf * (dt - one_minus / damping);
        (p_next, v_next)
    }
}

impl Env for PointMassPush {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            state_dim: 4,
            action_dim: 2,
            disturbance_dim: 2,
            reward_dim: 2,
            action_bound: 1.0,
            d_max: 1.0,
            dt: self.params.dt,
            t_max: self.params.t_max,
        }
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; 4]
    }

    fn step(&self, s: &[f64], a: &[f64], d: &[f64]) -> Step {
        let p = &self.params;
        let a = clamp_into(a, 1.0, &self.clamped);
        let d = clamp_into(d, 1.0, &self.clamped);
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let force = p.action_gain * a[axis] + p.disturbance_gain * d[axis];
            let (pn, vn) = Self::integrate_axis(s[axis], s[axis + 2], force, p.damping, p.dt);
            next[axis] = pn;
            next[axis + 2] = vn;
        }
        let dist = next[0].hypot(next[1]);
        let effort: f64 = a.iter().map(|x| x.abs()).sum();
        let reward = vec![1.0 - (dist / p.fail_radius).min(1.0), 0.1 - effort / 20.0];
        Step { next, reward, terminated: dist > p.fail_radius }
    }

    fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }
}

/// Parameters of [`ChainCrawler`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub joints: usize,
    /// Joint limit in radians.
    pub joint_limit: f64,
    /// Maximum head-joint angle change per step; tail joints get half.
    pub max_rate: f64,
    /// Metres of progress per radian of expanding motion.
    pub stride: f64,
    /// Friction ratio of contracting to expanding motion.
    pub anisotropy: f64,
    /// How strongly a bent tail slows the crawl.
    pub tail_drag: f64,
    pub dt: f64,
    pub t_max: usize,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            joints: 6,
            joint_limit: 30f64.to_radians(),
            max_rate: 0.1,
            stride: 0.01,
            anisotropy: 0.5,
            tail_drag: 0.5,
            dt: 0.05,
            t_max: 500,
        }
    }
}

/// Kinematic worm surrogate: a chain of joints on a line with anisotropic
/// ground friction. The first four joints follow the actions, the remaining
/// tail joints follow the disturbance at half authority.
///
/// The state is the vector of joint angles. Progress per step is
/// `stride * sum_j dθ_j sign(θ_j) μ_j`, with `μ_j = 1` when joint `j` bends
/// further and `-anisotropy`-weighted when it straightens, scaled down by the
/// mean tail bend. The reward is `100 (x' - x)`.
#[derive(Debug, Default)]
pub struct ChainCrawler {
    pub params: ChainParams,
    clamped: AtomicU64,
}

pub const HEAD_JOINTS: usize = 4;

impl ChainCrawler {
    pub fn new(params: ChainParams) -> Result<Self> {
        if !(6..=8).contains(&params.joints) {
            return Err(LiraError::config("env.chain.joints", "must be 6, 7 or 8"));
        }
        Ok(Self { params, clamped: AtomicU64::new(0) })
    }

    fn tail(&self) -> usize {
        self.params.joints - HEAD_JOINTS
    }

    /// Forward displacement between two postures.
    pub fn progress(&self, s: &[f64], next: &[f64]) -> f64 {
        let p = &self.params;
        let mut push = 0.0;
        for (&old, &new) in s.iter().zip(next) {
            let delta = new - old;
            if delta == 0.0 || new == 0.0 {
                continue;
            }
            let bending = delta.signum() == new.signum();
            let mu = if bending { 1.0 } else { p.anisotropy };
            let sign = if bending { 1.0 } else { -1.0 };
            push += sign * mu * delta.abs();
        }
        let tail_bend = next[HEAD_JOINTS..].iter().map(|t| t.abs()).sum::<f64>() / self.tail() as f64;
        p.stride * push * (1.0 - p.tail_drag * tail_bend / p.joint_limit)
    }
}

impl Env for ChainCrawler {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            state_dim: self.params.joints,
            action_dim: HEAD_JOINTS,
            disturbance_dim: self.tail(),
            reward_dim: 1,
            action_bound: 1.0,
            d_max: 1.0,
            dt: self.params.dt,
            t_max: self.params.t_max,
        }
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; self.params.joints]
    }

    fn step(&self, s: &[f64], a: &[f64], d: &[f64]) -> Step {
        let p = &self.params;
        let a = clamp_into(a, 1.0, &self.clamped);
        let d = clamp_into(d, 1.0, &self.clamped);
        let rates = a.iter().map(|x| x * p.max_rate).chain(d.iter().map(|x| 0.5 * x * p.max_rate));
        let next: Vec<f64> = s
            .iter()
            .zip(rates)
            .map(|(th, w)| (th + w).clamp(-p.joint_limit, p.joint_limit))
            .collect();
        let reward = vec![100.0 * self.progress(s, &next)];
        Step { next, reward, terminated: false }
    }

    fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }
}

/// Environment selection in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    PointMassPush(#[serde(default)] PointMassParams),
    ChainCrawler(#[serde(default)] ChainParams),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::PointMassPush(PointMassParams::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Env>> {
        Ok(match self {
            EnvConfig::PointMassPush(p) => Box::new(PointMassPush::new(p.clone())),
            EnvConfig::ChainCrawler(p) => Box::new(ChainCrawler::new(p.clone())?),
        })
    }
}

/// One draw of the nominal disturbance: i.i.d. `N(0, sigma)` clipped to the box.
pub fn nominal_noise(rng: &mut dyn RngCore, dim: usize, sigma: f64, d_max: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            (sigma * e).clamp(-d_max, d_max)
        })
        .collect()
}

/// Unclipped sequence of `t_max` disturbances (rows) for `dim` coordinates,
/// each coordinate a softmax mixture of `paths` Brownian motions, rescaled so
/// its sample standard deviation over time is exactly `scale * sigma`.
///
/// Per coordinate `2 * paths` unit-variance random walks are drawn; the last
/// `paths` serve as mixing logits for the first `paths`.
pub fn brownian_mixture(
    rng: &mut dyn RngCore,
    t_max: usize,
    dim: usize,
    paths: usize,
    scale: f64,
    sigma: f64,
) -> Result<Vec<Vec<f64>>> {
    if paths == 0 || scale <= 0.0 || t_max < 2 {
        return Err(LiraError::config("noise", "need paths >= 1, scale > 0 and at least two steps"));
    }
    let mut out = vec![vec![0.0; dim]; t_max];
    for j in 0..dim {
        let mut attempts = 0;
        let column = loop {
            let walks: Vec<Vec<f64>> = (0..2 * paths)
                .map(|_| {
                    let mut acc = 0.0;
                    (0..t_max)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(rng);
                            acc += e;
                            acc
                        })
                        .collect()
                })
                .collect();
            let mixed: Vec<f64> = (0..t_max)
                .map(|t| {
                    let mut w: Vec<f64> = (0..paths).map(|k| walks[paths + k][t]).collect();
                    softmax_in_place(&mut w);
                    (0..paths).map(|k| w[k] * walks[k][t]).sum()
                })
                .collect();
            let sd = sample_std(&mixed);
            if sd > 0.0 && sd.is_finite() {
                let gain = scale * sigma / sd;
                break mixed.into_iter().map(|v| gain * v).collect::<Vec<_>>();
            }
            attempts += 1;
            log::warn!("degenerate Brownian mixture, resampling (attempt {attempts})");
        };
        for (t, v) in column.into_iter().enumerate() {
            out[t][j] = v;
        }
    }
    Ok(out)
}

/// Sample standard deviation with Bessel's correction.
pub fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Test-time disturbance protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Nominal,
    Brown3,
    Brown6,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Nominal, NoiseKind::Brown3, NoiseKind::Brown6];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Nominal => "nominal",
            NoiseKind::Brown3 => "brown3",
            NoiseKind::Brown6 => "brown6",
        }
    }
}

/// Disturbance source for one evaluation episode.
#[derive(Clone, Debug)]
pub enum NoiseGen {
    Nominal { dim: usize, sigma: f64, d_max: f64 },
    Sequence { steps: Vec<Vec<f64>>, d_max: f64 },
}

impl NoiseGen {
    pub fn new(kind: NoiseKind, spec: &EnvSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let dim = spec.disturbance_dim;
        Ok(match kind {
            NoiseKind::Nominal => NoiseGen::Nominal { dim, sigma: SIGMA0, d_max: spec.d_max },
            NoiseKind::Brown3 | NoiseKind::Brown6 => {
                let k = if kind == NoiseKind::Brown3 { 3.0 } else { 6.0 };
                let steps = brownian_mixture(rng, spec.t_max, dim, 2, k, SIGMA0)?;
                NoiseGen::Sequence { steps, d_max: spec.d_max }
            }
        })
    }

    /// Disturbance at step `t`, clipped to the box.
    pub fn at(&self, t: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            NoiseGen::Nominal { dim, sigma, d_max } => nominal_noise(rng, *dim, *sigma, *d_max),
            NoiseGen::Sequence { steps, d_max } => {
                steps[t.min(steps.len() - 1)].iter().map(|v| v.clamp(-d_max, *d_max)).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_mass_fixed_point() {
        let env = PointMassPush::default();
        let st = env.step(&[0.0; 4], &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(st.next, vec![0.0; 4]);
        assert_eq!(st.reward.iter().sum::<f64>(), 1.1);
        assert!(!st.terminated);
    }

    #[test]
    fn point_mass_matches_closed_form_under_constant_push() {
        let env = PointMassPush::new(PointMassParams { fail_radius: 10.0, ..Default::default() });
        let p = &env.params;
        let mut s = vec![0.0; 4];
        for _ in 0..20 {
            s = env.step(&s, &[0.0, 0.0], &[1.0, 0.0]).next;
        }
        // x(t) = (F/c) t - (F/c^2)(1 - e^{-ct}) from rest
        let f = p.disturbance_gain;
        let c = p.damping;
        let t = 20.0 * p.dt;
        let x = f / c * t - f / (c * c) * (1.0 - (-c * t).exp());
        let v = f / c * (1.0 - (-c * t).exp());
        assert!((s[0] - x).abs() < 1e-9, "{} vs {x}", s[0]);
        assert!((s[2] - v).abs() < 1e-9);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn point_mass_reward_range_and_termination() {
        let env = PointMassPush::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-0.6..0.6)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let d: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let st = env.step(&s, &a, &d);
            let r: f64 = st.reward.iter().sum();
            assert!((-0.1..=1.1).contains(&r));
            assert_eq!(st.terminated, st.next[0].hypot(st.next[1]) > 0.5);
        }
        assert!(env.clamp_count() > 0);
    }

    #[test]
    fn chain_frozen_is_zero_reward() {
        let env = ChainCrawler::new(ChainParams::default()).unwrap();
        let s = vec![0.1, -0.2, 0.3, 0.0, 0.2, -0.1];
        let st = env.step(&s, &[0.0; 4], &[0.0; 2]);
        assert_eq!(st.next, s);
        assert_eq!(st.reward, vec![0.0]);
    }

    #[test]
    fn chain_reward_is_scaled_progress_and_gait_moves_forward() {
        let env = ChainCrawler::new(ChainParams { joints: 7, ..Default::default() }).unwrap();
        let mut s = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let mut total = 0.0;
        for t in 0..200 {
            let phase = t as f64 * 0.3;
            let a: Vec<f64> = (0..4).map(|j| (phase - j as f64).sin()).collect();
            let st = env.step(&s, &a, &[0.0; 3]);
            assert_eq!(st.reward[0], 100.0 * env.progress(&s, &st.next));
            assert!(st.next.iter().all(|th| th.abs() <= env.params.joint_limit));
            total += st.reward[0];
            s = st.next;
        }
        assert!(total > 0.0, "{total}");
    }

    #[test]
    fn nominal_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| nominal_noise(&mut rng, 1, SIGMA0, 1.0)[0]).collect();
        assert!(draws.iter().all(|d| d.abs() <= 1.0));
        let sd = sample_std(&draws);
        assert!((sd / 0.0667 - 1.0).abs() < 0.01, "{sd}");
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn brownian_mixture_scale_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = brownian_mixture(&mut rng, 500, 2, 2, 3.0, SIGMA0).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = seq.iter().map(|r| r[j]).collect();
            assert!((sample_std(&col) - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_single_path_is_rescaled_walk() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let seq = brownian_mixture(&mut a, 100, 1, 1, 6.0, SIGMA0).unwrap();
        let mut acc = 0.0;
        let walk: Vec<f64> = (0..100)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut b);
                acc += e;
                acc
            })
            .collect();
        let gain = 6.0 * SIGMA0 / sample_std(&walk);
        for (x, w) in seq.iter().zip(&walk) {
            assert!((x[0] - gain * w).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_mixture_is_low_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ac = 0.0;
        for _ in 0..100 {
            let seq: Vec<f64> = brownian_mixture(&mut rng, 500, 1, 2, 3.0, SIGMA0).unwrap().into_iter().map(|r| r[0]).collect();
            let mean = seq.iter().sum::<f64>() / 500.0;
            let num: f64 = seq.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
            let den: f64 = seq.iter().map(|v| (v - mean).powi(2)).sum();
            ac += num / den / 100.0;
        }
        assert!(ac > 0.9, "{ac}");
    }

    #[test]
    fn noise_is_reproducible() {
        let spec = PointMassPush::default().spec();
        let mk = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = NoiseGen::new(NoiseKind::Brown6, &spec, &mut rng).unwrap();
            (0..spec.t_max).map(|t| g.at(t, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(mk(3), mk(3));
    }
}
