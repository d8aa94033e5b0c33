//! Fixed-topology multilayer perceptrons and first-order optimizers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::tensor::{Array, Gradients, Param, ParamId, Tape, Var};

const RMS_EPS: f64 = 1e-8;

/// Soft rectifier `(x + sqrt(x^2 + 4)) / 2`, evaluated without cancellation.
pub fn squish(x: f64) -> f64 {
    let r = (x * x + 4.0).sqrt();
    if x >= 0.0 {
        0.5 * (x + r)
    } else {
        2.0 / (r - x)
    }
}

/// Odd, strictly increasing map of the reals into `(-1, 1)`.
pub fn squaresign(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

pub fn squmoid(x: f64) -> f64 {
    0.5 * (squaresign(x) + 1.0)
}

/// Scales `v` to unit root-mean-square.
pub fn rmsnorm(v: &mut [f64]) {
    assert!(!v.is_empty(), "rmsnorm of an empty vector");
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for x in v.iter_mut() {
        *x *= inv;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Affine map, then RMSNorm, then squish.
    SquishRms,
    Squaresign,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// squish, strictly positive
    Positive,
    /// squmoid, in (0, 1)
    Bounded01,
    /// squaresign, in (-1, 1)
    BoundedSym,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub output_dim: usize,
    pub head: Head,
}

impl MlpSpec {
    /// Two hidden layers of `width` units with squish + RMSNorm.
    pub fn common(input_dim: usize, width: usize, output_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden: vec![(width, Activation::SquishRms); 2],
            output_dim,
            head,
        }
    }

    /// Two hidden layers of `width` units with squaresign.
    pub fn small(input_dim: usize, width: usize, output_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden: vec![(width, Activation::Squaresign); 2],
            output_dim,
            head,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|(w, _)| *w == 0) {
            return Err(LiraError::Contract(format!("all MLP dims must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Weights are `[in, out]`, biases `[1, out]`, stored as consecutive params.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Param>,
}

impl Mlp {
    /// Uniform fan-in initialization with unit gain; zero biases.
    pub fn new(spec: MlpSpec, name: &str, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut dims = vec![spec.input_dim];
        dims.extend(spec.hidden.iter().map(|(w, _)| *w));
        dims.push(spec.output_dim);
        let mut params = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Param::new(format!("{name}.l{l}.w"), Array::matrix(fan_in, fan_out, w)));
            params.push(Param::new(format!("{name}.l{l}.b"), Array::zeros(&[1, fan_out])));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scales the output layer's weights, e.g. to start a flow near identity.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.params.len();
        for x in self.params[n - 2].value.data_mut() {
            *x *= factor;
        }
    }

    /// Batched forward pass without recording a graph. `x` is `[n, in]`
    /// (or a single `[in]` vector); output is `[n, out]`.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        let (n, d) = x.dims2();
        if d != self.spec.input_dim {
            return Err(LiraError::Contract(format!(
                "MLP expects input dim {}, got {:?}",
                self.spec.input_dim,
                x.shape()
            )));
        }
        let mut h = x.clone().reshape(&[n, d]);
        let layers = self.params.len() / 2;
        for l in 0..layers {
            let w = &self.params[2 * l].value;
            let b = &self.params[2 * l + 1].value;
            let mut z = h.matmul(w);
            let (_, width) = z.dims2();
            for row in z.data_mut().chunks_mut(width) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                }
                if l + 1 < layers {
                    match self.spec.hidden[l].1 {
                        Activation::SquishRms => {
                            rmsnorm(row);
                            row.iter_mut().for_each(|v| *v = squish(*v));
                        }
                        Activation::Squaresign => row.iter_mut().for_each(|v| *v = squaresign(*v)),
                        Activation::Linear => {}
                    }
                } else {
                    let f: fn(f64) -> f64 = match self.spec.head {
                        Head::Linear => |v| v,
                        Head::Positive => squish,
                        Head::Bounded01 => squmoid,
                        Head::BoundedSym => squaresign,
                    };
                    row.iter_mut().for_each(|v| *v = f(*v));
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`; parameters are bound as leaves.
    pub fn forward_graph<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let (n, d) = x.dims2();
        if d != self.spec.input_dim {
            return Err(LiraError::Contract(format!(
                "MLP expects input dim {}, got {:?}",
                self.spec.input_dim,
                x.shape()
            )));
        }
        let mut h = if x.shape().len() == 2 { x } else { x.reshape(&[n, d]) };
        let layers = self.params.len() / 2;
        for l in 0..layers {
            let w = tape.param(&self.params[2 * l]);
            let b = tape.param(&self.params[2 * l + 1]);
            let z = h.matmul(w) + b.expand_rows(n);
            h = if l + 1 < layers {
                match self.spec.hidden[l].1 {
                    Activation::SquishRms => rmsnorm_rows(z).squish(),
                    Activation::Squaresign => z.squaresign(),
                    Activation::Linear => z,
                }
            } else {
                match self.spec.head {
                    Head::Linear => z,
                    Head::Positive => z.squish(),
                    Head::Bounded01 => z.squmoid(),
                    Head::BoundedSym => z.squaresign(),
                }
            };
        }
        Ok(h)
    }
}

/// Row-wise RMSNorm on a recorded `[n, c]` matrix.
pub fn rmsnorm_rows(z: Var<'_>) -> Var<'_> {
    let (_, c) = z.dims2();
    let denom = z.square().mean_cols().offset(RMS_EPS).sqrt().expand_cols(c);
    z / denom
}

/// Update rule applied to one parameter group.
pub trait Optimizer {
    /// Applies one update. Parameters without a gradient entry are left
    /// alone. When any gradient in the group is non-finite the whole group
    /// is skipped and `false` is returned. `bounds` projects every updated
    /// value into the closed interval afterwards.
    fn step_refs(&mut self, params: &mut [&mut Param], grads: &Gradients, bounds: Option<(f64, f64)>) -> bool;

    /// [`Optimizer::step_refs`] on a contiguous group.
    fn step(&mut self, params: &mut [Param], grads: &Gradients, bounds: Option<(f64, f64)>) -> bool {
        let mut refs: Vec<&mut Param> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads, bounds)
    }

    /// Number of skipped steps so far.
    fn skipped(&self) -> u64;
}

fn group_is_finite(params: &[&mut Param], grads: &Gradients) -> bool {
    params
        .iter()
        .filter_map(|p| grads.get(p.id()))
        .all(|g| g.all_finite())
}

fn project(v: &mut f64, bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        *v = v.clamp(lo, hi);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    skipped: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, moments: HashMap::new(), skipped: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

impl Optimizer for Adam {
    fn step_refs(&mut self, params: &mut [&mut Param], grads: &Gradients, bounds: Option<(f64, f64)>) -> bool {
        if !group_is_finite(params, grads) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping step ({} skipped so far)", self.skipped);
            return false;
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for p in params.iter_mut() {
            let Some(g) = grads.get(p.id()) else { continue };
            let n = p.value.len();
            let (m, v) = self.moments.entry(p.id()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
                project(x, bounds);
            }
        }
        true
    }

    fn skipped(&self) -> u64 {
        self.skipped
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    skipped: u64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, skipped: 0 }
    }
}

impl Optimizer for Sgd {
    fn step_refs(&mut self, params: &mut [&mut Param], grads: &Gradients, bounds: Option<(f64, f64)>) -> bool {
        if !group_is_finite(params, grads) {
            self.skipped += 1;
            log::warn!("non-finite gradient, skipping step ({} skipped so far)", self.skipped);
            return false;
        }
        for p in params.iter_mut() {
            let Some(g) = grads.get(p.id()) else { continue };
            for (x, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                *x -= self.lr * gi;
                project(x, bounds);
            }
        }
        true
    }

    fn skipped(&self) -> u64 {
        self.skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = Mlp::new(MlpSpec::common(3, 5, 2, Head::Linear), "z", &mut rng()).unwrap();
        for p in net.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let y = net.forward(&Array::vector(vec![0.3, -2.0, 5.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_net() {
        let spec = MlpSpec { input_dim: 1, hidden: vec![(1, Activation::Linear)], output_dim: 1, head: Head::Linear };
        let mut net = Mlp::new(spec, "id", &mut rng()).unwrap();
        for p in net.params_mut() {
            let v = if p.name().ends_with(".w") { 1.0 } else { 0.0 };
            p.value.data_mut().fill(v);
        }
        for x in [-3.0, 0.0, 0.25, 7.5] {
            assert_eq!(net.forward(&Array::vector(vec![x])).unwrap().item(), x);
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let net = Mlp::new(MlpSpec::common(3, 4, 2, Head::Linear), "r", &mut rng()).unwrap();
        let x = [0.4, -1.1, 0.7];
        let p: Vec<&[f64]> = net.params().iter().map(|p| p.value.data()).collect();
        // independent recomputation: explicit index loops
        let affine = |inp: &[f64], w: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
            (0..n_out)
                .map(|j| b[j] + (0..inp.len()).map(|i| inp[i] * w[i * n_out + j]).sum::<f64>())
                .collect()
        };
        let act = |z: Vec<f64>| -> Vec<f64> {
            let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64 + 1e-8).sqrt();
            z.iter().map(|v| {
                let u = v / rms;
                (u + (u * u + 4.0).sqrt()) / 2.0
            }).collect()
        };
        let h1 = act(affine(&x, p[0], p[1], 4));
        let h2 = act(affine(&h1, p[2], p[3], 4));
        let out = affine(&h2, p[4], p[5], 2);
        let y = net.forward(&Array::vector(x.to_vec())).unwrap();
        for (a, b) in y.data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let mut r = rng();
        for head in [Head::Linear, Head::Positive, Head::Bounded01, Head::BoundedSym] {
            let spec = MlpSpec {
                input_dim: 3,
                hidden: vec![(6, Activation::SquishRms), (5, Activation::Squaresign)],
                output_dim: 4,
                head,
            };
            let net = Mlp::new(spec, "g", &mut r).unwrap();
            let x = Array::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.5, -2.5, 0.0]);
            let plain = net.forward(&x).unwrap();
            let tape = Tape::new();
            let g = net.forward_graph(&tape, tape.constant(x)).unwrap().value();
            for (a, b) in plain.data().iter().zip(g.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let net = Mlp::new(MlpSpec::common(3, 4, 2, Head::Linear), "s", &mut rng()).unwrap();
        assert!(matches!(net.forward(&Array::vector(vec![1.0, 2.0])), Err(LiraError::Contract(_))));
        assert!(Mlp::new(MlpSpec::common(0, 4, 2, Head::Linear), "s", &mut rng()).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(squaresign(0.0), 0.0);
        assert_eq!(squmoid(0.0), 0.5);
        assert_eq!(squish(0.0), 1.0);
        let mut v = [3.0, 4.0];
        rmsnorm(&mut v);
        let rms = ((v[0] * v[0] + v[1] * v[1]) / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
    }

    #[test]
    fn heads_respect_codomain() {
        let mut r = rng();
        for head in [Head::Positive, Head::Bounded01, Head::BoundedSym] {
            let spec = MlpSpec { input_dim: 1, hidden: vec![(1, Activation::Linear)], output_dim: 1, head };
            let mut net = Mlp::new(spec, "h", &mut r).unwrap();
            for p in net.params_mut() {
                let v = if p.name().ends_with(".w") { 1.0 } else { 0.0 };
                p.value.data_mut().fill(v);
            }
            let xs: Vec<f64> = (0..100_000).map(|_| r.random_range(-100.0..100.0)).collect();
            let y = net.forward(&Array::matrix(xs.len(), 1, xs)).unwrap();
            for &v in y.data() {
                match head {
                    Head::Positive => assert!(v > 0.0),
                    Head::Bounded01 => assert!(v > 0.0 && v < 1.0),
                    Head::BoundedSym => assert!(v > -1.0 && v < 1.0),
                    Head::Linear => unreachable!(),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn squaresign_odd_and_increasing(x in -1e3f64..1e3, dx in 1e-6f64..10.0) {
            prop_assert_eq!(squaresign(-x), -squaresign(x));
            prop_assert!(squaresign(x + dx) > squaresign(x));
            prop_assert!((squmoid(x) + squmoid(-x) - 1.0).abs() < 1e-12);
            prop_assert!(squish(x) > 0.0);
            prop_assert!(squish(x + dx) > squish(x));
        }
    }

    fn quad_params(p0: [f64; 2]) -> Vec<Param> {
        vec![Param::new("q", Array::vector(p0.to_vec()))]
    }

    fn quad_grad(params: &[Param]) -> (f64, Gradients) {
        // f(p) = 3 (p0 - 1)^2 + 0.5 (p1 + 2)^2, optimum (1, -2)
        let tape = Tape::new();
        let p = tape.param(&params[0]);
        let c = tape.constant(Array::vector(vec![1.0, -2.0]));
        let w = tape.constant(Array::vector(vec![3.0, 0.5]));
        let d = p - c;
        let f = (w * d * d).sum();
        (f.item(), tape.backward(f).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = quad_params([1.0, -2.0]);
        let (_, g) = quad_grad(&params);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &g, None);
        assert_eq!(params[0].value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_descends() {
        let mut params = vec![Param::new("p", Array::scalar(1.0))];
        let tape = Tape::new();
        let p = tape.param(&params[0]);
        let g = tape.backward((p * p).sum()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut params, &g, None);
        assert!(params[0].value.item() < 1.0);
    }

    #[test]
    fn adam_reaches_quadratic_optimum() {
        let mut params = quad_params([0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut gnorm = f64::INFINITY;
        for _ in 0..200 {
            let (_, g) = quad_grad(&params);
            gnorm = g.get(params[0].id()).unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt();
            opt.step(&mut params, &g, None);
        }
        let (_, g) = quad_grad(&params);
        let final_norm = g.get(params[0].id()).unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(final_norm < 1e-3, "gradient norm {final_norm} (previous {gnorm})");
    }

    #[test]
    fn first_order_loss_change() {
        let lr = 1e-6;
        let params = quad_params([0.3, 0.7]);
        let (f0, g) = quad_grad(&params);
        let gv = g.get(params[0].id()).unwrap().clone();
        let g2: f64 = gv.data().iter().map(|x| x * x).sum();
        let g1: f64 = gv.data().iter().map(|x| x.abs()).sum();

        let mut sgd_params = params.clone();
        Sgd::new(lr).step(&mut sgd_params, &g, None);
        let (f1, _) = quad_grad(&sgd_params);
        let predicted = -lr * g2;
        assert!(((f1 - f0) - predicted).abs() < 0.1 * predicted.abs());

        // Adam's first step is lr * sign(g), so the change is -lr * |g|_1.
        let mut adam_params = params.clone();
        Adam::new(AdamConfig { lr, ..Default::default() }).step(&mut adam_params, &g, None);
        let (f2, _) = quad_grad(&adam_params);
        let predicted = -lr * g1;
        assert!(((f2 - f0) - predicted).abs() < 0.1 * predicted.abs());
    }

    #[test]
    fn non_finite_gradient_skips_group() {
        let mut params = vec![Param::new("p", Array::scalar(0.5))];
        let tape = Tape::new();
        let p = tape.param(&params[0]);
        let g = tape.backward((p.scale(0.0).ln() * p).sum()).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(!opt.step(&mut params, &g, None));
        assert_eq!(opt.skipped(), 1);
        assert_eq!(params[0].value.item(), 0.5);
    }

    #[test]
    fn projection_clamps_after_step() {
        let mut params = vec![Param::new("lambda", Array::scalar(0.9995))];
        let tape = Tape::new();
        let p = tape.param(&params[0]);
        let g = tape.backward(-p.sum()).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &g, Some((0.0, 1.0)));
        assert_eq!(params[0].value.item(), 1.0);
    }
}
