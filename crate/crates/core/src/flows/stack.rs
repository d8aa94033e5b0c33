use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spline::{spline_graph, Knots, SplineLayer1d, SplineShape};
use crate::neural::{Activation, Head, Mlp, MlpSpec};
use crate::tensor::{Array, Param, Tape, Var};
use crate::{LiraError, Result};

/// Hyperparameters shared by the conditional flow stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub layers: usize,
    pub bins: usize,
    /// Transformability: blend weight of the spline against the identity.
    pub tau: f64,
    /// Width of the small squaresign conditioner layers.
    pub width: usize,
    /// Output-layer weight gain at initialization; small values start the
    /// flow close to the identity.
    pub init_gain: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self { layers: 2, bins: 8, tau: 0.99, width: 32, init_gain: 0.1 }
    }
}

/// Stack of elementwise spline layers whose knots come from one conditioner.
#[derive(Clone, Debug)]
pub struct FlowStack {
    conditioner: Mlp,
    dim: usize,
    layers: usize,
    shape: SplineShape,
    tau: f64,
}

impl FlowStack {
    pub fn new(
        name: &str,
        dim: usize,
        cond_dim: usize,
        hidden: Vec<(usize, Activation)>,
        spec: &FlowSpec,
        bound: f64,
        odd: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.layers == 0 || spec.bins < 2 {
            return Err(LiraError::config("flow", "need at least one layer and two bins"));
        }
        if !(0.0..=1.0).contains(&spec.tau) {
            return Err(LiraError::config("flow.tau", "must lie in [0, 1]"));
        }
        let shape = SplineShape { bins: spec.bins, bound, odd };
        let mlp_spec = MlpSpec {
            input_dim: cond_dim,
            hidden,
            output_dim: spec.layers * dim * shape.params_per_dim(),
            head: Head::Linear,
        };
        let mut conditioner = Mlp::new(mlp_spec, name, rng)?;
        conditioner.scale_output_layer(spec.init_gain);
        Ok(Self { conditioner, dim, layers: spec.layers, shape, tau: spec.tau })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> SplineShape {
        self.shape
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn params(&self) -> &[Param] {
        self.conditioner.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        self.conditioner.params_mut()
    }

    fn check(&self, x: &Array, cond: &Array) -> Result<usize> {
        let (n, d) = x.dims2();
        let (nc, _) = cond.dims2();
        if d != self.dim || n != nc {
            return Err(LiraError::Contract(format!(
                "flow expects [n, {}] with n matching the condition, got {:?} and {:?}",
                self.dim,
                x.shape(),
                cond.shape()
            )));
        }
        Ok(n)
    }

    /// Knots indexed by `[row][layer][coordinate]`.
    fn knots(&self, cond: &Array) -> Result<Vec<Vec<Vec<Knots>>>> {
        let raw = self.conditioner.forward(cond)?;
        let p = self.shape.params_per_dim();
        let (n, _) = raw.dims2();
        Ok((0..n)
            .map(|r| {
                let row = raw.row(r);
                (0..self.layers)
                    .map(|l| {
                        (0..self.dim)
                            .map(|j| {
                                let off = (l * self.dim + j) * p;
                                Knots::from_raw(&row[off..off + p], &self.shape)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }

    fn layer<'a>(&self, knots: &'a Knots) -> SplineLayer1d<'a> {
        SplineLayer1d { knots, tau: self.tau, shape: self.shape }
    }

    /// `x = g(u)` and the per-coordinate log-derivatives summed over layers.
    pub fn forward_elementwise(&self, u: &Array, cond: &Array) -> Result<(Array, Array)> {
        let n = self.check(u, cond)?;
        let knots = self.knots(cond)?;
        let mut x = u.clone().reshape(&[n, self.dim]);
        let mut logd = Array::zeros(&[n, self.dim]);
        for (r, per_row) in knots.iter().enumerate() {
            for layer in per_row {
                for (j, kn) in layer.iter().enumerate() {
                    let i = r * self.dim + j;
                    let (y, dy) = self.layer(kn).forward(x.data()[i]);
                    x.data_mut()[i] = y;
                    logd.data_mut()[i] += dy.ln();
                }
            }
        }
        Ok((x, logd))
    }

    /// `x = g(u)` with the log-determinant of each row.
    pub fn forward(&self, u: &Array, cond: &Array) -> Result<(Array, Vec<f64>)> {
        let (x, logd) = self.forward_elementwise(u, cond)?;
        let ld = logd.data().chunks(self.dim).map(|c| c.iter().sum()).collect();
        Ok((x, ld))
    }

    /// Analytic inverse `u = g^{-1}(x)`, layer by layer in reverse.
    pub fn inverse(&self, x: &Array, cond: &Array) -> Result<Array> {
        let n = self.check(x, cond)?;
        if self.tau == 0.0 {
            return Ok(x.clone().reshape(&[n, self.dim]));
        }
        let knots = self.knots(cond)?;
        let mut u = x.clone().reshape(&[n, self.dim]);
        for (r, per_row) in knots.iter().enumerate() {
            for layer in per_row.iter().rev() {
                for (j, kn) in layer.iter().enumerate() {
                    let i = r * self.dim + j;
                    u.data_mut()[i] = self.layer(kn).inverse(u.data()[i]);
                }
            }
        }
        Ok(u)
    }

    /// Recorded forward pass: `(x [n, d], log-det [n, 1])`.
    pub fn forward_graph<'t>(
        &self,
        tape: &'t Tape,
        u: Var<'t>,
        cond: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.check(&u.value(), &cond.value())?;
        let p = self.shape.params_per_dim();
        let block = self.dim * p;
        let raw = self.conditioner.forward_graph(tape, cond)?;
        let mut h = u.reshape(&[n * self.dim, 1]);
        let mut logd: Option<Var<'t>> = None;
        for l in 0..self.layers {
            let raw_l = raw.slice_cols(l * block, (l + 1) * block).reshape(&[n * self.dim, p]);
            let (y, lg) = spline_graph(tape, raw_l, h, &self.shape, self.tau);
            h = y;
            logd = Some(match logd {
                Some(acc) => acc + lg,
                None => lg,
            });
        }
        let logd = logd.expect("at least one layer").reshape(&[n, self.dim]).sum_cols();
        Ok((h.reshape(&[n, self.dim]), logd))
    }

    /// Recorded inverse `(u [n, d], log|det du/dx| [n, 1])`.
    ///
    /// The root is found numerically and re-attached through one implicit
    /// Newton step, `u = u* + (x - g(u*)) / g'(u*)` with `u*` and `g'(u*)`
    /// held constant, which has the exact first derivatives of the inverse
    /// with respect to both `x` and the conditioner.
    pub fn inverse_graph<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        cond: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let u_star = self.inverse(&x.value(), &cond.value())?;
        let (_, logd) = self.forward_elementwise(&u_star, &cond.value())?;
        let jac = logd.map(f64::exp);
        let (x_hat, _) = self.forward_graph(tape, tape.constant(u_star.clone()), cond)?;
        let u = tape.constant(u_star) + (x - x_hat) / tape.constant(jac);
        let (_, ld) = self.forward_graph(tape, u, cond)?;
        Ok((u, -ld))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(odd: bool, tau: f64, seed: u64) -> FlowStack {
        stack_with_gain(odd, tau, seed, 3.0)
    }

    fn stack_with_gain(odd: bool, tau: f64, seed: u64, gain: f64) -> FlowStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = FlowSpec { width: 16, tau, init_gain: gain, ..FlowSpec::default() };
        let hidden = vec![(16, Activation::SquishRms), (16, Activation::SquishRms)];
        FlowStack::new("f", 2, 3, hidden, &spec, if odd { 5.0 } else { 1.0 }, odd, &mut rng).unwrap()
    }

    fn random(rows: usize, cols: usize, lim: f64, rng: &mut impl Rng) -> Array {
        Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect())
    }

    #[test]
    fn identity_blend() {
        let f = stack(false, 0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random(10, 2, 1.0, &mut rng);
        let c = random(10, 3, 1.0, &mut rng);
        let (x, ld) = f.forward(&u, &c).unwrap();
        assert_eq!(x, u);
        assert!(ld.iter().all(|v| *v == 0.0));
        assert_eq!(f.inverse(&u, &c).unwrap(), u);
    }

    #[test]
    fn round_trip_and_logdet_sum() {
        for odd in [false, true] {
            let f = stack(odd, 0.99, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let u = random(500, 2, 1.2 * f.shape().bound, &mut rng);
            let c = random(500, 3, 2.0, &mut rng);
            let (x, ld) = f.forward(&u, &c).unwrap();
            let back = f.inverse(&x, &c).unwrap();
            for (a, b) in u.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            let (_, elem) = f.forward_elementwise(&u, &c).unwrap();
            assert!((elem.data()[0] + elem.data()[1] - ld[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn graph_paths_agree_with_numeric() {
        for odd in [false, true] {
            let f = stack(odd, 0.99, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let u = random(8, 2, f.shape().bound, &mut rng);
            let c = random(8, 3, 2.0, &mut rng);
            let (x, ld) = f.forward(&u, &c).unwrap();
            let tape = Tape::new();
            let (xg, ldg) = f.forward_graph(&tape, tape.constant(u.clone()), tape.constant(c.clone())).unwrap();
            for (a, b) in x.data().iter().zip(xg.value().data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in ld.iter().zip(ldg.value().data()) {
                assert!((a - b).abs() < 1e-10);
            }
            let (ug, ldi) = f.inverse_graph(&tape, tape.constant(x), tape.constant(c)).unwrap();
            for (a, b) in u.data().iter().zip(ug.value().data()) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in ld.iter().zip(ldi.value().data()) {
                assert!((a + b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn inverse_graph_gradients_match_finite_differences() {
        let f = stack_with_gain(false, 0.9, 7, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(3, 2, 0.9, &mut rng);
        let c = random(3, 3, 1.0, &mut rng);
        let xp = Param::new("x", x.clone());
        let objective = |f: &FlowStack, x: &Array| {
            let u = f.inverse(x, &c).unwrap();
            let (_, ld) = f.forward(&u, &c).unwrap();
            u.data().iter().map(|v| v * v).sum::<f64>() - ld.iter().sum::<f64>()
        };
        let tape = Tape::new();
        let (u, ldi) = f.inverse_graph(&tape, tape.param(&xp), tape.constant(c.clone())).unwrap();
        let grads = tape.backward(u.square().sum() + ldi.sum()).unwrap();
        let h = 1e-6;
        let gx = grads.get(xp.id()).unwrap();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (objective(&f, &p) - objective(&f, &m)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "x {i}: {} vs {fd}", gx.data()[i]);
        }
        for pi in 0..f.params().len() {
            let gp = grads.get(f.params()[pi].id()).unwrap();
            for i in (0..gp.len()).step_by(7) {
                let mut fp = f.clone();
                fp.params_mut()[pi].value.data_mut()[i] += h;
                let mut fm = f.clone();
                fm.params_mut()[pi].value.data_mut()[i] -= h;
                let fd = (objective(&fp, &x) - objective(&fm, &x)) / (2.0 * h);
                assert!((fd - gp.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "param {pi}[{i}]: {} vs {fd}", gp.data()[i]);
            }
        }
    }

    #[test]
    fn odd_stack_symmetry() {
        let f = stack(true, 0.99, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random(5000, 2, 7.0, &mut rng);
        let c = random(1, 3, 1.0, &mut rng);
        let cond = Array::matrix(5000, 3, c.data().repeat(5000));
        let (x, _) = f.forward(&u, &cond).unwrap();
        let (xn, _) = f.forward(&u.map(|v| -v), &cond).unwrap();
        for (a, b) in x.data().iter().zip(xn.data()) {
            assert!((a + b).abs() < 1e-10);
        }
    }
}
