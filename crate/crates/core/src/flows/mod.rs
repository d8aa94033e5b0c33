//! Densities and flows: diagonal Gaussians, bounded uniforms, blended linear
//! rational spline stacks, the world model and the adversary.

mod models;
mod spline;
mod stack;

pub use models::{
    column_std, kl_mc, Adversary, ClippedGaussianPrior, DisturbancePrior, UniformPrior, WorldModel,
    WorldModelDims,
};
pub use spline::{spline_graph, Knots, SplineLayer1d, SplineShape};
pub use stack::{FlowSpec, FlowStack};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Var;

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal multivariate normal.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>) -> Self {
        assert_eq!(loc.len(), scale.len(), "loc/scale length");
        debug_assert!(scale.iter().all(|s| *s > 0.0));
        Self { loc, scale }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "Gaussian dimension");
        self.loc
            .iter()
            .zip(&self.scale)
            .zip(x)
            .map(|((m, s), v)| {
                let z = (v - m) / s;
                -0.5 * z * z - s.ln() - LN_SQRT_2PI
            })
            .sum()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.loc
            .iter()
            .zip(&self.scale)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect()
    }
}

/// Row-wise diagonal Gaussian log density on the tape; `[n, d]` inputs give
/// `[n, 1]`.
pub fn gauss_log_prob_graph<'t>(loc: Var<'t>, scale: Var<'t>, x: Var<'t>) -> Var<'t> {
    let (_, d) = x.dims2();
    let z = (x - loc) / scale;
    (z.square().scale(-0.5) - scale.ln()).sum_cols().offset(-(d as f64) * LN_SQRT_2PI)
}

/// Standard normal log density summed over the columns of `z`.
pub fn std_normal_log_prob_graph(z: Var<'_>) -> Var<'_> {
    let (_, d) = z.dims2();
    z.square().scale(-0.5).sum_cols().offset(-(d as f64) * LN_SQRT_2PI)
}

/// Uniform density on `[-half_width, half_width]^dim`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformBox {
    pub half_width: f64,
    pub dim: usize,
}

impl UniformBox {
    pub fn new(half_width: f64, dim: usize) -> Self {
        assert!(half_width > 0.0, "box half width must be positive");
        Self { half_width, dim }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|v| v.abs() <= self.half_width)
    }

    pub fn log_density(&self) -> f64 {
        -(self.dim as f64) * (2.0 * self.half_width).ln()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        if self.contains(x) {
            self.log_density()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|_| rng.random_range(-self.half_width..=self.half_width))
            .collect()
    }
}
