//! Monotone linear rational splines (LRS).
//!
//! Each bin `[x_k, x_{k+1}]` carries two linear-rational pieces joined at the
//! interior fraction `lambda_k`, with weights chosen so the derivative at each
//! knot equals the prescribed `d_k`. Outside the bound the map is the
//! identity, and the boundary derivatives are pinned to 1 so the transition
//! is C1.
//!
//! A layer blends the spline with the identity: `g(x) = (1 - tau) x + tau S(x)`.
//! In the odd variant the knots live on `[0, B]` and `S(-x) = -S(x)`.

use crate::neural::{squaresign, squish};
use crate::tensor::{softmax_in_place, Array, Tape, Var};

const MIN_BIN: f64 = 1e-3;
const MIN_DERIV: f64 = 1e-3;
const LAMBDA_LO: f64 = 0.025;
const LAMBDA_SPAN: f64 = 0.95;

/// Static layout of a spline layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineShape {
    pub bins: usize,
    pub bound: f64,
    /// Mirror knots from `[0, B]` so the map is an odd function.
    pub odd: bool,
}

impl SplineShape {
    fn lo(&self) -> f64 {
        if self.odd {
            0.0
        } else {
            -self.bound
        }
    }

    fn span(&self) -> f64 {
        if self.odd {
            self.bound
        } else {
            2.0 * self.bound
        }
    }

    /// Free derivative parameters: every knot except the pinned boundary ones.
    fn n_derivs(&self) -> usize {
        if self.odd {
            self.bins
        } else {
            self.bins - 1
        }
    }

    /// Raw conditioner outputs per transformed coordinate.
    pub fn params_per_dim(&self) -> usize {
        3 * self.bins + self.n_derivs()
    }
}

/// Knots of one spline, evaluated from raw parameters.
#[derive(Clone, Debug)]
pub struct Knots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
    pub lambdas: Vec<f64>,
}

fn positive_deriv(raw: f64) -> f64 {
    MIN_DERIV + (1.0 - MIN_DERIV) * squish(raw)
}

fn interior_lambda(raw: f64) -> f64 {
    LAMBDA_LO + LAMBDA_SPAN * 0.5 * (squaresign(raw) + 1.0)
}

fn cumulative(raw: &[f64], lo: f64, span: f64) -> Vec<f64> {
    let k = raw.len();
    let mut w = raw.to_vec();
    softmax_in_place(&mut w);
    let mut xs = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    xs.push(lo);
    for wi in w {
        acc += (MIN_BIN + (1.0 - k as f64 * MIN_BIN) * wi) * span;
        xs.push(lo + acc);
    }
    xs
}

impl Knots {
    pub fn from_raw(raw: &[f64], shape: &SplineShape) -> Self {
        let k = shape.bins;
        assert_eq!(raw.len(), shape.params_per_dim(), "raw spline parameter count");
        let nd = shape.n_derivs();
        let xs = cumulative(&raw[..k], shape.lo(), shape.span());
        let ys = cumulative(&raw[k..2 * k], shape.lo(), shape.span());
        let free = raw[2 * k..2 * k + nd].iter().map(|&r| positive_deriv(r));
        let ds: Vec<f64> = if shape.odd {
            free.chain(std::iter::once(1.0)).collect()
        } else {
            std::iter::once(1.0).chain(free).chain(std::iter::once(1.0)).collect()
        };
        let lambdas = raw[2 * k + nd..].iter().map(|&r| interior_lambda(r)).collect();
        Self { xs, ys, ds, lambdas }
    }

    /// Identity knots: equal bins, unit derivatives.
    pub fn identity(shape: &SplineShape) -> Self {
        Self::from_raw(&vec![0.0; shape.params_per_dim()], shape)
    }

    fn lo(&self) -> f64 {
        self.xs[0]
    }

    fn hi(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    fn bin_of(&self, x: f64) -> usize {
        let k = self.lambdas.len();
        let pos = self.xs[1..k].partition_point(|&b| b <= x);
        pos.min(k - 1)
    }

    fn coefficients(&self, k: usize) -> BinCoefficients {
        let (x0, x1) = (self.xs[k], self.xs[k + 1]);
        let (y0, y1) = (self.ys[k], self.ys[k + 1]);
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let lam = self.lambdas[k];
        let dx = x1 - x0;
        let s = (y1 - y0) / dx;
        let w2 = (d0 / d1).sqrt();
        let w1 = (lam * d0 + (1.0 - lam) * w2 * d1) / s;
        let ym = ((1.0 - lam) * y0 + lam * w2 * y1) / ((1.0 - lam) + lam * w2);
        BinCoefficients { x0, dx, y0, y1, ym, w1, w2, lam }
    }

    /// Spline value and derivative; identity outside the knot range.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        if x < self.lo() || x > self.hi() {
            return (x, 1.0);
        }
        let c = self.coefficients(self.bin_of(x));
        let phi = (x - c.x0) / c.dx;
        let (y, dphi) = c.eval(phi);
        (y, dphi / c.dx)
    }
}

#[derive(Clone, Copy, Debug)]
struct BinCoefficients {
    x0: f64,
    dx: f64,
    y0: f64,
    y1: f64,
    ym: f64,
    w1: f64,
    w2: f64,
    lam: f64,
}

impl BinCoefficients {
    /// `(alpha0, alpha1, beta0, beta1, ya, yb)` of the active piece, where the
    /// piece value is `(a ya + b yb) / (a + b)` with `a = alpha0 + alpha1 phi`
    /// and `b = beta0 + beta1 phi`.
    fn piece(&self, first: bool) -> (f64, f64, f64, f64, f64, f64) {
        if first {
            (self.lam, -1.0, 0.0, self.w1, self.y0, self.ym)
        } else {
            (self.w1, -self.w1, -self.w2 * self.lam, self.w2, self.ym, self.y1)
        }
    }

    fn eval(&self, phi: f64) -> (f64, f64) {
        let first = phi <= self.lam;
        let (a0, a1, b0, b1, ya, yb) = self.piece(first);
        let a = a0 + a1 * phi;
        let b = b0 + b1 * phi;
        let den = a + b;
        let c = if first { self.w1 * self.lam } else { self.w1 * self.w2 * (1.0 - self.lam) };
        ((a * ya + b * yb) / den, c * (yb - ya) / (den * den))
    }
}

/// One blended spline coordinate transform.
#[derive(Clone, Debug)]
pub struct SplineLayer1d<'a> {
    pub knots: &'a Knots,
    pub tau: f64,
    pub shape: SplineShape,
}

impl SplineLayer1d<'_> {
    /// `(g(x), g'(x))`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        let (s, ds) = if self.shape.odd {
            let (s, ds) = self.knots.eval(x.abs());
            (s.copysign(x), ds)
        } else {
            self.knots.eval(x)
        };
        ((1.0 - self.tau) * x + self.tau * s, (1.0 - self.tau) + self.tau * ds)
    }

    /// Analytic inverse: bin search on the blended knot images, then the
    /// quadratic that the blended linear-rational piece reduces to.
    pub fn inverse(&self, y: f64) -> f64 {
        if self.shape.odd {
            let x = self.inverse_plain(y.abs());
            return x.copysign(y);
        }
        self.inverse_plain(y)
    }

    fn inverse_plain(&self, y: f64) -> f64 {
        let kn = self.knots;
        let t = self.tau;
        let blend = |x: f64, s: f64| (1.0 - t) * x + t * s;
        if y < kn.lo() || y > kn.hi() {
            return y;
        }
        let k_bins = kn.lambdas.len();
        let mut k = 0;
        while k + 1 < k_bins && blend(kn.xs[k + 1], kn.ys[k + 1]) <= y {
            k += 1;
        }
        let c = kn.coefficients(k);
        let mid = blend(c.x0 + c.lam * c.dx, c.ym);
        let first = y <= mid;
        let (lo, hi) = if first { (0.0, c.lam) } else { (c.lam, 1.0) };
        let (a0, a1, b0, b1, ya, yb) = c.piece(first);
        let p = a0 * ya + b0 * yb;
        let q = a1 * ya + b1 * yb;
        let r = a0 + b0;
        let tt = a1 + b1;
        let c0 = (1.0 - t) * c.x0 - y;
        let c1 = (1.0 - t) * c.dx;
        let qa = c1 * tt;
        let qb = c0 * tt + c1 * r + t * q;
        let qc = c0 * r + t * p;
        let phi = solve_in_interval(qa, qb, qc, lo, hi);
        // one Newton polish on the blended map
        let mut x = c.x0 + phi * c.dx;
        let (gx, dgx) = self.forward(x);
        if dgx > 0.0 {
            let xn = x - (gx - y) / dgx;
            if xn >= c.x0 + lo * c.dx && xn <= c.x0 + hi * c.dx {
                x = xn;
            }
        }
        x
    }
}

/// Root of `a t^2 + b t + c` inside `[lo, hi]` (the closest one if roundoff
/// pushes both slightly out).
fn solve_in_interval(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> f64 {
    let scale = a.abs() + b.abs() + c.abs();
    let roots: Vec<f64> = if a.abs() <= 1e-14 * scale {
        vec![-c / b]
    } else {
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let mut v = vec![q / a];
        if q != 0.0 {
            v.push(c / q);
        }
        v
    };
    let dist = |t: f64| {
        if t.is_nan() {
            f64::INFINITY
        } else if t < lo {
            lo - t
        } else if t > hi {
            t - hi
        } else {
            0.0
        }
    };
    let best = roots
        .into_iter()
        .min_by(|x, y| dist(*x).partial_cmp(&dist(*y)).unwrap())
        .unwrap();
    best.clamp(lo, hi)
}

/// Cumulative-sum matrix `[k, k+1]` with ones where row < column.
fn cumsum_matrix(k: usize) -> Array {
    let mut m = vec![0.0; k * (k + 1)];
    for r in 0..k {
        for c in (r + 1)..=k {
            m[r * (k + 1) + c] = 1.0;
        }
    }
    Array::matrix(k, k + 1, m)
}

fn knots_graph<'t>(tape: &'t Tape, raw: Var<'t>, k: usize, lo: f64, span: f64) -> Var<'t> {
    let w = raw
        .softmax_rows()
        .scale((1.0 - k as f64 * MIN_BIN) * span)
        .offset(MIN_BIN * span);
    w.matmul(tape.constant(cumsum_matrix(k))).offset(lo)
}

/// Recorded blended spline on rows of `x` (`[r, 1]`) with per-row raw
/// parameters (`[r, params_per_dim]`). Returns `(g(x), ln g'(x))`, both `[r, 1]`.
pub fn spline_graph<'t>(
    tape: &'t Tape,
    raw: Var<'t>,
    x: Var<'t>,
    shape: &SplineShape,
    tau: f64,
) -> (Var<'t>, Var<'t>) {
    let k = shape.bins;
    let nd = shape.n_derivs();
    let (rows, _) = x.dims2();
    let col = |v: Vec<f64>| tape.constant(Array::matrix(rows, 1, v));

    let xs = knots_graph(tape, raw.slice_cols(0, k), k, shape.lo(), shape.span());
    let ys = knots_graph(tape, raw.slice_cols(k, 2 * k), k, shape.lo(), shape.span());
    let free = raw
        .slice_cols(2 * k, 2 * k + nd)
        .squish()
        .scale(1.0 - MIN_DERIV)
        .offset(MIN_DERIV);
    let ones = tape.constant(Array::full(&[rows, 1], 1.0));
    let ds = if shape.odd {
        Var::concat_cols(&[free, ones])
    } else {
        Var::concat_cols(&[ones, free, ones])
    };
    let lambdas = raw
        .slice_cols(2 * k + nd, 3 * k + nd)
        .squmoid()
        .scale(LAMBDA_SPAN)
        .offset(LAMBDA_LO);

    let xv = x.value();
    let (a_in, sign) = if shape.odd {
        let sign: Vec<f64> = xv.data().iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        (x.abs(), Some(sign))
    } else {
        (x, None)
    };
    let av = a_in.value();
    let xs_v = xs.value();
    let lam_v = lambdas.value();

    let mut bins = Vec::with_capacity(rows);
    let mut inside = Vec::with_capacity(rows);
    let mut substitute = Vec::with_capacity(rows);
    let mut first_piece = Vec::with_capacity(rows);
    for r in 0..rows {
        let kn = xs_v.row(r);
        let a = av.data()[r];
        let is_in = a >= kn[0] && a <= kn[k];
        let (bin, a_eff) = if is_in {
            let pos = kn[1..k].partition_point(|&b| b <= a).min(k - 1);
            (pos, a)
        } else {
            (0, 0.5 * (kn[0] + kn[1]))
        };
        let phi = (a_eff - kn[bin]) / (kn[bin + 1] - kn[bin]);
        bins.push(bin);
        inside.push(if is_in { 1.0 } else { 0.0 });
        substitute.push(if is_in { 0.0 } else { a_eff });
        first_piece.push(if phi <= lam_v.data()[r * k + bin] { 1.0 } else { 0.0 });
    }
    let next: Vec<usize> = bins.iter().map(|b| b + 1).collect();
    let m_in = col(inside.clone());
    let m_out = col(inside.iter().map(|v| 1.0 - v).collect());
    let p1 = col(first_piece.clone());
    let p2 = col(first_piece.iter().map(|v| 1.0 - v).collect());

    let a_eff = a_in * m_in + col(substitute);
    let x0 = xs.gather_cols(bins.clone());
    let x1 = xs.gather_cols(next.clone());
    let y0 = ys.gather_cols(bins.clone());
    let y1 = ys.gather_cols(next.clone());
    let d0 = ds.gather_cols(bins.clone());
    let d1 = ds.gather_cols(next);
    let lam = lambdas.gather_cols(bins);

    let dx = x1 - x0;
    let s = (y1 - y0) / dx;
    let w2 = (d0 / d1).sqrt();
    let one_minus_lam = lam.rsub(1.0);
    let w1 = (lam * d0 + one_minus_lam * w2 * d1) / s;
    let ym = (one_minus_lam * y0 + lam * w2 * y1) / (one_minus_lam + lam * w2);
    let phi = (a_eff - x0) / dx;

    let a = p1 * (lam - phi) + p2 * (w1 * phi.rsub(1.0));
    let b = p1 * (w1 * phi) + p2 * (w2 * (phi - lam));
    let ya = p1 * y0 + p2 * ym;
    let yb = p1 * ym + p2 * y1;
    let den = a + b;
    let spline = (a * ya + b * yb) / den;
    let c = p1 * (w1 * lam) + p2 * (w1 * w2 * one_minus_lam);
    let dspline = c * (yb - ya) / (den * den) / dx;

    let s_full = m_in * spline + m_out * a_in;
    let ds_full = m_in * dspline + m_out;
    let s_signed = match sign {
        Some(sg) => s_full * col(sg),
        None => s_full,
    };
    let g = x.scale(1.0 - tau) + s_signed.scale(tau);
    let log_dg = ds_full.scale(tau).offset(1.0 - tau).ln();
    (g, log_dg)
}
