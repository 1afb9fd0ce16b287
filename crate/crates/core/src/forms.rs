//! Finite-difference carré-du-champ forms on cylinder functions.
//!
//! A labeled function takes `k` tagged points `x` (flat, `k * d` values)
//! and the background points `s` (flat, `n * d` values). All evaluation
//! happens on raw coordinates in `R^d`; translations are plain shifts.

use rand::Rng;
use thiserror::Error;

use crate::configuration::{falling_factorial, Configuration};
use crate::par;
use crate::pointprocess::{PointProcessError, PointSampler};
use crate::rng::{derive_seed, replica_rng};
use crate::stats::{mean_se, MeanSe, RunningMean};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest point count for which exhaustive symmetrization is allowed.
pub const EXACT_SYMMETRIZE_MAX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormsError {
    #[error("exact symmetrization needs at most {max} points, got {m}", max = EXACT_SYMMETRIZE_MAX)]
    TooManyPoints { m: usize },
    #[error("function expects {expected} tagged points, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("coordinate count {0} is not a multiple of the dimension")]
    Ragged(usize),
    #[error("fewer points ({m}) than tagged slots ({k})")]
    TooFewPoints { m: usize, k: usize },
    #[error("sampler: {0}")]
    Sampler(#[from] PointProcessError),
}

/// A real function of `k` tagged points and a finite background.
pub trait LabeledFunction: Sync {
    fn arity(&self) -> usize;
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], s: &[f64]) -> f64;
}

/// Monomial `coef * prod_j y_j^{powers[j]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Smooth building blocks on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum Smooth {
    Const(f64),
    Poly(Vec<Monomial>),
    /// `amp * exp(-|y - center|^2 / (2 width^2))`
    Gaussian {
        amp: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// `amp * exp(-1 / (1 - |y - center|^2 / radius^2))` inside the ball, zero outside.
    Bump {
        amp: f64,
        center: Vec<f64>,
        radius: f64,
    },
    Product(Box<Smooth>, Box<Smooth>),
}

fn powi(v: f64, p: u32) -> f64 {
    v.powi(p as i32)
}

impl Smooth {
    /// Linear function `w . y`.
    pub fn linear(w: &[f64]) -> Self {
        let d = w.len();
        Smooth::Poly(
            w.iter()
                .enumerate()
                .map(|(j, &c)| {
                    let mut powers = vec![0; d];
                    powers[j] = 1;
                    Monomial { coef: c, powers }
                })
                .collect(),
        )
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.value_grad(y, None)
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; y.len()];
        self.value_grad(y, Some(&mut g));
        g
    }

    /// Value, and if `grad` is given, adds the gradient into it.
    fn value_grad(&self, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            Smooth::Const(c) => *c,
            Smooth::Poly(terms) => {
                let mut v = 0.0;
                let mut grad = grad;
                for m in terms {
                    let t: f64 = m.coef
                        * y.iter()
                            .zip(&m.powers)
                            .map(|(&yj, &p)| powi(yj, p))
                            .product::<f64>();
                    v += t;
                    if let Some(g) = grad.as_deref_mut() {
                        for (j, gj) in g.iter_mut().enumerate() {
                            let p = m.powers[j];
                            if p == 0 {
                                continue;
                            }
                            let mut part = m.coef * p as f64 * powi(y[j], p - 1);
                            for (l, (&yl, &pl)) in y.iter().zip(&m.powers).enumerate() {
                                if l != j {
                                    part *= powi(yl, pl);
                                }
                            }
                            *gj += part;
                        }
                    }
                }
                v
            }
            Smooth::Gaussian { amp, center, width } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                let v = amp * (-r2 / (2.0 * width * width)).exp();
                if let Some(g) = grad {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj -= v * (y[j] - center[j]) / (width * width);
                    }
                }
                v
            }
            Smooth::Bump {
                amp,
                center,
                radius,
            } => {
                let q: f64 = y
                    .iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    / (radius * radius);
                if q >= 1.0 {
                    return 0.0;
                }
                let u = 1.0 - q;
                let v = amp * (-1.0 / u).exp();
                if let Some(g) = grad {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj -= v / (u * u) * 2.0 * (y[j] - center[j]) / (radius * radius);
                    }
                }
                v
            }
            Smooth::Product(a, b) => match grad {
                None => a.value(y) * b.value(y),
                Some(g) => {
                    let mut ga = vec![0.0; y.len()];
                    let mut gb = vec![0.0; y.len()];
                    let va = a.value_grad(y, Some(&mut ga));
                    let vb = b.value_grad(y, Some(&mut gb));
                    for j in 0..g.len() {
                        g[j] += va * gb[j] + vb * ga[j];
                    }
                    va * vb
                }
            },
        }
    }

    /// Radius of a centred ball containing the support, if bounded.
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            Smooth::Const(c) if *c == 0.0 => Some(0.0),
            Smooth::Bump { center, radius, .. } => {
                Some(center.iter().map(|c| c * c).sum::<f64>().sqrt() + radius)
            }
            Smooth::Product(a, b) => match (a.support_radius(), b.support_radius()) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (Some(x), None) | (None, Some(x)) => Some(x),
                (None, None) => None,
            },
            _ => None,
        }
    }
}

/// Expression tree of a cylinder function.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Const(f64),
    /// `phi(x_slot)`
    Tagged(usize, Smooth),
    /// `sum_i phi(s_i)`
    Background(Smooth),
    /// `sum_i phi(s_i - x_slot)`
    Relative(usize, Smooth),
    /// `sum_{i != j} phi(s_i - s_j)`
    Pairs(Smooth),
    Sum(Vec<Term>),
    Product(Box<Term>, Box<Term>),
}

/// Gradient split into tagged and background blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub tagged: Vec<f64>,
    pub background: Vec<f64>,
}

impl Gradient {
    fn zeros(kd: usize, nd: usize) -> Self {
        Self {
            tagged: vec![0.0; kd],
            background: vec![0.0; nd],
        }
    }

    fn axpy(&mut self, a: f64, other: &Gradient) {
        for (u, v) in self.tagged.iter_mut().zip(&other.tagged) {
            *u += a * v;
        }
        for (u, v) in self.background.iter_mut().zip(&other.background) {
            *u += a * v;
        }
    }

    /// `D f = sum_i grad_{s_i} f`.
    pub fn translation(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for p in self.background.chunks_exact(dim) {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

/// A local smooth function of `k` tagged points and the background.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderFunction {
    pub arity: usize,
    pub dim: usize,
    pub term: Term,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(u, v)| u - v).collect()
}

impl Term {
    fn value_grad(&self, d: usize, x: &[f64], s: &[f64], grad: Option<&mut Gradient>) -> f64 {
        match self {
            Term::Const(c) => *c,
            Term::Tagged(slot, phi) => {
                let y = &x[slot * d..(slot + 1) * d];
                match grad {
                    None => phi.value(y),
                    Some(g) => phi.value_grad(y, Some(&mut g.tagged[slot * d..(slot + 1) * d])),
                }
            }
            Term::Background(phi) => {
                let mut v = 0.0;
                let mut grad = grad;
                for (i, p) in s.chunks_exact(d).enumerate() {
                    v += match grad.as_deref_mut() {
                        None => phi.value(p),
                        Some(g) => phi.value_grad(p, Some(&mut g.background[i * d..(i + 1) * d])),
                    };
                }
                v
            }
            Term::Relative(slot, phi) => {
                let xs = &x[slot * d..(slot + 1) * d];
                let mut v = 0.0;
                let mut grad = grad;
                for (i, p) in s.chunks_exact(d).enumerate() {
                    let y = sub(p, xs);
                    match grad.as_deref_mut() {
                        None => v += phi.value(&y),
                        Some(g) => {
                            let mut gi = vec![0.0; d];
                            v += phi.value_grad(&y, Some(&mut gi));
                            for j in 0..d {
                                g.background[i * d + j] += gi[j];
                                g.tagged[slot * d + j] -= gi[j];
                            }
                        }
                    }
                }
                v
            }
            Term::Pairs(phi) => {
                let n = s.len() / d;
                let mut v = 0.0;
                let mut grad = grad;
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let y = sub(&s[i * d..(i + 1) * d], &s[j * d..(j + 1) * d]);
                        match grad.as_deref_mut() {
                            None => v += phi.value(&y),
                            Some(g) => {
                                let mut gi = vec![0.0; d];
                                v += phi.value_grad(&y, Some(&mut gi));
                                for l in 0..d {
                                    g.background[i * d + l] += gi[l];
                                    g.background[j * d + l] -= gi[l];
                                }
                            }
                        }
                    }
                }
                v
            }
            Term::Sum(terms) => {
                let mut grad = grad;
                terms
                    .iter()
                    .map(|t| t.value_grad(d, x, s, grad.as_deref_mut()))
                    .sum()
            }
            Term::Product(a, b) => match grad {
                None => a.value_grad(d, x, s, None) * b.value_grad(d, x, s, None),
                Some(g) => {
                    let mut ga = Gradient::zeros(x.len(), s.len());
                    let mut gb = Gradient::zeros(x.len(), s.len());
                    let va = a.value_grad(d, x, s, Some(&mut ga));
                    let vb = b.value_grad(d, x, s, Some(&mut gb));
                    g.axpy(va, &gb);
                    g.axpy(vb, &ga);
                    va * vb
                }
            },
        }
    }

    fn max_slot(&self) -> Option<usize> {
        match self {
            Term::Tagged(s, _) | Term::Relative(s, _) => Some(*s),
            Term::Sum(ts) => ts.iter().filter_map(Term::max_slot).max(),
            Term::Product(a, b) => a.max_slot().max(b.max_slot()),
            _ => None,
        }
    }

    /// Window radius for the background dependence; `Some(0)` if none.
    fn window(&self) -> Option<f64> {
        match self {
            Term::Const(_) | Term::Tagged(..) => Some(0.0),
            Term::Background(phi) => phi.support_radius(),
            Term::Relative(..) | Term::Pairs(_) => None,
            Term::Sum(ts) => ts
                .iter()
                .try_fold(0.0f64, |acc, t| t.window().map(|w| acc.max(w))),
            Term::Product(a, b) => Some(a.window()?.max(b.window()?)),
        }
    }
}

impl CylinderFunction {
    pub fn new(arity: usize, dim: usize, term: Term) -> Self {
        debug_assert!(term.max_slot().is_none_or(|s| s < arity));
        Self { arity, dim, term }
    }

    /// `phi(x) f(s)` for an unlabeled `f`.
    pub fn tensor(phi: Smooth, f: &CylinderFunction) -> Self {
        Self::new(
            1,
            f.dim,
            Term::Product(Box::new(Term::Tagged(0, phi)), Box::new(f.term.clone())),
        )
    }

    /// Symbolic gradient.
    pub fn gradient(&self, x: &[f64], s: &[f64]) -> Gradient {
        let mut g = Gradient::zeros(x.len(), s.len());
        self.term.value_grad(self.dim, x, s, Some(&mut g));
        g
    }

    /// Radius `R` such that the background dependence is through points in `B(0, R)`.
    /// `None` when the dependence is not local in absolute coordinates.
    pub fn window(&self) -> Option<f64> {
        self.term.window()
    }
}

impl LabeledFunction for CylinderFunction {
    fn arity(&self) -> usize {
        self.arity
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], s: &[f64]) -> f64 {
        self.term.value_grad(self.dim, x, s, None)
    }
}

/// `f o iota`, i.e. `(x, s) -> f(x, s - x)` for a 1-labeled `f`.
pub struct Iota<'a, F: LabeledFunction + ?Sized>(pub &'a F);

impl<F: LabeledFunction + ?Sized> LabeledFunction for Iota<'_, F> {
    fn arity(&self) -> usize {
        self.0.arity()
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: &[f64], s: &[f64]) -> f64 {
        self.0.eval(x, &shift(s, x))
    }
}

/// `s - a` pointwise.
pub fn shift(s: &[f64], a: &[f64]) -> Vec<f64> {
    let d = a.len();
    s.iter().enumerate().map(|(i, v)| v - a[i % d]).collect()
}

/// Central-difference gradient in every tagged and background coordinate.
pub fn fd_gradient(f: &dyn LabeledFunction, x: &[f64], s: &[f64], h: f64) -> Gradient {
    let mut xb = x.to_vec();
    let mut sb = s.to_vec();
    let mut tagged = vec![0.0; x.len()];
    for j in 0..x.len() {
        let v = xb[j];
        xb[j] = v + h;
        let up = f.eval(&xb, &sb);
        xb[j] = v - h;
        let down = f.eval(&xb, &sb);
        xb[j] = v;
        tagged[j] = (up - down) / (2.0 * h);
    }
    let mut background = vec![0.0; s.len()];
    for j in 0..s.len() {
        let v = sb[j];
        sb[j] = v + h;
        let up = f.eval(&xb, &sb);
        sb[j] = v - h;
        let down = f.eval(&xb, &sb);
        sb[j] = v;
        background[j] = (up - down) / (2.0 * h);
    }
    Gradient { tagged, background }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// The forms as functions of precomputed gradients.
pub mod from_gradients {
    use super::{dot, Gradient};

    pub fn background(gf: &Gradient, gg: &Gradient) -> f64 {
        0.5 * dot(&gf.background, &gg.background)
    }

    pub fn tagged(gf: &Gradient, gg: &Gradient) -> f64 {
        0.5 * dot(&gf.tagged, &gg.tagged)
    }

    pub fn labeled(gf: &Gradient, gg: &Gradient) -> f64 {
        tagged(gf, gg) + background(gf, gg)
    }

    pub fn environment(gf: &Gradient, gg: &Gradient, dim: usize) -> f64 {
        0.5 * dot(&gf.translation(dim), &gg.translation(dim)) + background(gf, gg)
    }

    /// `1/2 ((D - grad_x) f, (D - grad_x) g) + background form`, for 1-labeled functions.
    pub fn joint(gf: &Gradient, gg: &Gradient, dim: usize) -> f64 {
        let rel = |g: &Gradient| -> Vec<f64> {
            g.translation(dim)
                .iter()
                .zip(&g.tagged)
                .map(|(d, x)| d - x)
                .collect()
        };
        0.5 * dot(&rel(gf), &rel(gg)) + background(gf, gg)
    }
}

/// Unlabeled form `1/2 sum_i (grad_{s_i} f, grad_{s_i} g)`.
pub fn gamma_unlabeled(
    f: &dyn LabeledFunction,
    g: &dyn LabeledFunction,
    s: &Configuration,
    h: f64,
) -> f64 {
    let gf = fd_gradient(f, &[], s.coords(), h);
    let gg = fd_gradient(g, &[], s.coords(), h);
    from_gradients::background(&gf, &gg)
}

/// k-labeled form: tagged-coordinate part plus background part.
pub fn gamma_k(
    f: &dyn LabeledFunction,
    g: &dyn LabeledFunction,
    x: &[f64],
    s: &Configuration,
    h: f64,
) -> f64 {
    let gf = fd_gradient(f, x, s.coords(), h);
    let gg = fd_gradient(g, x, s.coords(), h);
    from_gradients::labeled(&gf, &gg)
}

/// `D f` by differentiating `t -> f(x, s + t e_j)` at zero.
pub fn d_operator(f: &dyn LabeledFunction, x: &[f64], s: &Configuration, h: f64) -> Vec<f64> {
    let d = s.dim();
    (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = -h;
            let up = f.eval(x, &shift(s.coords(), &e));
            e[j] = h;
            let down = f.eval(x, &shift(s.coords(), &e));
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `D f` as the sum of per-point finite-difference gradients.
pub fn d_operator_coordinate_sum(
    f: &dyn LabeledFunction,
    x: &[f64],
    s: &Configuration,
    h: f64,
) -> Vec<f64> {
    fd_gradient(f, x, s.coords(), h).translation(s.dim())
}

/// Environment form `1/2 (Df, Dg) + background form`.
pub fn gamma_y(f: &dyn LabeledFunction, g: &dyn LabeledFunction, s: &Configuration, h: f64) -> f64 {
    let gf = fd_gradient(f, &[], s.coords(), h);
    let gg = fd_gradient(g, &[], s.coords(), h);
    from_gradients::environment(&gf, &gg, s.dim())
}

/// Joint form on `R^d x configurations` for 1-labeled functions.
pub fn gamma_xy(
    f: &dyn LabeledFunction,
    g: &dyn LabeledFunction,
    x: &[f64],
    s: &Configuration,
    h: f64,
) -> f64 {
    let gf = fd_gradient(f, x, s.coords(), h);
    let gg = fd_gradient(g, x, s.coords(), h);
    from_gradients::joint(&gf, &gg, s.dim())
}

/// Analytic counterparts of the finite-difference forms.
pub mod symbolic {
    use super::{from_gradients, CylinderFunction, Gradient};

    pub fn gradient(f: &CylinderFunction, x: &[f64], s: &[f64]) -> Gradient {
        f.gradient(x, s)
    }

    pub fn gamma_unlabeled(f: &CylinderFunction, g: &CylinderFunction, s: &[f64]) -> f64 {
        from_gradients::background(&f.gradient(&[], s), &g.gradient(&[], s))
    }

    pub fn gamma_k(f: &CylinderFunction, g: &CylinderFunction, x: &[f64], s: &[f64]) -> f64 {
        from_gradients::labeled(&f.gradient(x, s), &g.gradient(x, s))
    }

    pub fn d_operator(f: &CylinderFunction, x: &[f64], s: &[f64]) -> Vec<f64> {
        f.gradient(x, s).translation(f.dim)
    }

    pub fn gamma_y(f: &CylinderFunction, g: &CylinderFunction, s: &[f64]) -> f64 {
        from_gradients::environment(&f.gradient(&[], s), &g.gradient(&[], s), f.dim)
    }

    pub fn gamma_xy(f: &CylinderFunction, g: &CylinderFunction, x: &[f64], s: &[f64]) -> f64 {
        from_gradients::joint(&f.gradient(x, s), &g.gradient(x, s), f.dim)
    }
}

/// Outcome of a form identity check.
#[derive(Debug, Clone, PartialEq)]
pub struct FormReport {
    pub identity: String,
    pub max_residual: f64,
    pub samples: usize,
    pub h: f64,
    /// Monte Carlo z-score for integrated identities.
    pub z: Option<f64>,
    pub lhs: Option<MeanSe>,
    pub rhs: Option<MeanSe>,
}

impl FormReport {
    fn pointwise(identity: &str, residuals: &[f64], h: f64) -> Self {
        Self {
            identity: identity.to_string(),
            max_residual: residuals.iter().fold(0.0, |a: f64, &b| a.max(b)),
            samples: residuals.len(),
            h,
            z: None,
            lhs: None,
            rhs: None,
        }
    }

    pub const TSV_HEADER: &'static str =
        "identity\tmax_residual\tsamples\th\tz\tlhs\tlhs_se\trhs\trhs_se";

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6e}"));
        format!(
            "{}\t{:.6e}\t{}\t{:e}\t{}\t{}\t{}\t{}\t{}",
            self.identity,
            self.max_residual,
            self.samples,
            self.h,
            opt(self.z),
            opt(self.lhs.map(|m| m.mean)),
            opt(self.lhs.map(|m| m.se)),
            opt(self.rhs.map(|m| m.mean)),
            opt(self.rhs.map(|m| m.se)),
        )
    }

    /// Passes if the residual is below `tol` and any z-score is within 3.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual < tol && self.z.is_none_or(|z| z.abs() < 3.0)
    }
}

fn iota_residual(
    f: &dyn LabeledFunction,
    g: &dyn LabeledFunction,
    x: &[f64],
    s: &[f64],
    h: f64,
) -> f64 {
    let d = x.len();
    let lhs = from_gradients::labeled(
        &fd_gradient(&Iota(f), x, s, h),
        &fd_gradient(&Iota(g), x, s, h),
    );
    let moved = shift(s, x);
    let rhs = from_gradients::joint(
        &fd_gradient(f, x, &moved, h),
        &fd_gradient(g, x, &moved, h),
        d,
    );
    (lhs - rhs).abs()
}

/// Compares the 1-labeled form of `f o iota, g o iota` at `(x, s)` with the
/// joint form of `f, g` at `iota(x, s)`.
pub fn check_iota_identity(
    f: &dyn LabeledFunction,
    g: &dyn LabeledFunction,
    x: &[f64],
    s: &Configuration,
    h: f64,
) -> Result<FormReport, FormsError> {
    for q in [f, g] {
        if q.arity() != 1 {
            return Err(FormsError::ArityMismatch {
                expected: 1,
                got: q.arity(),
            });
        }
    }
    Ok(FormReport::pointwise(
        "iota",
        &[iota_residual(f, g, x, s.coords(), h)],
        h,
    ))
}

/// Random smooth block with moderate values on `[-2, 2]^d`.
pub fn random_smooth(dim: usize, rng: &mut impl Rng) -> Smooth {
    let centre = |rng: &mut dyn rand::RngCore| {
        (0..dim)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect::<Vec<f64>>()
    };
    match rng.random_range(0..4) {
        0 => {
            let terms = (0..rng.random_range(1..=3))
                .map(|_| Monomial {
                    coef: rng.random_range(-1.0..1.0),
                    powers: (0..dim).map(|_| rng.random_range(0..=2)).collect(),
                })
                .collect();
            Smooth::Poly(terms)
        }
        1 => Smooth::Gaussian {
            amp: rng.random_range(-1.0..1.0),
            center: centre(rng),
            width: rng.random_range(0.5..1.5),
        },
        2 => Smooth::Bump {
            amp: rng.random_range(0.5..2.0),
            center: centre(rng),
            radius: rng.random_range(1.0..2.5),
        },
        _ => Smooth::Product(
            Box::new(Smooth::linear(
                &(0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            )),
            Box::new(Smooth::Gaussian {
                amp: 1.0,
                center: centre(rng),
                width: rng.random_range(0.7..1.5),
            }),
        ),
    }
}

/// Random cylinder function of the given arity.
pub fn random_cylinder(arity: usize, dim: usize, rng: &mut impl Rng) -> CylinderFunction {
    let mut terms = vec![Term::Const(rng.random_range(-1.0..1.0))];
    for _ in 0..rng.random_range(1..=3) {
        terms.push(random_leaf(arity, dim, rng));
    }
    if rng.random_bool(0.5) {
        terms.push(Term::Product(
            Box::new(random_leaf(arity, dim, rng)),
            Box::new(random_leaf(arity, dim, rng)),
        ));
    }
    CylinderFunction::new(arity, dim, Term::Sum(terms))
}

fn random_leaf(arity: usize, dim: usize, rng: &mut impl Rng) -> Term {
    let kind = if arity == 0 {
        rng_pick(rng, 2) + 2
    } else {
        rng_pick(rng, 4)
    };
    let phi = random_smooth(dim, rng);
    match kind {
        0 => Term::Tagged(rng_pick(rng, arity), phi),
        1 => Term::Relative(rng_pick(rng, arity), phi),
        2 => Term::Background(phi),
        _ => Term::Pairs(Smooth::Gaussian {
            amp: rng.random_range(-1.0..1.0),
            center: vec![0.0; dim],
            width: rng.random_range(0.5..1.5),
        }),
    }
}

fn rng_pick(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

fn random_points(n: usize, dim: usize, half: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n * dim)
        .map(|_| rng.random_range(-half..half))
        .collect()
}

/// The iota identity on `samples` random 1-labeled pairs and configurations.
pub fn check_iota_random(samples: usize, dim: usize, seed: u64, h: f64) -> FormReport {
    let residuals = par::map_indexed(samples, |i| {
        let mut rng = replica_rng(seed, i as u64);
        let f = random_cylinder(1, dim, &mut rng);
        let g = random_cylinder(1, dim, &mut rng);
        let x = random_points(1, dim, 1.0, &mut rng);
        let n = rng.random_range(0..=5);
        let s = random_points(n, dim, 2.0, &mut rng);
        iota_residual(&f, &g, &x, &s, h)
    });
    FormReport::pointwise("iota", &residuals, h)
}

/// Settings for [`check_product_formula`].
#[derive(Debug, Clone, Copy)]
pub struct ProductCheck {
    pub samples: usize,
    pub seed: u64,
    pub h: f64,
}

/// Checks the joint form of `phi (x) f` pointwise against its expansion, and
/// the integrated version by Monte Carlo over `x` uniform on a cube holding
/// the support of `phi` and configurations from `sampler`.
pub fn check_product_formula(
    phi: &Smooth,
    f: &CylinderFunction,
    sampler: &dyn PointSampler,
    opts: ProductCheck,
) -> Result<FormReport, FormsError> {
    if f.arity != 0 {
        return Err(FormsError::ArityMismatch {
            expected: 0,
            got: f.arity,
        });
    }
    let d = f.dim;
    let (centre, half) = match phi {
        Smooth::Bump { center, radius, .. } => (center.clone(), *radius),
        _ => (vec![0.0; d], phi.support_radius().unwrap_or(4.0)),
    };
    let volume = (2.0 * half).powi(d as i32);
    let joint = CylinderFunction::tensor(phi.clone(), f);
    let h = opts.h;
    let rows = par::try_map_indexed(opts.samples, |i| -> Result<[f64; 3], FormsError> {
        let seed = derive_seed(opts.seed, i as u64);
        let mut rng = replica_rng(seed, 0);
        let x: Vec<f64> = centre
            .iter()
            .map(|c| c + rng.random_range(-half..half))
            .collect();
        let s = sampler.sample(derive_seed(seed, 1))?;
        let s = s.coords();
        let lhs = from_gradients::joint(
            &fd_gradient(&joint, &x, s, h),
            &fd_gradient(&joint, &x, s, h),
            d,
        );
        let phi_fn = CylinderFunction::new(1, d, Term::Tagged(0, phi.clone()));
        let dphi = fd_gradient(&phi_fn, &x, &[], h).tagged;
        let p = phi.value(&x);
        let gf = fd_gradient(f, &[], s, h);
        let fv = f.eval(&[], s);
        let env = from_gradients::environment(&gf, &gf, d);
        let cross = p * fv * dot(&dphi, &gf.translation(d));
        let squared = 0.5 * dot(&dphi, &dphi) * fv * fv;
        let rhs_point = p * p * env + squared - cross;
        Ok([
            (lhs - rhs_point).abs(),
            volume * lhs,
            volume * (p * p * env + squared),
        ])
    })?;
    let residual: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let lhs: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r[1] - r[2]).collect();
    let dm = mean_se(&diff);
    let z = if dm.se > 0.0 {
        dm.mean / dm.se
    } else if dm.mean == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let mut report = FormReport::pointwise("product", &residual, h);
    report.z = Some(z);
    report.lhs = Some(mean_se(&lhs));
    report.rhs = Some(mean_se(&rhs));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetrizeMode {
    /// All ordered assignments; fails above the point limit.
    Exact,
    /// Random assignments.
    MonteCarlo { samples: usize, seed: u64 },
    /// Exact up to the point limit, Monte Carlo beyond.
    Auto { samples: usize, seed: u64 },
}

/// All points of `kappa(x, s)` in lexicographic order.
fn canonical_points(x: &[f64], s: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = x
        .chunks_exact(d)
        .chain(s.chunks_exact(d))
        .map(<[f64]>::to_vec)
        .collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pts
}

/// Calls `visit` on every ordered `k`-tuple of distinct indices below `m`.
fn for_each_tuple(m: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(
        m: usize,
        k: usize,
        cur: &mut Vec<usize>,
        used: &mut [bool],
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for i in 0..m {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(m, k, cur, used, visit);
                cur.pop();
                used[i] = false;
            }
        }
    }
    rec(m, k, &mut Vec::with_capacity(k), &mut vec![false; m], visit);
}

fn split(points: &[Vec<f64>], tuple: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = tuple
        .iter()
        .flat_map(|&i| points[i].iter().copied())
        .collect();
    let s: Vec<f64> = (0..points.len())
        .filter(|i| !tuple.contains(i))
        .flat_map(|i| points[i].iter().copied())
        .collect();
    (x, s)
}

/// Average of `h` over all assignments of the points of `kappa(x, s)` to the
/// tagged slots and the background.
pub fn symmetrize(
    h: &dyn LabeledFunction,
    x: &[f64],
    s: &[f64],
    mode: SymmetrizeMode,
) -> Result<f64, FormsError> {
    let d = h.dim();
    let k = h.arity();
    if x.len() != k * d {
        return Err(FormsError::ArityMismatch {
            expected: k,
            got: x.len() / d.max(1),
        });
    }
    if s.len() % d != 0 {
        return Err(FormsError::Ragged(s.len()));
    }
    let points = canonical_points(x, s, d);
    let m = points.len();
    let exact = match mode {
        SymmetrizeMode::Exact if m > EXACT_SYMMETRIZE_MAX => {
            return Err(FormsError::TooManyPoints { m })
        }
        SymmetrizeMode::Exact => true,
        SymmetrizeMode::Auto { .. } => m <= EXACT_SYMMETRIZE_MAX,
        SymmetrizeMode::MonteCarlo { .. } => false,
    };
    let mut acc = RunningMean::default();
    if exact {
        for_each_tuple(m, k, &mut |t| {
            let (tx, ts) = split(&points, t);
            acc.push(h.eval(&tx, &ts));
        });
    } else {
        let (samples, seed) = match mode {
            SymmetrizeMode::MonteCarlo { samples, seed }
            | SymmetrizeMode::Auto { samples, seed } => (samples, seed),
            SymmetrizeMode::Exact => unreachable!(),
        };
        let mut rng = replica_rng(seed, 0x5e);
        let mut idx: Vec<usize> = (0..m).collect();
        for _ in 0..samples {
            for j in 0..k {
                let r = rng.random_range(j..m);
                idx.swap(j, r);
            }
            let (tx, ts) = split(&points, &idx[..k]);
            acc.push(h.eval(&tx, &ts));
        }
    }
    Ok(acc.mean())
}

/// `h_sym` as a labeled function.
pub struct Symmetrized<'a> {
    pub inner: &'a dyn LabeledFunction,
    pub mode: SymmetrizeMode,
}

impl LabeledFunction for Symmetrized<'_> {
    fn arity(&self) -> usize {
        self.inner.arity()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64], s: &[f64]) -> f64 {
        symmetrize(self.inner, x, s, self.mode).unwrap_or(f64::NAN)
    }
}

/// Pointwise energies `(sum over assignments of the k-labeled form of h,
/// m^[k] times the form of h_sym)` on the configuration `points`, using
/// symbolic gradients. Integrating either against the unlabeled law gives
/// the energy of `h` resp. `h_sym` under the k-labeled measure.
pub fn symmetrization_energies(
    h: &CylinderFunction,
    points: &[f64],
) -> Result<(f64, f64), FormsError> {
    let d = h.dim;
    let k = h.arity;
    let pts = canonical_points(&[], points, d);
    let m = pts.len();
    if m > EXACT_SYMMETRIZE_MAX {
        return Err(FormsError::TooManyPoints { m });
    }
    if m < k {
        return Err(FormsError::TooFewPoints { m, k });
    }
    let mut per_point = vec![0.0; m * d];
    let mut energy_h = 0.0;
    let mut count = 0usize;
    for_each_tuple(m, k, &mut |t| {
        let (tx, ts) = split(&pts, t);
        let g = h.gradient(&tx, &ts);
        energy_h += from_gradients::labeled(&g, &g);
        for (slot, &p) in t.iter().enumerate() {
            for j in 0..d {
                per_point[p * d + j] += g.tagged[slot * d + j];
            }
        }
        let rest = (0..m).filter(|i| !t.contains(i));
        for (b, p) in rest.enumerate() {
            for j in 0..d {
                per_point[p * d + j] += g.background[b * d + j];
            }
        }
        count += 1;
    });
    let count_f = count as f64;
    debug_assert_eq!(count as u128, falling_factorial(m as u64, k as u64));
    let energy_sym = 0.5
        * per_point
            .iter()
            .map(|v| (v / count_f) * (v / count_f))
            .sum::<f64>()
        * count_f;
    Ok((energy_h, energy_sym))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configuration::Domain;
    use crate::pointprocess::PoissonSampler;
    use proptest::prelude::{prop_assert, proptest};

    fn cfg(d: usize, v: &[f64]) -> Configuration {
        Configuration::new(Domain::free(d), v.to_vec()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn linear_sum_gives_half_count() {
        let f = CylinderFunction::new(0, 1, Term::Background(Smooth::linear(&[1.0])));
        let s = cfg(1, &[0.1, 0.7, -2.0, 3.0]);
        assert!((gamma_unlabeled(&f, &f, &s, DEFAULT_STEP) - 2.0).abs() < 1e-8);
        let c = CylinderFunction::new(0, 1, Term::Const(3.0));
        assert_eq!(gamma_unlabeled(&c, &c, &s, DEFAULT_STEP), 0.0);
    }

    #[test]
    fn tagged_only_function() {
        let psi = Smooth::Gaussian {
            amp: 1.0,
            center: vec![0.2, -0.1],
            width: 0.8,
        };
        let f = CylinderFunction::new(1, 2, Term::Tagged(0, psi.clone()));
        let x = [0.5, 0.3];
        let s = cfg(2, &[1.0, 1.0, -1.0, 0.0]);
        let grad = psi.gradient(&x);
        let half = 0.5 * dot(&grad, &grad);
        assert!(rel_err(gamma_k(&f, &f, &x, &s, DEFAULT_STEP), half) < 1e-8);
        assert!(rel_err(gamma_xy(&f, &f, &x, &s, DEFAULT_STEP), half) < 1e-8);
        let r = check_iota_identity(&f, &f, &x, &s, 1e-4).unwrap();
        assert!(r.max_residual < 1e-8);
    }

    #[test]
    fn background_only_k_form_is_unlabeled_form() {
        let mut rng = replica_rng(1, 0);
        let f0 = random_cylinder(0, 2, &mut rng);
        let f1 = CylinderFunction::new(1, 2, f0.term.clone());
        let s = cfg(2, &random_points(4, 2, 2.0, &mut rng));
        let a = gamma_k(&f1, &f1, &[0.3, 0.3], &s, DEFAULT_STEP);
        let b = gamma_unlabeled(&f0, &f0, &s, DEFAULT_STEP);
        assert!(rel_err(a, b) < 1e-10);
    }

    #[test]
    fn hand_expanded_iota_identity() {
        let phi = Smooth::Gaussian {
            amp: 1.0,
            center: vec![0.5],
            width: 0.7,
        };
        let f = CylinderFunction::new(1, 1, Term::Background(phi.clone()));
        let x = [0.3];
        let s = [1.0, -0.4, 0.9];
        let grads: Vec<f64> = s.iter().map(|&si| phi.gradient(&[si - x[0]])[0]).collect();
        let sum: f64 = grads.iter().sum();
        let expected = 0.5 * sum * sum + 0.5 * grads.iter().map(|g| g * g).sum::<f64>();
        let lhs = gamma_k(&Iota(&f), &Iota(&f), &x, &cfg(1, &s), 1e-5);
        assert!(rel_err(lhs, expected) < 1e-8);
        let rhs = symbolic::gamma_xy(&f, &f, &x, &shift(&s, &x));
        assert!(rel_err(rhs, expected) < 1e-12);
    }

    #[test]
    fn translation_invariant_functions() {
        let f = CylinderFunction::new(
            0,
            2,
            Term::Pairs(Smooth::Gaussian {
                amp: 1.0,
                center: vec![0.0, 0.0],
                width: 1.0,
            }),
        );
        let s = cfg(2, &[0.0, 0.1, 1.0, -0.5, 0.4, 0.9]);
        let df = d_operator(&f, &[], &s, DEFAULT_STEP);
        assert!(df.iter().all(|v| v.abs() < 1e-9));
        let gy = gamma_y(&f, &f, &s, DEFAULT_STEP);
        let gu = gamma_unlabeled(&f, &f, &s, DEFAULT_STEP);
        assert!(rel_err(gy, gu) < 1e-8);
    }

    #[test]
    fn d_of_linear_sum() {
        let phi = Smooth::Gaussian {
            amp: 2.0,
            center: vec![0.0],
            width: 1.0,
        };
        let f = CylinderFunction::new(0, 1, Term::Background(phi.clone()));
        let pts = [0.3, -0.8];
        let expected: f64 = pts.iter().map(|&p| phi.gradient(&[p])[0]).sum();
        let df = d_operator(&f, &[], &cfg(1, &pts), DEFAULT_STEP);
        assert!(rel_err(df[0], expected) < 1e-8);
    }

    #[test]
    fn fd_matches_symbolic_oracle() {
        for i in 0..100 {
            let mut rng = replica_rng(7, i);
            let k = (i % 3) as usize;
            let d = 1 + (i % 2) as usize;
            let f = random_cylinder(k, d, &mut rng);
            let g = random_cylinder(k, d, &mut rng);
            let x = random_points(k, d, 1.5, &mut rng);
            let s = random_points(4, d, 2.0, &mut rng);
            let sc = cfg(d, &s);
            let pairs = [
                (
                    gamma_k(&f, &g, &x, &sc, DEFAULT_STEP),
                    symbolic::gamma_k(&f, &g, &x, &s),
                ),
                (
                    gamma_k(&f, &f, &x, &sc, DEFAULT_STEP),
                    symbolic::gamma_k(&f, &f, &x, &s),
                ),
            ];
            for (fd, exact) in pairs {
                assert!(rel_err(fd, exact) < 1e-6, "case {i}: {fd} vs {exact}");
            }
            let a = d_operator(&f, &x, &sc, DEFAULT_STEP);
            let b = d_operator_coordinate_sum(&f, &x, &sc, DEFAULT_STEP);
            let c = symbolic::d_operator(&f, &x, &s);
            for j in 0..d {
                assert!(rel_err(a[j], b[j]) < 1e-6);
                assert!(rel_err(a[j], c[j]) < 1e-6);
            }
            if k == 1 {
                let fd = gamma_xy(&f, &g, &x, &sc, DEFAULT_STEP);
                assert!(rel_err(fd, symbolic::gamma_xy(&f, &g, &x, &s)) < 1e-6);
            }
            if k == 0 {
                let fd = gamma_y(&f, &g, &sc, DEFAULT_STEP);
                assert!(rel_err(fd, symbolic::gamma_y(&f, &g, &s)) < 1e-6);
            }
        }
    }

    #[test]
    fn iota_identity_random() {
        let report = check_iota_random(200, 2, 3, 1e-4);
        assert_eq!(report.samples, 200);
        assert!(report.max_residual < 1e-5, "{report:?}");
    }

    #[test]
    fn product_formula_special_cases() {
        let phi = Smooth::Bump {
            amp: 1.0,
            center: vec![0.0],
            radius: 2.0,
        };
        let one = CylinderFunction::new(0, 1, Term::Const(1.0));
        let x = [0.4];
        let s = cfg(1, &[0.2, 1.0]);
        let joint = CylinderFunction::tensor(phi.clone(), &one);
        let g = phi.gradient(&x);
        assert!(rel_err(gamma_xy(&joint, &joint, &x, &s, 1e-5), 0.5 * g[0] * g[0]) < 1e-7);
        let sampler = PoissonSampler {
            domain: Domain::torus(1, 6.0),
            intensity: 1.0,
        };
        let f = CylinderFunction::new(
            0,
            1,
            Term::Background(Smooth::Gaussian {
                amp: 1.0,
                center: vec![3.0],
                width: 1.0,
            }),
        );
        let r = check_product_formula(
            &phi,
            &f,
            &sampler,
            ProductCheck {
                samples: 500,
                seed: 2,
                h: 1e-5,
            },
        )
        .unwrap();
        assert!(r.max_residual < 1e-5, "{r:?}");
        assert!(r.z.unwrap().abs() < 4.0);
    }

    #[test]
    fn symmetrize_two_points() {
        let h = CylinderFunction::new(1, 1, Term::Tagged(0, Smooth::linear(&[1.0])));
        let v = symmetrize(&h, &[0.3], &[1.1], SymmetrizeMode::Exact).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        let err = symmetrize(&h, &[0.0], &[1.0; 8], SymmetrizeMode::Exact);
        assert_eq!(err, Err(FormsError::TooManyPoints { m: 9 }));
        let mc = symmetrize(
            &h,
            &[0.0],
            &(1..=9).map(f64::from).collect::<Vec<_>>(),
            SymmetrizeMode::MonteCarlo {
                samples: 4000,
                seed: 1,
            },
        )
        .unwrap();
        assert!((mc - 4.5).abs() < 0.2);
    }

    #[test]
    fn symmetrize_is_idempotent_and_symmetric() {
        for i in 0..20 {
            let mut rng = replica_rng(11, i);
            let k = 1 + (i % 2) as usize;
            let h = random_cylinder(k, 2, &mut rng);
            let n = rng.random_range(0..=(EXACT_SYMMETRIZE_MAX - k));
            let x = random_points(k, 2, 1.0, &mut rng);
            let s = random_points(n, 2, 2.0, &mut rng);
            let sym = Symmetrized {
                inner: &h,
                mode: SymmetrizeMode::Exact,
            };
            let once = symmetrize(&h, &x, &s, SymmetrizeMode::Exact).unwrap();
            let twice = symmetrize(&sym, &x, &s, SymmetrizeMode::Exact).unwrap();
            assert_eq!(once, twice);
            // already symmetric input stays put
            let swapped_x = s.get(..2 * k).map(<[f64]>::to_vec).unwrap_or_default();
            if swapped_x.len() == x.len() {
                let mut swapped_s = x.clone();
                swapped_s.extend_from_slice(&s[2 * k..]);
                assert_eq!(sym.eval(&swapped_x, &swapped_s), once);
            }
        }
    }

    #[test]
    fn energy_contraction_with_fd_cross_check() {
        for i in 0..30 {
            let mut rng = replica_rng(13, i);
            let k = 1 + (i % 2) as usize;
            let h = random_cylinder(k, 1, &mut rng);
            let m = rng.random_range(k..=5);
            let pts = random_points(m, 1, 2.0, &mut rng);
            let (e_h, e_sym) = symmetrization_energies(&h, &pts).unwrap();
            assert!(e_sym <= e_h * (1.0 + 1e-12) + 1e-300, "{e_sym} > {e_h}");
            // the symmetrized form agrees with finite differences of symmetrize
            let sym = Symmetrized {
                inner: &h,
                mode: SymmetrizeMode::Exact,
            };
            let (x, s) = pts.split_at(k);
            let fd = gamma_k(&sym, &sym, x, &cfg(1, s), 1e-5);
            let weight = falling_factorial(m as u64, k as u64) as f64;
            assert!(
                rel_err(fd * weight, e_sym) < 1e-5,
                "{} vs {e_sym}",
                fd * weight
            );
        }
    }

    #[test]
    fn window_of_bump_sum() {
        let f = CylinderFunction::new(
            0,
            1,
            Term::Background(Smooth::Bump {
                amp: 1.0,
                center: vec![2.0],
                radius: 1.0,
            }),
        );
        assert_eq!(f.window(), Some(3.0));
        // points outside the window do not matter
        assert_eq!(f.eval(&[], &[2.5, 10.0]), f.eval(&[], &[2.5, -7.0]));
    }

    proptest! {
        #[test]
        fn background_permutation_invariance(seed in 0u64..500, rot in 0usize..5) {
            let mut rng = replica_rng(seed, 0);
            let f = random_cylinder(1, 2, &mut rng);
            let x = random_points(1, 2, 1.0, &mut rng);
            let s = random_points(5, 2, 2.0, &mut rng);
            let mut pts: Vec<Vec<f64>> = s.chunks(2).map(<[f64]>::to_vec).collect();
            pts.rotate_left(rot);
            pts.swap(0, 4);
            let t: Vec<f64> = pts.concat();
            prop_assert!(rel_err(f.eval(&x, &s), f.eval(&x, &t)) < 1e-12);
        }

        #[test]
        fn gamma_k_bilinear_symmetric(seed in 0u64..200, a in -2.0f64..2.0) {
            let mut rng = replica_rng(seed, 1);
            let f = random_cylinder(1, 1, &mut rng);
            let g = random_cylinder(1, 1, &mut rng);
            let x = random_points(1, 1, 1.0, &mut rng);
            let s = random_points(3, 1, 2.0, &mut rng);
            let sc = cfg(1, &s);
            let fg = gamma_k(&f, &g, &x, &sc, DEFAULT_STEP);
            let gf = gamma_k(&g, &f, &x, &sc, DEFAULT_STEP);
            prop_assert!(rel_err(fg, gf) < 1e-12);
            let af = CylinderFunction::new(1, 1, Term::Product(Box::new(Term::Const(a)), Box::new(f.term.clone())));
            let lin = gamma_k(&af, &g, &x, &sc, DEFAULT_STEP);
            prop_assert!(rel_err(lin, a * fg) < 1e-6);
        }
    }
}
