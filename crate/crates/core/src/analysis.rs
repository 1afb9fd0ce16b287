//! Correlation-function estimators, factorial-moment checks, the
//! non-explosion criterion and tagged-particle diagnostics.

use rand::Rng;
use thiserror::Error;

use crate::configuration::{
    ball_volume, falling_factorial, kappa, Configuration, ConfigurationError, Domain, Geometry,
    KLabeledState,
};
use crate::dynamics::Trajectory;
use crate::par;
use crate::pointprocess::{PointProcessError, PointSampler};
use crate::rng::{derive_seed, replica_rng, salt};
use crate::stats::{bootstrap_se, mean_se, z_difference, MeanSe};

pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Minimum mean count per bin accepted by [`estimate_rho`].
pub const MIN_MEAN_BIN_COUNT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("insufficient samples: {mean_count:.2} counts per bin on average, need {MIN_MEAN_BIN_COUNT}")]
    InsufficientSamples { mean_count: f64 },
    #[error("invalid bins: {0}")]
    InvalidBins(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sampler: {0}")]
    Sampler(#[from] PointProcessError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// Axis-aligned box `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&x, (&a, &b))| x >= a && x < b)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn overlaps(&self, other: &BoxRegion) -> bool {
        (0..self.lo.len()).all(|j| self.lo[j] < other.hi[j] && other.lo[j] < self.hi[j])
    }

    /// Splits into `per_axis^d` equal cells in row-major order.
    pub fn subdivide(&self, per_axis: usize) -> Vec<BoxRegion> {
        let d = self.lo.len();
        let total = per_axis.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                let mut lo = vec![0.0; d];
                let mut hi = vec![0.0; d];
                for j in (0..d).rev() {
                    let c = idx % per_axis;
                    idx /= per_axis;
                    let w = (self.hi[j] - self.lo[j]) / per_axis as f64;
                    lo[j] = self.lo[j] + c as f64 * w;
                    hi[j] = if c + 1 == per_axis {
                        self.hi[j]
                    } else {
                        self.lo[j] + (c + 1) as f64 * w
                    };
                }
                BoxRegion { lo, hi }
            })
            .collect()
    }
}

/// Bin geometry of a correlation estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum Bins {
    /// Disjoint boxes. Order 2 uses every ordered pair of cells.
    Cells(Vec<BoxRegion>),
    /// Pair separations `[j w, (j+1) w)` up to `r_max`, for translation-invariant data.
    Separation { width: f64, r_max: f64 },
}

impl Bins {
    pub fn grid(region: &BoxRegion, per_axis: usize) -> Self {
        Bins::Cells(region.subdivide(per_axis))
    }

    pub fn separation_edges(&self) -> Vec<f64> {
        match self {
            Bins::Separation { width, r_max } => {
                let n = (r_max / width).round() as usize;
                (0..=n).map(|j| j as f64 * width).collect()
            }
            Bins::Cells(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            resamples: BOOTSTRAP_RESAMPLES,
            seed: 0,
        }
    }
}

/// Binned estimate of `rho^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    pub order: usize,
    pub bins: Bins,
    /// One value per bin; for cells of order 2, index `a * cells + b`.
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// Total (pair) counts per bin over all replicas.
    pub counts: Vec<f64>,
    pub replicas: usize,
    /// Measure each bin count is divided by.
    norm: Vec<f64>,
    rows: Vec<Vec<f64>>,
    resamples: usize,
    seed: u64,
}

impl CorrelationEstimate {
    /// `sum_b weight_b * value_b`, with bootstrap error.
    pub fn integrate(&self, weight: &[f64]) -> MeanSe {
        let r = self.rows.len();
        let per_replica: Vec<f64> = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(weight)
                    .zip(&self.norm)
                    .map(|((c, w), n)| c * w / n)
                    .sum()
            })
            .collect();
        let mean = per_replica.iter().sum::<f64>() / r as f64;
        let se = bootstrap_se(r, self.resamples, self.seed ^ 0x1a7e, |idx| {
            idx.iter().map(|&i| per_replica[i]).sum::<f64>() / r as f64
        });
        MeanSe { mean, se, n: r }
    }

    /// Bins with their `(value, se)` for reporting.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..self.values.len()).map(|b| (b, self.values[b], self.se[b], self.counts[b]))
    }
}

fn pair_measure(domain: &Domain, a: f64, b: f64) -> Result<f64, AnalysisError> {
    match domain.geometry {
        Geometry::Torus { side } => {
            if b > side / 2.0 {
                return Err(AnalysisError::InvalidBins(format!(
                    "separation {b} exceeds half the torus side"
                )));
            }
            Ok(domain.volume().unwrap_or(0.0)
                * (ball_volume(domain.dim, b) - ball_volume(domain.dim, a)))
        }
        Geometry::Ball { radius } if domain.dim == 1 => {
            let len = 2.0 * radius;
            if b > len {
                return Err(AnalysisError::InvalidBins(format!(
                    "separation {b} exceeds the window length"
                )));
            }
            Ok(2.0 * ((b - a) * len - (b * b - a * a) / 2.0))
        }
        _ => Err(AnalysisError::InvalidBins(
            "separation bins need a torus or a one-dimensional window".into(),
        )),
    }
}

/// Estimates `rho^1` or `rho^2` from independent samples.
pub fn estimate_rho(
    samples: &[Configuration],
    order: usize,
    bins: &Bins,
    opts: EstimateOptions,
) -> Result<CorrelationEstimate, AnalysisError> {
    if !(1..=2).contains(&order) {
        return Err(AnalysisError::InvalidInput(format!(
            "order {order} not supported"
        )));
    }
    let Some(first) = samples.first() else {
        return Err(AnalysisError::InsufficientSamples { mean_count: 0.0 });
    };
    let domain = *first.domain();
    let (rows, norm): (Vec<Vec<f64>>, Vec<f64>) = match bins {
        Bins::Cells(cells) => {
            let nc = cells.len();
            let rows = par::map_indexed(samples.len(), |i| {
                let mut c = vec![0.0; nc];
                for p in samples[i].points() {
                    if let Some(b) = cells.iter().position(|cell| cell.contains(p)) {
                        c[b] += 1.0;
                    }
                }
                if order == 1 {
                    return c;
                }
                let mut pairs = vec![0.0; nc * nc];
                for a in 0..nc {
                    for b in 0..nc {
                        pairs[a * nc + b] = if a == b {
                            c[a] * (c[a] - 1.0)
                        } else {
                            c[a] * c[b]
                        };
                    }
                }
                pairs
            });
            let vols: Vec<f64> = cells.iter().map(BoxRegion::volume).collect();
            let norm = if order == 1 {
                vols
            } else {
                vols.iter()
                    .flat_map(|va| vols.iter().map(move |vb| va * vb))
                    .collect()
            };
            (rows, norm)
        }
        Bins::Separation { .. } => {
            if order != 2 {
                return Err(AnalysisError::InvalidBins(
                    "separation bins only estimate rho^2".into(),
                ));
            }
            let edges = bins.separation_edges();
            let nb = edges.len() - 1;
            let width = edges[1];
            let norm = (0..nb)
                .map(|j| pair_measure(&domain, edges[j], edges[j + 1]))
                .collect::<Result<Vec<_>, _>>()?;
            let r_max = edges[nb];
            let rows = par::map_indexed(samples.len(), |i| {
                let s = &samples[i];
                let mut h = vec![0.0; nb];
                for a in 0..s.len() {
                    for b in (a + 1)..s.len() {
                        let r = domain.distance(s.point(a), s.point(b));
                        if r < r_max {
                            let j = ((r / width) as usize).min(nb - 1);
                            // both orders of the pair
                            h[j] += 2.0;
                        }
                    }
                }
                h
            });
            (rows, norm)
        }
    };
    let nb = norm.len();
    let r = rows.len();
    let counts: Vec<f64> = (0..nb)
        .map(|b| rows.iter().map(|row| row[b]).sum())
        .collect();
    let mean_count = counts.iter().sum::<f64>() / nb as f64;
    if mean_count < MIN_MEAN_BIN_COUNT {
        return Err(AnalysisError::InsufficientSamples { mean_count });
    }
    let values: Vec<f64> = (0..nb).map(|b| counts[b] / (r as f64 * norm[b])).collect();
    let se = bootstrap_bins(&rows, &norm, opts);
    Ok(CorrelationEstimate {
        order,
        bins: bins.clone(),
        values,
        se,
        counts,
        replicas: r,
        norm,
        rows,
        resamples: opts.resamples,
        seed: opts.seed,
    })
}

fn bootstrap_bins(rows: &[Vec<f64>], norm: &[f64], opts: EstimateOptions) -> Vec<f64> {
    let r = rows.len();
    let nb = norm.len();
    if r < 2 {
        return vec![0.0; nb];
    }
    let draws = par::map_indexed(opts.resamples, |b| {
        let mut rng = replica_rng(opts.seed, 0xB0_0000 + b as u64);
        let mut acc = vec![0.0; nb];
        for _ in 0..r {
            let row = &rows[rng.random_range(0..r)];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter()
            .zip(norm)
            .map(|(a, n)| a / (r as f64 * n))
            .collect::<Vec<f64>>()
    });
    (0..nb)
        .map(|b| {
            let col: Vec<f64> = draws.iter().map(|d| d[b]).collect();
            crate::stats::variance(&col).sqrt()
        })
        .collect()
}

/// Shell counts: `counts[j][m]` samples with exactly `m` points in `S_{r_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellPartition {
    pub radii: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
}

/// Number of points of `s` within distance `r` of the origin.
pub fn count_in_ball(s: &Configuration, r: f64) -> usize {
    let origin = vec![0.0; s.dim()];
    s.count_in(|p| s.domain().distance(p, &origin) < r)
}

pub fn shell_partition(
    samples: &[Configuration],
    radii: &[f64],
) -> Result<ShellPartition, AnalysisError> {
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::InvalidInput("radii must increase".into()));
    }
    let counts = radii
        .iter()
        .map(|&r| {
            let mut hist: Vec<u64> = Vec::new();
            for s in samples {
                let m = count_in_ball(s, r);
                if hist.len() <= m {
                    hist.resize(m + 1, 0);
                }
                hist[m] += 1;
            }
            hist
        })
        .collect();
    Ok(ShellPartition {
        radii: radii.to_vec(),
        counts,
    })
}

/// Result of a two-sided Monte Carlo comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub lhs: MeanSe,
    pub rhs: MeanSe,
    pub z: f64,
}

impl Comparison {
    fn new(lhs: MeanSe, rhs: MeanSe) -> Self {
        Self {
            lhs,
            rhs,
            z: z_difference(lhs, rhs),
        }
    }

    pub fn passes(&self, bound: f64) -> bool {
        self.z.abs() < bound
    }
}

/// Compares the integral of the estimated correlation function over
/// `prod A_i^{k_i}` with the mean factorial-moment product. The two sides
/// come from disjoint halves of `samples` (even and odd indices), so the
/// z-score is standard normal under the identity.
pub fn campbell_check(
    samples: &[Configuration],
    sets: &[BoxRegion],
    ks: &[usize],
    subdivisions: usize,
) -> Result<Comparison, AnalysisError> {
    if sets.len() != ks.len() {
        return Err(AnalysisError::InvalidInput("one k per set".into()));
    }
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            if sets[i].overlaps(&sets[j]) {
                return Err(AnalysisError::InvalidInput(format!(
                    "sets {i} and {j} overlap"
                )));
            }
        }
    }
    let order: usize = ks.iter().sum();
    if order == 0 {
        let one = MeanSe {
            mean: 1.0,
            se: 0.0,
            n: samples.len(),
        };
        return Ok(Comparison::new(one, one));
    }
    if order > 2 {
        return Err(AnalysisError::InvalidInput(format!(
            "total order {order} > 2"
        )));
    }
    let even: Vec<Configuration> = samples.iter().step_by(2).cloned().collect();
    let odd: Vec<Configuration> = samples.iter().skip(1).step_by(2).cloned().collect();

    let moments: Vec<f64> = odd
        .iter()
        .map(|s| {
            sets.iter()
                .zip(ks)
                .map(|(a, &k)| {
                    falling_factorial(s.count_in(|p| a.contains(p)) as u64, k as u64) as f64
                })
                .product()
        })
        .collect();
    let rhs = mean_se(&moments);

    let mut cells = Vec::new();
    let mut owner = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        for c in a.subdivide(subdivisions) {
            cells.push(c);
            owner.push(i);
        }
    }
    let vols: Vec<f64> = cells.iter().map(BoxRegion::volume).collect();
    let nc = cells.len();
    let slots: Vec<usize> = ks
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| std::iter::repeat_n(i, k))
        .collect();
    let weight: Vec<f64> = if order == 1 {
        (0..nc)
            .map(|a| if owner[a] == slots[0] { vols[a] } else { 0.0 })
            .collect()
    } else {
        let mut w = vec![0.0; nc * nc];
        for a in 0..nc {
            for b in 0..nc {
                if owner[a] == slots[0] && owner[b] == slots[1] {
                    w[a * nc + b] = vols[a] * vols[b];
                }
            }
        }
        w
    };
    let est = match estimate_rho(
        &even,
        order,
        &Bins::Cells(cells),
        EstimateOptions::default(),
    ) {
        Ok(e) => e,
        // nothing to integrate: both sides are zero unless the other half disagrees
        Err(AnalysisError::InsufficientSamples { .. }) => {
            let lhs = estimate_zero_or_sparse(&even, sets, ks);
            return Ok(Comparison::new(lhs, rhs));
        }
        Err(e) => return Err(e),
    };
    Ok(Comparison::new(est.integrate(&weight), rhs))
}

fn estimate_zero_or_sparse(samples: &[Configuration], sets: &[BoxRegion], ks: &[usize]) -> MeanSe {
    let v: Vec<f64> = samples
        .iter()
        .map(|s| {
            sets.iter()
                .zip(ks)
                .map(|(a, &k)| {
                    falling_factorial(s.count_in(|p| a.contains(p)) as u64, k as u64) as f64
                })
                .product()
        })
        .collect();
    mean_se(&v)
}

/// How the k-labeled side of the pushforward identity is sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabeledRoute {
    /// Poisson input: tagged points uniform in `S_r` added to a fresh sample,
    /// weighted by `(intensity |S_r|)^k`.
    Slivnyak { intensity: f64 },
    /// Any input: a uniform ordered k-tuple of the points in `S_r`, weighted by `m^[k]`.
    Mecke,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushforwardSpec {
    pub r: f64,
    pub k: usize,
    pub n_cap: usize,
    pub replicas: usize,
    pub seed: u64,
}

fn uniform_in_ball(domain: &Domain, r: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = domain.dim;
    loop {
        let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
        if p.iter().map(|c| c * c).sum::<f64>() < r * r {
            domain.wrap(&mut p);
            return p;
        }
    }
}

/// Monte Carlo comparison of the truncated k-labeled expectation of `F o kappa`
/// with `sum_{m=k}^{N} m^[k] E[F; m points in S_r]`. The two sides use
/// independent replica streams.
pub fn pushforward_check(
    sampler: &dyn PointSampler,
    route: LabeledRoute,
    spec: PushforwardSpec,
    f: &(dyn Fn(&Configuration) -> f64 + Sync),
) -> Result<Comparison, AnalysisError> {
    let domain = sampler.domain();
    let PushforwardSpec {
        r,
        k,
        n_cap,
        replicas,
        seed,
    } = spec;
    if let Some(diam) = domain.diameter() {
        if 2.0 * r > diam {
            return Err(AnalysisError::InvalidInput(format!(
                "S_r with r = {r} does not fit the domain"
            )));
        }
    }
    let lhs_seed = derive_seed(seed, salt("labeled"));
    let rhs_seed = derive_seed(seed, salt("unlabeled"));
    let shell = ball_volume(domain.dim, r);
    let lhs = par::try_map_indexed(replicas, |i| -> Result<f64, AnalysisError> {
        let rs = derive_seed(lhs_seed, i as u64);
        let s = sampler.sample(rs)?;
        let mut rng = replica_rng(rs, 1);
        match route {
            LabeledRoute::Slivnyak { intensity } => {
                let tagged: Vec<f64> = (0..k)
                    .flat_map(|_| uniform_in_ball(&domain, r, &mut rng))
                    .collect();
                let full = kappa(&KLabeledState::new(tagged, s)?);
                let m = count_in_ball(&full, r);
                let w = (intensity * shell).powi(k as i32);
                Ok(if m <= n_cap { w * f(&full) } else { 0.0 })
            }
            LabeledRoute::Mecke => {
                let origin = vec![0.0; domain.dim];
                let mut inside: Vec<usize> = (0..s.len())
                    .filter(|&j| domain.distance(s.point(j), &origin) < r)
                    .collect();
                let m = inside.len();
                if m < k || m > n_cap {
                    return Ok(0.0);
                }
                for j in 0..k {
                    let pick = rng.random_range(j..m);
                    inside.swap(j, pick);
                }
                let tuple = &inside[..k];
                let tagged: Vec<f64> = tuple.iter().flat_map(|&j| s.point(j).to_vec()).collect();
                let background = s.restrict_indexed(|j| !tuple.contains(&j));
                let full = kappa(&KLabeledState::new(tagged, background)?);
                Ok(falling_factorial(m as u64, k as u64) as f64 * f(&full))
            }
        }
    })?;
    let rhs = par::try_map_indexed(replicas, |i| -> Result<f64, AnalysisError> {
        let s = sampler.sample(derive_seed(rhs_seed, i as u64))?;
        let m = count_in_ball(&s, r);
        Ok(if m <= n_cap {
            falling_factorial(m as u64, k as u64) as f64 * f(&s)
        } else {
            0.0
        })
    })?;
    Ok(Comparison::new(mean_se(&lhs), mean_se(&rhs)))
}

/// Standard normal upper tail `P(Z > x)`.
pub fn ell(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// `ln ell(x)`, finite far into the tail.
pub fn log_ell(x: f64) -> f64 {
    if x < 30.0 {
        return ell(x).ln();
    }
    // Laplace continued fraction for the Mills ratio
    let mut cf = x;
    for j in (1..=60).rev() {
        cf = x + j as f64 / cf;
    }
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - cf.ln()
}

/// Radial intensity `rho^1(x) = exp(g(|x|))` in dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadialIntensity {
    /// `lambda`
    Constant { lambda: f64 },
    /// `c exp(a |x|)`
    ExpLinear { c: f64, a: f64 },
    /// `c exp(a |x|^2)`
    ExpQuadratic { c: f64, a: f64 },
}

impl RadialIntensity {
    pub fn log_density(&self, r: f64) -> f64 {
        match *self {
            RadialIntensity::Constant { lambda } => lambda.ln(),
            RadialIntensity::ExpLinear { c, a } => c.ln() + a * r,
            RadialIntensity::ExpQuadratic { c, a } => c.ln() + a * r * r,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            RadialIntensity::Constant { lambda } => RadialIntensity::Constant {
                lambda: lambda * factor,
            },
            RadialIntensity::ExpLinear { c, a } => RadialIntensity::ExpLinear { c: c * factor, a },
            RadialIntensity::ExpQuadratic { c, a } => {
                RadialIntensity::ExpQuadratic { c: c * factor, a }
            }
        }
    }
}

impl std::str::FromStr for RadialIntensity {
    type Err = AnalysisError;

    /// `const:<lambda>`, `exp:<a>` or `gauss:<a>` (unit prefactor).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, val) = s
            .split_once(':')
            .ok_or_else(|| AnalysisError::InvalidInput(format!("bad profile {s:?}")))?;
        let v: f64 = val
            .trim()
            .parse()
            .map_err(|_| AnalysisError::InvalidInput(format!("bad profile value {val:?}")))?;
        match kind.trim() {
            "const" => Ok(RadialIntensity::Constant { lambda: v }),
            "exp" => Ok(RadialIntensity::ExpLinear { c: 1.0, a: v }),
            "gauss" => Ok(RadialIntensity::ExpQuadratic { c: 1.0, a: v }),
            other => Err(AnalysisError::InvalidInput(format!(
                "unknown profile kind {other:?}"
            ))),
        }
    }
}

const GAUSS_LEGENDRE_5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// `ln((e^t - 1) / t)`, stable for all `t`.
fn log_expm1_over(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        t / 2.0
    } else if t > 30.0 {
        t - t.ln() + (-(-t).exp()).ln_1p()
    } else if t < -30.0 {
        -(-t).ln() + (-t.exp()).ln_1p()
    } else {
        (t.exp_m1() / t).ln()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln` of the mass of `rho^1` on the ball of radius `rho`, by an exp-linear
/// rule on a mesh refined geometrically toward the upper end.
pub fn log_ball_mass(profile: &RadialIntensity, dim: usize, rho: f64) -> f64 {
    if rho <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let d = dim as f64;
    let sphere = (d * crate::configuration::unit_ball_volume(dim)).ln();
    let h = |r: f64| {
        if dim == 1 {
            profile.log_density(r)
        } else {
            (d - 1.0) * r.ln() + profile.log_density(r)
        }
    };
    let mut knots = vec![0.0];
    for j in (1..=60).rev() {
        knots.push(rho * 0.5f64.powi(j));
    }
    for j in 1..=60 {
        knots.push(rho * (1.0 - 0.5f64.powi(j)));
    }
    knots.push(rho);
    let sub = 16;
    let mut acc = f64::NEG_INFINITY;
    for w in knots.windows(2) {
        let (a0, b0) = (w[0], w[1]);
        if b0 <= a0 {
            continue;
        }
        for q in 0..sub {
            let a = a0 + (b0 - a0) * q as f64 / sub as f64;
            let b = a0 + (b0 - a0) * (q + 1) as f64 / sub as f64;
            if b <= a {
                continue;
            }
            let (ha, hb) = (h(a), h(b));
            let piece = if a == 0.0 || (hb - ha).abs() < 1.0 {
                // smooth cell: Gauss-Legendre relative to the midpoint value
                let mid = 0.5 * (a + b);
                let half = 0.5 * (b - a);
                let hm = h(mid);
                let s: f64 = GAUSS_LEGENDRE_5
                    .iter()
                    .map(|&(x, wt)| wt * (h(mid + half * x) - hm).exp())
                    .sum();
                hm + (half * s).ln()
            } else {
                (b - a).ln() + ha + log_expm1_over(hb - ha)
            };
            acc = log_add(acc, piece);
        }
    }
    sphere + acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Satisfied,
    NotSatisfied,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Satisfied => "satisfied",
            Verdict::NotSatisfied => "not-satisfied",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvidencePoint {
    pub r: f64,
    pub log_mass: f64,
    pub log_tail: f64,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonExplosionReport {
    pub verdict: Verdict,
    pub t: f64,
    pub r_offset: f64,
    pub curve: Vec<EvidencePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOptions {
    pub grid: Vec<f64>,
    /// `satisfied` needs the running minimum below this.
    pub small: f64,
    /// `not-satisfied` needs the final value above this.
    pub large: f64,
}

impl Default for CriterionOptions {
    fn default() -> Self {
        Self {
            grid: (0..=40).map(|j| 2f64.powi(j)).collect(),
            small: 1e-12,
            large: 1e12,
        }
    }
}

/// Evaluates `[mass of rho^1 on S_{r+R}] * ell(r / sqrt((r+R) T))` on the grid
/// in the log domain and classifies the tail behaviour.
pub fn nonexplosion_criterion(
    profile: &RadialIntensity,
    dim: usize,
    t: f64,
    r_offset: f64,
    opts: &CriterionOptions,
) -> NonExplosionReport {
    let curve: Vec<EvidencePoint> = opts
        .grid
        .iter()
        .map(|&r| {
            let log_mass = log_ball_mass(profile, dim, r + r_offset);
            let log_tail = log_ell(r / ((r + r_offset) * t).sqrt());
            EvidencePoint {
                r,
                log_mass,
                log_tail,
                log_evidence: log_mass + log_tail,
            }
        })
        .collect();
    let r_max = opts.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last: Vec<f64> = curve
        .iter()
        .filter(|p| p.r >= r_max / 10.0)
        .map(|p| p.log_evidence)
        .collect();
    let running_min = curve
        .iter()
        .map(|p| p.log_evidence)
        .fold(f64::INFINITY, f64::min);
    let decreasing = last.windows(2).all(|w| w[1] <= w[0]);
    let increasing = last.windows(2).all(|w| w[1] >= w[0]);
    let verdict = if running_min < opts.small.ln() && decreasing {
        Verdict::Satisfied
    } else if increasing && last.last().is_some_and(|&v| v > opts.large.ln()) {
        Verdict::NotSatisfied
    } else {
        Verdict::Inconclusive
    };
    NonExplosionReport {
        verdict,
        t,
        r_offset,
        curve,
    }
}

pub const DEFAULT_T_SCAN: [f64; 4] = [1.0, 0.5, 0.25, 0.1];

/// The criterion asks for some `T > 0`: returns the first scanned `T` that
/// is satisfied, otherwise the report for the last one.
pub fn nonexplosion_scan(
    profile: &RadialIntensity,
    dim: usize,
    ts: &[f64],
    r_offset: f64,
    opts: &CriterionOptions,
) -> NonExplosionReport {
    let mut last = None;
    for &t in ts {
        let rep = nonexplosion_criterion(profile, dim, t, r_offset, opts);
        if rep.verdict == Verdict::Satisfied {
            return rep;
        }
        last = Some(rep);
    }
    last.unwrap_or_else(|| nonexplosion_criterion(profile, dim, 1.0, r_offset, opts))
}

/// Ensemble mean squared displacement of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdCurve {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub replicas: usize,
}

impl MsdCurve {
    /// Least-squares slope through the origin.
    pub fn slope(&self) -> f64 {
        let num: f64 = self.times.iter().zip(&self.mean).map(|(t, m)| t * m).sum();
        let den: f64 = self.times.iter().map(|t| t * t).sum();
        num / den
    }
}

/// Unwrapped displacement `X_t - X_0` of slot `i` at every snapshot.
pub fn unwrapped_displacements(traj: &Trajectory, i: usize) -> Vec<Vec<f64>> {
    let d = traj.dim();
    let mut acc = vec![0.0; d];
    let mut step = vec![0.0; d];
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        if t > 0 {
            traj.domain
                .displacement(traj.position(t, i), traj.position(t - 1, i), &mut step);
            for (a, s) in acc.iter_mut().zip(&step) {
                *a += s;
            }
        }
        out.push(acc.clone());
    }
    out
}

/// `E|X_t - X_0|^2` of slot `tag` over replicas, with bootstrap errors.
pub fn msd(trajs: &[Trajectory], tag: usize, seed: u64) -> Result<MsdCurve, AnalysisError> {
    let Some(first) = trajs.first() else {
        return Ok(MsdCurve {
            times: Vec::new(),
            mean: Vec::new(),
            se: Vec::new(),
            replicas: 0,
        });
    };
    if trajs.iter().any(|t| t.len() != first.len() || tag >= t.n) {
        return Err(AnalysisError::InvalidInput(
            "trajectories differ in length or lack the tagged slot".into(),
        ));
    }
    // times exclude t = 0, where the displacement vanishes
    let len = first.len().saturating_sub(1);
    let sq: Vec<Vec<f64>> = par::map_indexed(trajs.len(), |r| {
        unwrapped_displacements(&trajs[r], tag)
            .iter()
            .skip(1)
            .map(|u| u.iter().map(|c| c * c).sum())
            .collect()
    });
    let n = trajs.len();
    let rows: Vec<Vec<f64>> = sq;
    let norm = vec![1.0; len];
    let mean: Vec<f64> = (0..len)
        .map(|t| rows.iter().map(|row| row[t]).sum::<f64>() / n as f64)
        .collect();
    let se = if len > 0 {
        bootstrap_bins(
            &rows,
            &norm,
            EstimateOptions {
                resamples: BOOTSTRAP_RESAMPLES,
                seed,
            },
        )
    } else {
        Vec::new()
    };
    Ok(MsdCurve {
        times: first.times[1..].to_vec(),
        mean,
        se,
        replicas: n,
    })
}

/// Fraction of replicas in which some particle starting in `S_r` has moved
/// farther than `bound` from its start by each snapshot time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplosionTable {
    pub times: Vec<f64>,
    pub fraction: Vec<f64>,
}

pub fn explosion_scan(trajs: &[Trajectory], r: f64, bound: f64) -> ExplosionTable {
    let Some(first) = trajs.first() else {
        return ExplosionTable {
            times: Vec::new(),
            fraction: Vec::new(),
        };
    };
    let len = first.len();
    let exits: Vec<Option<usize>> = par::map_indexed(trajs.len(), |q| {
        let traj = &trajs[q];
        let origin = vec![0.0; traj.dim()];
        let mut first_exit: Option<usize> = None;
        for i in 0..traj.n {
            if traj.domain.distance(traj.position(0, i), &origin) >= r {
                continue;
            }
            let disp = unwrapped_displacements(traj, i);
            if let Some(t) = disp
                .iter()
                .position(|u| u.iter().map(|c| c * c).sum::<f64>().sqrt() > bound)
            {
                first_exit = Some(first_exit.map_or(t, |e| e.min(t)));
            }
        }
        first_exit
    });
    let n = trajs.len() as f64;
    let fraction = (0..len)
        .map(|t| exits.iter().filter(|e| e.is_some_and(|e| e <= t)).count() as f64 / n)
        .collect();
    ExplosionTable {
        times: first.times.clone(),
        fraction,
    }
}
