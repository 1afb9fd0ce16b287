//! Euler–Maruyama integration of
//!
//! ```text
//! dX^i = dB^i - 1/2 grad Phi(X^i) dt - 1/2 sum_{j != i} grad_x Psi(X^i, X^j) dt
//! ```
//!
//! on a torus, a reflecting ball, or free space. Pair sums use a cell list
//! and are accumulated in an order fixed by the neighbour coordinates, so
//! the drift on a particle does not depend on how particles are labeled.

use std::cmp::Ordering;

use thiserror::Error;

use crate::configuration::{
    kappa, Configuration, ConfigurationError, Domain, Geometry, KLabeledState, LabeledState,
};
use crate::rng::NoiseSource;

/// LJ and soft-core forces are evaluated no closer than this fraction of sigma.
pub const LJ_R_MIN_FRACTION: f64 = 0.3;
const ATTEMPT_SLOTS: u64 = 1 << 17;
const MAX_HALVINGS: u32 = 6;
const REFLECT_PASSES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("hard-core overlap between particles {0} and {1}")]
    Overlap(usize, usize),
    #[error("step {step} rejected after exhausting retries and {MAX_HALVINGS} halvings of dt")]
    StepRejected { step: u64 },
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// Self potential `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub enum SelfPotential {
    None,
    /// `a |x|^2`
    Harmonic {
        a: f64,
    },
    /// Radial piecewise-linear table `Phi(|x|)`, extended linearly past the last knot.
    Table {
        radii: Vec<f64>,
        values: Vec<f64>,
    },
}

/// Pair potential `Psi(x, y) = psi(|x - y|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairPotential {
    None,
    /// `a r^2`
    Harmonic {
        a: f64,
    },
    /// `4 eps ((sigma/r)^12 - (sigma/r)^6)`
    LennardJones {
        eps: f64,
        sigma: f64,
    },
    /// `eps (sigma/r)^12`
    SoftCore {
        eps: f64,
        sigma: f64,
    },
    /// `eps exp(-r^2 / sigma^2)`
    Gaussian {
        eps: f64,
        sigma: f64,
    },
    /// `+inf` for `r < sigma`, zero otherwise.
    HardCore {
        sigma: f64,
    },
}

impl SelfPotential {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            SelfPotential::None => 0.0,
            SelfPotential::Harmonic { a } => a * x.iter().map(|c| c * c).sum::<f64>(),
            SelfPotential::Table { radii, values } => {
                let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                let (k, slope) = table_segment(radii, values, r);
                values[k] + slope * (r - radii[k])
            }
        }
    }

    /// Adds `grad Phi(x)` into `out`.
    pub fn add_gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SelfPotential::None => {}
            SelfPotential::Harmonic { a } => {
                for (o, c) in out.iter_mut().zip(x) {
                    *o += 2.0 * a * c;
                }
            }
            SelfPotential::Table { radii, values } => {
                let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                if r == 0.0 {
                    return;
                }
                let (_, slope) = table_segment(radii, values, r);
                for (o, c) in out.iter_mut().zip(x) {
                    *o += slope * c / r;
                }
            }
        }
    }
}

fn table_segment(radii: &[f64], values: &[f64], r: f64) -> (usize, f64) {
    let n = radii.len();
    if n < 2 {
        return (0, 0.0);
    }
    let k = match radii.iter().position(|&ri| ri > r) {
        Some(0) => 0,
        Some(p) => p - 1,
        None => n - 2,
    }
    .min(n - 2);
    (k, (values[k + 1] - values[k]) / (radii[k + 1] - radii[k]))
}

impl PairPotential {
    pub fn value(&self, r: f64) -> f64 {
        match *self {
            PairPotential::None => 0.0,
            PairPotential::Harmonic { a } => a * r * r,
            PairPotential::LennardJones { eps, sigma } => {
                let s6 = (sigma / r).powi(6);
                4.0 * eps * (s6 * s6 - s6)
            }
            PairPotential::SoftCore { eps, sigma } => eps * (sigma / r).powi(12),
            PairPotential::Gaussian { eps, sigma } => eps * (-(r * r) / (sigma * sigma)).exp(),
            PairPotential::HardCore { sigma } => {
                if r < sigma {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    /// `psi'(r) / r`, so that `grad_x Psi = (psi'(r)/r) (x - y)`.
    pub fn gradient_scale(&self, r: f64) -> f64 {
        match *self {
            PairPotential::None | PairPotential::HardCore { .. } => 0.0,
            PairPotential::Harmonic { a } => 2.0 * a,
            PairPotential::LennardJones { eps, sigma } => {
                let s6 = (sigma / r).powi(6);
                4.0 * eps * (-12.0 * s6 * s6 + 6.0 * s6) / (r * r)
            }
            PairPotential::SoftCore { eps, sigma } => -12.0 * eps * (sigma / r).powi(12) / (r * r),
            PairPotential::Gaussian { eps, sigma } => {
                -2.0 * eps / (sigma * sigma) * (-(r * r) / (sigma * sigma)).exp()
            }
        }
    }

    /// Distance below which the force is capped (singular potentials only).
    pub fn cap_radius(&self) -> Option<f64> {
        match *self {
            PairPotential::LennardJones { sigma, .. } | PairPotential::SoftCore { sigma, .. } => {
                Some(LJ_R_MIN_FRACTION * sigma)
            }
            _ => None,
        }
    }

    pub fn hard_core(&self) -> Option<f64> {
        match *self {
            PairPotential::HardCore { sigma } => Some(sigma),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, PairPotential::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    pub phi: SelfPotential,
    pub psi: PairPotential,
    /// Pair interactions beyond this distance are dropped.
    pub r_cut: f64,
}

impl PotentialSpec {
    pub fn free() -> Self {
        Self {
            phi: SelfPotential::None,
            psi: PairPotential::None,
            r_cut: f64::INFINITY,
        }
    }

    /// Effective interaction range (at least the hard-core diameter).
    pub fn interaction_range(&self) -> f64 {
        match self.psi.hard_core() {
            Some(s) => self.r_cut.max(s),
            None => self.r_cut,
        }
    }

    pub fn pair_value(&self, r: f64) -> f64 {
        if r >= self.r_cut && self.psi.hard_core().is_none() {
            0.0
        } else {
            self.psi.value(r)
        }
    }

    /// `sum_i Phi(x_i) + sum_{i<j} Psi(x_i, x_j)` under the domain metric.
    pub fn energy(&self, domain: &Domain, coords: &[f64]) -> f64 {
        let d = domain.dim;
        let n = coords.len() / d;
        let mut e = 0.0;
        for i in 0..n {
            e += self.phi.value(&coords[i * d..(i + 1) * d]);
        }
        if !self.psi.is_none() {
            for i in 0..n {
                for j in i + 1..n {
                    let r =
                        domain.distance(&coords[i * d..(i + 1) * d], &coords[j * d..(j + 1) * d]);
                    e += self.pair_value(r);
                }
            }
        }
        e
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Uniform cell grid over the domain (or the bounding box of the points).
struct CellGrid {
    origin: Vec<f64>,
    width: Vec<f64>,
    counts: Vec<usize>,
    periodic: bool,
    cells: Vec<Vec<usize>>,
}

impl CellGrid {
    /// `None` means the grid would be degenerate and all pairs should be used.
    fn build(domain: &Domain, coords: &[f64], cell_size: f64) -> Option<CellGrid> {
        let d = domain.dim;
        if !cell_size.is_finite() || cell_size <= 0.0 {
            return None;
        }
        let (origin, extent, periodic) = match domain.geometry {
            Geometry::Torus { side } => (vec![0.0; d], vec![side; d], true),
            Geometry::Ball { radius } => (vec![-radius; d], vec![2.0 * radius; d], false),
            Geometry::Free => {
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for p in coords.chunks_exact(d) {
                    for k in 0..d {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
                if coords.is_empty() {
                    return None;
                }
                let ext = lo
                    .iter()
                    .zip(&hi)
                    .map(|(l, h)| (h - l).max(cell_size) * (1.0 + 1e-12))
                    .collect();
                (lo, ext, false)
            }
        };
        let counts: Vec<usize> = extent
            .iter()
            .map(|e| ((e / cell_size).floor() as usize).max(1))
            .collect();
        if periodic && counts.iter().any(|&c| c < 3) {
            return None;
        }
        let total: usize = counts.iter().product();
        if total > 1 << 22 || total <= 1 {
            return None;
        }
        let width: Vec<f64> = extent
            .iter()
            .zip(&counts)
            .map(|(e, &c)| e / c as f64)
            .collect();
        let mut grid = CellGrid {
            origin,
            width,
            counts,
            periodic,
            cells: vec![Vec::new(); total],
        };
        for (i, p) in coords.chunks_exact(d).enumerate() {
            let c = grid.cell_of(p);
            grid.cells[c].push(i);
        }
        Some(grid)
    }

    fn coord_index(&self, p: &[f64], k: usize) -> usize {
        let raw = ((p[k] - self.origin[k]) / self.width[k]).floor();
        (raw.max(0.0) as usize).min(self.counts[k] - 1)
    }

    fn cell_of(&self, p: &[f64]) -> usize {
        let mut idx = 0;
        for k in (0..self.counts.len()).rev() {
            idx = idx * self.counts[k] + self.coord_index(p, k);
        }
        idx
    }

    /// All particle indices in the 3^d block of cells around `p`.
    fn neighbours(&self, p: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let d = self.counts.len();
        let base: Vec<isize> = (0..d).map(|k| self.coord_index(p, k) as isize).collect();
        let mut offset = vec![-1isize; d];
        'cells: loop {
            let mut idx = 0usize;
            let mut valid = true;
            for k in (0..d).rev() {
                let n = self.counts[k] as isize;
                let mut c = base[k] + offset[k];
                if self.periodic {
                    c = c.rem_euclid(n);
                } else if c < 0 || c >= n {
                    valid = false;
                    break;
                }
                idx = idx * self.counts[k] + c as usize;
            }
            if valid {
                out.extend_from_slice(&self.cells[idx]);
            }
            for k in 0..d {
                offset[k] += 1;
                if offset[k] <= 1 {
                    continue 'cells;
                }
                offset[k] = -1;
            }
            break;
        }
    }
}

/// Per-particle drift `-1/2 grad Phi - 1/2 sum grad_x Psi`, flat `n * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub values: Vec<f64>,
    /// Pair evaluations that hit the singular-potential cap.
    pub capped_pairs: u64,
}

/// Potentials bound to a domain together with the neighbour-search settings.
#[derive(Debug, Clone)]
pub struct ForceField {
    pub domain: Domain,
    pub potentials: PotentialSpec,
    pub cell_size: f64,
}

impl ForceField {
    pub fn new(
        domain: Domain,
        potentials: PotentialSpec,
        cell_size: Option<f64>,
    ) -> Result<Self, DynamicsError> {
        let range = potentials.interaction_range();
        let cell_size = cell_size.unwrap_or(range);
        if cell_size < range {
            return Err(DynamicsError::InvalidParams(format!(
                "cell size {cell_size} below interaction range {range}"
            )));
        }
        Ok(Self {
            domain,
            potentials,
            cell_size,
        })
    }

    fn pair_candidates(&self, coords: &[f64]) -> Option<CellGrid> {
        if self.potentials.psi.is_none() {
            return None;
        }
        CellGrid::build(&self.domain, coords, self.cell_size)
    }

    /// Partners `j` of particle `i` within range, in canonical order.
    fn partners(
        &self,
        coords: &[f64],
        i: usize,
        grid: Option<&CellGrid>,
        scratch: &mut Vec<usize>,
        range: f64,
    ) -> Vec<(usize, f64)> {
        let d = self.domain.dim;
        let n = coords.len() / d;
        let p = &coords[i * d..(i + 1) * d];
        match grid {
            Some(g) => g.neighbours(p, scratch),
            None => {
                scratch.clear();
                scratch.extend(0..n);
            }
        }
        let mut out: Vec<(usize, f64)> = scratch
            .iter()
            .copied()
            .filter(|&j| j != i)
            .filter_map(|j| {
                let r = self.domain.distance(p, &coords[j * d..(j + 1) * d]);
                (r < range).then_some((j, r))
            })
            .collect();
        out.sort_by(|a, b| {
            lex_cmp(
                &coords[a.0 * d..(a.0 + 1) * d],
                &coords[b.0 * d..(b.0 + 1) * d],
            )
            .then(a.0.cmp(&b.0))
        });
        out
    }

    fn particle_drift(
        &self,
        coords: &[f64],
        i: usize,
        grid: Option<&CellGrid>,
        out: &mut [f64],
    ) -> u64 {
        let d = self.domain.dim;
        let p = &coords[i * d..(i + 1) * d];
        let mut grad = vec![0.0; d];
        self.potentials.phi.add_gradient(p, &mut grad);
        let mut capped = 0;
        let psi = self.potentials.psi;
        if !psi.is_none() && psi.hard_core().is_none() {
            let mut scratch = Vec::new();
            let mut delta = vec![0.0; d];
            for (j, r) in self.partners(coords, i, grid, &mut scratch, self.potentials.r_cut) {
                self.domain
                    .displacement(p, &coords[j * d..(j + 1) * d], &mut delta);
                let mut r_eval = r;
                if let Some(r_min) = psi.cap_radius() {
                    if r < r_min {
                        capped += 1;
                        if r == 0.0 {
                            continue;
                        }
                        r_eval = r_min;
                    }
                }
                // rescale so the force magnitude is taken at r_eval along delta
                let scale = psi.gradient_scale(r_eval) * r_eval / r;
                for k in 0..d {
                    grad[k] += scale * delta[k];
                }
            }
        }
        for k in 0..d {
            out[k] = -0.5 * grad[k];
        }
        capped
    }

    /// Drift on every particle; errors on hard-core overlap.
    pub fn drift(&self, coords: &[f64]) -> Result<Drift, DynamicsError> {
        let d = self.domain.dim;
        let n = coords.len() / d;
        let grid = self.pair_candidates(coords);
        if let Some((i, j)) = self.overlap_with(coords, grid.as_ref()) {
            return Err(DynamicsError::Overlap(i, j));
        }
        let per: Vec<(Vec<f64>, u64)> = if n >= 256 {
            crate::par::map_indexed(n, |i| {
                let mut v = vec![0.0; d];
                let c = self.particle_drift(coords, i, grid.as_ref(), &mut v);
                (v, c)
            })
        } else {
            (0..n)
                .map(|i| {
                    let mut v = vec![0.0; d];
                    let c = self.particle_drift(coords, i, grid.as_ref(), &mut v);
                    (v, c)
                })
                .collect()
        };
        let mut values = Vec::with_capacity(n * d);
        let mut capped = 0;
        for (v, c) in per {
            values.extend(v);
            capped += c;
        }
        // each capped pair is seen from both ends
        Ok(Drift {
            values,
            capped_pairs: capped / 2,
        })
    }

    /// All-pairs reference drift, summed in the same canonical order.
    pub fn drift_brute_force(&self, coords: &[f64]) -> Result<Drift, DynamicsError> {
        if let Some((i, j)) = self.overlap_with(coords, None) {
            return Err(DynamicsError::Overlap(i, j));
        }
        let d = self.domain.dim;
        let n = coords.len() / d;
        let mut values = vec![0.0; n * d];
        let mut capped = 0;
        for i in 0..n {
            capped += self.particle_drift(coords, i, None, &mut values[i * d..(i + 1) * d]);
        }
        Ok(Drift {
            values,
            capped_pairs: capped / 2,
        })
    }

    fn overlap_with(&self, coords: &[f64], grid: Option<&CellGrid>) -> Option<(usize, usize)> {
        let sigma = self.potentials.psi.hard_core()?;
        let d = self.domain.dim;
        let n = coords.len() / d;
        let mut scratch = Vec::new();
        for i in 0..n {
            let mut hits = self.partners(coords, i, grid, &mut scratch, sigma);
            hits.retain(|&(j, _)| j > i);
            if let Some(&(j, _)) = hits.iter().min_by_key(|h| h.0) {
                return Some((i, j));
            }
        }
        None
    }

    /// First overlapping hard-core pair, if any.
    pub fn first_overlap(&self, coords: &[f64]) -> Option<(usize, usize)> {
        let grid = self.pair_candidates(coords);
        self.overlap_with(coords, grid.as_ref())
    }

    /// Smallest pairwise distance (all pairs).
    pub fn min_pair_distance(&self, coords: &[f64]) -> f64 {
        let d = self.domain.dim;
        let n = coords.len() / d;
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                best = best.min(
                    self.domain
                        .distance(&coords[i * d..(i + 1) * d], &coords[j * d..(j + 1) * d]),
                );
            }
        }
        best
    }
}

/// Drift for a labeled state with default neighbour settings.
pub fn compute_drift(
    state: &LabeledState,
    potentials: &PotentialSpec,
) -> Result<Vec<f64>, DynamicsError> {
    let field = ForceField::new(*state.domain(), potentials.clone(), None)?;
    Ok(field.drift(state.coords())?.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardCoreMode {
    /// Re-draw the noise of the whole step when an overlap appears.
    Reject,
    /// Push overlapping pairs apart by specular reflection of their separation.
    Reflect,
}

impl std::str::FromStr for HardCoreMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reject" => Ok(Self::Reject),
            "reflect" => Ok(Self::Reflect),
            o => Err(format!("unknown hard-core mode `{o}`")),
        }
    }
}

impl std::fmt::Display for HardCoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reject => "reject",
            Self::Reflect => "reflect",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub dt: f64,
    pub t_end: f64,
    /// Steps between stored snapshots.
    pub stride: usize,
    pub seed: u64,
    /// Neighbour cell size; defaults to the interaction range.
    pub cell_size: Option<f64>,
    pub hard_core: HardCoreMode,
    pub max_retries: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 1.0,
            stride: 1,
            seed: 0,
            cell_size: None,
            hard_core: HardCoreMode::Reject,
            max_retries: 100,
        }
    }
}

impl SimParams {
    pub fn n_steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "t_end must be non-negative, got {}",
                self.t_end
            )));
        }
        if self.stride == 0 {
            return Err(DynamicsError::InvalidParams("stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub sampler: String,
    pub config_hash: String,
}

/// How the slots of a trajectory are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Ordinary labeled particles; the first `k` are tagged.
    Labeled { k: usize },
    /// Environment seen from a tagged particle.
    Tagged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub domain: Domain,
    pub n: usize,
    pub frame: Frame,
    pub times: Vec<f64>,
    /// One flat `n * d` coordinate array per snapshot.
    pub frames: Vec<Vec<f64>>,
    pub params: SimParams,
    pub provenance: Provenance,
    /// Per-particle `sup_t |X_t - X_0|` over every integration step.
    pub max_displacement: Vec<f64>,
    pub capped_pairs: u64,
    pub rejected_steps: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn k(&self) -> usize {
        match self.frame {
            Frame::Labeled { k } => k,
            Frame::Tagged => 0,
        }
    }

    pub fn state(&self, t: usize) -> LabeledState {
        LabeledState::from_raw(self.domain, self.frames[t].clone())
    }

    pub fn configuration(&self, t: usize) -> Configuration {
        self.state(t).unlabel()
    }

    /// The unlabeled path `t -> sum_i delta_{X^i_t}`.
    pub fn unlabeled_path(&self) -> Vec<Configuration> {
        (0..self.len()).map(|t| self.configuration(t)).collect()
    }

    /// The k-labeled view `(X^1..X^k, sum_{j>k} delta_{X^j})` at snapshot `t`.
    pub fn k_state(&self, t: usize) -> KLabeledState {
        self.state(t).split_tagged(self.k()).expect("k <= n")
    }

    pub fn position(&self, t: usize, i: usize) -> &[f64] {
        let d = self.domain.dim;
        &self.frames[t][i * d..(i + 1) * d]
    }
}

/// Result of one accepted integration step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub coords: Vec<f64>,
    pub rejections: u64,
    pub capped_pairs: u64,
}

/// Euler–Maruyama stepper with counter-addressed noise.
#[derive(Clone)]
pub struct Integrator {
    pub field: ForceField,
    pub noise: NoiseSource,
    pub hard_core: HardCoreMode,
    pub max_retries: u32,
    /// Noise stream for each particle slot.
    pub streams: Vec<u64>,
}

impl Integrator {
    pub fn new(field: ForceField, params: &SimParams, n: usize) -> Self {
        let dim = field.domain.dim;
        Self {
            field,
            noise: NoiseSource::new(params.seed, dim),
            hard_core: params.hard_core,
            max_retries: params.max_retries,
            streams: (0..n as u64).collect(),
        }
    }

    fn apply_boundary(&self, p: &mut [f64]) {
        match self.field.domain.geometry {
            Geometry::Torus { side } => {
                for c in p.iter_mut() {
                    *c = crate::configuration::wrap_coordinate(*c, side);
                }
            }
            Geometry::Ball { radius } => {
                // reflect radially until inside
                for _ in 0..64 {
                    let r = p.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if r < radius {
                        return;
                    }
                    let target = (2.0 * radius - r).clamp(0.0, radius * (1.0 - 1e-12));
                    let s = target / r;
                    for c in p.iter_mut() {
                        *c *= s;
                    }
                }
            }
            Geometry::Free => {}
        }
    }

    fn propose(&self, coords: &[f64], drift: &[f64], dt: f64, counter: u64) -> Vec<f64> {
        let d = self.field.domain.dim;
        let sq = dt.sqrt();
        let mut xi = vec![0.0; d];
        let mut out = coords.to_vec();
        for (i, p) in out.chunks_exact_mut(d).enumerate() {
            self.noise.fill(self.streams[i], counter, &mut xi);
            for k in 0..d {
                p[k] += drift[i * d + k] * dt + sq * xi[k];
            }
            self.apply_boundary(p);
        }
        out
    }

    fn reflect_overlaps(&self, coords: &mut [f64], sigma: f64) -> bool {
        let d = self.field.domain.dim;
        let n = coords.len() / d;
        let mut delta = vec![0.0; d];
        for _ in 0..REFLECT_PASSES {
            let mut any = false;
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (&coords[i * d..(i + 1) * d], &coords[j * d..(j + 1) * d]);
                    self.field.domain.displacement(a, b, &mut delta);
                    let r = delta.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if r < sigma && r > 0.0 {
                        any = true;
                        let push = (sigma - r) * (1.0 + 1e-9) / r;
                        for k in 0..d {
                            coords[i * d + k] += push * delta[k];
                            coords[j * d + k] -= push * delta[k];
                        }
                        for idx in [i, j] {
                            let mut p = coords[idx * d..(idx + 1) * d].to_vec();
                            self.apply_boundary(&mut p);
                            coords[idx * d..(idx + 1) * d].copy_from_slice(&p);
                        }
                    }
                }
            }
            if !any {
                return true;
            }
        }
        self.field.first_overlap(coords).is_none()
    }

    /// Advances one step of size `dt` from `coords`; `step_index` addresses the noise.
    pub fn step(
        &self,
        coords: &[f64],
        dt: f64,
        step_index: u64,
    ) -> Result<StepOutcome, DynamicsError> {
        let mut rejections = 0;
        let mut capped = 0;
        let out = self.advance(coords, dt, step_index, 0, 0, &mut rejections, &mut capped)?;
        Ok(StepOutcome {
            coords: out,
            rejections,
            capped_pairs: capped,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        coords: &[f64],
        dt: f64,
        step_index: u64,
        level: u32,
        sub: u64,
        rejections: &mut u64,
        capped: &mut u64,
    ) -> Result<Vec<f64>, DynamicsError> {
        let drift = self.field.drift(coords)?;
        *capped += drift.capped_pairs;
        let sigma = self.field.potentials.psi.hard_core();
        let attempts = if sigma.is_some() {
            self.max_retries.max(1)
        } else {
            1
        };
        for attempt in 0..attempts {
            let code = (level as u64 * 64 + sub) * 256 + attempt as u64;
            let counter = step_index * ATTEMPT_SLOTS + code;
            let mut proposal = self.propose(coords, &drift.values, dt, counter);
            let Some(sigma) = sigma else {
                return Ok(proposal);
            };
            let ok = match self.hard_core {
                HardCoreMode::Reject => self.field.first_overlap(&proposal).is_none(),
                HardCoreMode::Reflect => self.reflect_overlaps(&mut proposal, sigma),
            };
            if ok {
                return Ok(proposal);
            }
            *rejections += 1;
        }
        if level >= MAX_HALVINGS {
            return Err(DynamicsError::StepRejected { step: step_index });
        }
        log::warn!(
            "step {step_index}: hard-core retries exhausted, halving dt to {}",
            dt / 2.0
        );
        let mid = self.advance(
            coords,
            dt / 2.0,
            step_index,
            level + 1,
            2 * sub,
            rejections,
            capped,
        )?;
        self.advance(
            &mid,
            dt / 2.0,
            step_index,
            level + 1,
            2 * sub + 1,
            rejections,
            capped,
        )
    }
}

/// Single step from a labeled state with noise addressed by `(params.seed, slot, step_index)`.
pub fn step(
    state: &LabeledState,
    potentials: &PotentialSpec,
    params: &SimParams,
    step_index: u64,
) -> Result<LabeledState, DynamicsError> {
    params.validate()?;
    let field = ForceField::new(*state.domain(), potentials.clone(), params.cell_size)?;
    let integ = Integrator::new(field, params, state.len());
    let out = integ.step(state.coords(), params.dt, step_index)?;
    Ok(LabeledState::from_raw(*state.domain(), out.coords))
}

/// Integrates the labeled SDE from `initial`.
pub fn simulate(
    initial: &LabeledState,
    potentials: &PotentialSpec,
    params: &SimParams,
) -> Result<Trajectory, DynamicsError> {
    let streams: Vec<u64> = (0..initial.len() as u64).collect();
    simulate_with_streams(initial, potentials, params, &streams)
}

/// As [`simulate`], with an explicit noise stream per particle slot.
pub fn simulate_with_streams(
    initial: &LabeledState,
    potentials: &PotentialSpec,
    params: &SimParams,
    streams: &[u64],
) -> Result<Trajectory, DynamicsError> {
    params.validate()?;
    if streams.len() != initial.len() {
        return Err(DynamicsError::InvalidParams(format!(
            "{} streams for {} particles",
            streams.len(),
            initial.len()
        )));
    }
    let domain = *initial.domain();
    let d = domain.dim;
    let n = initial.len();
    let field = ForceField::new(domain, potentials.clone(), params.cell_size)?;
    if let Some((i, j)) = field.first_overlap(initial.coords()) {
        return Err(DynamicsError::Overlap(i, j));
    }
    let mut integ = Integrator::new(field, params, n);
    integ.streams = streams.to_vec();

    let n_steps = params.n_steps();
    let mut coords = initial.coords().to_vec();
    let mut unwrapped = vec![0.0; n * d];
    let mut max_disp = vec![0.0f64; n];
    let mut delta = vec![0.0; d];
    let mut times = vec![0.0];
    let mut frames = vec![coords.clone()];
    let mut capped = 0;
    let mut rejected = 0;
    for s in 0..n_steps {
        let out = integ.step(&coords, params.dt, s)?;
        capped += out.capped_pairs;
        rejected += out.rejections;
        for i in 0..n {
            domain.displacement(
                &out.coords[i * d..(i + 1) * d],
                &coords[i * d..(i + 1) * d],
                &mut delta,
            );
            let u = &mut unwrapped[i * d..(i + 1) * d];
            for k in 0..d {
                u[k] += delta[k];
            }
            max_disp[i] = max_disp[i].max(u.iter().map(|c| c * c).sum::<f64>().sqrt());
        }
        coords = out.coords;
        if (s + 1) % params.stride as u64 == 0 {
            times.push((s + 1) as f64 * params.dt);
            frames.push(coords.clone());
        }
    }
    if capped > 0 {
        log::warn!("{capped} pair evaluations hit the force cap");
    }
    Ok(Trajectory {
        domain,
        n,
        frame: Frame::Labeled { k: 0 },
        times,
        frames,
        params: params.clone(),
        provenance: Provenance::default(),
        max_displacement: max_disp,
        capped_pairs: capped,
        rejected_steps: rejected,
    })
}

/// Integrates from a k-labeled state: the tagged points occupy the first `k`
/// slots, the background follows in the order given by `rule`.
pub fn simulate_k_labeled(
    initial: &KLabeledState,
    potentials: &PotentialSpec,
    params: &SimParams,
    rule: crate::configuration::LabelRule,
) -> Result<Trajectory, DynamicsError> {
    let labeled = initial.to_labeled(rule)?;
    let mut traj = simulate(&labeled, potentials, params)?;
    traj.frame = Frame::Labeled { k: initial.k() };
    debug_assert!(kappa(initial).same_points(&traj.configuration(0)));
    Ok(traj)
}

/// Noise stream per slot: the rank of the slot's initial point in
/// lexicographic order. Any labeling of the same configuration then drives
/// each particle with the same noise.
pub fn canonical_streams(state: &LabeledState) -> Vec<u64> {
    let mut order: Vec<usize> = (0..state.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(state.point(a), state.point(b)).then(a.cmp(&b)));
    let mut streams = vec![0; state.len()];
    for (rank, &slot) in order.iter().enumerate() {
        streams[slot] = rank as u64;
    }
    streams
}

/// [`simulate_k_labeled`] driven by [`canonical_streams`].
pub fn simulate_k_labeled_shared(
    initial: &KLabeledState,
    potentials: &PotentialSpec,
    params: &SimParams,
    rule: crate::configuration::LabelRule,
) -> Result<Trajectory, DynamicsError> {
    let labeled = initial.to_labeled(rule)?;
    let mut traj =
        simulate_with_streams(&labeled, potentials, params, &canonical_streams(&labeled))?;
    traj.frame = Frame::Labeled { k: initial.k() };
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;
    use crate::stats::compensated_sum;
    use rand::Rng;

    fn state(domain: Domain, coords: Vec<f64>) -> LabeledState {
        LabeledState::new(domain, coords).unwrap()
    }

    #[test]
    fn harmonic_self_drift_is_minus_x() {
        let pot = PotentialSpec {
            phi: SelfPotential::Harmonic { a: 1.0 },
            psi: PairPotential::None,
            r_cut: f64::INFINITY,
        };
        let s = state(Domain::free(2), vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(
            compute_drift(&s, &pot).unwrap(),
            vec![-1.0, 2.0, -0.5, -3.0]
        );
    }

    #[test]
    fn harmonic_pair_drift() {
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Harmonic { a: 1.0 },
            r_cut: f64::INFINITY,
        };
        let s = state(Domain::free(1), vec![1.5, -0.5]);
        let drift = compute_drift(&s, &pot).unwrap();
        assert_eq!(drift, vec![-2.0, 2.0]);
    }

    #[test]
    fn lennard_jones_minimum_has_no_force() {
        let sigma = 1.0;
        let r = 2f64.powf(1.0 / 6.0) * sigma;
        let psi = PairPotential::LennardJones { eps: 1.0, sigma };
        assert!(psi.gradient_scale(r).abs() < 1e-12);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi,
            r_cut: 3.0,
        };
        let s = state(Domain::free(1), vec![0.0, r]);
        for v in compute_drift(&s, &pot).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn lennard_jones_cap_counts() {
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::LennardJones {
                eps: 1.0,
                sigma: 1.0,
            },
            r_cut: 3.0,
        };
        let field = ForceField::new(Domain::free(1), pot, None).unwrap();
        let d = field.drift(&[0.0, 0.1]).unwrap();
        assert_eq!(d.capped_pairs, 1);
        let at_cap = field.drift(&[0.0, LJ_R_MIN_FRACTION]).unwrap();
        assert_eq!(d.values, at_cap.values);
    }

    #[test]
    fn hard_core_overlap_is_reported() {
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::HardCore { sigma: 1.0 },
            r_cut: 1.0,
        };
        let s = state(Domain::torus(1, 10.0), vec![0.2, 9.6]);
        assert_eq!(compute_drift(&s, &pot), Err(DynamicsError::Overlap(0, 1)));
    }

    fn gradient_fd_check(pot: &PotentialSpec, domain: Domain, coords: &[f64]) {
        let field = ForceField::new(domain, pot.clone(), None).unwrap();
        let drift = field.drift(coords).unwrap().values;
        let h = 1e-6;
        for idx in 0..coords.len() {
            let mut plus = coords.to_vec();
            let mut minus = coords.to_vec();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = -(pot.energy(&domain, &plus) - pot.energy(&domain, &minus)) / (2.0 * h) * 0.5;
            let scale = drift[idx].abs().max(1.0);
            assert!(
                (fd - drift[idx]).abs() / scale < 1e-6,
                "coord {idx}: fd {fd} vs {}",
                drift[idx]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = replica_rng(17, 0);
        let pair_kinds = [
            PairPotential::Harmonic { a: 0.7 },
            PairPotential::LennardJones {
                eps: 0.5,
                sigma: 0.4,
            },
            PairPotential::SoftCore {
                eps: 0.3,
                sigma: 0.5,
            },
            PairPotential::Gaussian {
                eps: 1.2,
                sigma: 0.8,
            },
        ];
        let phis = [
            SelfPotential::Harmonic { a: 0.3 },
            SelfPotential::Table {
                radii: vec![0.0, 1.0, 2.5, 4.0],
                values: vec![0.0, 0.4, 2.0, 5.0],
            },
        ];
        for psi in pair_kinds {
            for phi in phis.iter().cloned() {
                let pot = PotentialSpec {
                    phi,
                    psi,
                    r_cut: f64::INFINITY,
                };
                for _ in 0..5 {
                    // keep points apart so the LJ cap is not triggered and
                    // away from table knots
                    let mut coords;
                    loop {
                        coords = (0..8)
                            .map(|_| rng.random_range(-3.0..3.0))
                            .collect::<Vec<f64>>();
                        let field = ForceField::new(Domain::free(2), pot.clone(), None).unwrap();
                        let knots_ok = coords.chunks(2).all(|p| {
                            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                            [0.0, 1.0, 2.5, 4.0].iter().all(|k| (r - k).abs() > 1e-3)
                        });
                        if field.min_pair_distance(&coords) > 0.5 && knots_ok {
                            break;
                        }
                    }
                    gradient_fd_check(&pot, Domain::free(2), &coords);
                }
            }
        }
    }

    #[test]
    fn pair_potentials_are_symmetric() {
        let mut rng = replica_rng(23, 0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 0.7,
            },
            r_cut: 2.0,
        };
        let domain = Domain::torus(2, 4.0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            let xy = pot.pair_value(domain.distance(&x, &y));
            let yx = pot.pair_value(domain.distance(&y, &x));
            assert_eq!(xy, yx);
        }
    }

    #[test]
    fn cell_list_matches_brute_force_exactly() {
        let mut rng = replica_rng(29, 0);
        for (dim, side, n) in [(1usize, 20.0, 40usize), (2, 8.0, 64), (3, 6.0, 50)] {
            let domain = Domain::torus(dim, side);
            let pot = PotentialSpec {
                phi: SelfPotential::Harmonic { a: 0.1 },
                psi: PairPotential::LennardJones {
                    eps: 1.0,
                    sigma: 0.5,
                },
                r_cut: 1.6,
            };
            let field = ForceField::new(domain, pot, None).unwrap();
            let coords: Vec<f64> = (0..n * dim).map(|_| rng.random_range(0.0..side)).collect();
            let a = field.drift(&coords).unwrap();
            let b = field.drift_brute_force(&coords).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn newton_third_law() {
        let mut rng = replica_rng(31, 0);
        let domain = Domain::torus(2, 6.0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 2.0,
                sigma: 0.9,
            },
            r_cut: 2.5,
        };
        let field = ForceField::new(domain, pot, None).unwrap();
        let coords: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..6.0)).collect();
        let drift = field.drift(&coords).unwrap().values;
        for k in 0..2 {
            let total = compensated_sum(drift.iter().skip(k).step_by(2).copied());
            assert!(total.abs() < 1e-10, "axis {k}: {total}");
        }
    }

    #[test]
    fn free_increments_are_gaussian_with_variance_dt() {
        let params = SimParams {
            dt: 0.01,
            t_end: 0.01,
            seed: 5,
            ..Default::default()
        };
        let domain = Domain::free(1);
        let mut incs = Vec::new();
        for rep in 0..4000u64 {
            let p = SimParams {
                seed: rep,
                ..params.clone()
            };
            let s = state(domain, vec![0.0, 1.0]);
            let out = step(&s, &PotentialSpec::free(), &p, 0).unwrap();
            incs.push(out.coords()[0]);
            incs.push(out.coords()[1] - 1.0);
        }
        let m = crate::stats::mean_se(&incs);
        assert!(m.mean.abs() < 3.0 * m.se);
        let var = crate::stats::variance(&incs);
        assert!(
            (var / 0.01 - 1.0).abs() < 0.05,
            "variance ratio {}",
            var / 0.01
        );
    }

    #[test]
    fn simulation_is_deterministic() {
        let domain = Domain::torus(2, 5.0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 0.5,
            },
            r_cut: 1.5,
        };
        let init = state(domain, vec![0.5, 0.5, 2.0, 2.0, 4.0, 1.0]);
        let params = SimParams {
            dt: 1e-3,
            t_end: 0.2,
            stride: 10,
            seed: 9,
            ..Default::default()
        };
        let a = simulate(&init, &pot, &params).unwrap();
        let b = simulate(&init, &pot, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 21);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn relabeling_permutes_the_path() {
        let domain = Domain::torus(2, 5.0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::LennardJones {
                eps: 0.5,
                sigma: 0.6,
            },
            r_cut: 1.5,
        };
        let init = state(domain, vec![0.5, 0.5, 1.4, 0.9, 4.0, 1.0, 2.5, 3.5]);
        let params = SimParams {
            dt: 1e-3,
            t_end: 0.3,
            stride: 5,
            seed: 13,
            ..Default::default()
        };
        let a = simulate(&init, &pot, &params).unwrap();
        let perm = [2usize, 0, 3, 1];
        let streams: Vec<u64> = perm.iter().map(|&p| p as u64).collect();
        let b = simulate_with_streams(&init.permuted(&perm), &pot, &params, &streams).unwrap();
        for t in 0..a.len() {
            assert_eq!(a.state(t).permuted(&perm), b.state(t));
            assert!(a.configuration(t).same_points(&b.configuration(t)));
        }
    }

    #[test]
    fn k_labeled_matches_unlabeled_under_shared_noise() {
        let domain = Domain::torus(1, 10.0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 0.5,
            },
            r_cut: 2.0,
        };
        let bg = Configuration::new(domain, vec![3.0, 6.0, 8.0]).unwrap();
        let ks = KLabeledState::new(vec![1.0], bg).unwrap();
        let params = SimParams {
            dt: 1e-3,
            t_end: 0.1,
            stride: 10,
            seed: 3,
            ..Default::default()
        };
        let rule = crate::configuration::LabelRule::Lexicographic;
        let kt = simulate_k_labeled(&ks, &pot, &params, rule).unwrap();
        let plain = simulate(&ks.to_labeled(rule).unwrap(), &pot, &params).unwrap();
        for t in 0..kt.len() {
            assert!(kappa(&kt.k_state(t)).same_points(&plain.configuration(t)));
        }
        // all tagged: background stays empty
        let all = KLabeledState::new(vec![1.0, 4.0], Configuration::empty(domain)).unwrap();
        let at = simulate_k_labeled(&all, &pot, &params, rule).unwrap();
        assert!((0..at.len()).all(|t| at.k_state(t).background.is_empty()));
    }

    #[test]
    fn hard_core_is_never_violated() {
        let domain = Domain::torus(2, 5.0);
        let sigma = 0.5;
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::HardCore { sigma },
            r_cut: sigma,
        };
        let mut coords = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                coords.extend([0.3 + 1.2 * i as f64, 0.3 + 1.2 * j as f64]);
            }
        }
        for mode in [HardCoreMode::Reject, HardCoreMode::Reflect] {
            let params = SimParams {
                dt: 1e-3,
                t_end: 2.0,
                stride: 1,
                seed: 4,
                hard_core: mode,
                ..Default::default()
            };
            let traj = simulate(&state(domain, coords.clone()), &pot, &params).unwrap();
            let field = ForceField::new(domain, pot.clone(), None).unwrap();
            for f in &traj.frames {
                assert!(field.min_pair_distance(f) >= sigma);
            }
        }
    }

    #[test]
    fn ball_reflection_keeps_points_inside() {
        let domain = Domain::ball(2, 1.0);
        let params = SimParams {
            dt: 0.01,
            t_end: 2.0,
            stride: 1,
            seed: 8,
            ..Default::default()
        };
        let traj = simulate(
            &state(domain, vec![0.9, 0.0, -0.5, 0.5]),
            &PotentialSpec::free(),
            &params,
        )
        .unwrap();
        for t in 0..traj.len() {
            for i in 0..2 {
                assert!(domain.contains(traj.position(t, i)));
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let s = state(Domain::free(1), vec![0.0]);
        let bad = SimParams {
            dt: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&s, &PotentialSpec::free(), &bad),
            Err(DynamicsError::InvalidParams(_))
        ));
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 1.0,
            },
            r_cut: 2.0,
        };
        let small_cells = SimParams {
            cell_size: Some(1.0),
            ..Default::default()
        };
        assert!(simulate(&s, &pot, &small_cells).is_err());
    }
    #[test]
    fn canonical_streams_share_noise_across_labelings() {
        let domain = Domain::torus(2, 6.0);
        let a = state(domain, vec![1.0, 1.0, 3.0, 2.0, 5.0, 4.5, 2.2, 5.1]);
        let b = a.permuted(&[2, 0, 3, 1]);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 0.7,
            },
            r_cut: 2.8,
        };
        let params = SimParams {
            dt: 1e-3,
            t_end: 0.2,
            stride: 20,
            seed: 5,
            ..Default::default()
        };
        let ta = simulate_with_streams(&a, &pot, &params, &canonical_streams(&a)).unwrap();
        let tb = simulate_with_streams(&b, &pot, &params, &canonical_streams(&b)).unwrap();
        for t in 0..ta.len() {
            assert_eq!(
                ta.configuration(t).canonical_coords(),
                tb.configuration(t).canonical_coords()
            );
        }
    }
}
