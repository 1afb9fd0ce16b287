//! Finite point configurations and the structural maps between labeled and
//! unlabeled descriptions.
//!
//! Points are stored as flat coordinate arrays (`n * dim` values). A
//! [`Configuration`] is an unordered multiset of points; a [`LabeledState`]
//! carries the same data but its order is meaningful. The translation
//! [`translate`] follows the convention `theta_a(sum delta_x) = sum delta_{x - a}`.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Relative coincidence tolerance; multiplied by the domain diameter.
pub const COINCIDE_RELATIVE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigurationError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("point {index} lies outside the domain")]
    OutsideDomain { index: usize },
    #[error("coordinate array of length {len} is not a multiple of dimension {dim}")]
    RaggedCoordinates { len: usize, dim: usize },
    #[error("configuration is not single: points {0} and {1} coincide")]
    NotSingle(usize, usize),
    #[error("expected a {expected}-labeled state, got k = {got}")]
    KMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Periodic box `[0, side)^d` with minimum-image distances.
    Torus { side: f64 },
    /// Open ball `{ |x| < radius }` centred at the origin.
    Ball { radius: f64 },
    /// Unbounded `R^d`.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub dim: usize,
    pub geometry: Geometry,
}

impl Domain {
    pub fn new(dim: usize, geometry: Geometry) -> Result<Self, ConfigurationError> {
        if dim == 0 {
            return Err(ConfigurationError::InvalidDomain(
                "dimension must be >= 1".into(),
            ));
        }
        match geometry {
            Geometry::Torus { side } if !(side > 0.0 && side.is_finite()) => {
                return Err(ConfigurationError::InvalidDomain(format!(
                    "torus side {side}"
                )))
            }
            Geometry::Ball { radius } if !(radius > 0.0 && radius.is_finite()) => {
                return Err(ConfigurationError::InvalidDomain(format!(
                    "ball radius {radius}"
                )))
            }
            _ => {}
        }
        Ok(Self { dim, geometry })
    }

    pub fn torus(dim: usize, side: f64) -> Self {
        Self::new(dim, Geometry::Torus { side }).expect("valid torus")
    }

    pub fn ball(dim: usize, radius: f64) -> Self {
        Self::new(dim, Geometry::Ball { radius }).expect("valid ball")
    }

    pub fn free(dim: usize) -> Self {
        Self::new(dim, Geometry::Free).expect("valid free domain")
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.geometry, Geometry::Torus { .. })
    }

    /// Diameter of the domain; `None` for the unbounded case.
    pub fn diameter(&self) -> Option<f64> {
        match self.geometry {
            Geometry::Torus { side } => Some(side * (self.dim as f64).sqrt()),
            Geometry::Ball { radius } => Some(2.0 * radius),
            Geometry::Free => None,
        }
    }

    /// Lebesgue volume; `None` for the unbounded case.
    pub fn volume(&self) -> Option<f64> {
        match self.geometry {
            Geometry::Torus { side } => Some(side.powi(self.dim as i32)),
            Geometry::Ball { radius } => Some(ball_volume(self.dim, radius)),
            Geometry::Free => None,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        if p.iter().any(|c| !c.is_finite()) {
            return false;
        }
        match self.geometry {
            Geometry::Torus { side } => p.iter().all(|&c| (0.0..side).contains(&c)),
            Geometry::Ball { radius } => norm_sq(p) < radius * radius,
            Geometry::Free => true,
        }
    }

    /// Maps a point back into the domain. Only the torus wraps; other
    /// geometries return the point unchanged.
    pub fn wrap(&self, p: &mut [f64]) {
        if let Geometry::Torus { side } = self.geometry {
            for c in p.iter_mut() {
                *c = wrap_coordinate(*c, side);
            }
        }
    }

    /// Displacement `a - b` under the domain metric (minimum image on the torus).
    pub fn displacement(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = x - y;
        }
        if let Geometry::Torus { side } = self.geometry {
            for o in out.iter_mut() {
                *o = minimum_image(*o, side);
            }
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let mut dx = x - y;
            if let Geometry::Torus { side } = self.geometry {
                dx = minimum_image(dx, side);
            }
            s += dx * dx;
        }
        s.sqrt()
    }

    /// Coincidence tolerance used by `is_single`.
    pub fn coincide_tolerance(&self) -> f64 {
        COINCIDE_RELATIVE * self.diameter().unwrap_or(1.0).max(1.0)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.geometry {
            Geometry::Torus { side } => write!(f, "d={} geometry=torus size={side}", self.dim),
            Geometry::Ball { radius } => write!(f, "d={} geometry=ball size={radius}", self.dim),
            Geometry::Free => write!(f, "d={} geometry=free size=inf", self.dim),
        }
    }
}

pub fn ball_volume(dim: usize, radius: f64) -> f64 {
    unit_ball_volume(dim) * radius.powi(dim as i32)
}

/// Volume of the unit ball in `R^d`, via the recursion `V_d = 2 pi / d * V_{d-2}`.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        0 => 1.0,
        1 => 2.0,
        d => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

pub fn norm_sq(p: &[f64]) -> f64 {
    p.iter().map(|c| c * c).sum()
}

pub(crate) fn wrap_coordinate(c: f64, side: f64) -> f64 {
    let w = c.rem_euclid(side);
    // rem_euclid may round up to `side` for tiny negative inputs
    if w >= side {
        0.0
    } else {
        w
    }
}

pub(crate) fn minimum_image(dx: f64, side: f64) -> f64 {
    dx - side * (dx / side).round()
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

fn check_coords(domain: &Domain, coords: &[f64]) -> Result<(), ConfigurationError> {
    if coords.len() % domain.dim != 0 {
        return Err(ConfigurationError::RaggedCoordinates {
            len: coords.len(),
            dim: domain.dim,
        });
    }
    for (i, p) in coords.chunks_exact(domain.dim).enumerate() {
        if !domain.contains(p) {
            return Err(ConfigurationError::OutsideDomain { index: i });
        }
    }
    Ok(())
}

/// A finite, unordered point pattern in a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    domain: Domain,
    coords: Vec<f64>,
}

impl Configuration {
    pub fn new(domain: Domain, coords: Vec<f64>) -> Result<Self, ConfigurationError> {
        check_coords(&domain, &coords)?;
        Ok(Self { domain, coords })
    }

    /// Builds a configuration, wrapping torus coordinates into `[0, L)`.
    pub fn wrapped(domain: Domain, mut coords: Vec<f64>) -> Result<Self, ConfigurationError> {
        for p in coords.chunks_exact_mut(domain.dim) {
            domain.wrap(p);
        }
        Self::new(domain, coords)
    }

    pub fn empty(domain: Domain) -> Self {
        Self {
            domain,
            coords: Vec::new(),
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.domain.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.domain.dim..(i + 1) * self.domain.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.domain.dim)
    }

    /// Number of points in an arbitrary region.
    pub fn count_in(&self, region: impl Fn(&[f64]) -> bool) -> usize {
        self.points().filter(|p| region(p)).count()
    }

    /// First pair of coincident points, if any.
    pub fn coincident_pair(&self) -> Option<(usize, usize)> {
        let eps = self.domain.coincide_tolerance();
        let n = self.len();
        for i in 0..n {
            for j in i + 1..n {
                if self.domain.distance(self.point(i), self.point(j)) <= eps {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// True when no two points coincide within the coincidence tolerance.
    pub fn is_single(&self) -> bool {
        self.coincident_pair().is_none()
    }

    /// Lexicographically sorted copy of the coordinates; two configurations
    /// are the same multiset iff their canonical forms agree.
    pub fn canonical_coords(&self) -> Vec<f64> {
        let d = self.domain.dim;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(self.point(a), self.point(b)));
        let mut out = Vec::with_capacity(self.coords.len());
        for i in idx {
            out.extend_from_slice(&self.coords[i * d..(i + 1) * d]);
        }
        out
    }

    /// Multiset equality (exact, order-insensitive).
    pub fn same_points(&self, other: &Configuration) -> bool {
        self.domain == other.domain && self.canonical_coords() == other.canonical_coords()
    }

    /// Configuration with the point at `index` removed.
    pub fn without(&self, index: usize) -> Configuration {
        let d = self.domain.dim;
        let mut coords = self.coords.clone();
        coords.drain(index * d..(index + 1) * d);
        Configuration {
            domain: self.domain,
            coords,
        }
    }

    /// Restriction to points satisfying `keep`.
    pub fn restrict(&self, keep: impl Fn(&[f64]) -> bool) -> Configuration {
        let mut coords = Vec::new();
        for p in self.points().filter(|p| keep(p)) {
            coords.extend_from_slice(p);
        }
        Configuration {
            domain: self.domain,
            coords,
        }
    }

    /// Re-interprets the points in another domain (all points must fit).
    pub fn with_domain(&self, domain: Domain) -> Result<Configuration, ConfigurationError> {
        if domain.dim != self.domain.dim {
            return Err(ConfigurationError::DimensionMismatch {
                expected: self.domain.dim,
                got: domain.dim,
            });
        }
        Configuration::new(domain, self.coords.clone())
    }
}

/// An ordered list of particle positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledState {
    domain: Domain,
    coords: Vec<f64>,
}

impl LabeledState {
    pub fn new(domain: Domain, coords: Vec<f64>) -> Result<Self, ConfigurationError> {
        check_coords(&domain, &coords)?;
        Ok(Self { domain, coords })
    }

    pub(crate) fn from_raw(domain: Domain, coords: Vec<f64>) -> Self {
        debug_assert_eq!(coords.len() % domain.dim, 0);
        Self { domain, coords }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.domain.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.domain.dim..(i + 1) * self.domain.dim]
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// The unlabeled configuration `sum_i delta_{X^i}`.
    pub fn unlabel(&self) -> Configuration {
        Configuration {
            domain: self.domain,
            coords: self.coords.clone(),
        }
    }

    /// Applies a permutation: slot `i` of the result holds particle `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LabeledState {
        let d = self.domain.dim;
        let mut coords = Vec::with_capacity(self.coords.len());
        for &p in perm {
            coords.extend_from_slice(&self.coords[p * d..(p + 1) * d]);
        }
        LabeledState {
            domain: self.domain,
            coords,
        }
    }

    /// Splits off the first `k` particles as the tagged tuple.
    pub fn split_tagged(&self, k: usize) -> Result<KLabeledState, ConfigurationError> {
        if k > self.len() {
            return Err(ConfigurationError::KMismatch {
                expected: k,
                got: self.len(),
            });
        }
        let d = self.domain.dim;
        Ok(KLabeledState {
            tagged: self.coords[..k * d].to_vec(),
            background: Configuration {
                domain: self.domain,
                coords: self.coords[k * d..].to_vec(),
            },
        })
    }
}

/// Tagged tuple `x in S^k` together with a background configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct KLabeledState {
    pub tagged: Vec<f64>,
    pub background: Configuration,
}

impl KLabeledState {
    pub fn new(tagged: Vec<f64>, background: Configuration) -> Result<Self, ConfigurationError> {
        let domain = *background.domain();
        check_coords(&domain, &tagged)?;
        Ok(Self { tagged, background })
    }

    pub fn k(&self) -> usize {
        self.tagged.len() / self.background.dim()
    }

    pub fn domain(&self) -> &Domain {
        self.background.domain()
    }

    pub fn tagged_point(&self, i: usize) -> &[f64] {
        let d = self.background.dim();
        &self.tagged[i * d..(i + 1) * d]
    }

    /// True when the whole pattern `kappa(x, s)` is single.
    pub fn is_single(&self) -> bool {
        kappa(self).is_single()
    }

    /// Labeled state with the tagged points first and the background in
    /// the order given by `rule`.
    pub fn to_labeled(&self, rule: LabelRule) -> Result<LabeledState, ConfigurationError> {
        let bg = label(&self.background, rule)?;
        let mut coords = self.tagged.clone();
        coords.extend_from_slice(bg.coords());
        Ok(LabeledState {
            domain: *self.domain(),
            coords,
        })
    }
}

/// `kappa(x, s) = sum_j delta_{x_j} + s`.
pub fn kappa(state: &KLabeledState) -> Configuration {
    let mut coords = state.tagged.clone();
    coords.extend_from_slice(state.background.coords());
    Configuration {
        domain: *state.domain(),
        coords,
    }
}

/// Deterministic label maps `j` with `kappa . j = id` on single configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelRule {
    Lexicographic,
    /// Increasing `|x|`, ties broken lexicographically.
    DistanceFromOrigin,
    StoredOrder,
}

impl LabelRule {
    pub const ALL: [LabelRule; 3] = [
        LabelRule::Lexicographic,
        LabelRule::DistanceFromOrigin,
        LabelRule::StoredOrder,
    ];
}

impl std::str::FromStr for LabelRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lexicographic" => Ok(Self::Lexicographic),
            "distance" | "distance-from-origin" => Ok(Self::DistanceFromOrigin),
            "stored" | "stored-order" => Ok(Self::StoredOrder),
            other => Err(format!("unknown label rule `{other}`")),
        }
    }
}

/// Labels every point of a single configuration.
pub fn label(config: &Configuration, rule: LabelRule) -> Result<LabeledState, ConfigurationError> {
    if let Some((i, j)) = config.coincident_pair() {
        return Err(ConfigurationError::NotSingle(i, j));
    }
    let d = config.dim();
    let mut idx: Vec<usize> = (0..config.len()).collect();
    match rule {
        LabelRule::Lexicographic => idx.sort_by(|&a, &b| lex_cmp(config.point(a), config.point(b))),
        LabelRule::DistanceFromOrigin => idx.sort_by(|&a, &b| {
            norm_sq(config.point(a))
                .total_cmp(&norm_sq(config.point(b)))
                .then_with(|| lex_cmp(config.point(a), config.point(b)))
        }),
        LabelRule::StoredOrder => {}
    }
    let mut coords = Vec::with_capacity(config.coords.len());
    for i in idx {
        coords.extend_from_slice(&config.coords[i * d..(i + 1) * d]);
    }
    Ok(LabeledState {
        domain: config.domain,
        coords,
    })
}

/// `theta_a`: shifts every point by `-a`, wrapping on the torus.
pub fn translate(config: &Configuration, a: &[f64]) -> Configuration {
    let d = config.dim();
    assert_eq!(a.len(), d, "shift dimension");
    let mut coords = config.coords.clone();
    for p in coords.chunks_exact_mut(d) {
        for (c, &s) in p.iter_mut().zip(a) {
            *c -= s;
        }
        config.domain.wrap(p);
    }
    Configuration {
        domain: config.domain,
        coords,
    }
}

/// `iota(x, s) = (x, theta_x(s))` for 1-labeled states.
pub fn iota(state: &KLabeledState) -> Result<KLabeledState, ConfigurationError> {
    if state.k() != 1 {
        return Err(ConfigurationError::KMismatch {
            expected: 1,
            got: state.k(),
        });
    }
    Ok(KLabeledState {
        tagged: state.tagged.clone(),
        background: translate(&state.background, &state.tagged),
    })
}

/// `iota^{-1}(x, s) = (x, theta_{-x}(s))`.
pub fn iota_inverse(state: &KLabeledState) -> Result<KLabeledState, ConfigurationError> {
    if state.k() != 1 {
        return Err(ConfigurationError::KMismatch {
            expected: 1,
            got: state.k(),
        });
    }
    let neg: Vec<f64> = state.tagged.iter().map(|c| -c).collect();
    Ok(KLabeledState {
        tagged: state.tagged.clone(),
        background: translate(&state.background, &neg),
    })
}

/// `m^[k] = m (m-1) ... (m-k+1)`, zero when `k > m`. Saturates at `u128::MAX`.
pub fn falling_factorial(m: u64, k: u64) -> u128 {
    if k > m {
        return 0;
    }
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc.saturating_mul((m - j) as u128);
    }
    acc
}

/// Largest per-coordinate discrepancy between two multisets under the
/// domain metric, matching points after canonical sorting. Intended for
/// round-trip checks where points move by rounding only.
pub fn max_coordinate_residual(a: &Configuration, b: &Configuration) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let d = a.dim();
    let mut worst: f64 = 0.0;
    let mut used = vec![false; b.len()];
    let mut delta = vec![0.0; d];
    for p in a.points() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, q) in b.points().enumerate() {
            if used[j] {
                continue;
            }
            let dist = a.domain().distance(p, q);
            if dist < best.0 {
                best = (dist, j);
            }
        }
        if best.1 == usize::MAX {
            return f64::INFINITY;
        }
        used[best.1] = true;
        a.domain().displacement(p, b.point(best.1), &mut delta);
        worst = delta.iter().fold(worst, |w, c| w.max(c.abs()));
    }
    worst
}
