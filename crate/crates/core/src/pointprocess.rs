//! Samplers for the equilibrium point fields: Poisson, grand-canonical
//! Gibbs (birth/death/move Metropolis–Hastings), the sine-kernel field via
//! GUE spectra, the Ginibre field via complex Gaussian spectra, and
//! δ-rejection Palm conditioning.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::configuration::{Configuration, ConfigurationError, Domain, Geometry, KLabeledState};
use crate::dynamics::PotentialSpec;
use crate::rng::{derive_seed, replica_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointProcessError {
    #[error("invalid sampler parameters: {0}")]
    InvalidSpec(String),
    #[error("domain must have finite volume for this sampler")]
    UnboundedDomain,
    #[error("window radius {window} exceeds half the bulk radius {bulk}")]
    WindowTooLarge { window: f64, bulk: f64 },
    #[error("Gibbs acceptance rate {rate:.3} outside [0.05, 0.7]")]
    NonConvergence { rate: f64 },
    #[error("Palm conditioning accepted nothing in {draws} draws (acceptance < {bound:e})")]
    AcceptanceTooLow { draws: usize, bound: f64 },
    #[error("eigenvalue computation failed")]
    Eigen,
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// Anything that produces configurations deterministically from a seed.
pub trait PointSampler: Sync {
    fn domain(&self) -> Domain;
    fn sample(&self, seed: u64) -> Result<Configuration, PointProcessError>;
    fn describe(&self) -> String;
}

/// Uniform point in a bounded domain.
pub fn uniform_point(
    domain: &Domain,
    rng: &mut impl Rng,
    out: &mut [f64],
) -> Result<(), PointProcessError> {
    match domain.geometry {
        Geometry::Torus { side } => {
            for c in out.iter_mut() {
                *c = rng.random_range(0.0..side);
            }
        }
        Geometry::Ball { radius } => loop {
            for c in out.iter_mut() {
                *c = rng.random_range(-radius..radius);
            }
            if domain.contains(out) {
                break;
            }
        },
        Geometry::Free => return Err(PointProcessError::UnboundedDomain),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSampler {
    pub domain: Domain,
    pub intensity: f64,
}

/// Homogeneous Poisson configuration with the given intensity.
pub fn sample_poisson(
    domain: &Domain,
    intensity: f64,
    seed: u64,
) -> Result<Configuration, PointProcessError> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(PointProcessError::InvalidSpec(format!(
            "intensity must be positive, got {intensity}"
        )));
    }
    let volume = domain.volume().ok_or(PointProcessError::UnboundedDomain)?;
    let mut rng = replica_rng(seed, 0);
    let mean = intensity * volume;
    let n = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| PointProcessError::InvalidSpec(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let d = domain.dim;
    let mut coords = vec![0.0; n * d];
    for p in coords.chunks_exact_mut(d) {
        uniform_point(domain, &mut rng, p)?;
    }
    Ok(Configuration::new(*domain, coords)?)
}

impl PointSampler for PoissonSampler {
    fn domain(&self) -> Domain {
        self.domain
    }
    fn sample(&self, seed: u64) -> Result<Configuration, PointProcessError> {
        sample_poisson(&self.domain, self.intensity, seed)
    }
    fn describe(&self) -> String {
        format!("poisson intensity={}", self.intensity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsSpec {
    pub potentials: PotentialSpec,
    pub beta: f64,
    /// Activity `z` (intensity of the reference Poisson process).
    pub activity: f64,
    pub burn_in_sweeps: usize,
    /// Half-width of the uniform move proposal.
    pub proposal_scale: f64,
}

impl GibbsSpec {
    pub fn new(potentials: PotentialSpec, beta: f64, activity: f64) -> Self {
        Self {
            potentials,
            beta,
            activity,
            burn_in_sweeps: 100_000,
            proposal_scale: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), PointProcessError> {
        if !(self.beta > 0.0) {
            return Err(PointProcessError::InvalidSpec(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.activity > 0.0) {
            return Err(PointProcessError::InvalidSpec(format!(
                "activity must be positive, got {}",
                self.activity
            )));
        }
        if !(self.proposal_scale > 0.0) || self.burn_in_sweeps == 0 {
            return Err(PointProcessError::InvalidSpec(
                "MCMC parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A single Metropolis–Hastings proposal.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Birth(Vec<f64>),
    Death(usize),
    Move(usize, Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct GibbsSampler {
    pub spec: GibbsSpec,
    pub domain: Domain,
}

#[derive(Debug, Clone)]
pub struct GibbsOutcome {
    pub config: Configuration,
    pub acceptance_rate: f64,
    pub warning: Option<PointProcessError>,
}

impl GibbsSampler {
    pub fn new(spec: GibbsSpec, domain: Domain) -> Result<Self, PointProcessError> {
        spec.validate()?;
        domain.volume().ok_or(PointProcessError::UnboundedDomain)?;
        Ok(Self { spec, domain })
    }

    fn volume(&self) -> f64 {
        self.domain.volume().expect("bounded domain")
    }

    /// `Phi(x) + sum_j Psi(x, x_j)` over the points of `coords` except `skip`.
    fn local_energy(&self, coords: &[f64], x: &[f64], skip: Option<usize>) -> f64 {
        let d = self.domain.dim;
        let pot = &self.spec.potentials;
        let mut e = pot.phi.value(x);
        if !pot.psi.is_none() {
            for (j, p) in coords.chunks_exact(d).enumerate() {
                if Some(j) == skip {
                    continue;
                }
                e += pot.pair_value(self.domain.distance(x, p));
                if e == f64::INFINITY {
                    return e;
                }
            }
        }
        e
    }

    /// Energy change `H(s') - H(s)` for a proposal.
    pub fn energy_change(&self, coords: &[f64], proposal: &Proposal) -> f64 {
        let d = self.domain.dim;
        match proposal {
            Proposal::Birth(x) => self.local_energy(coords, x, None),
            Proposal::Death(i) => -self.local_energy(coords, &coords[i * d..(i + 1) * d], Some(*i)),
            Proposal::Move(i, y) => {
                let new = self.local_energy(coords, y, Some(*i));
                if new == f64::INFINITY {
                    return new;
                }
                new - self.local_energy(coords, &coords[i * d..(i + 1) * d], Some(*i))
            }
        }
    }

    /// Metropolis–Hastings acceptance probability of `proposal` from `coords`.
    pub fn acceptance_probability(&self, coords: &[f64], proposal: &Proposal) -> f64 {
        let n = coords.len() / self.domain.dim;
        let dh = self.energy_change(coords, proposal);
        if dh == f64::INFINITY {
            return 0.0;
        }
        let zv = self.spec.activity * self.volume();
        let log_ratio = -self.spec.beta * dh
            + match proposal {
                Proposal::Birth(_) => (zv / (n + 1) as f64).ln(),
                Proposal::Death(_) => (n as f64 / zv).ln(),
                Proposal::Move(..) => 0.0,
            };
        log_ratio.min(0.0).exp()
    }

    fn propose(
        &self,
        coords: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Proposal>, PointProcessError> {
        let d = self.domain.dim;
        let n = coords.len() / d;
        if rng.random::<bool>() {
            if rng.random::<bool>() {
                let mut x = vec![0.0; d];
                uniform_point(&self.domain, rng, &mut x)?;
                Ok(Some(Proposal::Birth(x)))
            } else if n == 0 {
                Ok(None)
            } else {
                Ok(Some(Proposal::Death(rng.random_range(0..n))))
            }
        } else if n == 0 {
            Ok(None)
        } else {
            let i = rng.random_range(0..n);
            let s = self.spec.proposal_scale;
            let mut y: Vec<f64> = coords[i * d..(i + 1) * d]
                .iter()
                .map(|c| c + rng.random_range(-s..s))
                .collect();
            self.domain.wrap(&mut y);
            if !self.domain.contains(&y) {
                return Ok(None);
            }
            Ok(Some(Proposal::Move(i, y)))
        }
    }

    fn apply(&self, coords: &mut Vec<f64>, proposal: Proposal) {
        let d = self.domain.dim;
        match proposal {
            Proposal::Birth(x) => coords.extend(x),
            Proposal::Death(i) => {
                let n = coords.len() / d;
                // swap-remove keeps the update O(d)
                for k in 0..d {
                    coords.swap(i * d + k, (n - 1) * d + k);
                }
                coords.truncate((n - 1) * d);
            }
            Proposal::Move(i, y) => coords[i * d..(i + 1) * d].copy_from_slice(&y),
        }
    }

    /// Proposals per sweep.
    pub fn sweep_len(&self) -> usize {
        ((self.spec.activity * self.volume()).ceil() as usize).max(10)
    }

    /// Runs the chain from the empty configuration for the configured burn-in.
    pub fn run(&self, seed: u64) -> Result<GibbsOutcome, PointProcessError> {
        let mut rng = replica_rng(seed, 0);
        let mut coords = Vec::new();
        let total = self.spec.burn_in_sweeps * self.sweep_len();
        let mut accepted = 0usize;
        for _ in 0..total {
            let Some(p) = self.propose(&coords, &mut rng)? else {
                continue;
            };
            let a = self.acceptance_probability(&coords, &p);
            if a >= 1.0 || rng.random::<f64>() < a {
                self.apply(&mut coords, p);
                accepted += 1;
            }
        }
        let rate = accepted as f64 / total.max(1) as f64;
        let warning =
            (!(0.05..=0.7).contains(&rate)).then_some(PointProcessError::NonConvergence { rate });
        if let Some(w) = &warning {
            log::debug!("{w}");
        }
        Ok(GibbsOutcome {
            config: Configuration::new(self.domain, coords)?,
            acceptance_rate: rate,
            warning,
        })
    }
}

/// One approximate draw from the grand-canonical Gibbs measure.
pub fn sample_gibbs(
    spec: &GibbsSpec,
    domain: &Domain,
    seed: u64,
) -> Result<GibbsOutcome, PointProcessError> {
    GibbsSampler::new(spec.clone(), *domain)?.run(seed)
}

impl PointSampler for GibbsSampler {
    fn domain(&self) -> Domain {
        self.domain
    }
    fn sample(&self, seed: u64) -> Result<Configuration, PointProcessError> {
        Ok(self.run(seed)?.config)
    }
    fn describe(&self) -> String {
        format!(
            "gibbs beta={} activity={} sweeps={}",
            self.spec.beta, self.spec.activity, self.spec.burn_in_sweeps
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Sine,
    Ginibre,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppSpec {
    pub kind: KernelKind,
    pub n_mat: usize,
    /// Radius of the observation window (half-width in d = 1).
    pub window: f64,
}

impl DppSpec {
    /// Radius of the bulk in rescaled units.
    pub fn bulk_radius(&self) -> f64 {
        let n = self.n_mat as f64;
        match self.kind {
            // semicircle edge 2 sqrt(N), rescaled by sqrt(N)/pi
            KernelKind::Sine => 2.0 * n / std::f64::consts::PI,
            KernelKind::Ginibre => n.sqrt(),
        }
    }

    pub fn window_domain(&self) -> Domain {
        match self.kind {
            KernelKind::Sine => Domain::ball(1, self.window),
            KernelKind::Ginibre => Domain::ball(2, self.window),
        }
    }

    fn check(&self, kind: KernelKind) -> Result<(), PointProcessError> {
        if self.kind != kind {
            return Err(PointProcessError::InvalidSpec(format!(
                "expected {kind:?} kernel, got {:?}",
                self.kind
            )));
        }
        if self.n_mat < 2 || !(self.window > 0.0) {
            return Err(PointProcessError::InvalidSpec(
                "n_mat >= 2 and window > 0 required".into(),
            ));
        }
        let bulk = self.bulk_radius();
        if self.window > 0.5 * bulk {
            return Err(PointProcessError::WindowTooLarge {
                window: self.window,
                bulk,
            });
        }
        Ok(())
    }
}

fn complex_gaussian(rng: &mut ChaCha8Rng) -> Complex<f64> {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    Complex::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Sorted eigenvalues of an `n x n` GUE matrix with `E|H_ij|^2 = 1`.
pub fn gue_eigenvalues(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = replica_rng(seed, 0);
    let mut h = DMatrix::<Complex<f64>>::zeros(n, n);
    for i in 0..n {
        let diag: f64 = StandardNormal.sample(&mut rng);
        h[(i, i)] = Complex::new(diag, 0.0);
        for j in i + 1..n {
            let z = complex_gaussian(&mut rng);
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Sine-kernel (Dyson) configuration in the window `(-w, w)`, unit intensity.
pub fn sample_dyson_sine(spec: &DppSpec, seed: u64) -> Result<Configuration, PointProcessError> {
    spec.check(KernelKind::Sine)?;
    let scale = (spec.n_mat as f64).sqrt() / std::f64::consts::PI;
    let coords: Vec<f64> = gue_eigenvalues(spec.n_mat, seed)
        .into_iter()
        .map(|x| x * scale)
        .filter(|x| x.abs() < spec.window)
        .collect();
    Ok(Configuration::new(spec.window_domain(), coords)?)
}

/// Eigenvalues of an `n x n` matrix of i.i.d. standard complex Gaussians.
pub fn ginibre_eigenvalues(n: usize, seed: u64) -> Result<Vec<Complex<f64>>, PointProcessError> {
    let mut rng = replica_rng(seed, 0);
    let m = DMatrix::<Complex<f64>>::from_fn(n, n, |_, _| complex_gaussian(&mut rng));
    let ev = nalgebra::linalg::Schur::new(m)
        .eigenvalues()
        .ok_or(PointProcessError::Eigen)?;
    Ok(ev.iter().copied().collect())
}

/// Ginibre configuration in the disc of radius `w`, intensity `1/pi`.
pub fn sample_ginibre(spec: &DppSpec, seed: u64) -> Result<Configuration, PointProcessError> {
    spec.check(KernelKind::Ginibre)?;
    let mut ev = ginibre_eigenvalues(spec.n_mat, seed)?;
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut coords = Vec::new();
    for z in ev.into_iter().filter(|z| z.norm() < spec.window) {
        coords.push(z.re);
        coords.push(z.im);
    }
    Ok(Configuration::new(spec.window_domain(), coords)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppSampler {
    pub spec: DppSpec,
}

impl PointSampler for DppSampler {
    fn domain(&self) -> Domain {
        self.spec.window_domain()
    }
    fn sample(&self, seed: u64) -> Result<Configuration, PointProcessError> {
        match self.spec.kind {
            KernelKind::Sine => sample_dyson_sine(&self.spec, seed),
            KernelKind::Ginibre => sample_ginibre(&self.spec, seed),
        }
    }
    fn describe(&self) -> String {
        format!(
            "{:?} n_mat={} window={}",
            self.spec.kind, self.spec.n_mat, self.spec.window
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PalmOptions {
    pub delta: f64,
    pub max_draws: usize,
}

impl Default for PalmOptions {
    fn default() -> Self {
        Self {
            delta: 0.01,
            max_draws: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalmSample {
    pub state: KLabeledState,
    /// The accepted draw before removal of the matched points.
    pub source: Configuration,
    /// Draws used until acceptance (inclusive).
    pub draws: usize,
}

/// δ-rejection Palm conditioning at the tuple `x` (flat, `k * d`).
///
/// Draws configurations until each `x_i` has its own point within `delta`,
/// removes those points, and returns `(x, remainder)`.
pub fn palm_condition(
    sampler: &dyn PointSampler,
    x: &[f64],
    opts: PalmOptions,
    seed: u64,
) -> Result<PalmSample, PointProcessError> {
    if !(opts.delta > 0.0) {
        return Err(PointProcessError::InvalidSpec(
            "delta must be positive".into(),
        ));
    }
    let domain = sampler.domain();
    let d = domain.dim;
    if x.len() % d != 0 {
        return Err(ConfigurationError::RaggedCoordinates {
            len: x.len(),
            dim: d,
        }
        .into());
    }
    for draw in 0..opts.max_draws {
        let config = sampler.sample(derive_seed(seed, draw as u64))?;
        let mut used = vec![false; config.len()];
        let mut ok = true;
        for xi in x.chunks_exact(d) {
            let best = config
                .points()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, p)| (j, domain.distance(xi, p)))
                .filter(|&(_, r)| r < opts.delta)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, _)) => used[j] = true,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let background = config.restrict_indexed(|j| !used[j]);
            let state = KLabeledState::new(x.to_vec(), background)?;
            return Ok(PalmSample {
                state,
                source: config,
                draws: draw + 1,
            });
        }
    }
    Err(PointProcessError::AcceptanceTooLow {
        draws: opts.max_draws,
        bound: 1.0 / opts.max_draws as f64,
    })
}

impl Configuration {
    pub(crate) fn restrict_indexed(&self, keep: impl Fn(usize) -> bool) -> Configuration {
        let mut coords = Vec::new();
        for (j, p) in self.points().enumerate() {
            if keep(j) {
                coords.extend_from_slice(p);
            }
        }
        Configuration::new(*self.domain(), coords).expect("subset of a valid configuration")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PairPotential, SelfPotential};
    use crate::stats::{ks_two_sample, mean_se};

    #[test]
    fn poisson_mean_count() {
        let domain = Domain::torus(1, 10.0);
        let counts: Vec<f64> = (0..10_000)
            .map(|s| sample_poisson(&domain, 2.0, s).unwrap().len() as f64)
            .collect();
        let m = mean_se(&counts);
        assert!((m.mean - 20.0).abs() < 3.0 * m.se, "{m:?}");
    }

    #[test]
    fn poisson_vanishing_intensity_is_empty() {
        let domain = Domain::ball(2, 1.0);
        let empty = (0..200)
            .filter(|&s| sample_poisson(&domain, 1e-9, s).unwrap().is_empty())
            .count();
        assert_eq!(empty, 200);
        assert!(sample_poisson(&Domain::free(1), 1.0, 0).is_err());
        assert!(sample_poisson(&domain, 0.0, 0).is_err());
    }

    #[test]
    fn samplers_are_deterministic() {
        let domain = Domain::torus(2, 3.0);
        assert_eq!(
            sample_poisson(&domain, 1.0, 42).unwrap(),
            sample_poisson(&domain, 1.0, 42).unwrap()
        );
        let mut spec = GibbsSpec::new(PotentialSpec::free(), 1.0, 1.0);
        spec.burn_in_sweeps = 20;
        let a = sample_gibbs(&spec, &domain, 7).unwrap().config;
        let b = sample_gibbs(&spec, &domain, 7).unwrap().config;
        assert_eq!(a, b);
    }

    fn hard_core_spec(sigma: f64, activity: f64) -> GibbsSpec {
        let mut spec = GibbsSpec::new(
            PotentialSpec {
                phi: SelfPotential::None,
                psi: PairPotential::HardCore { sigma },
                r_cut: sigma,
            },
            1.0,
            activity,
        );
        spec.burn_in_sweeps = 200;
        spec
    }

    #[test]
    fn hard_core_gibbs_respects_diameter() {
        let domain = Domain::torus(2, 5.0);
        let spec = hard_core_spec(0.4, 2.0);
        for seed in 0..10 {
            let out = sample_gibbs(&spec, &domain, seed).unwrap();
            let c = &out.config;
            assert!(c.len() > 5);
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    assert!(domain.distance(c.point(i), c.point(j)) >= 0.4);
                }
            }
        }
    }

    #[test]
    fn free_gibbs_is_poisson() {
        let domain = Domain::torus(1, 10.0);
        let mut spec = GibbsSpec::new(PotentialSpec::free(), 1.0, 1.5);
        spec.burn_in_sweeps = 30;
        let counts: Vec<f64> = (0..2000)
            .map(|s| sample_gibbs(&spec, &domain, s).unwrap().config.len() as f64)
            .collect();
        let m = mean_se(&counts);
        assert!((m.mean - 15.0).abs() < 3.0 * m.se + 0.2, "{m:?}");
        // Poisson: variance equals mean
        let var = crate::stats::variance(&counts);
        assert!((var / m.mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn detailed_balance_ratio() {
        let domain = Domain::torus(2, 4.0);
        let pot = PotentialSpec {
            phi: SelfPotential::Harmonic { a: 0.05 },
            psi: PairPotential::LennardJones {
                eps: 0.8,
                sigma: 0.5,
            },
            r_cut: 2.0,
        };
        let sampler = GibbsSampler::new(GibbsSpec::new(pot, 1.3, 1.2), domain).unwrap();
        let mut rng = replica_rng(99, 0);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.random_range(1..8);
            let coords: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..4.0)).collect();
            let i = rng.random_range(0..n);
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            let forward = Proposal::Move(i, y.clone());
            let dh = sampler.energy_change(&coords, &forward);
            let mut moved = coords.clone();
            moved[2 * i..2 * i + 2].copy_from_slice(&y);
            let back = Proposal::Move(i, coords[2 * i..2 * i + 2].to_vec());
            let a_f = sampler.acceptance_probability(&coords, &forward);
            let a_b = sampler.acceptance_probability(&moved, &back);
            if a_f < 1e-200 || a_b < 1e-200 {
                continue;
            }
            let expected = (-1.3 * dh).exp();
            assert!((a_f / a_b / expected - 1.0).abs() < 1e-10);

            // birth from `coords` against death back to it
            let birth = Proposal::Birth(y.clone());
            let mut grown = coords.clone();
            grown.extend(&y);
            let death = Proposal::Death(n);
            let zv = 1.2 * 16.0;
            let expected =
                zv / (n + 1) as f64 * (-1.3 * sampler.energy_change(&coords, &birth)).exp();
            let (a_birth, a_death) = (
                sampler.acceptance_probability(&coords, &birth),
                sampler.acceptance_probability(&grown, &death),
            );
            if a_birth < 1e-200 || a_death < 1e-200 {
                continue;
            }
            let ratio = a_birth / a_death;
            assert!((ratio / expected - 1.0).abs() < 1e-10);
            checked += 1;
        }
    }

    #[test]
    fn translation_invariant_gibbs_has_flat_intensity() {
        let domain = Domain::torus(1, 8.0);
        let pot = PotentialSpec {
            phi: SelfPotential::None,
            psi: PairPotential::Gaussian {
                eps: 1.0,
                sigma: 0.5,
            },
            r_cut: 2.0,
        };
        let mut spec = GibbsSpec::new(pot, 1.0, 1.5);
        spec.burn_in_sweeps = 40;
        let samples: Vec<Configuration> = (0..1500)
            .map(|s| sample_gibbs(&spec, &domain, s).unwrap().config)
            .collect();
        let bins = 4;
        let per_bin: Vec<Vec<f64>> = (0..bins)
            .map(|b| {
                let lo = b as f64 * 2.0;
                samples
                    .iter()
                    .map(|c| c.count_in(|p| p[0] >= lo && p[0] < lo + 2.0) as f64)
                    .collect()
            })
            .collect();
        let overall = mean_se(&per_bin.concat());
        for counts in &per_bin {
            let m = mean_se(counts);
            assert!(
                (m.mean - overall.mean).abs()
                    < 3.0 * (m.se * m.se + overall.se * overall.se).sqrt() + 1e-9
            );
        }
    }

    #[test]
    fn window_must_sit_in_the_bulk() {
        let spec = DppSpec {
            kind: KernelKind::Sine,
            n_mat: 50,
            window: 20.0,
        };
        assert!(matches!(
            sample_dyson_sine(&spec, 0),
            Err(PointProcessError::WindowTooLarge { .. })
        ));
        let spec = DppSpec {
            kind: KernelKind::Ginibre,
            n_mat: 16,
            window: 3.0,
        };
        assert!(matches!(
            sample_ginibre(&spec, 0),
            Err(PointProcessError::WindowTooLarge { .. })
        ));
        let wrong = DppSpec {
            kind: KernelKind::Ginibre,
            n_mat: 100,
            window: 2.0,
        };
        assert!(sample_dyson_sine(&wrong, 0).is_err());
    }

    #[test]
    fn dyson_intensity_is_about_one() {
        let spec = DppSpec {
            kind: KernelKind::Sine,
            n_mat: 120,
            window: 8.0,
        };
        let total: usize = (0..20)
            .map(|s| sample_dyson_sine(&spec, s).unwrap().len())
            .sum();
        let rho = total as f64 / (20.0 * 16.0);
        assert!((rho - 1.0).abs() < 0.05, "rho1 = {rho}");
    }

    #[test]
    fn ginibre_intensity_is_one_over_pi() {
        let spec = DppSpec {
            kind: KernelKind::Ginibre,
            n_mat: 64,
            window: 3.5,
        };
        let total: usize = (0..20)
            .map(|s| sample_ginibre(&spec, s).unwrap().len())
            .sum();
        let rho = total as f64 / (20.0 * std::f64::consts::PI * 3.5 * 3.5);
        assert!(
            (rho * std::f64::consts::PI - 1.0).abs() < 0.05,
            "rho1 = {rho}"
        );
    }

    #[test]
    fn palm_poisson_matches_fresh_sample() {
        let domain = Domain::torus(1, 10.0);
        let sampler = PoissonSampler {
            domain,
            intensity: 1.0,
        };
        let x = [5.0];
        let opts = PalmOptions {
            delta: 0.01,
            max_draws: 100_000,
        };
        let nearest = |c: &Configuration| {
            c.points()
                .map(|p| domain.distance(p, &x))
                .fold(f64::INFINITY, f64::min)
        };
        let conditioned: Vec<f64> = (0..600)
            .map(|s| {
                nearest(
                    &palm_condition(&sampler, &x, opts, s)
                        .unwrap()
                        .state
                        .background,
                )
            })
            .collect();
        let fresh: Vec<f64> = (0..600)
            .map(|s| nearest(&sampler.sample(derive_seed(s, 77)).unwrap()))
            .collect();
        assert!(ks_two_sample(&conditioned, &fresh).p_value > 0.01);
    }

    #[test]
    fn palm_hard_core_and_bookkeeping() {
        let domain = Domain::torus(1, 10.0);
        let sampler = GibbsSampler::new(hard_core_spec(0.5, 1.0), domain).unwrap();
        let opts = PalmOptions {
            delta: 0.05,
            max_draws: 10_000,
        };
        let s = palm_condition(&sampler, &[5.0], opts, 3).unwrap();
        for p in s.state.background.points() {
            assert!(domain.distance(p, &[5.0]) >= 0.5 - 0.05);
        }
        let poisson = PoissonSampler {
            domain,
            intensity: 2.0,
        };
        let two = palm_condition(
            &poisson,
            &[2.0, 7.0],
            PalmOptions {
                delta: 0.1,
                max_draws: 100_000,
            },
            1,
        )
        .unwrap();
        assert_eq!(two.state.k(), 2);
        assert_eq!(two.state.background.len() + 2, two.source.len());
        for (xi, p) in [2.0, 7.0].iter().zip(two.state.tagged.iter()) {
            assert_eq!(xi, p);
        }
        let fail = palm_condition(
            &poisson,
            &[2.0],
            PalmOptions {
                delta: 1e-9,
                max_draws: 10,
            },
            1,
        );
        assert!(matches!(
            fail,
            Err(PointProcessError::AcceptanceTooLow { .. })
        ));
    }
}
