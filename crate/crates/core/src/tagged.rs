//! Tagged particles and the environment seen from them.
//!
//! Simulated trajectories carry native labels, so tagging is exact. For
//! externally supplied unlabeled paths, [`split_paths`] recovers tracks by
//! greedy nearest-neighbour matching between snapshots.

use thiserror::Error;

use crate::configuration::{
    iota, translate, Configuration, ConfigurationError, Domain, Geometry, KLabeledState,
};
use crate::dynamics::{Frame, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaggedError {
    #[error("ambiguous matching between snapshots {from} and {to}")]
    AmbiguousMatching { from: usize, to: usize },
    #[error("no point of the initial configuration within tolerance of the given position")]
    NoSuchPoint,
    #[error("more than one initial point within tolerance of the given position")]
    NotSingle,
    #[error("path has {times} times but {snapshots} snapshots")]
    LengthMismatch { times: usize, snapshots: usize },
    #[error("snapshot {0} is not single")]
    SnapshotNotSingle(usize),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// A labeled sub-path `X^i` on its maximal interval of snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub dim: usize,
    /// Snapshot index of the first position.
    pub start: usize,
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    /// True if the track was born after the first snapshot, i.e. its interval is `(a, b)`.
    pub born_late: bool,
}

impl Track {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn position(&self, t: usize) -> &[f64] {
        &self.positions[t * self.dim..(t + 1) * self.dim]
    }

    /// `(first time, last time)` covered by the track.
    pub fn interval(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.times.last()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOptions {
    pub matching_radius: f64,
    /// Two candidate distances closer than this are treated as a tie.
    pub ambiguity_tol: f64,
}

impl TrackOptions {
    /// Radius `4 sqrt(d dt stride)`, the typical per-stride Brownian excursion times four.
    pub fn for_stride(dim: usize, dt: f64, stride: usize) -> Self {
        let matching_radius = 4.0 * (dim as f64 * dt * stride as f64).sqrt();
        Self {
            matching_radius,
            ambiguity_tol: 1e-6 * matching_radius,
        }
    }
}

/// Splits an unlabeled path into continuous labeled tracks.
pub fn split_paths(
    times: &[f64],
    path: &[Configuration],
    opts: TrackOptions,
) -> Result<Vec<Track>, TaggedError> {
    if times.len() != path.len() {
        return Err(TaggedError::LengthMismatch {
            times: times.len(),
            snapshots: path.len(),
        });
    }
    let Some(first) = path.first() else {
        return Ok(Vec::new());
    };
    let domain = *first.domain();
    let d = domain.dim;
    for (t, c) in path.iter().enumerate() {
        if !c.is_single() {
            return Err(TaggedError::SnapshotNotSingle(t));
        }
    }
    let mut tracks: Vec<Track> = first
        .points()
        .map(|p| Track {
            dim: d,
            start: 0,
            times: vec![times[0]],
            positions: p.to_vec(),
            born_late: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..tracks.len()).collect();

    for t in 1..path.len() {
        let next = &path[t];
        let mut claimed: Vec<Option<usize>> = vec![None; next.len()];
        let mut continued = Vec::with_capacity(active.len());
        for &ti in &active {
            let last = tracks[ti].position(tracks[ti].len() - 1).to_vec();
            let mut best = (f64::INFINITY, usize::MAX);
            let mut second = f64::INFINITY;
            for (j, p) in next.points().enumerate() {
                let r = domain.distance(&last, p);
                if r < best.0 {
                    second = best.0;
                    best = (r, j);
                } else if r < second {
                    second = r;
                }
            }
            if best.0 > opts.matching_radius {
                continue;
            }
            if second <= opts.matching_radius && second - best.0 < opts.ambiguity_tol {
                return Err(TaggedError::AmbiguousMatching { from: t - 1, to: t });
            }
            if claimed[best.1].is_some() {
                return Err(TaggedError::AmbiguousMatching { from: t - 1, to: t });
            }
            claimed[best.1] = Some(ti);
            continued.push((ti, best.1));
        }
        // a point equidistant from two tracks is also a tie
        for (j, p) in next.points().enumerate() {
            let mut ds: Vec<f64> = active
                .iter()
                .map(|&ti| domain.distance(tracks[ti].position(tracks[ti].len() - 1), p))
                .filter(|&r| r <= opts.matching_radius)
                .collect();
            ds.sort_by(f64::total_cmp);
            if claimed[j].is_some() && ds.len() >= 2 && ds[1] - ds[0] < opts.ambiguity_tol {
                return Err(TaggedError::AmbiguousMatching { from: t - 1, to: t });
            }
        }
        let mut new_active = Vec::with_capacity(next.len());
        for (ti, j) in continued {
            tracks[ti].times.push(times[t]);
            tracks[ti].positions.extend_from_slice(next.point(j));
            new_active.push(ti);
        }
        for (j, c) in claimed.iter().enumerate() {
            if c.is_none() {
                tracks.push(Track {
                    dim: d,
                    start: t,
                    times: vec![times[t]],
                    positions: next.point(j).to_vec(),
                    born_late: true,
                });
                new_active.push(tracks.len() - 1);
            }
        }
        active = new_active;
    }
    Ok(tracks)
}

/// Index `i(x, s)` of the particle starting at `x`.
pub fn tagged_index(traj: &Trajectory, x: &[f64]) -> Result<usize, TaggedError> {
    if traj.is_empty() {
        return Err(TaggedError::NoSuchPoint);
    }
    let eps = traj.domain.coincide_tolerance();
    let hits: Vec<usize> = (0..traj.n)
        .filter(|&i| traj.domain.distance(traj.position(0, i), x) <= eps)
        .collect();
    match hits.as_slice() {
        [] => Err(TaggedError::NoSuchPoint),
        [i] => Ok(*i),
        _ => Err(TaggedError::NotSingle),
    }
}

/// Path of the particle starting at `x`.
pub fn tag_particle(traj: &Trajectory, x: &[f64]) -> Result<Track, TaggedError> {
    let i = tagged_index(traj, x)?;
    Ok(label_track(traj, i))
}

/// Path of the particle in slot `i`.
pub fn label_track(traj: &Trajectory, i: usize) -> Track {
    let mut positions = Vec::with_capacity(traj.len() * traj.dim());
    for t in 0..traj.len() {
        positions.extend_from_slice(traj.position(t, i));
    }
    Track {
        dim: traj.dim(),
        start: 0,
        times: traj.times.clone(),
        positions,
        born_late: false,
    }
}

/// Domain in which relative positions live.
fn relative_domain(domain: &Domain) -> Domain {
    match domain.geometry {
        Geometry::Torus { .. } => *domain,
        _ => Domain::free(domain.dim),
    }
}

/// Environment `sum_{j != i} delta_{X^j_t - X^i_t}` at snapshot `t`.
fn environment_at(traj: &Trajectory, i: usize, t: usize) -> Result<Configuration, TaggedError> {
    let rel = relative_domain(&traj.domain);
    let others = traj.configuration(t).without(i).with_domain(rel)?;
    Ok(translate(&others, traj.position(t, i)))
}

/// The environment process seen from the particle starting at `x`,
/// returned as a trajectory with `frame = tagged`.
pub fn environment_process(traj: &Trajectory, x: &[f64]) -> Result<Trajectory, TaggedError> {
    let i = tagged_index(traj, x)?;
    let mut frames = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        frames.push(environment_at(traj, i, t)?.into_coords());
    }
    let mut max_displacement = traj.max_displacement.clone();
    if i < max_displacement.len() {
        max_displacement.remove(i);
    }
    Ok(Trajectory {
        domain: relative_domain(&traj.domain),
        n: traj.n.saturating_sub(1),
        frame: Frame::Tagged,
        times: traj.times.clone(),
        frames,
        params: traj.params.clone(),
        provenance: traj.provenance.clone(),
        max_displacement,
        capped_pairs: traj.capped_pairs,
        rejected_steps: traj.rejected_steps,
    })
}

/// `iota` applied along a 1-labeled trajectory: `(X_t, theta_{X_t}(background_t))`.
pub fn iota_path(traj: &Trajectory) -> Result<Vec<KLabeledState>, TaggedError> {
    if traj.k() != 1 {
        return Err(ConfigurationError::KMismatch {
            expected: 1,
            got: traj.k(),
        }
        .into());
    }
    let rel = relative_domain(&traj.domain);
    (0..traj.len())
        .map(|t| {
            let ks = traj.k_state(t);
            let lifted = KLabeledState {
                tagged: ks.tagged,
                background: ks.background.with_domain(rel)?,
            };
            Ok(iota(&lifted)?)
        })
        .collect()
}
