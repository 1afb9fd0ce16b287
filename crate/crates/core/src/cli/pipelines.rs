//! Named end-to-end experiments. Each pipeline is a config shipped in
//! `pipelines/*.ini`; the CLI and the acceptance tests both go through
//! [`run_pipeline`].

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::analysis::{
    self, estimate_rho, nonexplosion_scan, Bins, BoxRegion, CriterionOptions, EstimateOptions,
    RadialIntensity, Verdict,
};
use crate::configuration::{kappa, label, Configuration, Domain, LabelRule};
use crate::dynamics::{
    canonical_streams, simulate, simulate_k_labeled, simulate_k_labeled_shared,
    simulate_with_streams,
};
use crate::error::{Error, Result};
use crate::forms::{
    check_iota_random, check_product_formula, random_cylinder, symmetrization_energies, symmetrize,
    CylinderFunction, FormReport, ProductCheck, Smooth, SymmetrizeMode, Symmetrized, Term,
    EXACT_SYMMETRIZE_MAX,
};
use crate::par;
use crate::persistence::{Config, Manifest, Report};
use crate::pointprocess::{
    palm_condition, DppSampler, DppSpec, GibbsSampler, GibbsSpec, KernelKind, PalmOptions,
    PointSampler, PoissonSampler,
};
use crate::rng::{derive_seed, replica_rng, salt};
use crate::stats::{ks_two_sample, mean_se, MeanSe};
use crate::tagged::{environment_process, iota_path, tagged_index};

/// Built-in pipelines with their default configs.
pub const PIPELINES: [(&str, &str); 6] = [
    (
        "labeling-identity",
        include_str!("../../pipelines/labeling-identity.ini"),
    ),
    (
        "tagged-environment",
        include_str!("../../pipelines/tagged-environment.ini"),
    ),
    (
        "dyson-correlations",
        include_str!("../../pipelines/dyson-correlations.ini"),
    ),
    (
        "ginibre-correlations",
        include_str!("../../pipelines/ginibre-correlations.ini"),
    ),
    (
        "nonexplosion-suite",
        include_str!("../../pipelines/nonexplosion-suite.ini"),
    ),
    (
        "forms-suite",
        include_str!("../../pipelines/forms-suite.ini"),
    ),
];

pub const DEFAULT_SEED: u64 = 20240611;

pub fn pipeline_names() -> impl Iterator<Item = &'static str> {
    PIPELINES.iter().map(|(n, _)| *n)
}

/// The shipped config of a named pipeline.
pub fn builtin_config(name: &str) -> Result<Config> {
    let (_, text) = PIPELINES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown pipeline `{name}` (known: {})",
            pipeline_names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Ok(Config::parse(text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub name: String,
    pub checks: Vec<Check>,
    pub tables: Vec<(String, Report)>,
}

impl PipelineOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> Report {
        let mut r = Report::new(&["check", "status", "detail"]);
        for c in &self.checks {
            r.push(vec![
                c.name.clone(),
                status(c.passed).into(),
                c.detail.clone(),
            ]);
        }
        r
    }

    /// Writes `<name>.<table>.tsv` for every table plus `<name>.summary.tsv`
    /// into `dir`, then appends the manifest. Existing files are never replaced.
    pub fn write(&self, dir: &Path, manifest: &Manifest, config: &Config) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        for (table, report) in &self.tables {
            report.write(
                &dir.join(format!("{}.{table}.tsv", self.name)),
                manifest,
                config,
            )?;
        }
        self.summary().write(
            &dir.join(format!("{}.summary.tsv", self.name)),
            manifest,
            config,
        )?;
        manifest.append(dir)?;
        Ok(())
    }
}

pub fn status(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

/// Runs pipeline `name` with `config`, then writes its reports under `out`
/// if given. Returns the outcome and the manifest.
pub fn run_and_write(
    name: &str,
    config: &Config,
    seed: u64,
    out: Option<&Path>,
) -> Result<(PipelineOutcome, Manifest)> {
    let start = Instant::now();
    let outcome = run_pipeline(name, config, seed)?;
    let mut manifest = Manifest::new(config, &format!("run {name}"), seed);
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        outcome.write(dir, &manifest, config)?;
    }
    Ok((outcome, manifest))
}

pub fn run_pipeline(name: &str, config: &Config, seed: u64) -> Result<PipelineOutcome> {
    let (checks, tables) = match name {
        "labeling-identity" => labeling_identity(config, seed),
        "tagged-environment" => tagged_environment(config, seed),
        "dyson-correlations" => dyson_correlations(config, seed),
        "ginibre-correlations" => ginibre_correlations(config, seed),
        "nonexplosion-suite" => nonexplosion_suite(config),
        "forms-suite" => forms_suite(config, seed),
        other => return Err(Error::Config(format!("unknown pipeline `{other}`"))),
    }
    .map_err(|e| e.context(format!("pipeline {name}")))?;
    Ok(PipelineOutcome {
        name: name.to_string(),
        checks,
        tables,
    })
}

type Stage = Result<(Vec<Check>, Vec<(String, Report)>)>;

/// Point sampler described by the `[sampler]` section.
pub fn sampler_from_config(config: &Config) -> Result<Box<dyn PointSampler>> {
    let kind = config.get("sampler", "kind").unwrap_or("poisson");
    Ok(match kind {
        "poisson" => Box::new(PoissonSampler {
            domain: config.domain()?,
            intensity: config.parse_or("sampler", "intensity", 1.0)?,
        }),
        "gibbs" => {
            let mut spec = GibbsSpec::new(
                config.potentials()?,
                config.parse_or("sampler", "beta", 1.0)?,
                config.parse_or("sampler", "activity", 1.0)?,
            );
            spec.burn_in_sweeps = config.parse_or("sampler", "burn_in", spec.burn_in_sweeps)?;
            spec.proposal_scale =
                config.parse_or("sampler", "proposal_scale", spec.proposal_scale)?;
            Box::new(GibbsSampler::new(spec, config.domain()?)?)
        }
        "sine" | "ginibre" => Box::new(DppSampler {
            spec: DppSpec {
                kind: if kind == "sine" {
                    KernelKind::Sine
                } else {
                    KernelKind::Ginibre
                },
                n_mat: config.parse_req("sampler", "n_mat")?,
                window: config.parse_req("sampler", "window")?,
            },
        }),
        other => return Err(Error::Config(format!("unknown sampler kind `{other}`"))),
    })
}

fn pair_distances(c: &Configuration) -> impl Iterator<Item = f64> + '_ {
    let n = c.len();
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| c.domain().distance(c.point(i), c.point(j))))
}

/// Symmetric functionals of an unlabeled path.
pub const PATH_FUNCTIONALS: [&str; 5] = [
    "sum_sq_end",
    "time_avg_sum_sq",
    "min_pair_end",
    "max_radius",
    "pair_gauss_mid",
];

fn path_functionals(path: &[Configuration]) -> [f64; 5] {
    let sum_sq = |c: &Configuration| {
        c.points()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    };
    let end = path.last().expect("non-empty path");
    let mid = &path[path.len() / 2];
    let time_avg = path[1..].iter().map(sum_sq).sum::<f64>() / (path.len() - 1).max(1) as f64;
    let min_pair = pair_distances(end).fold(f64::INFINITY, f64::min);
    let max_radius = path
        .iter()
        .flat_map(|c| {
            c.points()
                .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .fold(0.0, f64::max);
    let gauss = pair_distances(mid).map(|r| (-r * r).exp()).sum();
    [sum_sq(end), time_avg, min_pair, max_radius, gauss]
}

fn random_initial(domain: Domain, n: usize, half_width: f64, seed: u64) -> Result<Configuration> {
    let mut rng = replica_rng(seed, n as u64);
    let coords = (0..n * domain.dim)
        .map(|_| rng.random_range(-half_width..half_width))
        .collect();
    Ok(Configuration::new(domain, coords)?)
}

fn labeling_identity(config: &Config, seed: u64) -> Stage {
    let domain = config.domain()?;
    let potentials = config.potentials()?;
    let ns: Vec<usize> = config
        .list("analysis", "particles")?
        .unwrap_or_else(|| vec![3, 8]);
    let ks: Vec<usize> = config.list("analysis", "k")?.unwrap_or_else(|| vec![1, 2]);
    let replicas: usize = config.parse_or("analysis", "replicas", 2000)?;
    let half_width: f64 = config.parse_or("analysis", "init_half_width", 1.5)?;
    let p_min: f64 = config.parse_or("analysis", "p_min", 0.01)?;

    let mut table = Report::new(&[
        "n",
        "k",
        "functional",
        "ks_statistic",
        "p_value",
        "mean_unlabeled",
        "mean_labeled",
    ]);
    let mut checks = Vec::new();
    for &n in &ns {
        let initial = random_initial(domain, n, half_width, derive_seed(seed, salt("initial")))?;
        let unlabeled_seed = derive_seed(seed, salt(&format!("unlabeled/{n}")));
        let unlabeled = par::try_map_indexed(replicas, |i| -> Result<[f64; 5]> {
            let params = config.sim_params(derive_seed(unlabeled_seed, i as u64))?;
            let traj = simulate(
                &label(&initial, LabelRule::Lexicographic)?,
                &potentials,
                &params,
            )?;
            Ok(path_functionals(&traj.unlabeled_path()))
        })?;
        for &k in &ks {
            let start = label(&initial, LabelRule::DistanceFromOrigin)?.split_tagged(k)?;
            let labeled_seed = derive_seed(seed, salt(&format!("labeled/{n}/{k}")));
            let labeled = par::try_map_indexed(replicas, |i| -> Result<[f64; 5]> {
                let params = config.sim_params(derive_seed(labeled_seed, i as u64))?;
                let traj =
                    simulate_k_labeled(&start, &potentials, &params, LabelRule::Lexicographic)?;
                Ok(path_functionals(&traj.unlabeled_path()))
            })?;
            for (f, fname) in PATH_FUNCTIONALS.iter().enumerate() {
                let a: Vec<f64> = unlabeled.iter().map(|v| v[f]).collect();
                let b: Vec<f64> = labeled.iter().map(|v| v[f]).collect();
                let ks_res = ks_two_sample(&a, &b);
                let ok = ks_res.p_value > p_min;
                table.push(vec![
                    n.to_string(),
                    k.to_string(),
                    fname.to_string(),
                    num(ks_res.statistic),
                    num(ks_res.p_value),
                    num(mean_se(&a).mean),
                    num(mean_se(&b).mean),
                ]);
                checks.push(Check::new(
                    format!("ks n={n} k={k} {fname}"),
                    ok,
                    format!("p={:.4} (> {p_min})", ks_res.p_value),
                ));
            }
        }
    }
    Ok((checks, vec![("ks".into(), table)]))
}

/// Observables of an environment configuration (points relative to the tag).
fn environment_observables(c: &Configuration, radius: f64) -> [f64; 2] {
    let origin = vec![0.0; c.dim()];
    let dist: Vec<f64> = c
        .points()
        .map(|p| c.domain().distance(p, &origin))
        .collect();
    let count = dist.iter().filter(|&&r| r < radius).count() as f64;
    let gauss = dist.iter().map(|r| (-r * r).exp()).sum();
    [count, gauss]
}

pub const ENVIRONMENT_OBSERVABLES: [&str; 2] = ["count_near", "gauss_sum"];

fn tagged_environment(config: &Config, seed: u64) -> Stage {
    let domain = config.domain()?;
    let potentials = config.potentials()?;
    let sampler = sampler_from_config(config)?;
    let replicas: usize = config.parse_or("analysis", "replicas", 1000)?;
    let radius: f64 = config.parse_or("analysis", "observable_radius", 1.0)?;
    let z_max: f64 = config.parse_or("analysis", "z_max", 3.0)?;
    let palm = PalmOptions {
        delta: config.parse_or("sampler", "palm_delta", 0.01)?,
        max_draws: config.parse_or("sampler", "palm_max_draws", 1_000_000)?,
    };
    let x = vec![0.0; domain.dim];

    struct Row {
        points: usize,
        draws: usize,
        mismatched_frames: usize,
        obs_start: [f64; 2],
        obs_end: [f64; 2],
    }
    let rows = par::try_map_indexed(replicas, |i| -> Result<Row> {
        let rs = derive_seed(seed, i as u64);
        let palm_sample =
            palm_condition(sampler.as_ref(), &x, palm, derive_seed(rs, salt("palm")))?;
        let state = palm_sample.state;
        let params = config.sim_params(derive_seed(rs, salt("noise")))?;

        let unlabeled_start = label(&kappa(&state), LabelRule::Lexicographic)?;
        let streams = canonical_streams(&unlabeled_start);
        let traj = simulate_with_streams(&unlabeled_start, &potentials, &params, &streams)?;
        let env = environment_process(&traj, &x)?;
        let tag = tagged_index(&traj, &x)?;

        let labeled =
            simulate_k_labeled_shared(&state, &potentials, &params, LabelRule::Lexicographic)?;
        let lifted = iota_path(&labeled)?;

        let mismatched_frames = (0..traj.len())
            .filter(|&t| {
                let same_env = env.configuration(t).canonical_coords()
                    == lifted[t].background.canonical_coords();
                let same_tag = traj.position(t, tag) == lifted[t].tagged.as_slice();
                !(same_env && same_tag)
            })
            .count();
        Ok(Row {
            points: traj.n,
            draws: palm_sample.draws,
            mismatched_frames,
            obs_start: environment_observables(&env.configuration(0), radius),
            obs_end: environment_observables(&env.configuration(env.len() - 1), radius),
        })
    })?;

    let mut paths = Report::new(&["replica", "points", "palm_draws", "mismatched_frames"]);
    for (i, r) in rows.iter().enumerate() {
        paths.push(vec![
            i.to_string(),
            r.points.to_string(),
            r.draws.to_string(),
            r.mismatched_frames.to_string(),
        ]);
    }
    let bad = rows.iter().filter(|r| r.mismatched_frames > 0).count();
    let mut checks = vec![Check::new(
        "pathwise environment equals iota path",
        bad == 0,
        format!("{bad} of {replicas} replicas differ"),
    )];

    let mut stationarity = Report::new(&[
        "observable",
        "mean_start",
        "se_start",
        "mean_end",
        "se_end",
        "mean_diff",
        "se_diff",
        "z",
    ]);
    for (o, oname) in ENVIRONMENT_OBSERVABLES.iter().enumerate() {
        let a: Vec<f64> = rows.iter().map(|r| r.obs_start[o]).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.obs_end[o]).collect();
        let diff: Vec<f64> = rows.iter().map(|r| r.obs_end[o] - r.obs_start[o]).collect();
        let (ma, mb, md) = (mean_se(&a), mean_se(&b), mean_se(&diff));
        let z = paired_z(md);
        stationarity.push(vec![
            oname.to_string(),
            num(ma.mean),
            num(ma.se),
            num(mb.mean),
            num(mb.se),
            num(md.mean),
            num(md.se),
            num(z),
        ]);
        checks.push(Check::new(
            format!("stationary {oname}"),
            z.abs() < z_max,
            format!("z={z:.3} (|z| < {z_max})"),
        ));
    }
    Ok((
        checks,
        vec![
            ("paths".into(), paths),
            ("stationarity".into(), stationarity),
        ],
    ))
}

fn paired_z(m: MeanSe) -> f64 {
    if m.se > 0.0 {
        m.mean / m.se
    } else if m.mean == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn sample_all(
    sampler: &dyn PointSampler,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Configuration>> {
    Ok(par::try_map_indexed(replicas, |i| {
        sampler.sample(derive_seed(seed, i as u64))
    })?)
}

/// `1 - sinc^2(r)` with `sinc(r) = sin(pi r) / (pi r)`.
pub fn sine_pair_correlation(r: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    let a = std::f64::consts::PI * r;
    1.0 - (a.sin() / a).powi(2)
}

/// Average of `g` over `[a, b]` with weight `len - r`, the density of pair
/// separations inside a window of length `len`.
fn window_average(g: impl Fn(f64) -> f64, a: f64, b: f64, len: f64) -> f64 {
    let steps = 400;
    let h = (b - a) / steps as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..steps {
        let r = a + (j as f64 + 0.5) * h;
        num += g(r) * (len - r);
        den += len - r;
    }
    num / den
}

fn dyson_correlations(config: &Config, seed: u64) -> Stage {
    let sampler = sampler_from_config(config)?;
    let replicas: usize = config.parse_or("analysis", "replicas", 200)?;
    let width: f64 = config.parse_or("analysis", "bin_width", 0.2)?;
    let r_max: f64 = config.parse_or("analysis", "r_max", 4.0)?;
    let min_count: f64 = config.parse_or("analysis", "min_count", 200.0)?;
    let rel_tol: f64 = config.parse_or("analysis", "rel_tol", 0.05)?;
    let len = 2.0 * config.parse_req::<f64>("sampler", "window")?;

    let samples = sample_all(sampler.as_ref(), replicas, derive_seed(seed, salt("dyson")))?;
    let bins = Bins::Separation { width, r_max };
    let est = estimate_rho(
        &samples,
        2,
        &bins,
        EstimateOptions {
            seed,
            ..Default::default()
        },
    )?;
    let edges = bins.separation_edges();

    // normalise by the empirical intensity, so the ratio is the pair correlation
    let rho1 = samples.iter().map(|s| s.len() as f64).sum::<f64>() / (replicas as f64 * len);
    let scale = 1.0 / (rho1 * rho1);

    let mut table = Report::new(&[
        "r_lo",
        "r_hi",
        "rho2",
        "se",
        "pair_count",
        "g",
        "target",
        "rel_err",
        "used",
    ]);
    let mut used = 0;
    let mut worst: (f64, f64) = (0.0, 0.0);
    for (b, raw, se, count) in est.rows() {
        let value = raw * scale;
        let target = window_average(sine_pair_correlation, edges[b], edges[b + 1], len);
        let rel = (value - target).abs() / target;
        let in_scope = count >= min_count;
        if in_scope {
            used += 1;
            if rel > worst.0 {
                worst = (rel, edges[b]);
            }
        }
        table.push(vec![
            num(edges[b]),
            num(edges[b + 1]),
            num(raw),
            num(se),
            num(count),
            num(value),
            num(target),
            num(rel),
            in_scope.to_string(),
        ]);
    }
    let ok = used > 0 && worst.0 <= rel_tol;
    let check = Check::new(
        "rho2 against sine kernel",
        ok,
        format!("rho1={rho1:.4}, {used} bins used, worst relative error {:.4} at r={:.2} (<= {rel_tol})", worst.0, worst.1),
    );
    Ok((vec![check], vec![("rho2".into(), table)]))
}

fn ginibre_correlations(config: &Config, seed: u64) -> Stage {
    let sampler = sampler_from_config(config)?;
    let replicas: usize = config.parse_or("analysis", "replicas", 100)?;
    let grid: usize = config.parse_or("analysis", "grid", 4)?;
    let rel_tol: f64 = config.parse_or("analysis", "rel_tol", 0.05)?;
    let window: f64 = config.parse_req("sampler", "window")?;

    let samples = sample_all(
        sampler.as_ref(),
        replicas,
        derive_seed(seed, salt("ginibre")),
    )?;
    let area = std::f64::consts::PI * window * window;
    let density: Vec<f64> = samples.iter().map(|s| s.len() as f64 / area).collect();
    let disk = mean_se(&density);
    let target = std::f64::consts::FRAC_1_PI;
    let rel = (disk.mean - target).abs() / target;
    let mut checks = vec![Check::new(
        "disk rho1 against 1/pi",
        rel <= rel_tol,
        format!(
            "rho1={:.5} se={:.5} rel_err={rel:.4} (<= {rel_tol})",
            disk.mean, disk.se
        ),
    )];

    let half = window / std::f64::consts::SQRT_2;
    let square = BoxRegion::new(vec![-half; 2], vec![half; 2]);
    let bins = Bins::grid(&square, grid);
    let est = estimate_rho(
        &samples,
        1,
        &bins,
        EstimateOptions {
            seed,
            ..Default::default()
        },
    )?;
    let Bins::Cells(cells) = &bins else {
        unreachable!()
    };
    let mut table = Report::new(&[
        "x_lo", "y_lo", "x_hi", "y_hi", "rho1", "se", "count", "target",
    ]);
    for (b, value, se, count) in est.rows() {
        let c = &cells[b];
        table.push(vec![
            num(c.lo[0]),
            num(c.lo[1]),
            num(c.hi[0]),
            num(c.hi[1]),
            num(value),
            num(se),
            num(count),
            num(target),
        ]);
    }
    let mut disk_table = Report::new(&["window", "replicas", "rho1", "se", "target", "rel_err"]);
    disk_table.push(vec![
        num(window),
        replicas.to_string(),
        num(disk.mean),
        num(disk.se),
        num(target),
        num(rel),
    ]);
    checks.push(Check::new(
        "grid cells populated",
        est.counts.iter().all(|&c| c > 0.0),
        format!("{} cells", cells.len()),
    ));
    Ok((
        checks,
        vec![("disk".into(), disk_table), ("grid".into(), table)],
    ))
}

fn nonexplosion_suite(config: &Config) -> Stage {
    let dim: usize = config.parse_or("domain", "dim", 2)?;
    let profiles: Vec<RadialIntensity> = config
        .list("analysis", "profiles")?
        .unwrap_or_else(|| vec![RadialIntensity::Constant { lambda: 1.0 }]);
    let expected: Vec<String> = config.list("analysis", "expected")?.unwrap_or_default();
    let r_offset: f64 = config.parse_or("analysis", "r_offset", 1.0)?;
    let ts: Vec<f64> = config
        .list("analysis", "t_scan")?
        .unwrap_or_else(|| analysis::DEFAULT_T_SCAN.to_vec());
    let opts = CriterionOptions::default();
    let names: Vec<&str> = config
        .get("analysis", "profiles")
        .map(|p| p.split(',').map(str::trim).collect())
        .unwrap_or_default();

    let mut checks = Vec::new();
    let mut verdicts = Report::new(&[
        "profile",
        "t",
        "verdict",
        "expected",
        "min_log_evidence",
        "final_log_evidence",
    ]);
    let mut curves = Report::new(&["profile", "t", "r", "log_mass", "log_tail", "log_evidence"]);
    for (i, profile) in profiles.iter().enumerate() {
        let name = names.get(i).copied().unwrap_or("profile");
        let rep = nonexplosion_scan(profile, dim, &ts, r_offset, &opts);
        let want = expected.get(i).map(String::as_str).unwrap_or("NA");
        let min = rep
            .curve
            .iter()
            .map(|p| p.log_evidence)
            .fold(f64::INFINITY, f64::min);
        let last = rep.curve.last().map_or(f64::NAN, |p| p.log_evidence);
        verdicts.push(vec![
            name.into(),
            num(rep.t),
            rep.verdict.to_string(),
            want.into(),
            num(min),
            num(last),
        ]);
        for p in &rep.curve {
            curves.push(vec![
                name.into(),
                num(rep.t),
                num(p.r),
                num(p.log_mass),
                num(p.log_tail),
                num(p.log_evidence),
            ]);
        }
        if want != "NA" {
            checks.push(Check::new(
                format!("verdict {name}"),
                rep.verdict.to_string() == want,
                format!("{} at T={} (expected {want})", rep.verdict, rep.t),
            ));
        }
        if rep.verdict == Verdict::Inconclusive {
            log::warn!("criterion inconclusive for {name}");
        }
    }
    let half = analysis::ell(0.0);
    checks.push(Check::new(
        "tail at zero",
        (half - 0.5).abs() <= 1e-15,
        format!("ell(0)={half:.17}"),
    ));
    Ok((
        checks,
        vec![("verdicts".into(), verdicts), ("curves".into(), curves)],
    ))
}

/// Stages of the forms suite, selectable with `analysis.identities`.
pub const FORM_STAGES: [&str; 3] = ["iota", "product", "symmetrization"];

fn forms_suite(config: &Config, seed: u64) -> Stage {
    let domain = config.domain()?;
    let d = domain.dim;
    let tol: f64 = config.parse_or("analysis", "tol", 1e-5)?;
    let z_max: f64 = config.parse_or("analysis", "z_max", 3.0)?;
    let stages: Vec<String> = config
        .list("analysis", "identities")?
        .unwrap_or_else(|| FORM_STAGES.iter().map(|s| s.to_string()).collect());
    if let Some(bad) = stages.iter().find(|s| !FORM_STAGES.contains(&s.as_str())) {
        return Err(Error::Config(format!(
            "unknown identity `{bad}` (known: {})",
            FORM_STAGES.join(", ")
        )));
    }
    let wants = |s: &str| stages.iter().any(|x| x == s);
    let mut reports: Vec<FormReport> = Vec::new();
    let mut checks = Vec::new();
    let mut tables = Vec::new();

    if wants("iota") {
        let iota = check_iota_random(
            config.parse_or("analysis", "iota_samples", 200)?,
            d,
            derive_seed(seed, salt("iota")),
            config.parse_or("analysis", "iota_h", 1e-4)?,
        );
        checks.push(Check::new(
            "iota identity",
            iota.max_residual < tol,
            format!("max residual {:.3e} (< {tol:e})", iota.max_residual),
        ));
        reports.push(iota);
    }

    if wants("product") {
        // product formula on a Poisson torus: bump in the tagged slot times a
        // smooth background sum centred in the box
        let sampler = sampler_from_config(config)?;
        let side = match domain.geometry {
            crate::Geometry::Torus { side } => side,
            _ => return Err(Error::Config("forms-suite needs a torus domain".into())),
        };
        let centre = vec![side / 2.0; d];
        let phi = Smooth::Bump {
            amp: 1.0,
            center: centre.clone(),
            radius: side / 4.0,
        };
        let f = CylinderFunction::new(
            0,
            d,
            Term::Background(Smooth::Gaussian {
                amp: 1.0,
                center: centre,
                width: side / 8.0,
            }),
        );
        let product = check_product_formula(
            &phi,
            &f,
            sampler.as_ref(),
            ProductCheck {
                samples: config.parse_or("analysis", "product_samples", 10_000)?,
                seed: derive_seed(seed, salt("product")),
                h: config.parse_or("analysis", "product_h", 1e-5)?,
            },
        )?;
        let z = product.z.unwrap_or(f64::NAN);
        checks.push(Check::new(
            "product pointwise",
            product.max_residual < tol,
            format!("max residual {:.3e} (< {tol:e})", product.max_residual),
        ));
        checks.push(Check::new(
            "product integrated",
            z.abs() < z_max,
            format!("z={z:.3} (|z| < {z_max})"),
        ));
        reports.push(product);
    }

    let mut forms = Report::new(&FormReport::TSV_HEADER.split('\t').collect::<Vec<_>>());
    for r in &reports {
        forms.push(r.tsv_row().split('\t').map(String::from).collect());
    }

    if !reports.is_empty() {
        tables.push(("identities".to_string(), forms));
    }
    if wants("symmetrization") {
        let (sym_checks, sym_table) =
            symmetrization_stage(config, d, derive_seed(seed, salt("symmetrize")))?;
        checks.extend(sym_checks);
        tables.push(("symmetrization".to_string(), sym_table));
    }
    Ok((checks, tables))
}

fn symmetrization_stage(config: &Config, d: usize, seed: u64) -> Result<(Vec<Check>, Report)> {
    let instances: usize = config.parse_or("analysis", "sym_instances", 100)?;
    let configs: usize = config.parse_or("analysis", "sym_configs", 20)?;
    struct Row {
        k: usize,
        idempotent: bool,
        energy_h: f64,
        energy_sym: f64,
    }
    let rows = par::try_map_indexed(instances, |i| -> Result<Row> {
        let mut rng = replica_rng(seed, i as u64);
        let k = 1 + i % 2;
        let h = random_cylinder(k, d, &mut rng);
        let points = |m: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let m = rng.random_range(k..=EXACT_SYMMETRIZE_MAX);
        let all = points(m, &mut rng);
        let (x, s) = all.split_at(k * d);
        let sym = Symmetrized {
            inner: &h,
            mode: SymmetrizeMode::Exact,
        };
        let once = symmetrize(&h, x, s, SymmetrizeMode::Exact)?;
        let twice = symmetrize(&sym, x, s, SymmetrizeMode::Exact)?;
        let (mut energy_h, mut energy_sym) = (0.0, 0.0);
        for _ in 0..configs {
            let m = rng.random_range(k..=EXACT_SYMMETRIZE_MAX);
            let (eh, es) = symmetrization_energies(&h, &points(m, &mut rng))?;
            energy_h += eh;
            energy_sym += es;
        }
        Ok(Row {
            k,
            idempotent: once == twice,
            energy_h: energy_h / configs as f64,
            energy_sym: energy_sym / configs as f64,
        })
    })?;
    let mut table = Report::new(&["instance", "k", "idempotent", "energy_h", "energy_sym"]);
    for (i, r) in rows.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            r.k.to_string(),
            r.idempotent.to_string(),
            num(r.energy_h),
            num(r.energy_sym),
        ]);
    }
    let not_idem = rows.iter().filter(|r| !r.idempotent).count();
    let not_contracting = rows
        .iter()
        .filter(|r| r.energy_sym > r.energy_h * (1.0 + 1e-12))
        .count();
    let checks = vec![
        Check::new(
            "symmetrization idempotent",
            not_idem == 0,
            format!("{not_idem} of {instances} differ"),
        ),
        Check::new(
            "energy contraction",
            not_contracting == 0,
            format!("{not_contracting} of {instances} violate"),
        ),
    ];
    Ok((checks, table))
}
