//! The `ibm-sim` command line.

pub mod pipelines;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    campbell_check, estimate_rho, explosion_scan, msd, pushforward_check, Bins, BoxRegion,
    EstimateOptions, LabeledRoute, PushforwardSpec,
};
use crate::configuration::{label, Domain, Geometry, LabelRule};
use crate::dynamics::simulate;
use crate::persistence::{
    read_configuration, read_trajectory, write_configuration, write_trajectory, Config,
    CoordFormat, Manifest, Report,
};
use crate::rng::{derive_seed, salt};
use pipelines::{
    builtin_config, run_and_write, sampler_from_config, status, PipelineOutcome, DEFAULT_SEED,
};

#[derive(Debug, Parser)]
#[command(
    name = "ibm-sim",
    version,
    about = "Interacting Brownian motions: simulation and numerical checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Config file (INI with [domain] [potentials] [sampler] [sim] [analysis]).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Decimal,
    Hex,
}

impl From<Format> for CoordFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Decimal => CoordFormat::Decimal,
            Format::Hex => CoordFormat::Hex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    Rho1,
    Rho2,
    Campbell,
    Pushforward,
    Nonexplosion,
    Msd,
    Explosion,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one configuration from the configured sampler.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "decimal")]
        format: Format,
    },
    /// Integrate the dynamics from a sampled or given initial configuration.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Initial configuration file; sampled from [sampler] when absent.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "decimal")]
        format: Format,
    },
    /// Estimators and checks on samples or trajectories.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        /// Configuration files (rho1, rho2) or trajectory files (msd, explosion).
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Finite-difference checks of the form identities.
    CheckForms {
        #[command(flatten)]
        common: Common,
        /// iota, product, symmetrization or all.
        #[arg(long, default_value = "all")]
        identity: String,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
    },
    /// Grid evaluation of the non-explosion criterion.
    CheckExplosion {
        #[command(flatten)]
        common: Common,
        /// Radial intensity, e.g. `const:1`, `exp:0.5`, `gauss:1`. Repeatable.
        #[arg(long)]
        profile: Vec<String>,
    },
    /// Run a named pipeline.
    Run {
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// List the built-in pipelines.
    List,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn load_config(common: &Common, fallback: Option<&str>) -> anyhow::Result<Config> {
    match (&common.config, fallback) {
        (Some(path), _) => {
            Config::load(path).with_context(|| format!("loading {}", path.display()))
        }
        (None, Some(name)) => Ok(builtin_config(name)?),
        (None, None) => bail!("--config is required"),
    }
}

fn require_out(common: &Common) -> anyhow::Result<&Path> {
    common.out.as_deref().context("--out is required")
}

fn manifest_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn finish(manifest: &mut Manifest, start: Instant, dir: &Path) -> anyhow::Result<()> {
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.append(dir)?;
    Ok(())
}

fn print_outcome(outcome: &PipelineOutcome) {
    for c in &outcome.checks {
        println!("{:<4} {:<40} {}", status(c.passed), c.name, c.detail);
    }
    println!("{}: {}", outcome.name, status(outcome.passed()));
}

fn execute(command: Command) -> anyhow::Result<bool> {
    let start = Instant::now();
    match command {
        Command::List => {
            for name in pipelines::pipeline_names() {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Sample { common, format } => {
            let config = load_config(&common, None)?;
            let out = require_out(&common)?;
            let sampler = sampler_from_config(&config)?;
            let mut manifest = Manifest::new(&config, "sample", common.seed);
            let sample = sampler.sample(common.seed)?;
            write_configuration(out, &sample, format.into(), Some(&manifest.spec_hash))?;
            finish(&mut manifest, start, manifest_dir(out))?;
            println!(
                "{} points from {} -> {}",
                sample.len(),
                sampler.describe(),
                out.display()
            );
            Ok(true)
        }
        Command::Simulate {
            common,
            initial,
            format,
        } => {
            let config = load_config(&common, None)?;
            let out = require_out(&common)?;
            let mut manifest = Manifest::new(&config, "simulate", common.seed);
            let (start_config, source) = match &initial {
                Some(path) => (
                    read_configuration(path)?,
                    format!("file {}", path.display()),
                ),
                None => {
                    let sampler = sampler_from_config(&config)?;
                    (
                        sampler.sample(derive_seed(common.seed, salt("initial")))?,
                        sampler.describe(),
                    )
                }
            };
            let params = config.sim_params(common.seed)?;
            let state = label(&start_config, LabelRule::Lexicographic)?;
            let mut traj = simulate(&state, &config.potentials()?, &params)?;
            traj.provenance.sampler = source;
            traj.provenance.config_hash = manifest.spec_hash.clone();
            write_trajectory(out, &traj, format.into())?;
            finish(&mut manifest, start, manifest_dir(out))?;
            println!(
                "{} particles, {} snapshots -> {}",
                traj.n,
                traj.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Analyze {
            common,
            kind,
            input,
        } => analyze(&common, kind, &input, start),
        Command::CheckForms {
            common,
            identity,
            samples,
            h,
        } => {
            let mut config = load_config(&common, Some("forms-suite"))?;
            if identity != "all" {
                config.set("analysis", "identities", identity);
            }
            if let Some(n) = samples {
                config.set("analysis", "iota_samples", n.to_string());
                config.set("analysis", "product_samples", n.to_string());
                config.set("analysis", "sym_instances", n.to_string());
            }
            if let Some(h) = h {
                config.set("analysis", "iota_h", format!("{h:e}"));
                config.set("analysis", "product_h", format!("{h:e}"));
            }
            run_named("forms-suite", &config, &common)
        }
        Command::CheckExplosion { common, profile } => {
            let mut config = load_config(&common, Some("nonexplosion-suite"))?;
            if !profile.is_empty() {
                config.set("analysis", "profiles", profile.join(","));
                config.set("analysis", "expected", vec!["NA"; profile.len()].join(","));
            }
            run_named("nonexplosion-suite", &config, &common)
        }
        Command::Run { name, common } => {
            let config = load_config(&common, Some(&name))?;
            run_named(&name, &config, &common)
        }
    }
}

fn run_named(name: &str, config: &Config, common: &Common) -> anyhow::Result<bool> {
    let (outcome, manifest) = run_and_write(name, config, common.seed, common.out.as_deref())?;
    print_outcome(&outcome);
    if let Some(dir) = &common.out {
        println!(
            "reports in {} (manifest {})",
            dir.display(),
            manifest.short()
        );
    }
    Ok(outcome.passed())
}

/// Box covering the domain (the inscribed cube for a ball).
fn domain_box(domain: &Domain) -> anyhow::Result<BoxRegion> {
    let d = domain.dim;
    Ok(match domain.geometry {
        Geometry::Torus { side } => BoxRegion::new(vec![0.0; d], vec![side; d]),
        Geometry::Ball { radius } => {
            let h = radius / (d as f64).sqrt();
            BoxRegion::new(vec![-h; d], vec![h; d])
        }
        Geometry::Free => bail!("a bounded domain is needed for binning"),
    })
}

fn analyze(
    common: &Common,
    kind: AnalysisKind,
    input: &[PathBuf],
    start: Instant,
) -> anyhow::Result<bool> {
    if kind == AnalysisKind::Nonexplosion {
        let config = load_config(common, Some("nonexplosion-suite"))?;
        return run_named("nonexplosion-suite", &config, common);
    }
    let config = load_config(common, None)?;
    let out = require_out(common)?;
    let command = format!("analyze {kind:?}").to_lowercase();
    let mut manifest = Manifest::new(&config, &command, common.seed);
    let opts = EstimateOptions {
        seed: common.seed,
        ..Default::default()
    };
    let mut passed = true;
    let report = match kind {
        AnalysisKind::Rho1 | AnalysisKind::Rho2 => {
            if input.is_empty() {
                bail!("--input needs at least one configuration file");
            }
            let samples = input
                .iter()
                .map(|p| read_configuration(p).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            let domain = *samples[0].domain();
            let (order, bins) = if kind == AnalysisKind::Rho1 {
                (
                    1,
                    Bins::grid(
                        &domain_box(&domain)?,
                        config.parse_or("analysis", "grid", 4)?,
                    ),
                )
            } else {
                (
                    2,
                    Bins::Separation {
                        width: config.parse_or("analysis", "bin_width", 0.2)?,
                        r_max: config.parse_or("analysis", "r_max", 2.0)?,
                    },
                )
            };
            let est = estimate_rho(&samples, order, &bins, opts)?;
            let mut r = Report::new(&["bin", "value", "se", "count"]);
            for (b, v, se, c) in est.rows() {
                r.push(vec![
                    b.to_string(),
                    format!("{v:.6e}"),
                    format!("{se:.6e}"),
                    format!("{c:.0}"),
                ]);
            }
            r
        }
        AnalysisKind::Campbell => {
            let sampler = sampler_from_config(&config)?;
            let replicas: usize = config.parse_or("analysis", "replicas", 10_000)?;
            let subdivisions: usize = config.parse_or("analysis", "subdivisions", 4)?;
            let ks: Vec<usize> = config.list("analysis", "ks")?.unwrap_or_else(|| vec![1, 1]);
            let cells = domain_box(&sampler.domain())?.subdivide(2);
            let sets: Vec<BoxRegion> = cells.into_iter().take(ks.len()).collect();
            let samples = crate::par::try_map_indexed(replicas, |i| {
                sampler.sample(derive_seed(common.seed, i as u64))
            })?;
            let c = campbell_check(&samples, &sets, &ks, subdivisions)?;
            passed = c.passes(3.0);
            let mut r = Report::new(&["lhs", "lhs_se", "rhs", "rhs_se", "z"]);
            r.push(
                vec![c.lhs.mean, c.lhs.se, c.rhs.mean, c.rhs.se, c.z]
                    .iter()
                    .map(|v| format!("{v:.6e}"))
                    .collect(),
            );
            r
        }
        AnalysisKind::Pushforward => {
            let sampler = sampler_from_config(&config)?;
            let route = match config.get("sampler", "kind").unwrap_or("poisson") {
                "poisson" => LabeledRoute::Slivnyak {
                    intensity: config.parse_or("sampler", "intensity", 1.0)?,
                },
                _ => LabeledRoute::Mecke,
            };
            let spec = PushforwardSpec {
                r: config.parse_or("analysis", "r", 1.0)?,
                k: config.parse_or("analysis", "k", 1)?,
                n_cap: config.parse_or("analysis", "n_cap", 12)?,
                replicas: config.parse_or("analysis", "replicas", 10_000)?,
                seed: common.seed,
            };
            let f = |c: &crate::Configuration| {
                c.points()
                    .map(|p| (-p.iter().map(|v| v * v).sum::<f64>()).exp())
                    .sum::<f64>()
            };
            let c = pushforward_check(sampler.as_ref(), route, spec, &f)?;
            passed = c.passes(3.0);
            let mut r = Report::new(&["lhs", "lhs_se", "rhs", "rhs_se", "z"]);
            r.push(
                vec![c.lhs.mean, c.lhs.se, c.rhs.mean, c.rhs.se, c.z]
                    .iter()
                    .map(|v| format!("{v:.6e}"))
                    .collect(),
            );
            r
        }
        AnalysisKind::Msd | AnalysisKind::Explosion => {
            if input.is_empty() {
                bail!("--input needs at least one trajectory file");
            }
            let trajs = input
                .iter()
                .map(|p| read_trajectory(p).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            if kind == AnalysisKind::Msd {
                let curve = msd(&trajs, config.parse_or("analysis", "tag", 0)?, common.seed)?;
                let mut r = Report::new(&["t", "msd", "se"]);
                for i in 0..curve.times.len() {
                    r.push(vec![
                        format!("{:.6e}", curve.times[i]),
                        format!("{:.6e}", curve.mean[i]),
                        format!("{:.6e}", curve.se[i]),
                    ]);
                }
                println!(
                    "msd slope {:.4} over {} replicas",
                    curve.slope(),
                    curve.replicas
                );
                r
            } else {
                let table = explosion_scan(
                    &trajs,
                    config.parse_or("analysis", "r", 1.0)?,
                    config.parse_or("analysis", "bound", 10.0)?,
                );
                let mut r = Report::new(&["t", "fraction"]);
                for (t, f) in table.times.iter().zip(&table.fraction) {
                    r.push(vec![format!("{t:.6e}"), format!("{f:.6e}")]);
                }
                r
            }
        }
        AnalysisKind::Nonexplosion => unreachable!(),
    };
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{}.tsv", command.replace(' ', "-")));
    report.write(&path, &manifest, &config)?;
    finish(&mut manifest, start, out)?;
    println!("{} -> {}", status(passed), path.display());
    Ok(passed)
}
