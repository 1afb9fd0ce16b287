//! Text file formats: trajectories, configurations, run configs, manifests
//! and TSV reports.
//!
//! Floats are written either as 17 significant decimal digits or as the raw
//! IEEE-754 bits in hex; both read back bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::configuration::{Configuration, Domain, Geometry};
use crate::dynamics::{
    Frame, HardCoreMode, PairPotential, PotentialSpec, Provenance, SelfPotential, SimParams,
    Trajectory,
};

pub const TRAJECTORY_MAGIC: &str = "ibm-sim-trajectory";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifests.tsv";

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("{0} already exists; runs never overwrite earlier outputs")]
    AlreadyExists(PathBuf),
    #[error("config [{section}] {key}: {message}")]
    InvalidValue {
        section: String,
        key: String,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistenceError + '_ {
    move |source| PersistenceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(line: usize, message: impl Into<String>) -> PersistenceError {
    PersistenceError::Format {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordFormat {
    #[default]
    Decimal,
    Hex,
}

impl CoordFormat {
    pub fn write(self, v: f64) -> String {
        match self {
            CoordFormat::Decimal => format!("{v:.16e}"),
            CoordFormat::Hex => format!("0x{:016x}", v.to_bits()),
        }
    }

    fn name(self) -> &'static str {
        match self {
            CoordFormat::Decimal => "dec",
            CoordFormat::Hex => "hex",
        }
    }
}

impl std::str::FromStr for CoordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dec" => Ok(CoordFormat::Decimal),
            "hex" => Ok(CoordFormat::Hex),
            other => Err(format!("unknown coordinate format {other:?}")),
        }
    }
}

/// Parses either float spelling.
pub fn parse_float(s: &str) -> Result<f64, String> {
    if let Some(h) = s.strip_prefix("0x") {
        u64::from_str_radix(h, 16)
            .map(f64::from_bits)
            .map_err(|e| format!("bad hex float {s:?}: {e}"))
    } else {
        s.parse::<f64>()
            .map_err(|e| format!("bad float {s:?}: {e}"))
    }
}

fn geometry_fields(domain: &Domain) -> (&'static str, String) {
    match domain.geometry {
        Geometry::Torus { side } => ("torus", format!("{side:?}")),
        Geometry::Ball { radius } => ("ball", format!("{radius:?}")),
        Geometry::Free => ("free", "none".to_string()),
    }
}

fn parse_domain(dim: usize, geometry: &str, size: &str) -> Result<Domain, String> {
    let g = match geometry {
        "torus" => Geometry::Torus {
            side: parse_float(size)?,
        },
        "ball" => Geometry::Ball {
            radius: parse_float(size)?,
        },
        "free" => Geometry::Free,
        other => return Err(format!("unknown geometry {other:?}")),
    };
    Domain::new(dim, g).map_err(|e| e.to_string())
}

fn write_new(path: &Path, contents: &str) -> Result<(), PersistenceError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                PersistenceError::AlreadyExists(path.to_path_buf())
            } else {
                PersistenceError::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

/// Serializes a trajectory.
pub fn trajectory_to_string(traj: &Trajectory, fmt: CoordFormat) -> String {
    let d = traj.dim();
    let (geometry, size) = geometry_fields(&traj.domain);
    let p = &traj.params;
    let mut out = String::new();
    let _ = writeln!(out, "{TRAJECTORY_MAGIC}");
    let _ = writeln!(out, "version={FORMAT_VERSION}");
    let _ = writeln!(out, "dim={d}");
    let _ = writeln!(out, "n={}", traj.n);
    let _ = writeln!(out, "geometry={geometry}");
    let _ = writeln!(out, "size={size}");
    match traj.frame {
        Frame::Labeled { k } => {
            let _ = writeln!(out, "frame=labeled\nk={k}");
        }
        Frame::Tagged => {
            let _ = writeln!(out, "frame=tagged\nk=0");
        }
    }
    let _ = writeln!(out, "coord_format={}", fmt.name());
    let _ = writeln!(out, "dt={:?}", p.dt);
    let _ = writeln!(out, "t_end={:?}", p.t_end);
    let _ = writeln!(out, "stride={}", p.stride);
    let _ = writeln!(out, "seed={}", p.seed);
    let _ = writeln!(
        out,
        "cell_size={}",
        p.cell_size.map_or("none".to_string(), |c| format!("{c:?}"))
    );
    let _ = writeln!(out, "hard_core={}", p.hard_core);
    let _ = writeln!(out, "max_retries={}", p.max_retries);
    let _ = writeln!(out, "sampler={}", traj.provenance.sampler);
    let _ = writeln!(out, "manifest={}", traj.provenance.config_hash);
    let _ = writeln!(out, "capped_pairs={}", traj.capped_pairs);
    let _ = writeln!(out, "rejected_steps={}", traj.rejected_steps);
    let md: Vec<String> = traj
        .max_displacement
        .iter()
        .map(|v| fmt.write(*v))
        .collect();
    let _ = writeln!(out, "max_displacement={}", md.join(" "));
    let _ = writeln!(out, "snapshots={}", traj.len());
    let _ = writeln!(out, "end_header");
    for (t, frame) in traj.times.iter().zip(&traj.frames) {
        let _ = writeln!(out, "t={}", fmt.write(*t));
        for p in frame.chunks_exact(d.max(1)) {
            let row: Vec<String> = p.iter().map(|v| fmt.write(*v)).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

pub fn write_trajectory(
    path: &Path,
    traj: &Trajectory,
    fmt: CoordFormat,
) -> Result<(), PersistenceError> {
    write_new(path, &trajectory_to_string(traj, fmt))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str), PersistenceError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(format_err(
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    fn key(&mut self, key: &str) -> Result<(usize, &'a str), PersistenceError> {
        let (n, l) = self.next_line(key)?;
        match l.split_once('=') {
            Some((k, v)) if k == key => Ok((n, v)),
            _ => Err(format_err(n, format!("expected `{key}=...`, found {l:?}"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, PersistenceError>
    where
        T::Err: std::fmt::Display,
    {
        let (n, v) = self.key(key)?;
        v.parse::<T>()
            .map_err(|e| format_err(n, format!("{key}: {e}")))
    }

    fn float(&mut self, key: &str) -> Result<f64, PersistenceError> {
        let (n, v) = self.key(key)?;
        parse_float(v).map_err(|e| format_err(n, e))
    }
}

/// Parses a trajectory file's contents.
pub fn trajectory_from_str(text: &str) -> Result<Trajectory, PersistenceError> {
    let mut lines = Lines::new(text);
    let (n0, magic) = lines.next_line("header")?;
    if magic != TRAJECTORY_MAGIC {
        return Err(format_err(
            n0,
            format!("not a trajectory file (first line {magic:?})"),
        ));
    }
    let (_, version) = lines.key("version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(PersistenceError::VersionMismatch {
            found: version.to_string(),
        });
    }
    let dim: usize = lines.parsed("dim")?;
    let n: usize = lines.parsed("n")?;
    let (gl, geometry) = lines.key("geometry")?;
    let (_, size) = lines.key("size")?;
    let domain = parse_domain(dim, geometry, size).map_err(|e| format_err(gl, e))?;
    let (fl, frame) = lines.key("frame")?;
    let k: usize = lines.parsed("k")?;
    let frame = match frame {
        "labeled" => Frame::Labeled { k },
        "tagged" => Frame::Tagged,
        other => return Err(format_err(fl, format!("unknown frame {other:?}"))),
    };
    let (cl, cf) = lines.key("coord_format")?;
    cf.parse::<CoordFormat>().map_err(|e| format_err(cl, e))?;
    let dt = lines.float("dt")?;
    let t_end = lines.float("t_end")?;
    let stride: usize = lines.parsed("stride")?;
    let seed: u64 = lines.parsed("seed")?;
    let (csl, cs) = lines.key("cell_size")?;
    let cell_size = if cs == "none" {
        None
    } else {
        Some(parse_float(cs).map_err(|e| format_err(csl, e))?)
    };
    let hard_core: HardCoreMode = lines.parsed("hard_core")?;
    let max_retries: u32 = lines.parsed("max_retries")?;
    let (_, sampler) = lines.key("sampler")?;
    let (_, manifest) = lines.key("manifest")?;
    let capped_pairs: u64 = lines.parsed("capped_pairs")?;
    let rejected_steps: u64 = lines.parsed("rejected_steps")?;
    let (ml, md) = lines.key("max_displacement")?;
    let max_displacement = md
        .split_whitespace()
        .map(parse_float)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(ml, e))?;
    let snapshots: usize = lines.parsed("snapshots")?;
    let (el, end) = lines.next_line("end_header")?;
    if end != "end_header" {
        return Err(format_err(
            el,
            format!("expected end_header, found {end:?}"),
        ));
    }
    let mut times = Vec::with_capacity(snapshots);
    let mut frames = Vec::with_capacity(snapshots);
    for _ in 0..snapshots {
        times.push(lines.float("t")?);
        let mut coords = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let (ln, row) = lines.next_line("a coordinate row")?;
            let vals = row
                .split_whitespace()
                .map(parse_float)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format_err(ln, e))?;
            if vals.len() != dim {
                return Err(format_err(
                    ln,
                    format!("expected {dim} coordinates, found {}", vals.len()),
                ));
            }
            coords.extend(vals);
        }
        frames.push(coords);
    }
    if let Ok((ln, extra)) = lines.next_line("") {
        if !extra.trim().is_empty() {
            return Err(format_err(ln, "trailing content after the last snapshot"));
        }
    }
    let params = SimParams {
        dt,
        t_end,
        stride,
        seed,
        cell_size,
        hard_core,
        max_retries,
    };
    Ok(Trajectory {
        domain,
        n,
        frame,
        times,
        frames,
        params,
        provenance: Provenance {
            sampler: sampler.to_string(),
            config_hash: manifest.to_string(),
        },
        max_displacement,
        capped_pairs,
        rejected_steps,
    })
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, PersistenceError> {
    trajectory_from_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// `# d=<d> geometry=<..> size=<..>` then one point per line.
pub fn configuration_to_string(
    config: &Configuration,
    fmt: CoordFormat,
    manifest: Option<&str>,
) -> String {
    let (geometry, size) = geometry_fields(config.domain());
    let mut out = format!("# d={} geometry={geometry} size={size}\n", config.dim());
    if let Some(m) = manifest {
        let _ = writeln!(out, "# manifest={m}");
    }
    for p in config.points() {
        let row: Vec<String> = p.iter().map(|v| fmt.write(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn configuration_from_str(text: &str) -> Result<Configuration, PersistenceError> {
    let mut lines = text.lines().enumerate();
    let (_, head) = lines
        .next()
        .ok_or_else(|| format_err(1, "empty configuration file"))?;
    let fields: BTreeMap<&str, &str> = head
        .strip_prefix('#')
        .unwrap_or("")
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| format_err(1, format!("header lacks {k}=")))
    };
    let dim: usize = get("d")?
        .parse()
        .map_err(|e| format_err(1, format!("d: {e}")))?;
    let domain = parse_domain(dim, get("geometry")?, get("size")?).map_err(|e| format_err(1, e))?;
    let mut coords = Vec::new();
    for (i, l) in lines {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let vals = l
            .split_whitespace()
            .map(parse_float)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format_err(i + 1, e))?;
        if vals.len() != dim {
            return Err(format_err(
                i + 1,
                format!("expected {dim} coordinates, found {}", vals.len()),
            ));
        }
        coords.extend(vals);
    }
    Configuration::new(domain, coords).map_err(|e| format_err(1, e.to_string()))
}

pub fn write_configuration(
    path: &Path,
    config: &Configuration,
    fmt: CoordFormat,
    manifest: Option<&str>,
) -> Result<(), PersistenceError> {
    write_new(path, &configuration_to_string(config, fmt, manifest))
}

pub fn read_configuration(path: &Path) -> Result<Configuration, PersistenceError> {
    configuration_from_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Sectioned `key=value` run configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

pub const SECTIONS: [&str; 5] = ["domain", "potentials", "sampler", "sim", "analysis"];

impl Config {
    pub fn parse(text: &str) -> Result<Self, PersistenceError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(format_err(i + 1, format!("unknown section [{name}]")));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format_err(
                    i + 1,
                    format!("expected key=value, found {line:?}"),
                ));
            };
            let Some(sec) = &current else {
                return Err(format_err(i + 1, "key outside any section"));
            };
            let prev = sections
                .entry(sec.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(format_err(i + 1, format!("duplicate key {}", k.trim())));
            }
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self, PersistenceError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    fn invalid(section: &str, key: &str, message: impl Into<String>) -> PersistenceError {
        PersistenceError::InvalidValue {
            section: section.into(),
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, PersistenceError> {
        self.get(section, key)
            .ok_or_else(|| Self::invalid(section, key, "missing"))
    }

    pub fn parse_or<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T, PersistenceError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| Self::invalid(section, key, e.to_string())),
        }
    }

    pub fn parse_req<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<T, PersistenceError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.require(section, key)?;
        v.parse()
            .map_err(|e: T::Err| Self::invalid(section, key, e.to_string()))
    }

    /// Comma-separated list.
    pub fn list<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<Vec<T>>, PersistenceError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|e: T::Err| Self::invalid(section, key, e.to_string()))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Sorted, comment-free rendering; the input to the spec hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (name, kv) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k}={v}");
            }
        }
        out
    }

    pub fn domain(&self) -> Result<Domain, PersistenceError> {
        let dim: usize = self.parse_req("domain", "dim")?;
        let geometry = self.get("domain", "geometry").unwrap_or("torus");
        let size = self.get("domain", "size").unwrap_or("none");
        parse_domain(dim, geometry, size).map_err(|e| Self::invalid("domain", "geometry", e))
    }

    pub fn potentials(&self) -> Result<PotentialSpec, PersistenceError> {
        let phi = parse_self_potential(self.get("potentials", "phi").unwrap_or("none"))
            .map_err(|e| Self::invalid("potentials", "phi", e))?;
        let psi = parse_pair_potential(self.get("potentials", "psi").unwrap_or("none"))
            .map_err(|e| Self::invalid("potentials", "psi", e))?;
        let default_cut = match psi {
            PairPotential::None => 0.0,
            PairPotential::HardCore { sigma } => sigma,
            PairPotential::LennardJones { sigma, .. } | PairPotential::SoftCore { sigma, .. } => {
                2.5 * sigma
            }
            PairPotential::Gaussian { sigma, .. } => 4.0 * sigma,
            PairPotential::Harmonic { .. } => f64::INFINITY,
        };
        let r_cut = match self.get("potentials", "r_cut") {
            None => default_cut,
            Some(v) => parse_float(v).map_err(|e| Self::invalid("potentials", "r_cut", e))?,
        };
        Ok(PotentialSpec { phi, psi, r_cut })
    }

    pub fn sim_params(&self, seed: u64) -> Result<SimParams, PersistenceError> {
        let d = SimParams::default();
        let cell_size = match self.get("sim", "cell_size") {
            None | Some("none") => None,
            Some(v) => Some(parse_float(v).map_err(|e| Self::invalid("sim", "cell_size", e))?),
        };
        let p = SimParams {
            dt: self.parse_or("sim", "dt", d.dt)?,
            t_end: self.parse_or("sim", "t_end", d.t_end)?,
            stride: self.parse_or("sim", "stride", d.stride)?,
            seed,
            cell_size,
            hard_core: self.parse_or("sim", "hard_core", d.hard_core)?,
            max_retries: self.parse_or("sim", "max_retries", d.max_retries)?,
        };
        p.validate()
            .map_err(|e| Self::invalid("sim", "*", e.to_string()))?;
        Ok(p)
    }
}

fn numbers(spec: &str) -> Result<Vec<f64>, String> {
    spec.split(',').map(|x| parse_float(x.trim())).collect()
}

/// `none`, `harmonic:<a>`.
pub fn parse_self_potential(s: &str) -> Result<SelfPotential, String> {
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    match kind.trim() {
        "none" => Ok(SelfPotential::None),
        "harmonic" => Ok(SelfPotential::Harmonic {
            a: parse_float(args.trim())?,
        }),
        other => Err(format!("unknown self potential {other:?}")),
    }
}

/// `none`, `harmonic:<a>`, `lj:<eps>,<sigma>`, `softcore:<eps>,<sigma>`,
/// `gaussian:<eps>,<sigma>`, `hardcore:<sigma>`.
pub fn parse_pair_potential(s: &str) -> Result<PairPotential, String> {
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    let two = |args: &str| -> Result<(f64, f64), String> {
        match numbers(args)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(format!("{kind} takes eps,sigma")),
        }
    };
    match kind.trim() {
        "none" => Ok(PairPotential::None),
        "harmonic" => Ok(PairPotential::Harmonic {
            a: parse_float(args.trim())?,
        }),
        "lj" => two(args).map(|(eps, sigma)| PairPotential::LennardJones { eps, sigma }),
        "softcore" => two(args).map(|(eps, sigma)| PairPotential::SoftCore { eps, sigma }),
        "gaussian" => two(args).map(|(eps, sigma)| PairPotential::Gaussian { eps, sigma }),
        "hardcore" => Ok(PairPotential::HardCore {
            sigma: parse_float(args.trim())?,
        }),
        other => Err(format!("unknown pair potential {other:?}")),
    }
}

/// Identity of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec_hash: String,
    pub seed: u64,
    pub version: String,
    pub command: String,
    pub wall_time_s: f64,
}

/// SHA-256 over the canonical config, the command and the seed.
pub fn spec_hash(config: &Config, command: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config.canonical().as_bytes());
    h.update(format!("command={command}\nseed={seed}\n").as_bytes());
    hex::encode(h.finalize())
}

impl Manifest {
    pub fn new(config: &Config, command: &str, seed: u64) -> Self {
        Self {
            spec_hash: spec_hash(config, command, seed),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            wall_time_s: 0.0,
        }
    }

    /// First 16 hex digits, used in file headers.
    pub fn short(&self) -> &str {
        &self.spec_hash[..16]
    }

    /// Appends one row to `<dir>/manifests.tsv`, creating it with a header if needed.
    pub fn append(&self, dir: &Path) -> Result<(), PersistenceError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut row = String::new();
        if fresh {
            row.push_str("spec_hash\tseed\tversion\tcommand\twall_time_s\n");
        }
        let _ = writeln!(
            row,
            "{}\t{}\t{}\t{}\t{:.3}",
            self.spec_hash, self.seed, self.version, self.command, self.wall_time_s
        );
        f.write_all(row.as_bytes()).map_err(io_err(&path))
    }
}

/// Reads every row of a manifest file.
pub fn read_manifests(dir: &Path) -> Result<Vec<Manifest>, PersistenceError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(format_err(i + 1, "expected 5 fields"));
            }
            Ok(Manifest {
                spec_hash: f[0].to_string(),
                seed: f[1].parse().map_err(|_| format_err(i + 1, "bad seed"))?,
                version: f[2].to_string(),
                command: f[3].to_string(),
                wall_time_s: f[4]
                    .parse()
                    .map_err(|_| format_err(i + 1, "bad wall time"))?,
            })
        })
        .collect()
}

/// A TSV table with a comment header naming the manifest and the full config.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, manifest: &Manifest, config: &Config) -> String {
        let mut out = format!(
            "# manifest={}\n# command={} seed={}\n",
            manifest.spec_hash, manifest.command, manifest.seed
        );
        for l in config.canonical().lines() {
            let _ = writeln!(out, "# config {l}");
        }
        let _ = writeln!(out, "{}", self.columns.join("\t"));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join("\t"));
        }
        out
    }

    pub fn write(
        &self,
        path: &Path,
        manifest: &Manifest,
        config: &Config,
    ) -> Result<(), PersistenceError> {
        write_new(path, &self.render(manifest, config))
    }
}

/// Creates `path` for writing, refusing to replace an existing file.
pub fn create_new(path: &Path) -> Result<File, PersistenceError> {
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                PersistenceError::AlreadyExists(path.to_path_buf())
            } else {
                PersistenceError::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })
}
