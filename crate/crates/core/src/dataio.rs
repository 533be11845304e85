//! Run configuration, seeded randomness, trajectory CSV files with their
//! metadata sidecars, and the binary weight archive.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{gauge_residual, LiftedPoint, LiftedShape, PhasePoint};
use crate::integrators::{
    generate_trajectory, GeneratedTrajectory, LiftedTrajectory, Trajectory, TrajectoryMeta,
};
use crate::nets::NamedTensor;
use crate::par::{self, Exec};
use crate::systems::{self, ControlSignal, SystemSpec};
use crate::training::{EpochMetrics, TrainConfig};

/// ChaCha20 stream cipher generator (20 rounds) seeded through
/// `SeedableRng::seed_from_u64`. Streams are platform independent.
pub type SeededRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    /// Sample spacing of the emitted data.
    pub dt: f64,
    /// Number of data steps per trajectory (`steps + 1` samples).
    pub steps: usize,
    /// Reference RK4 steps per data step.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub trajectories: usize,
    pub seed: u64,
    /// Initial minimal coordinates are drawn uniformly from `±position_range`.
    #[serde(default)]
    pub position_range: f64,
    /// Initial minimal rates are drawn uniformly from `±velocity_range`.
    #[serde(default)]
    pub velocity_range: f64,
    /// Fixed initial state; overrides the random draw when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_p: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub sympnet_modules: usize,
    pub sympnet_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            sympnet_modules: 6,
            sympnet_width: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

fn zero_control() -> ControlSignal {
    ControlSignal::Zero
}

/// Complete description of a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    #[serde(default = "zero_control")]
    pub control: ControlSignal,
    pub integrator: IntegratorConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train_psn: TrainConfig,
    #[serde(default)]
    pub train_sympnet: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Replaces every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train_psn.seed = seed;
        self.train_sympnet.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.integrator.dt > 0.0) || !self.integrator.dt.is_finite() {
            return bad(format!(
                "integrator.dt must be positive, got {}",
                self.integrator.dt
            ));
        }
        if self.integrator.substeps == 0 {
            return bad("integrator.substeps must be at least 1".into());
        }
        if self.dataset.position_range < 0.0 || self.dataset.velocity_range < 0.0 {
            return bad("dataset ranges must be non-negative".into());
        }
        if self.model.hidden == 0 || self.model.sympnet_width == 0 {
            return bad("model widths must be at least 1".into());
        }
        self.control.validate().map_err(Error::Config)?;
        self.train_psn
            .validate()
            .map_err(|e| Error::Config(format!("train_psn: {e}")))?;
        self.train_sympnet
            .validate()
            .map_err(|e| Error::Config(format!("train_sympnet: {e}")))?;
        let sys = self.system.build();
        if let (Some(q), Some(p)) = (&self.dataset.initial_q, &self.dataset.initial_p) {
            if q.len() != sys.n_q() || p.len() != sys.n_p() {
                return bad(format!(
                    "dataset.initial_q/initial_p must have {} and {} entries",
                    sys.n_q(),
                    sys.n_p()
                ));
            }
        } else if self.dataset.initial_q.is_some() || self.dataset.initial_p.is_some() {
            return bad("dataset.initial_q and dataset.initial_p must be given together".into());
        }
        Ok(())
    }

    /// Per-trajectory seeds, drawn from the dataset seed.
    pub fn trajectory_seeds(&self) -> Vec<u64> {
        let mut rng = seeded_rng(self.dataset.seed);
        (0..self.dataset.trajectories).map(|_| rng.gen()).collect()
    }

    /// Initial state of the trajectory with the given seed.
    pub fn initial_state(&self, seed: u64) -> PhasePoint {
        let sys = self.system.build();
        let u0 = vec![0.0; sys.n_u()];
        if let (Some(q), Some(p)) = (&self.dataset.initial_q, &self.dataset.initial_p) {
            return PhasePoint::new(q.clone(), p.clone(), 0.0, u0);
        }
        let mut rng = seeded_rng(seed);
        let n = sys.n_minimal();
        let mut draw = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let coords: Vec<f64> = (0..n).map(|_| draw(self.dataset.position_range)).collect();
        let rates: Vec<f64> = (0..n).map(|_| draw(self.dataset.velocity_range)).collect();
        let (q, p) = sys.state_from_minimal(&coords, &rates);
        PhasePoint::new(q, p, 0.0, u0)
    }
}

/// Generates every trajectory described by `cfg`, in trajectory order.
pub fn generate_dataset(cfg: &RunConfig, exec: Exec) -> Result<Vec<GeneratedTrajectory>> {
    let seeds = cfg.trajectory_seeds();
    let results = par::map_range(exec, seeds.len(), |i| {
        let sys = cfg.system.build();
        let seed = seeds[i];
        let x0 = cfg.initial_state(seed);
        let ctrl = cfg.control.reseeded(seed);
        let mut out = generate_trajectory(
            sys.as_ref(),
            &x0,
            &ctrl,
            cfg.integrator.steps,
            cfg.integrator.dt,
            cfg.integrator.substeps,
        )
        .map_err(|e| e.in_trajectory(i as u64))?;
        out.trajectory.meta = TrajectoryMeta { id: i as u64, seed };
        Ok(out)
    });
    results.into_iter().collect()
}

/// Contents of the `<basename>.meta` sidecar written next to every CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// `trajectories` or `lifted`.
    pub format: String,
    pub dt: f64,
    pub n_q: usize,
    pub n_p: usize,
    pub n_u: usize,
    pub m: usize,
    pub trajectories: usize,
    pub seeds: Vec<u64>,
    pub config_fingerprint: String,
    pub system: SystemSpec,
}

pub const RAW_FORMAT: &str = "trajectories";
pub const LIFTED_FORMAT: &str = "lifted";

impl Sidecar {
    pub fn new(format: &str, cfg: &RunConfig, seeds: Vec<u64>) -> Self {
        let sys = cfg.system.build();
        Self {
            format: format.into(),
            dt: cfg.integrator.dt,
            n_q: sys.n_q(),
            n_p: sys.n_p(),
            n_u: sys.n_u(),
            m: sys.n_constraints(),
            trajectories: seeds.len(),
            seeds,
            config_fingerprint: cfg.fingerprint(),
            system: cfg.system.clone(),
        }
    }

    pub fn path_for(csv: &Path) -> PathBuf {
        csv.with_extension("meta")
    }

    pub fn save(&self, csv: &Path) -> Result<()> {
        let path = Self::path_for(csv);
        let text = toml::to_string(self).expect("sidecar serializes");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(csv: &Path) -> Result<Self> {
        let path = Self::path_for(csv);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn shape(&self) -> LiftedShape {
        LiftedShape {
            n_q: self.n_q,
            n_p: self.n_p,
            m: self.m,
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["traj_id", "k", "t"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..self.n_q).map(|i| format!("q_{i}")));
        h.extend((0..self.n_p).map(|i| format!("p_{i}")));
        h.extend((0..self.n_u).map(|i| format!("u_{i}")));
        if self.format == LIFTED_FORMAT {
            h.extend((0..self.m).map(|i| format!("lambda_{i}")));
            h.extend((0..self.m).map(|i| format!("pi_{i}")));
            h.extend(["p0", "p_ctrl", "p_diss"].iter().map(|s| s.to_string()));
        }
        h
    }
}

/// Shortest decimal with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        detail: e.to_string(),
    }
}

fn write_rows(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parsed numeric rows with their 1-based file line numbers.
struct Rows {
    records: Vec<(usize, Vec<f64>)>,
}

fn read_rows(path: &Path, expected: &[String]) -> Result<Rows> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    for (i, want) in expected.iter().enumerate() {
        match header.get(i) {
            Some(found) if found == want => {}
            Some(found) => {
                return Err(Error::Validation(format!(
                    "{}: header column {i} is '{found}', expected '{want}'",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Validation(format!(
                    "{}: header is missing column '{want}'",
                    path.display()
                )))
            }
        }
    }
    if header.len() > expected.len() {
        return Err(Error::Validation(format!(
            "{}: unexpected header column '{}'",
            path.display(),
            &header[expected.len()]
        )));
    }
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let values = rec
            .iter()
            .zip(expected)
            .map(|(field, name)| {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| malformed(format!("column {name}: cannot parse '{field}'")))?;
                if !v.is_finite() {
                    return Err(malformed(format!("column {name}: non-finite value")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push((line, values));
    }
    Ok(Rows { records })
}

/// Splits rows into trajectories and checks `traj_id` and `k` sequencing.
fn group_rows(path: &Path, rows: Rows) -> Result<Vec<Vec<(usize, Vec<f64>)>>> {
    let mut groups: Vec<Vec<(usize, Vec<f64>)>> = Vec::new();
    for (line, row) in rows.records {
        let (id, k) = (row[0], row[1]);
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let next_id = groups.len() as f64;
        let continues = groups.last().is_some() && id == next_id - 1.0;
        if !continues {
            if id != next_id {
                return Err(malformed(format!(
                    "traj_id {id} out of sequence, expected {next_id}"
                )));
            }
            groups.push(Vec::new());
        }
        let group = groups.last_mut().expect("group exists");
        if k != group.len() as f64 {
            return Err(malformed(format!(
                "k = {k} out of sequence, expected {}",
                group.len()
            )));
        }
        group.push((line, row));
    }
    Ok(groups)
}

fn check_grid(path: &Path, dt: f64, times: &[(usize, f64)]) -> Result<()> {
    let Some(&(_, t0)) = times.first() else {
        return Ok(());
    };
    for (k, &(line, t)) in times.iter().enumerate() {
        let want = t0 + k as f64 * dt;
        if (t - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(Error::Validation(format!(
                "{} line {line}: non-uniform time grid, t = {t} but expected {want}",
                path.display()
            )));
        }
    }
    Ok(())
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory], sidecar: &Sidecar) -> Result<()> {
    let mut meta = sidecar.clone();
    meta.format = RAW_FORMAT.into();
    meta.trajectories = trajs.len();
    let rows = trajs.iter().enumerate().flat_map(|(id, tr)| {
        tr.states.iter().enumerate().map(move |(k, s)| {
            let mut row = vec![id.to_string(), k.to_string(), fmt_f64(s.t)];
            row.extend(s.q.iter().chain(&s.p).chain(&s.u).map(|&v| fmt_f64(v)));
            row
        })
    });
    write_rows(path, &meta.header(), rows)?;
    meta.save(path)
}

pub fn load_trajectories(path: &Path) -> Result<(Vec<Trajectory>, Sidecar)> {
    let meta = Sidecar::load(path)?;
    if meta.format != RAW_FORMAT {
        return Err(Error::Validation(format!(
            "{} holds '{}' data, expected '{RAW_FORMAT}'",
            path.display(),
            meta.format
        )));
    }
    let groups = group_rows(path, read_rows(path, &meta.header())?)?;
    check_count(path, &meta, groups.len())?;
    let (n_q, n_p) = (meta.n_q, meta.n_p);
    let mut trajs = Vec::with_capacity(groups.len());
    for (id, g) in groups.into_iter().enumerate() {
        let times: Vec<(usize, f64)> = g.iter().map(|(l, r)| (*l, r[2])).collect();
        check_grid(path, meta.dt, &times)?;
        let states = g
            .into_iter()
            .map(|(_, r)| {
                let v = &r[3..];
                PhasePoint::new(
                    v[..n_q].to_vec(),
                    v[n_q..n_q + n_p].to_vec(),
                    r[2],
                    v[n_q + n_p..].to_vec(),
                )
            })
            .collect();
        trajs.push(Trajectory {
            dt: meta.dt,
            states,
            meta: TrajectoryMeta {
                id: id as u64,
                seed: meta.seeds.get(id).copied().unwrap_or(0),
            },
        });
    }
    Ok((trajs, meta))
}

fn check_count(path: &Path, meta: &Sidecar, found: usize) -> Result<()> {
    if found != meta.trajectories {
        return Err(Error::Validation(format!(
            "{}: sidecar declares {} trajectories, file holds {found}",
            path.display(),
            meta.trajectories
        )));
    }
    Ok(())
}

pub fn save_lifted(path: &Path, trajs: &[LiftedTrajectory], sidecar: &Sidecar) -> Result<()> {
    let mut meta = sidecar.clone();
    meta.format = LIFTED_FORMAT.into();
    meta.trajectories = trajs.len();
    let rows = trajs.iter().enumerate().flat_map(|(id, tr)| {
        tr.points.iter().enumerate().map(move |(k, z)| {
            let mut row = vec![id.to_string(), k.to_string(), fmt_f64(z.q0)];
            let tail = [z.p0, tr.p_ctrl[k], tr.p_diss[k]];
            row.extend(
                z.q.iter()
                    .chain(&z.p)
                    .chain(&tr.controls[k])
                    .chain(&z.lambda)
                    .chain(&z.pi)
                    .chain(&tail)
                    .map(|&v| fmt_f64(v)),
            );
            row
        })
    });
    write_rows(path, &meta.header(), rows)?;
    meta.save(path)
}

/// Loads a lifted file and validates the Dirac gauge at every sample.
pub fn load_lifted(path: &Path) -> Result<(Vec<LiftedTrajectory>, Sidecar)> {
    let meta = Sidecar::load(path)?;
    if meta.format != LIFTED_FORMAT {
        return Err(Error::Validation(format!(
            "{} holds '{}' data, expected '{LIFTED_FORMAT}'",
            path.display(),
            meta.format
        )));
    }
    let sys = meta.system.build();
    if LiftedShape::of(sys.as_ref()) != meta.shape() || sys.n_u() != meta.n_u {
        return Err(Error::Validation(format!(
            "{}: sidecar dimensions do not match its system",
            path.display()
        )));
    }
    let groups = group_rows(path, read_rows(path, &meta.header())?)?;
    check_count(path, &meta, groups.len())?;
    let (n_q, n_p, n_u, m) = (meta.n_q, meta.n_p, meta.n_u, meta.m);
    let mut trajs = Vec::with_capacity(groups.len());
    for (id, g) in groups.into_iter().enumerate() {
        let times: Vec<(usize, f64)> = g.iter().map(|(l, r)| (*l, r[2])).collect();
        check_grid(path, meta.dt, &times)?;
        let mut tr = LiftedTrajectory {
            dt: meta.dt,
            points: Vec::with_capacity(g.len()),
            controls: Vec::with_capacity(g.len()),
            p_ctrl: Vec::with_capacity(g.len()),
            p_diss: Vec::with_capacity(g.len()),
            meta: TrajectoryMeta {
                id: id as u64,
                seed: meta.seeds.get(id).copied().unwrap_or(0),
            },
        };
        for (line, r) in g {
            let mut it = r[3..].iter().copied();
            let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
            let q = take(n_q);
            let p = take(n_p);
            let u = take(n_u);
            let lambda = take(m);
            let pi = take(m);
            let tail = take(3);
            let z = LiftedPoint {
                q0: r[2],
                q,
                lambda,
                p0: tail[0],
                p,
                pi,
            };
            let res = gauge_residual(&z, sys.as_ref())?;
            let h = systems::hamiltonian(sys.as_ref(), &z.q, &z.p)?;
            if !res.satisfied(h) {
                return Err(Error::Validation(format!(
                    "{} line {line}: Dirac gauge violated (r0 = {:.3e}, max|pi| = {:.3e})",
                    path.display(),
                    res.r0,
                    res.r_pi
                )));
            }
            tr.points.push(z);
            tr.controls.push(u);
            tr.p_ctrl.push(tail[1]);
            tr.p_diss.push(tail[2]);
        }
        trajs.push(tr);
    }
    Ok((trajs, meta))
}

/// Column names of a flattened lifted point.
pub fn lifted_coordinate_names(shape: LiftedShape) -> Vec<String> {
    let mut names = vec!["q0".to_string()];
    names.extend((0..shape.n_q).map(|i| format!("q_{i}")));
    names.extend((0..shape.m).map(|i| format!("lambda_{i}")));
    names.push("p0".into());
    names.extend((0..shape.n_p).map(|i| format!("p_{i}")));
    names.extend((0..shape.m).map(|i| format!("pi_{i}")));
    names
}

/// Which network a weight archive holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Psn,
    SympNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Psn => "psn",
            ModelKind::SympNet => "sympnet",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelKind::Psn => 1,
            ModelKind::SympNet => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Psn),
            2 => Some(ModelKind::SympNet),
            _ => None,
        }
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"PSNW";
pub const ARCHIVE_VERSION: u32 = 1;

/// Versioned weight file. All integers and floats are little-endian.
///
/// ```text
/// magic "PSNW" | version u32 | kind u8 | fingerprint (u32 len, utf-8)
/// | tensor count u32 | per tensor: name (u32 len, utf-8), ndim u32,
///   dims u64 × ndim, values f64 × prod(dims)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub version: u32,
    pub kind: ModelKind,
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

impl WeightArchive {
    pub fn new(kind: ModelKind, fingerprint: impl Into<String>, tensors: Vec<NamedTensor>) -> Self {
        Self {
            version: ARCHIVE_VERSION,
            kind,
            fingerprint: fingerprint.into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        };
        out.extend(ARCHIVE_MAGIC);
        out.extend(self.version.to_le_bytes());
        out.push(self.kind.tag());
        put_str(&mut out, &self.fingerprint);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in &t.values {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::CorruptArchive("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::CorruptArchive(format!(
                "unknown format version {version}"
            )));
        }
        let tag = r.take(1)?[0];
        let kind = ModelKind::from_tag(tag)
            .ok_or_else(|| Error::CorruptArchive(format!("unknown model kind tag {tag}")))?;
        let fingerprint = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<usize>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::CorruptArchive(format!("tensor {name} is too large")))?;
            if len.saturating_mul(8) > bytes.len() - r.pos {
                return Err(Error::CorruptArchive(format!("tensor {name} is truncated")));
            }
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            tensors.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptArchive(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            kind,
            fingerprint,
            tensors,
        })
    }

    /// Warning text when the archive was produced under a different configuration.
    pub fn fingerprint_warning(&self, expected: &str) -> Option<String> {
        (self.fingerprint != expected).then(|| {
            format!(
                "weights were trained under configuration {} but the current configuration is {}",
                short(&self.fingerprint),
                short(expected)
            )
        })
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptArchive(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptArchive("string field is not utf-8".into()))
    }
}

pub fn save_weights(path: &Path, archive: &WeightArchive) -> Result<()> {
    fs::write(path, archive.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an archive; when `expected` is given, a different kind is an error.
pub fn load_weights(path: &Path, expected: Option<ModelKind>) -> Result<WeightArchive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let archive = WeightArchive::from_bytes(&bytes)
        .map_err(|e| Error::CorruptArchive(format!("{}: {}", path.display(), strip(&e))))?;
    if let Some(kind) = expected {
        if archive.kind != kind {
            return Err(Error::CorruptArchive(format!(
                "{}: expected a {} archive, found {}",
                path.display(),
                kind.name(),
                archive.kind.name()
            )));
        }
    }
    Ok(archive)
}

fn strip(e: &Error) -> String {
    match e {
        Error::CorruptArchive(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Writes the per-epoch history. Wall-clock time is written only when
/// `with_time` is set, so that default runs are byte-reproducible.
pub fn save_metrics(path: &Path, history: &[EpochMetrics], with_time: bool) -> Result<()> {
    let header: Vec<String> = ["epoch", "train_loss", "val_loss", "wall_time_s"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = history.iter().map(|m| {
        vec![
            m.epoch.to_string(),
            fmt_f64(m.train_loss),
            fmt_f64(m.val_loss),
            fmt_f64(if with_time { m.wall_time_s } else { 0.0 }),
        ]
    });
    write_rows(path, &header, rows)
}
