//! Ground-truth trajectories: a fine-grid run of the same scheme, block-averaged
//! onto the coarse grid, cut into fixed-length windows.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CplError, Result};
use crate::fv::Scheme;
use crate::grid::{GridState, Mesh1D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum InitialCondition {
    /// `sin(2 pi x / L)`.
    SineBump,
    /// Mean offset plus `modes` sine/cosine pairs with coefficients `U(-a, a) / k`.
    RandomFourier { modes: usize, seed: u64, amplitude: f64 },
    /// `left` on `[0, position)`, `right` elsewhere.
    StepShock { left: f64, right: f64, position: f64 },
}

impl InitialCondition {
    /// Returns the profile as a closure over `x` on a domain of length `length`.
    pub fn profile(&self, length: f64) -> Box<dyn Fn(f64) -> f64> {
        match *self {
            InitialCondition::SineBump => Box::new(move |x| (2.0 * PI * x / length).sin()),
            InitialCondition::RandomFourier { modes, seed, amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let offset = amplitude * rng.gen_range(-0.5..0.5);
                let coeffs: Vec<(f64, f64)> = (1..=modes)
                    .map(|k| {
                        let a = amplitude * rng.gen_range(-1.0..1.0) / k as f64;
                        let b = amplitude * rng.gen_range(-1.0..1.0) / k as f64;
                        (a, b)
                    })
                    .collect();
                Box::new(move |x| {
                    let theta = 2.0 * PI * x / length;
                    offset
                        + coeffs
                            .iter()
                            .enumerate()
                            .map(|(j, (a, b))| {
                                let k = (j + 1) as f64;
                                a * (k * theta).cos() + b * (k * theta).sin()
                            })
                            .sum::<f64>()
                })
            }
            InitialCondition::StepShock { left, right, position } => {
                Box::new(move |x| if x < position * length { left } else { right })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub initial_condition: InitialCondition,
    pub nu: f64,
    pub n_coarse: usize,
    pub refine_factor: usize,
    /// Final time; `None` means `horizon_steps` coarse steps.
    pub t_end: Option<f64>,
    pub horizon_steps: usize,
    pub cfl_target: f64,
    pub domain_length: f64,
    /// Coarse step; `None` derives it from `cfl_target` and the initial data.
    pub dt: Option<f64>,
    pub use_berger: bool,
}

impl ScenarioSpec {
    pub fn new(initial_condition: InitialCondition) -> Self {
        Self {
            initial_condition,
            nu: 0.01,
            n_coarse: 128,
            refine_factor: 8,
            t_end: None,
            horizon_steps: 40,
            cfl_target: 0.4,
            domain_length: 1.0,
            dt: None,
            use_berger: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.refine_factor < 2 {
            return Err(CplError::InvalidConfig("refine_factor must be >= 2".into()));
        }
        if !(self.cfl_target > 0.0 && self.cfl_target <= 1.0) {
            return Err(CplError::InvalidConfig(format!("cfl_target {} outside (0, 1]", self.cfl_target)));
        }
        if self.n_coarse < 4 || !(self.nu >= 0.0) || !(self.domain_length > 0.0) {
            return Err(CplError::InvalidConfig("invalid mesh parameters in scenario".into()));
        }
        Ok(())
    }

    pub fn coarse_dx(&self) -> f64 {
        self.domain_length / self.n_coarse as f64
    }

    pub fn fine_mesh_unit_dt(&self) -> Mesh1D {
        let n = self.n_coarse * self.refine_factor;
        Mesh1D { n_cells: n, dx: self.domain_length / n as f64, dt: 1.0, nu: self.nu }
    }

    /// Initial field sampled on the fine grid.
    pub fn fine_initial(&self) -> GridState {
        let f = self.initial_condition.profile(self.domain_length);
        GridState::from_fn(&self.fine_mesh_unit_dt(), f)
    }

    /// Coarse step implied by `cfl_target` on both the coarse and fine grids.
    pub fn derived_dt(&self) -> f64 {
        let speed = self.fine_initial().max_abs();
        Mesh1D::stable_dt(self.coarse_dx(), self.nu, speed, self.cfl_target)
    }
}

/// Fine-grid snapshots taken at the coarse time levels.
#[derive(Debug, Clone)]
pub struct FineTrajectory {
    pub fine_mesh: Mesh1D,
    pub coarse_dt: f64,
    pub substeps: usize,
    pub snapshots: Vec<Vec<f64>>,
}

/// Runs the limited Godunov + viscous scheme on the refined grid.
///
/// The fine step divides the coarse step evenly and keeps the fine Courant number
/// at or below `cfl_target`.
pub fn solve_reference(spec: &ScenarioSpec) -> Result<FineTrajectory> {
    spec.validate()?;
    let u0 = spec.fine_initial();
    let coarse_dt = spec.dt.unwrap_or_else(|| spec.derived_dt());
    let fine = spec.fine_mesh_unit_dt();
    let fine_dt_max = Mesh1D::stable_dt(fine.dx, spec.nu, u0.max_abs(), spec.cfl_target);
    let substeps = (coarse_dt / fine_dt_max).ceil().max(1.0) as usize;
    let fine_mesh = Mesh1D::new(fine.n_cells, fine.dx, coarse_dt / substeps as f64, spec.nu)?;
    let steps = match spec.t_end {
        Some(t) => (t / coarse_dt).round() as usize,
        None => spec.horizon_steps,
    };
    let scheme = Scheme { use_berger: spec.use_berger, ..Scheme::default() };
    let mut state = u0;
    let mut snapshots = Vec::with_capacity(steps + 1);
    snapshots.push(state.values.clone());
    for step in 0..steps {
        for _ in 0..substeps {
            state = scheme.step(&state, &fine_mesh).map_err(|e| match e {
                CplError::NonFinite { .. } => CplError::NonFinite { context: "reference solve (coarse step)", index: step },
                other => other,
            })?;
        }
        snapshots.push(state.values.clone());
    }
    Ok(FineTrajectory { fine_mesh, coarse_dt, substeps, snapshots })
}

/// Block-averages every snapshot by `refine_factor`.
pub fn restrict(fine: &FineTrajectory, refine_factor: usize) -> Result<Vec<Vec<f64>>> {
    fine.snapshots.iter().map(|s| restrict_field(s, refine_factor)).collect()
}

pub fn restrict_field(fine: &[f64], refine_factor: usize) -> Result<Vec<f64>> {
    if refine_factor == 0 || fine.len() % refine_factor != 0 {
        return Err(CplError::ShapeMismatch {
            expected: refine_factor.max(1) * (fine.len() / refine_factor.max(1)),
            found: fine.len(),
        });
    }
    if refine_factor == 1 {
        return Ok(fine.to_vec());
    }
    let inv = 1.0 / refine_factor as f64;
    Ok(fine.chunks(refine_factor).map(|c| c.iter().sum::<f64>() * inv).collect())
}

/// Coarse trajectory of one scenario, on the coarse mesh.
pub fn coarse_trajectory(spec: &ScenarioSpec) -> Result<(Mesh1D, Vec<Vec<f64>>)> {
    let fine = solve_reference(spec)?;
    let coarse = restrict(&fine, spec.refine_factor)?;
    let mesh = Mesh1D::new(spec.n_coarse, spec.coarse_dx(), fine.coarse_dt, spec.nu)?;
    Ok((mesh, coarse))
}

/// Fixed-length windows of coarse snapshots sharing one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mesh: Mesh1D,
    pub seq_len: usize,
    /// `sequences[s][t][i]`: window `s`, time level `t`, cell `i`.
    pub sequences: Vec<Vec<Vec<f64>>>,
    pub provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    generator: String,
    seq_len: usize,
    dt: f64,
    scenarios: Vec<ScenarioSpec>,
}

/// Solves every scenario at a shared coarse step and cuts sliding windows.
///
/// The shared step is the smallest derived step over the scenarios, so each one
/// runs at or below its Courant target.
pub fn build_dataset(specs: &[ScenarioSpec], seq_len: usize) -> Result<Dataset> {
    if seq_len < 2 {
        return Err(CplError::InvalidConfig("seq_len must be >= 2".into()));
    }
    let first = specs.first().ok_or(CplError::EmptyDataset)?;
    for s in specs {
        s.validate()?;
        if s.n_coarse != first.n_coarse || s.nu != first.nu || s.domain_length != first.domain_length {
            return Err(CplError::InvalidConfig("scenarios must share n_coarse, nu and domain_length".into()));
        }
    }
    let dt = specs
        .iter()
        .map(|s| s.dt.unwrap_or_else(|| s.derived_dt()))
        .fold(f64::INFINITY, f64::min);
    let mut resolved = Vec::with_capacity(specs.len());
    let mut sequences = Vec::new();
    let mut mesh = None;
    for s in specs {
        let mut s = s.clone();
        s.dt = Some(dt);
        let (m, traj) = coarse_trajectory(&s)?;
        mesh.get_or_insert(m);
        if traj.len() >= seq_len {
            for start in 0..=traj.len() - seq_len {
                sequences.push(traj[start..start + seq_len].to_vec());
            }
        }
        resolved.push(s);
    }
    if sequences.is_empty() {
        return Err(CplError::EmptyDataset);
    }
    let prov = Provenance { generator: "cpl generate-data".into(), seq_len, dt, scenarios: resolved };
    let provenance = toml::to_string(&prov).map_err(|e| CplError::Format(e.to_string()))?;
    Ok(Dataset { mesh: mesh.expect("at least one scenario"), seq_len, sequences, provenance })
}

/// Training family: random Fourier scenarios with consecutive seeds.
pub fn random_fourier_scenarios(count: usize, modes: usize, amplitude: f64, first_seed: u64) -> Vec<ScenarioSpec> {
    (0..count)
        .map(|k| {
            ScenarioSpec::new(InitialCondition::RandomFourier { modes, seed: first_seed + k as u64, amplitude })
        })
        .collect()
}

const DATASET_MAGIC: &[u8; 8] = b"CPLDATA\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;

impl Dataset {
    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Consecutive `(U^n, U^{n+1})` pairs from every window.
    pub fn pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.sequences
            .iter()
            .flat_map(|s| s.windows(2).map(|w| (w[0].as_slice(), w[1].as_slice())))
            .collect()
    }

    /// Window order after a seeded shuffle.
    /// Every consecutive pair as its own length-2 sequence.
    pub fn one_step_pairs(&self) -> Dataset {
        let sequences = self.sequences.iter().flat_map(|s| s.windows(2).map(|w| w.to_vec())).collect();
        Dataset { mesh: self.mesh, seq_len: 2, sequences, provenance: self.provenance.clone() }
    }

    pub fn permutation(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.sequences.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    pub fn shuffled(&self, seed: u64) -> Dataset {
        let sequences = self.permutation(seed).into_iter().map(|i| self.sequences[i].clone()).collect();
        Dataset { sequences, ..self.clone() }
    }

    /// Seeded split into `(train, validation)`; the validation part holds
    /// `round(fraction * len)` windows, at least one when `fraction > 0`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let perm = self.permutation(seed);
        let mut n_val = (fraction * self.len() as f64).round() as usize;
        if fraction > 0.0 && n_val == 0 && self.len() > 1 {
            n_val = 1;
        }
        let pick = |idx: &[usize]| Dataset {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            ..self.clone()
        };
        let (val, train) = perm.split_at(n_val.min(self.len()));
        (pick(train), pick(val))
    }

    /// Little-endian binary layout:
    ///
    /// ```text
    /// magic "CPLDATA\0" | u32 version | u64 n_cells | f64 dt | f64 dx | f64 nu
    /// | u64 n_sequences | u64 seq_len | u64 provenance_bytes | provenance (UTF-8 TOML)
    /// | f64 values[n_sequences][seq_len][n_cells]
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.mesh.n_cells as u64).to_le_bytes())?;
        for v in [self.mesh.dt, self.mesh.dx, self.mesh.nu] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.sequences.len() as u64).to_le_bytes())?;
        w.write_all(&(self.seq_len as u64).to_le_bytes())?;
        let prov = self.provenance.as_bytes();
        w.write_all(&(prov.len() as u64).to_le_bytes())?;
        w.write_all(prov)?;
        for seq in &self.sequences {
            for snap in seq {
                for v in snap {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(CplError::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_FORMAT_VERSION {
            return Err(CplError::Format(format!("unsupported dataset version {version}")));
        }
        let n_cells = read_u64(r)? as usize;
        let dt = read_f64(r)?;
        let dx = read_f64(r)?;
        let nu = read_f64(r)?;
        let n_seq = read_u64(r)? as usize;
        let seq_len = read_u64(r)? as usize;
        let prov_len = read_u64(r)? as usize;
        let mut prov = vec![0u8; prov_len];
        r.read_exact(&mut prov)?;
        let provenance = String::from_utf8(prov).map_err(|e| CplError::Format(e.to_string()))?;
        let mesh = Mesh1D::new(n_cells, dx, dt, nu)?;
        let mut sequences = Vec::with_capacity(n_seq);
        for _ in 0..n_seq {
            let mut seq = Vec::with_capacity(seq_len);
            for _ in 0..seq_len {
                let snap = (0..n_cells).map(|_| read_f64(r)).collect::<Result<Vec<f64>>>()?;
                crate::error::ensure_finite(&snap, "dataset snapshot")?;
                seq.push(snap);
            }
            sequences.push(seq);
        }
        Ok(Dataset { mesh, seq_len, sequences, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Long-format CSV: `sequence,step,cell,x,u`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "sequence,step,cell,x,u")?;
        for (s, seq) in self.sequences.iter().enumerate() {
            for (t, snap) in seq.iter().enumerate() {
                for (i, u) in snap.iter().enumerate() {
                    writeln!(w, "{s},{t},{i},{},{u:e}", self.mesh.center(i))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
