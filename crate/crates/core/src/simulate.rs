//! Synthetic datasets: a toy hinge-mode ensemble, random poses, particle
//! rendering with CTF and white noise, and the binary particle-stack format.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{axis_angle, centroid, compose, gram_schmidt, GeomError, Mat3, RigidFrame, Vec3};
use crate::nn::counter_rng;
use crate::render::{project_gaussians, CtfParams, Pose, RenderConfig, RenderError, Renderer};
use crate::structure::{ideal_chain, BackboneTorsions, BaseStructure, Conformation, StructureError};

pub const STACK_MAGIC: [u8; 4] = *b"CEMP";
pub const STACK_VERSION: u32 = 1;
pub const STACK_HEADER_LEN: usize = 24;

pub const STACK_FILE: &str = "particles.cemp";
pub const SIDECAR_FILE: &str = "particles.truth.csv";
pub const META_FILE: &str = "meta.json";
pub const BASE_JSON_FILE: &str = "base.json";
pub const BASE_PDB_FILE: &str = "base.pdb";

// counter-rng stream tags
const STREAM_POSE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("not a particle stack (magic {found:?})")]
    BadMagic { found: [u8; 4] },
    #[error("truncated particle stack: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("unsupported stack version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("data format: {0}")]
    DataFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One bending mode of the toy protein.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HingeMode {
    /// Residues after this index rotate rigidly about its C atom.
    pub hinge_residue: usize,
    pub axis: [f64; 3],
    pub angle_mean: f64,
    pub angle_std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEnsembleSpec {
    pub n_residues: usize,
    pub modes: Vec<HingeMode>,
    pub seed: u64,
}

impl Default for ToyEnsembleSpec {
    fn default() -> Self {
        let mode = |angle_mean, weight| HingeMode {
            hinge_residue: 15,
            axis: [1.0, 0.0, 0.0],
            angle_mean,
            angle_std: 3.0,
            weight,
        };
        Self {
            n_residues: 32,
            modes: vec![mode(20.0, 0.6), mode(60.0, 0.4)],
            seed: 0,
        }
    }
}

impl ToyEnsembleSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n_residues < 2 {
            return bad(format!("need at least 2 residues, got {}", self.n_residues));
        }
        if self.modes.is_empty() {
            return bad("no modes".into());
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mode weights sum to {total}, expected 1"));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.hinge_residue + 1 >= self.n_residues {
                return bad(format!(
                    "mode {k}: hinge residue {} out of range for {} residues",
                    m.hinge_residue, self.n_residues
                ));
            }
            if !(m.weight >= 0.0) || !(m.angle_std >= 0.0) || !m.angle_mean.is_finite() {
                return bad(format!("mode {k}: weight and angle std must be non-negative"));
            }
            if Vec3::from(m.axis).norm() < 1e-12 {
                return bad(format!("mode {k}: zero hinge axis"));
            }
        }
        Ok(())
    }

    /// The unbent chain every mode deforms.
    pub fn base_structure(&self) -> Result<BaseStructure, SimulateError> {
        Ok(ideal_chain(self.n_residues, &[BackboneTorsions::ALPHA_HELIX])?)
    }
}

/// Which mode and angle produced an ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLabel {
    pub mode: usize,
    /// Degrees.
    pub hinge_angle: f64,
}

/// Bends `base` at the mode's hinge by `angle_deg` and recenters the atom
/// centroid at the origin.
pub fn hinge_conformation(base: &BaseStructure, mode: &HingeMode, angle_deg: f64) -> Conformation {
    let mut conf = base.conformation();
    let topo = conf.topology.clone();
    let pivot = conf.atom(mode.hinge_residue, "C").expect("toy residues carry a C atom");
    let r = axis_angle(&Vec3::from(mode.axis), angle_deg.to_radians());
    let hinge = RigidFrame::new(r, pivot - r * pivot);
    for i in mode.hinge_residue + 1..topo.n_residues() {
        conf.frames[i] = compose(&hinge, &conf.frames[i]);
        for k in topo.residue_range(i) {
            conf.atoms[k] = hinge.apply(&conf.atoms[k]);
        }
    }
    let shift = RigidFrame::from_translation(-centroid(&conf.atoms));
    conf.transformed(&shift)
}

/// Draws `n` conformations: a mode by weight, then an angle from that mode's
/// normal distribution.
pub fn generate_ensemble(
    spec: &ToyEnsembleSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Conformation>, Vec<EnsembleLabel>), SimulateError> {
    spec.validate()?;
    let base = spec.base_structure()?;
    let mut confs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut mode = spec.modes.len() - 1;
        for (k, m) in spec.modes.iter().enumerate() {
            acc += m.weight;
            if u < acc {
                mode = k;
                break;
            }
        }
        let m = &spec.modes[mode];
        let z: f64 = rng.sample(StandardNormal);
        let angle = m.angle_mean + m.angle_std * z;
        confs.push(hinge_conformation(&base, m, angle));
        labels.push(EnsembleLabel { mode, hinge_angle: angle });
    }
    Ok((confs, labels))
}

/// Haar-random rotation and a shift uniform in `[-shift_range, shift_range]²` (Å).
pub fn sample_pose(rng: &mut impl Rng, shift_range: f64) -> Pose {
    loop {
        let v1 = Vec3::from_fn(|_, _| rng.sample(StandardNormal));
        let v2 = Vec3::from_fn(|_, _| rng.sample(StandardNormal));
        if let Ok(rotation) = gram_schmidt(&v1, &v2) {
            let shift = if shift_range > 0.0 {
                [rng.gen_range(-shift_range..=shift_range), rng.gen_range(-shift_range..=shift_range)]
            } else {
                [0.0, 0.0]
            };
            return Pose { rotation, shift };
        }
    }
}

/// Particle images as stored on disk: row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleStack {
    pub height: usize,
    pub width: usize,
    pub pixel_size: f32,
    pub data: Vec<f32>,
}

impl ParticleStack {
    pub fn new(height: usize, width: usize, pixel_size: f32) -> Self {
        Self {
            height,
            width,
            pixel_size,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        let n = self.height * self.width;
        if n == 0 {
            0
        } else {
            self.data.len() / n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&v| v as f64).collect()
    }

    pub fn push(&mut self, img: &[f64]) {
        assert_eq!(img.len(), self.height * self.width);
        self.data.extend(img.iter().map(|&v| v as f32));
    }

    pub fn file_len(&self) -> u64 {
        (STACK_HEADER_LEN + self.data.len() * 4) as u64
    }
}

pub fn write_stack_to<W: Write>(mut w: W, stack: &ParticleStack) -> io::Result<()> {
    w.write_all(&STACK_MAGIC)?;
    for v in [STACK_VERSION, stack.len() as u32, stack.height as u32, stack.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&stack.pixel_size.to_le_bytes())?;
    let mut buf = Vec::with_capacity(stack.data.len() * 4);
    for v in &stack.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn write_stack(path: impl AsRef<Path>, stack: &ParticleStack) -> Result<(), SimulateError> {
    let f = fs::File::create(path)?;
    write_stack_to(BufWriter::new(f), stack)?;
    Ok(())
}

pub fn parse_stack(bytes: &[u8]) -> Result<ParticleStack, SimulateError> {
    if bytes.len() < STACK_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != STACK_MAGIC {
            return Err(SimulateError::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(SimulateError::TruncatedFile {
            expected: STACK_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != STACK_MAGIC {
        return Err(SimulateError::BadMagic { found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != STACK_VERSION {
        return Err(SimulateError::VersionMismatch {
            found: version,
            expected: STACK_VERSION,
        });
    }
    let (count, height, width) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64);
    let pixel_size = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let expected = STACK_HEADER_LEN as u64 + count * height * width * 4;
    if bytes.len() as u64 != expected {
        if (bytes.len() as u64) < expected {
            return Err(SimulateError::TruncatedFile {
                expected,
                actual: bytes.len() as u64,
            });
        }
        return Err(SimulateError::DataFormat(format!(
            "stack has {} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    let data = bytes[STACK_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParticleStack {
        height: height as usize,
        width: width as usize,
        pixel_size,
        data,
    })
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<ParticleStack, SimulateError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_stack(&bytes)
}

/// Inputs of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub particles: usize,
    pub render: RenderConfig,
    pub ctf: CtfParams,
    /// Fixed noise level; calibrated from `snr` when absent.
    pub noise_sigma: Option<f64>,
    pub snr: f64,
    /// Half-width of the uniform in-plane shift box (Å).
    pub shift_range: f64,
    pub seed: u64,
    pub ensemble: ToyEnsembleSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            particles: 8000,
            render: RenderConfig::default(),
            ctf: CtfParams::default(),
            noise_sigma: None,
            snr: 0.1,
            shift_range: 4.8,
            seed: 0,
            ensemble: ToyEnsembleSpec::default(),
        }
    }
}

/// Description of a simulated dataset, stored next to the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub count: usize,
    pub render: RenderConfig,
    pub ctf: CtfParams,
    pub noise_sigma: f64,
    pub snr: Option<f64>,
    pub shift_range: f64,
    pub seed: u64,
    pub ensemble: ToyEnsembleSpec,
}

impl DatasetMeta {
    pub fn check_stack(&self, stack: &ParticleStack) -> Result<(), SimulateError> {
        let ok = stack.len() == self.count
            && stack.height == self.render.height
            && stack.width == self.render.width
            && stack.pixel_size == self.render.pixel_size as f32;
        if ok {
            Ok(())
        } else {
            Err(SimulateError::DataFormat(format!(
                "stack header ({} x {}x{} @ {} Å) disagrees with metadata ({} x {}x{} @ {} Å)",
                stack.len(),
                stack.height,
                stack.width,
                stack.pixel_size,
                self.count,
                self.render.height,
                self.render.width,
                self.render.pixel_size
            )))
        }
    }
}

/// Ground truth for one image of the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    /// Position in the stack.
    pub index: usize,
    /// Ensemble member before shuffling.
    pub member: usize,
    pub mode: usize,
    pub hinge_angle: f64,
    pub rotation: Mat3,
    pub shift: [f64; 2],
    pub noise_seed: u64,
}

impl TruthRecord {
    pub fn pose(&self) -> Pose {
        Pose {
            rotation: self.rotation,
            shift: self.shift,
        }
    }
}

const SIDECAR_HEADER: &str = "index,member,mode,hinge_angle,r00,r01,r02,r10,r11,r12,r20,r21,r22,shift_x,shift_y,noise_seed";

pub fn write_sidecar_to<W: Write>(mut w: W, records: &[TruthRecord]) -> io::Result<()> {
    writeln!(w, "{SIDECAR_HEADER}")?;
    for r in records {
        write!(w, "{},{},{},{}", r.index, r.member, r.mode, r.hinge_angle)?;
        for i in 0..3 {
            for j in 0..3 {
                write!(w, ",{}", r.rotation[(i, j)])?;
            }
        }
        writeln!(w, ",{},{},{}", r.shift[0], r.shift[1], r.noise_seed)?;
    }
    w.flush()
}

pub fn write_sidecar(path: impl AsRef<Path>, records: &[TruthRecord]) -> Result<(), SimulateError> {
    write_sidecar_to(BufWriter::new(fs::File::create(path)?), records)?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>, SimulateError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line.trim() != SIDECAR_HEADER {
                return Err(SimulateError::DataFormat("unexpected sidecar header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || SimulateError::DataFormat(format!("sidecar line {}: malformed record", n + 1));
        if f.len() != 16 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<u64>().map_err(|_| bad());
        let mut rotation = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                rotation[(i, j)] = num(4 + 3 * i + j)?;
            }
        }
        out.push(TruthRecord {
            index: int(0)? as usize,
            member: int(1)? as usize,
            mode: int(2)? as usize,
            hinge_angle: num(3)?,
            rotation,
            shift: [num(13)?, num(14)?],
            noise_seed: int(15)?,
        });
    }
    Ok(out)
}

/// Noise level giving the requested signal-to-noise ratio, measured as the
/// variance of the noiseless image over the pixels where the projected
/// density exceeds 1% of its peak, averaged over `images`.
pub fn calibrate_noise_sigma(
    renderer: &Renderer,
    particles: &[(&[Vec3], Pose)],
    snr: f64,
) -> Result<f64, SimulateError> {
    if !(snr > 0.0) {
        return Err(SimulateError::InvalidSpec(format!("snr must be positive, got {snr}")));
    }
    let cfg = &renderer.config;
    let powers: Vec<f64> = particles
        .par_iter()
        .map(|(atoms, pose)| {
            let posed: Vec<Vec3> = atoms.iter().map(|a| pose.apply(a)).collect();
            let density = project_gaussians(&posed, cfg);
            let peak = density.data.iter().cloned().fold(0.0, f64::max);
            let img = renderer.render(atoms, pose);
            let vals: Vec<f64> = img
                .data
                .iter()
                .zip(&density.data)
                .filter(|(_, &d)| d > 0.01 * peak)
                .map(|(&v, _)| v)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
        })
        .collect();
    let power = powers.iter().sum::<f64>() / powers.len() as f64;
    Ok((power / snr).sqrt())
}

/// Renders one noisy image per conformation and shuffles the result.
///
/// Particle `i` takes its pose from stream `(seed, POSE, i)` and its noise
/// from a per-particle seed recorded in the truth records, so the output does
/// not depend on the number of worker threads.
pub fn simulate_particles(
    ensemble: &[Conformation],
    labels: &[EnsembleLabel],
    renderer: &Renderer,
    noise_sigma: f64,
    shift_range: f64,
    seed: u64,
) -> Result<(ParticleStack, Vec<TruthRecord>), SimulateError> {
    if ensemble.len() != labels.len() {
        return Err(SimulateError::DataFormat(format!(
            "{} conformations but {} labels",
            ensemble.len(),
            labels.len()
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(SimulateError::InvalidSpec(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let cfg = renderer.config;
    let rendered: Vec<(Vec<f64>, Pose, u64)> = ensemble
        .par_iter()
        .enumerate()
        .map(|(i, conf)| {
            let mut rng = counter_rng(seed, STREAM_POSE, i as u64, 0);
            let pose = sample_pose(&mut rng, shift_range);
            let noise_seed: u64 = rng.gen();
            let mut img = renderer.render(&conf.atoms, &pose).data;
            if noise_sigma > 0.0 {
                let mut nrng = counter_rng(noise_seed, STREAM_NOISE, 0, 0);
                let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
                for v in img.iter_mut() {
                    *v += normal.sample(&mut nrng);
                }
            }
            (img, pose, noise_seed)
        })
        .collect();

    let mut order: Vec<usize> = (0..ensemble.len()).collect();
    order.shuffle(&mut counter_rng(seed, STREAM_SHUFFLE, 0, 0));

    let mut stack = ParticleStack::new(cfg.height, cfg.width, cfg.pixel_size as f32);
    let mut records = Vec::with_capacity(order.len());
    for (index, &member) in order.iter().enumerate() {
        let (img, pose, noise_seed) = &rendered[member];
        stack.push(img);
        records.push(TruthRecord {
            index,
            member,
            mode: labels[member].mode,
            hinge_angle: labels[member].hinge_angle,
            rotation: pose.rotation,
            shift: pose.shift,
            noise_seed: *noise_seed,
        });
    }
    Ok((stack, records))
}

/// A complete simulated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub meta: DatasetMeta,
    pub base: Arc<BaseStructure>,
    pub stack: ParticleStack,
    pub truth: Vec<TruthRecord>,
}

/// Runs the full pipeline: ensemble, noise calibration, rendering.
pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<SimulatedDataset, SimulateError> {
    cfg.ctf.validate()?;
    let base = Arc::new(cfg.ensemble.base_structure()?);
    let mut erng = counter_rng(cfg.ensemble.seed, 0, 0, 0);
    let (ensemble, labels) = generate_ensemble(&cfg.ensemble, cfg.particles, &mut erng)?;
    let renderer = Renderer::new(cfg.render, Some(&cfg.ctf))?;

    let noise_sigma = match cfg.noise_sigma {
        Some(s) => s,
        None => {
            let n_cal = ensemble.len().min(256);
            let poses: Vec<Pose> = (0..n_cal)
                .map(|i| sample_pose(&mut counter_rng(cfg.seed, STREAM_POSE, i as u64, 0), cfg.shift_range))
                .collect();
            let items: Vec<(&[Vec3], Pose)> = ensemble[..n_cal]
                .iter()
                .zip(poses)
                .map(|(c, p)| (c.atoms.as_slice(), p))
                .collect();
            if items.is_empty() {
                0.0
            } else {
                calibrate_noise_sigma(&renderer, &items, cfg.snr)?
            }
        }
    };
    let (stack, truth) = simulate_particles(&ensemble, &labels, &renderer, noise_sigma, cfg.shift_range, cfg.seed)?;
    let meta = DatasetMeta {
        count: stack.len(),
        render: cfg.render,
        ctf: cfg.ctf,
        noise_sigma,
        snr: cfg.noise_sigma.is_none().then_some(cfg.snr),
        shift_range: cfg.shift_range,
        seed: cfg.seed,
        ensemble: cfg.ensemble.clone(),
    };
    Ok(SimulatedDataset {
        meta,
        base,
        stack,
        truth,
    })
}

impl SimulatedDataset {
    /// Writes the stack, truth sidecar, metadata and base structure into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SimulateError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_stack(dir.join(STACK_FILE), &self.stack)?;
        write_sidecar(dir.join(SIDECAR_FILE), &self.truth)?;
        write_json(dir.join(META_FILE), &self.meta)?;
        write_json(dir.join(BASE_JSON_FILE), self.base.as_ref())?;
        crate::structure::write_pdb_file(dir.join(BASE_PDB_FILE), &[self.base.conformation()])?;
        Ok(())
    }

    /// Ground-truth conformation of stack entry `i` (unposed, centered).
    pub fn truth_conformation(&self, i: usize) -> Conformation {
        truth_conformation(&self.base, &self.meta.ensemble, &self.truth[i])
    }
}

pub fn truth_conformation(base: &BaseStructure, spec: &ToyEnsembleSpec, rec: &TruthRecord) -> Conformation {
    hinge_conformation(base, &spec.modes[rec.mode], rec.hinge_angle)
}

fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<(), SimulateError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SimulateError::DataFormat(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, SimulateError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SimulateError::DataFormat(format!("{}: {e}", path.display())))
}

/// What training sees of a dataset directory: images, metadata and the base
/// structure, never the truth sidecar.
#[derive(Debug, Clone)]
pub struct ParticleDataset {
    pub meta: DatasetMeta,
    pub base: Arc<BaseStructure>,
    pub stack: ParticleStack,
}

impl ParticleDataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SimulateError> {
        let dir = dir.as_ref();
        let meta: DatasetMeta = read_json(dir.join(META_FILE))?;
        let stack = read_stack(dir.join(STACK_FILE))?;
        meta.check_stack(&stack)?;
        let base_json = dir.join(BASE_JSON_FILE);
        let base = if base_json.exists() {
            read_json(base_json)?
        } else {
            crate::structure::read_pdb(dir.join(BASE_PDB_FILE))?
        };
        Ok(Self {
            meta,
            base: Arc::new(base),
            stack,
        })
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }
}

impl From<SimulatedDataset> for ParticleDataset {
    fn from(d: SimulatedDataset) -> Self {
        Self {
            meta: d.meta,
            base: d.base,
            stack: d.stack,
        }
    }
}

/// A large canvas holding several particles at known positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Micrograph {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Top-left corner (row, column) of each particle box.
    pub positions: Vec<(usize, usize)>,
}

/// Places particles on a grid of tiles `margin` pixels larger than a box,
/// each at a random offset inside its tile, so boxes never overlap.
pub fn compose_micrograph(stack: &ParticleStack, per_row: usize, margin: usize, rng: &mut impl Rng) -> Micrograph {
    assert!(per_row > 0);
    let (h, w) = (stack.height, stack.width);
    let rows = stack.len().div_ceil(per_row);
    let (th, tw) = (h + margin, w + margin);
    let (height, width) = (rows * th + margin, per_row * tw + margin);
    let mut data = vec![0.0f32; height * width];
    let mut positions = Vec::with_capacity(stack.len());
    for k in 0..stack.len() {
        let r0 = (k / per_row) * th + rng.gen_range(0..=margin);
        let c0 = (k % per_row) * tw + rng.gen_range(0..=margin);
        let img = stack.image(k);
        for r in 0..h {
            data[(r0 + r) * width + c0..(r0 + r) * width + c0 + w].copy_from_slice(&img[r * w..(r + 1) * w]);
        }
        positions.push((r0, c0));
    }
    Micrograph {
        height,
        width,
        data,
        positions,
    }
}

/// Cuts the boxes at the recorded positions back out of a micrograph.
pub fn extract_particles(mic: &Micrograph, height: usize, width: usize, pixel_size: f32) -> ParticleStack {
    let mut stack = ParticleStack::new(height, width, pixel_size);
    for &(r0, c0) in &mic.positions {
        for r in 0..height {
            let start = (r0 + r) * mic.width + c0;
            stack.data.extend_from_slice(&mic.data[start..start + width]);
        }
    }
    stack
}
