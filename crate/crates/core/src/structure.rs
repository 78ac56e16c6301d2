//! Protein representation: residues as rigid bodies placed by per-residue
//! frames, delta frames relative to a base structure, the atom-space
//! regularizers and a small PDB reader/writer.

use std::fmt::Write as _;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, compose, GeomError, Mat3, RigidFrame, Vec3};

/// Ideal C(i)-N(i+1) peptide bond length in Å.
pub const PEPTIDE_BOND: f64 = 1.329;
pub const N_CA_BOND: f64 = 1.458;
pub const CA_C_BOND: f64 = 1.525;
pub const C_O_BOND: f64 = 1.231;

pub const BACKBONE_ATOMS: [&str; 4] = ["N", "CA", "C", "O"];

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("residue {residue} is missing atom {atom}")]
    MissingAtom { residue: usize, atom: String },
    #[error("no atoms found in model")]
    EmptyModel,
    #[error("model {model} does not match the topology of the first model")]
    TopologyMismatch { model: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residue {
    pub name: String,
    /// Atom name and coordinate in the residue's local frame (Å).
    pub local_atoms: Vec<(String, Vec3)>,
}

/// Names and flat atom offsets shared by every conformation of a protein.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub residue_names: Vec<String>,
    pub atom_names: Vec<Vec<String>>,
    offsets: Vec<usize>,
    ca: Vec<usize>,
    n: Vec<usize>,
    c: Vec<usize>,
}

impl Topology {
    fn new(residue_names: Vec<String>, atom_names: Vec<Vec<String>>) -> Result<Self, StructureError> {
        let mut offsets = Vec::with_capacity(atom_names.len() + 1);
        let mut ca = Vec::new();
        let mut n = Vec::new();
        let mut c = Vec::new();
        let mut off = 0;
        for (i, names) in atom_names.iter().enumerate() {
            offsets.push(off);
            let find = |want: &str| {
                names
                    .iter()
                    .position(|a| a == want)
                    .map(|k| off + k)
                    .ok_or_else(|| StructureError::MissingAtom {
                        residue: i,
                        atom: want.to_string(),
                    })
            };
            n.push(find("N")?);
            ca.push(find("CA")?);
            c.push(find("C")?);
            off += names.len();
        }
        offsets.push(off);
        Ok(Self {
            residue_names,
            atom_names,
            offsets,
            ca,
            n,
            c,
        })
    }

    pub fn n_residues(&self) -> usize {
        self.residue_names.len()
    }

    pub fn n_atoms(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Flat index range of residue `i`'s atoms.
    pub fn residue_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn ca_indices(&self) -> &[usize] {
        &self.ca
    }

    pub fn backbone_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (r, names) in self.atom_names.iter().enumerate() {
            for (k, a) in names.iter().enumerate() {
                if BACKBONE_ATOMS.contains(&a.as_str()) {
                    out.push(self.offsets[r] + k);
                }
            }
        }
        out
    }

    /// Flat index of atom `name` in residue `residue`.
    pub fn atom_index(&self, residue: usize, name: &str) -> Option<usize> {
        let names = self.atom_names.get(residue)?;
        names.iter().position(|a| a == name).map(|k| self.offsets[residue] + k)
    }
}

/// Reference residues and frames that all conformations are expressed against.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BaseStructureRepr", into = "BaseStructureRepr")]
pub struct BaseStructure {
    residues: Vec<Residue>,
    base_frames: Vec<RigidFrame>,
    topology: Arc<Topology>,
    local: Vec<Vec3>,
    posed: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct BaseStructureRepr {
    residues: Vec<Residue>,
    base_frames: Vec<RigidFrame>,
}

impl TryFrom<BaseStructureRepr> for BaseStructure {
    type Error = StructureError;
    fn try_from(r: BaseStructureRepr) -> Result<Self, Self::Error> {
        BaseStructure::new(r.residues, r.base_frames)
    }
}

impl From<BaseStructure> for BaseStructureRepr {
    fn from(b: BaseStructure) -> Self {
        Self {
            residues: b.residues,
            base_frames: b.base_frames,
        }
    }
}

impl BaseStructure {
    pub fn new(residues: Vec<Residue>, base_frames: Vec<RigidFrame>) -> Result<Self, StructureError> {
        if residues.len() != base_frames.len() {
            return Err(StructureError::LengthMismatch {
                expected: residues.len(),
                actual: base_frames.len(),
            });
        }
        let topology = Topology::new(
            residues.iter().map(|r| r.name.clone()).collect(),
            residues
                .iter()
                .map(|r| r.local_atoms.iter().map(|(n, _)| n.clone()).collect())
                .collect(),
        )?;
        let mut local = Vec::with_capacity(topology.n_atoms());
        let mut posed = Vec::with_capacity(topology.n_atoms());
        for (res, frame) in residues.iter().zip(&base_frames) {
            for (_, p) in &res.local_atoms {
                local.push(*p);
                posed.push(frame.apply(p));
            }
        }
        Ok(Self {
            residues,
            base_frames,
            topology: Arc::new(topology),
            local,
            posed,
        })
    }

    /// Builds residues and frames from global backbone coordinates. Each
    /// residue frame has CA at the origin, x toward C and N in the xy-plane.
    pub fn from_global(
        residue_names: Vec<String>,
        atoms: Vec<Vec<(String, Vec3)>>,
    ) -> Result<Self, StructureError> {
        let mut residues = Vec::with_capacity(atoms.len());
        let mut frames = Vec::with_capacity(atoms.len());
        for (i, (name, res_atoms)) in residue_names.into_iter().zip(atoms).enumerate() {
            let frame = residue_frame(i, &res_atoms)?;
            let inv = frame.inverse();
            residues.push(Residue {
                name,
                local_atoms: res_atoms
                    .into_iter()
                    .map(|(n, p)| (n, inv.apply(&p)))
                    .collect(),
            });
            frames.push(frame);
        }
        Self::new(residues, frames)
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn base_frames(&self) -> &[RigidFrame] {
        &self.base_frames
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn n_residues(&self) -> usize {
        self.residues.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.local.len()
    }

    /// Global atom coordinates of the base structure, flat.
    pub fn posed_atoms(&self) -> &[Vec3] {
        &self.posed
    }

    /// The base structure itself as a conformation.
    pub fn conformation(&self) -> Conformation {
        Conformation {
            topology: self.topology.clone(),
            frames: self.base_frames.clone(),
            atoms: self.posed.clone(),
        }
    }
}

fn residue_frame(i: usize, atoms: &[(String, Vec3)]) -> Result<RigidFrame, StructureError> {
    let get = |want: &str| {
        atoms
            .iter()
            .find(|(n, _)| n == want)
            .map(|(_, p)| *p)
            .ok_or_else(|| StructureError::MissingAtom {
                residue: i,
                atom: want.to_string(),
            })
    };
    let (n, ca, c) = (get("N")?, get("CA")?, get("C")?);
    Ok(RigidFrame::new(geom::gram_schmidt(&(c - ca), &(n - ca))?, ca))
}

/// Per-residue rigid corrections applied on the left of the base frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaFrames(pub Vec<RigidFrame>);

impl DeltaFrames {
    pub fn identity(n: usize) -> Self {
        Self(vec![RigidFrame::identity(); n])
    }
}

/// Global atom coordinates of one protein instance.
#[derive(Debug, Clone)]
pub struct Conformation {
    pub topology: Arc<Topology>,
    pub frames: Vec<RigidFrame>,
    /// Flat global coordinates, grouped by residue (see [`Topology::residue_range`]).
    pub atoms: Vec<Vec3>,
}

impl Conformation {
    pub fn residue_atoms(&self, i: usize) -> &[Vec3] {
        &self.atoms[self.topology.residue_range(i)]
    }

    pub fn atom(&self, residue: usize, name: &str) -> Option<Vec3> {
        self.topology.atom_index(residue, name).map(|k| self.atoms[k])
    }

    pub fn ca_coords(&self) -> Vec<Vec3> {
        self.topology.ca_indices().iter().map(|&k| self.atoms[k]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Vec3> {
        indices.iter().map(|&k| self.atoms[k]).collect()
    }

    /// Applies a rigid transform to the whole conformation.
    pub fn transformed(&self, f: &RigidFrame) -> Conformation {
        Conformation {
            topology: self.topology.clone(),
            frames: self.frames.iter().map(|fr| compose(f, fr)).collect(),
            atoms: self.atoms.iter().map(|p| f.apply(p)).collect(),
        }
    }
}

/// Composes each delta onto its base frame (`delta ∘ base`) and places the
/// residue atoms.
pub fn apply_deltas(base: &BaseStructure, deltas: &DeltaFrames) -> Result<Conformation, StructureError> {
    if deltas.0.len() != base.n_residues() {
        return Err(StructureError::LengthMismatch {
            expected: base.n_residues(),
            actual: deltas.0.len(),
        });
    }
    let topo = base.topology();
    let mut atoms = Vec::with_capacity(base.n_atoms());
    let mut frames = Vec::with_capacity(base.n_residues());
    for (i, d) in deltas.0.iter().enumerate() {
        frames.push(compose(d, &base.base_frames[i]));
        for g in &base.posed[topo.residue_range(i)] {
            atoms.push(d.apply(g));
        }
    }
    Ok(Conformation {
        topology: topo.clone(),
        frames,
        atoms,
    })
}

/// Gradient of [`apply_deltas`] with respect to each delta's rotation
/// matrix entries and translation, given `dL/d(atom)` for every atom.
pub fn apply_deltas_backward(base: &BaseStructure, grad_atoms: &[Vec3]) -> Vec<(Mat3, Vec3)> {
    let topo = base.topology();
    (0..base.n_residues())
        .map(|i| {
            let mut gr = Mat3::zeros();
            let mut gt = Vec3::zeros();
            for k in topo.residue_range(i) {
                gr += grad_atoms[k] * base.posed[k].transpose();
                gt += grad_atoms[k];
            }
            (gr, gt)
        })
        .collect()
}

/// Mean squared deviation of the C(i)-N(i+1) bond lengths from `ideal`,
/// with its gradient with respect to every atom.
pub fn backbone_continuity_loss(topo: &Topology, atoms: &[Vec3], ideal: f64) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); atoms.len()];
    let nb = topo.n_residues().saturating_sub(1);
    if nb == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..nb {
        let (ic, jn) = (topo.c[i], topo.n[i + 1]);
        let d = atoms[jn] - atoms[ic];
        let len = d.norm();
        let dev = len - ideal;
        loss += dev * dev;
        if len > 0.0 {
            let g = d * (2.0 * dev / (len * nb as f64));
            grad[jn] += g;
            grad[ic] -= g;
        }
    }
    (loss / nb as f64, grad)
}

/// Squared norm of the (unit-mass) center of mass, with gradient.
pub fn centering_loss(atoms: &[Vec3]) -> (f64, Vec<Vec3>) {
    if atoms.is_empty() {
        return (0.0, Vec::new());
    }
    let c = geom::centroid(atoms);
    let g = c * (2.0 / atoms.len() as f64);
    (c.norm_squared(), vec![g; atoms.len()])
}

/// Writes a multi-MODEL PDB file with one model per conformation.
pub fn write_pdb<W: Write>(mut w: W, ensemble: &[Conformation]) -> io::Result<()> {
    let mut buf = String::new();
    for (m, conf) in ensemble.iter().enumerate() {
        let topo = &conf.topology;
        let _ = writeln!(buf, "MODEL     {:>4}", m + 1);
        let mut serial = 1;
        for r in 0..topo.n_residues() {
            let rn = &topo.residue_names[r];
            for (k, an) in topo.atom_names[r].iter().enumerate() {
                let p = conf.atoms[topo.residue_range(r).start + k];
                let name = if an.len() < 4 { format!(" {an:<3}") } else { an.clone() };
                let element = an.chars().next().unwrap_or('X');
                let _ = writeln!(
                    buf,
                    "ATOM  {:>5} {:<4} {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
                    serial % 100_000,
                    name,
                    rn,
                    (r + 1) % 10_000,
                    p.x,
                    p.y,
                    p.z,
                    1.0,
                    0.0,
                    element
                );
                serial += 1;
            }
        }
        let _ = writeln!(buf, "TER");
        let _ = writeln!(buf, "ENDMDL");
        w.write_all(buf.as_bytes())?;
        buf.clear();
    }
    writeln!(w, "END")?;
    w.flush()
}

pub fn write_pdb_file(path: impl AsRef<Path>, ensemble: &[Conformation]) -> io::Result<()> {
    let f = std::fs::File::create(path)?;
    write_pdb(io::BufWriter::new(f), ensemble)
}

type ModelAtoms = (Vec<String>, Vec<Vec<(String, Vec3)>>);

fn parse_models<R: BufRead>(r: R) -> Result<Vec<ModelAtoms>, StructureError> {
    let mut models: Vec<ModelAtoms> = Vec::new();
    let mut cur: ModelAtoms = (Vec::new(), Vec::new());
    let mut cur_key: Option<String> = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let rec = line.get(..6).unwrap_or(&line).trim_end();
        match rec {
            "MODEL" => {
                cur = (Vec::new(), Vec::new());
                cur_key = None;
            }
            "ENDMDL" => {
                models.push(std::mem::take(&mut cur));
                cur_key = None;
            }
            "ATOM" | "HETATM" => {
                let field = |a: usize, b: usize| -> Result<&str, StructureError> {
                    line.get(a..b.min(line.len()))
                        .filter(|s| !s.is_empty())
                        .ok_or_else(|| StructureError::Parse {
                            line: lineno,
                            message: format!("ATOM record too short ({} columns)", line.len()),
                        })
                };
                let coord = |a: usize, b: usize, axis: &str| -> Result<f64, StructureError> {
                    let s = field(a, b)?;
                    s.trim().parse::<f64>().map_err(|_| StructureError::Parse {
                        line: lineno,
                        message: format!("invalid {axis} coordinate {:?}", s.trim()),
                    })
                };
                let name = field(12, 16)?.trim().to_string();
                let res_name = field(17, 20)?.trim().to_string();
                let key = field(21, 27)?.to_string();
                let p = Vec3::new(coord(30, 38, "x")?, coord(38, 46, "y")?, coord(46, 54, "z")?);
                if cur_key.as_deref() != Some(key.as_str()) {
                    cur.0.push(res_name);
                    cur.1.push(Vec::new());
                    cur_key = Some(key);
                }
                cur.1.last_mut().unwrap().push((name, p));
            }
            _ => {}
        }
    }
    if !cur.0.is_empty() {
        models.push(cur);
    }
    Ok(models)
}

/// Reads the first model of a PDB file as a base structure.
pub fn read_pdb(path: impl AsRef<Path>) -> Result<BaseStructure, StructureError> {
    let f = std::fs::File::open(path)?;
    let models = parse_models(BufReader::new(f))?;
    let (names, atoms) = models
        .into_iter()
        .find(|m| !m.0.is_empty())
        .ok_or(StructureError::EmptyModel)?;
    BaseStructure::from_global(names, atoms)
}

/// Reads every model of a PDB file as a conformation. All models must share
/// the first model's residue and atom naming.
pub fn read_pdb_ensemble(path: impl AsRef<Path>) -> Result<Vec<Conformation>, StructureError> {
    let f = std::fs::File::open(path)?;
    let models = parse_models(BufReader::new(f))?;
    if models.iter().all(|m| m.0.is_empty()) {
        return Err(StructureError::EmptyModel);
    }
    let mut topo: Option<Arc<Topology>> = None;
    let mut out = Vec::with_capacity(models.len());
    for (m, (names, atoms)) in models.into_iter().enumerate() {
        let atom_names: Vec<Vec<String>> = atoms
            .iter()
            .map(|r| r.iter().map(|(n, _)| n.clone()).collect())
            .collect();
        let t = match &topo {
            Some(t) => {
                if t.residue_names != names || t.atom_names != atom_names {
                    return Err(StructureError::TopologyMismatch { model: m + 1 });
                }
                t.clone()
            }
            None => {
                let t = Arc::new(Topology::new(names, atom_names)?);
                topo = Some(t.clone());
                t
            }
        };
        let frames = atoms
            .iter()
            .enumerate()
            .map(|(i, r)| residue_frame(i, r))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Conformation {
            topology: t,
            frames,
            atoms: atoms.into_iter().flatten().map(|(_, p)| p).collect(),
        });
    }
    Ok(out)
}

/// Places atom D from A, B, C given |CD|, the angle BCD and the dihedral
/// ABCD (radians).
fn place_atom(a: &Vec3, b: &Vec3, c: &Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = n.cross(&bc);
    let d2 = Vec3::new(
        -bond * angle.cos(),
        bond * angle.sin() * torsion.cos(),
        bond * angle.sin() * torsion.sin(),
    );
    c + bc * d2.x + m * d2.y + n * d2.z
}

/// Backbone dihedrals (degrees) used by [`ideal_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneTorsions {
    pub phi: f64,
    pub psi: f64,
    pub omega: f64,
}

impl BackboneTorsions {
    pub const ALPHA_HELIX: Self = Self {
        phi: -57.0,
        psi: -47.0,
        omega: 180.0,
    };
}

/// Builds an N-residue backbone (N, CA, C, O) with ideal bond lengths and
/// angles, centered at the origin with its principal axis along z.
pub fn ideal_chain(n_residues: usize, torsions: &[BackboneTorsions]) -> Result<BaseStructure, StructureError> {
    assert!(!torsions.is_empty());
    let deg = std::f64::consts::PI / 180.0;
    let (a_n_ca_c, a_ca_c_n, a_c_n_ca, a_ca_c_o) = (111.2 * deg, 116.2 * deg, 121.7 * deg, 120.5 * deg);
    let tor = |i: usize| torsions[i % torsions.len()];

    let mut backbone: Vec<[Vec3; 3]> = Vec::with_capacity(n_residues);
    let n0 = Vec3::zeros();
    let ca0 = Vec3::new(N_CA_BOND, 0.0, 0.0);
    let ang = std::f64::consts::PI - a_n_ca_c;
    let c0 = ca0 + Vec3::new(CA_C_BOND * ang.cos(), CA_C_BOND * ang.sin(), 0.0);
    backbone.push([n0, ca0, c0]);
    for i in 1..n_residues {
        let [pn, pca, pc] = backbone[i - 1];
        let n = place_atom(&pn, &pca, &pc, PEPTIDE_BOND, a_ca_c_n, tor(i - 1).psi * deg);
        let ca = place_atom(&pca, &pc, &n, N_CA_BOND, a_c_n_ca, tor(i - 1).omega * deg);
        let c = place_atom(&pc, &n, &ca, CA_C_BOND, a_n_ca_c, tor(i).phi * deg);
        backbone.push([n, ca, c]);
    }
    let mut atoms: Vec<Vec<(String, Vec3)>> = backbone
        .iter()
        .enumerate()
        .map(|(i, [n, ca, c])| {
            let o = place_atom(n, ca, c, C_O_BOND, a_ca_c_o, tor(i).psi * deg + std::f64::consts::PI);
            vec![
                ("N".to_string(), *n),
                ("CA".to_string(), *ca),
                ("C".to_string(), *c),
                ("O".to_string(), o),
            ]
        })
        .collect();

    // center and align the principal axis with z
    let flat: Vec<Vec3> = atoms.iter().flatten().map(|(_, p)| *p).collect();
    let c = geom::centroid(&flat);
    let mut cov = Mat3::zeros();
    for p in &flat {
        cov += (p - c) * (p - c).transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let ez: Vec3 = eig.eigenvectors.column(order[2]).into();
    let ex: Vec3 = eig.eigenvectors.column(order[1]).into();
    let ey = ez.cross(&ex);
    let to_local = Mat3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()]);
    for r in &mut atoms {
        for (_, p) in r.iter_mut() {
            *p = to_local * (*p - c);
        }
    }
    BaseStructure::from_global(vec!["ALA".to_string(); n_residues], atoms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn helix(n: usize) -> BaseStructure {
        ideal_chain(n, &[BackboneTorsions::ALPHA_HELIX]).unwrap()
    }

    fn randn3(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        )
    }

    fn random_frame(rng: &mut impl Rng, scale: f64) -> RigidFrame {
        let r = geom::gram_schmidt(&randn3(rng), &randn3(rng)).unwrap();
        RigidFrame::new(r, randn3(rng) * scale)
    }

    #[test]
    fn ideal_chain_geometry() {
        let b = helix(10);
        let conf = b.conformation();
        let topo = b.topology();
        for i in 0..10 {
            let n = conf.atom(i, "N").unwrap();
            let ca = conf.atom(i, "CA").unwrap();
            let c = conf.atom(i, "C").unwrap();
            assert!(((ca - n).norm() - N_CA_BOND).abs() < 1e-9);
            assert!(((c - ca).norm() - CA_C_BOND).abs() < 1e-9);
            if i + 1 < 10 {
                let n2 = conf.atom(i + 1, "N").unwrap();
                assert!(((n2 - c).norm() - PEPTIDE_BOND).abs() < 1e-9);
            }
        }
        assert_eq!(topo.n_atoms(), 40);
        let com = geom::centroid(&conf.atoms);
        assert!(com.norm() < 1e-10);
        // helix rise ~1.5 Å per residue along z
        let ca = conf.ca_coords();
        let rise = (ca[9].z - ca[0].z).abs() / 9.0;
        assert!((rise - 1.5).abs() < 0.1, "rise {rise}");
    }

    #[test]
    fn residue_local_frame_convention() {
        let b = helix(3);
        for r in b.residues() {
            let get = |n: &str| r.local_atoms.iter().find(|(a, _)| a == n).unwrap().1;
            assert!(get("CA").norm() < 1e-12);
            let c = get("C");
            assert!(c.y.abs() < 1e-12 && c.z.abs() < 1e-12 && c.x > 0.0);
            assert!(get("N").z.abs() < 1e-12);
        }
    }

    #[test]
    fn frame_roundtrip_reproduces_backbone() {
        let b = helix(6);
        let conf = b.conformation();
        let names = conf.topology.residue_names.clone();
        let atoms: Vec<Vec<(String, Vec3)>> = (0..6)
            .map(|i| {
                conf.topology.atom_names[i]
                    .iter()
                    .cloned()
                    .zip(conf.residue_atoms(i).iter().copied())
                    .collect()
            })
            .collect();
        let rebuilt = BaseStructure::from_global(names, atoms).unwrap();
        for (a, b) in rebuilt.posed_atoms().iter().zip(conf.atoms.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn identity_deltas_reproduce_base() {
        let b = helix(8);
        let conf = apply_deltas(&b, &DeltaFrames::identity(8)).unwrap();
        for (a, p) in conf.atoms.iter().zip(b.posed_atoms()) {
            assert!((a - p).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_delta_is_local() {
        let b = helix(8);
        let mut d = DeltaFrames::identity(8);
        d.0[3] = RigidFrame::from_translation(Vec3::new(5.0, 0.0, 0.0));
        let conf = apply_deltas(&b, &d).unwrap();
        let topo = b.topology();
        for r in 0..8 {
            for k in topo.residue_range(r) {
                let shift = conf.atoms[k] - b.posed_atoms()[k];
                let want = if r == 3 { Vec3::new(5.0, 0.0, 0.0) } else { Vec3::zeros() };
                assert!((shift - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_deltas_length_mismatch() {
        let b = helix(4);
        assert!(matches!(
            apply_deltas(&b, &DeltaFrames::identity(3)),
            Err(StructureError::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn apply_deltas_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = helix(4);
        let deltas = DeltaFrames((0..4).map(|_| random_frame(&mut rng, 1.0)).collect());
        let w: Vec<Vec3> = (0..b.n_atoms()).map(|_| randn3(&mut rng)).collect();
        let f = |d: &DeltaFrames| -> f64 {
            let c = apply_deltas(&b, d).unwrap();
            c.atoms.iter().zip(&w).map(|(a, g)| a.dot(g)).sum()
        };
        let grads = apply_deltas_backward(&b, &w);
        let h = 1e-5;
        for i in 0..4 {
            for k in 0..9 {
                let mut dp = deltas.clone();
                let mut dm = deltas.clone();
                dp.0[i].rotation[(k / 3, k % 3)] += h;
                dm.0[i].rotation[(k / 3, k % 3)] -= h;
                let fd = (f(&dp) - f(&dm)) / (2.0 * h);
                let an = grads[i].0[(k / 3, k % 3)];
                assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-4);
            }
            for k in 0..3 {
                let mut dp = deltas.clone();
                let mut dm = deltas.clone();
                dp.0[i].translation[k] += h;
                dm.0[i].translation[k] -= h;
                let fd = (f(&dp) - f(&dm)) / (2.0 * h);
                let an = grads[i].1[k];
                assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn backbone_loss_examples() {
        let b = helix(10);
        let conf = b.conformation();
        let topo = b.topology();
        let (l, _) = backbone_continuity_loss(topo, &conf.atoms, PEPTIDE_BOND);
        assert!(l < 1e-10);

        // stretch only the bond between residues 4 and 5 by +0.5 Å: shift
        // residues 5.. along the bond direction
        let c4 = conf.atom(4, "C").unwrap();
        let n5 = conf.atom(5, "N").unwrap();
        let dir = (n5 - c4).normalize() * 0.5;
        let mut atoms = conf.atoms.clone();
        for r in 5..10 {
            for k in topo.residue_range(r) {
                atoms[k] += dir;
            }
        }
        let (l, _) = backbone_continuity_loss(topo, &atoms, PEPTIDE_BOND);
        assert!((l - 0.25 / 9.0).abs() < 1e-10, "{l}");

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 10.0);
        let moved: Vec<Vec3> = atoms.iter().map(|p| f.apply(p)).collect();
        let (l2, _) = backbone_continuity_loss(topo, &moved, PEPTIDE_BOND);
        assert!((l - l2).abs() < 1e-10);
    }

    #[test]
    fn centering_loss_examples() {
        let b = helix(5);
        let conf = b.conformation();
        assert!(centering_loss(&conf.atoms).0 < 1e-20);
        let shifted: Vec<Vec3> = conf.atoms.iter().map(|p| p + Vec3::new(1.0, 2.0, 2.0)).collect();
        assert!((centering_loss(&shifted).0 - 9.0).abs() < 1e-10);
        let r = geom::axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.7);
        let rotated: Vec<Vec3> = shifted.iter().map(|p| r * p).collect();
        assert!((centering_loss(&rotated).0 - 9.0).abs() < 1e-10);
    }

    #[test]
    fn loss_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = helix(5);
        let topo = b.topology().clone();
        let atoms: Vec<Vec3> = b
            .posed_atoms()
            .iter()
            .map(|p| p + randn3(&mut rng) * 0.3 + Vec3::new(0.5, -0.2, 0.1))
            .collect();
        let checks: [&dyn Fn(&[Vec3]) -> (f64, Vec<Vec3>); 2] = [
            &|a| backbone_continuity_loss(&topo, a, PEPTIDE_BOND),
            &|a| centering_loss(a),
        ];
        for f in checks {
            let (_, g) = f(&atoms);
            let h = 1e-5;
            for k in 0..atoms.len() {
                for ax in 0..3 {
                    let mut p = atoms.clone();
                    let mut m = atoms.clone();
                    p[k][ax] += h;
                    m[k][ax] -= h;
                    let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
                    assert!((fd - g[k][ax]).abs() <= 1e-4 * fd.abs().max(g[k][ax].abs()).max(1e-6));
                }
            }
        }
    }

    #[test]
    fn pdb_roundtrip() {
        let b = helix(10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conf = b.conformation().transformed(&random_frame(&mut rng, 3.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pdb");
        write_pdb_file(&path, &[conf.clone(), b.conformation()]).unwrap();
        let back = read_pdb(&path).unwrap();
        for (a, p) in back.posed_atoms().iter().zip(&conf.atoms) {
            assert!((a - p).amax() < 1e-3);
        }
        let ens = read_pdb_ensemble(&path).unwrap();
        assert_eq!(ens.len(), 2);
        for (a, p) in ens[1].atoms.iter().zip(b.posed_atoms()) {
            assert!((a - p).amax() < 1e-3);
        }
    }

    #[test]
    fn pdb_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pdb");
        write_pdb_file(&path, &[]).unwrap();
        assert!(matches!(read_pdb(&path), Err(StructureError::EmptyModel)));

        let path = dir.path().join("bad.pdb");
        std::fs::write(
            &path,
            "MODEL        1\nATOM      1  N   ALA A   1       0.000   0.000   0.000  1.00  0.00           N\n\
             ATOM      2  CA  ALA A   1       1.458   abc     0.000  1.00  0.00           C\n",
        )
        .unwrap();
        match read_pdb(&path) {
            Err(StructureError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains('y'), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pdb_missing_atom() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pdb");
        std::fs::write(
            &path,
            "ATOM      1  N   ALA A   1       0.000   0.000   0.000  1.00  0.00           N\n\
             ATOM      2  CA  ALA A   1       1.458   0.000   0.000  1.00  0.00           C\n",
        )
        .unwrap();
        assert!(matches!(read_pdb(&path), Err(StructureError::MissingAtom { .. })));
    }

    #[test]
    fn base_structure_serde_roundtrip() {
        let b = helix(4);
        let s = serde_json::to_string(&b).unwrap();
        let back: BaseStructure = serde_json::from_str(&s).unwrap();
        assert_eq!(back.posed_atoms(), b.posed_atoms());
    }
}
