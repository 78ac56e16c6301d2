//! Rigid-body mathematics: rotations, frames, Gram-Schmidt orthogonalization
//! and Kabsch superposition.
//!
//! Rotation matrices built by [`gram_schmidt`] hold the orthonormal vectors
//! `e1, e2, e3` as **columns**, so `R * x` maps local coordinates into the
//! parent frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Norm threshold below which Gram-Schmidt inputs are considered degenerate.
pub const GS_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate Gram-Schmidt input: {0}")]
    DegenerateInput(&'static str),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// A rotation followed by a translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidFrame {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidFrame {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidFrame {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self::new(r, Vec3::zeros())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        apply(self, p)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }
}

/// Returns `R p + t`.
pub fn apply(frame: &RigidFrame, p: &Vec3) -> Vec3 {
    frame.rotation * p + frame.translation
}

/// Frame that applies `inner` first and then `outer`.
pub fn compose(outer: &RigidFrame, inner: &RigidFrame) -> RigidFrame {
    RigidFrame::new(
        outer.rotation * inner.rotation,
        outer.rotation * inner.translation + outer.translation,
    )
}

/// Orthonormalizes two vectors into a proper rotation with columns
/// `e1 = v1/|v1|`, `e2` (the normalized part of `v2` orthogonal to `e1`) and
/// `e3 = e1 x e2`.
pub fn gram_schmidt(v1: &Vec3, v2: &Vec3) -> Result<Mat3, GeomError> {
    let (e1, e2, _, _, _) = gs_parts(v1, v2)?;
    let e3 = e1.cross(&e2);
    Ok(Mat3::from_columns(&[e1, e2, e3]))
}

// e1, e2, |v1|, |u2|, e1.v2
fn gs_parts(v1: &Vec3, v2: &Vec3) -> Result<(Vec3, Vec3, f64, f64, f64), GeomError> {
    let n1 = v1.norm();
    if !(n1 > GS_EPS) {
        return Err(GeomError::DegenerateInput("first vector has near-zero norm"));
    }
    let e1 = v1 / n1;
    let a = e1.dot(v2);
    let u2 = v2 - e1 * a;
    let n2 = u2.norm();
    if !(n2 > GS_EPS) {
        return Err(GeomError::DegenerateInput(
            "second vector is parallel to the first",
        ));
    }
    Ok((e1, u2 / n2, n1, n2, a))
}

/// Reverse-mode gradient of [`gram_schmidt`]: given `dL/dR`, returns
/// `(dL/dv1, dL/dv2)`.
pub fn gram_schmidt_backward(
    v1: &Vec3,
    v2: &Vec3,
    grad_r: &Mat3,
) -> Result<(Vec3, Vec3), GeomError> {
    let (e1, e2, n1, n2, a) = gs_parts(v1, v2)?;
    let g1: Vec3 = grad_r.column(0).into();
    let g2: Vec3 = grad_r.column(1).into();
    let g3: Vec3 = grad_r.column(2).into();

    // e3 = e1 x e2
    let mut ge1 = g1 + e2.cross(&g3);
    let ge2 = g2 + g3.cross(&e1);

    // e2 = u2 / |u2|
    let gu2 = (ge2 - e2 * e2.dot(&ge2)) / n2;

    // u2 = v2 - e1 (e1 . v2)
    let e1_gu2 = e1.dot(&gu2);
    let gv2 = gu2 - e1 * e1_gu2;
    ge1 -= gu2 * a + v2 * e1_gu2;

    // e1 = v1 / |v1|
    let gv1 = (ge1 - e1 * e1.dot(&ge1)) / n1;
    Ok((gv1, gv2))
}

/// Angle of the relative rotation `Raᵀ Rb`, in radians.
pub fn geodesic_angle(ra: &Mat3, rb: &Mat3) -> f64 {
    let c = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Rotation by `angle` radians about the unit vector `axis` (right-handed).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let (s, c) = angle.sin_cos();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * s + kx * kx * (1.0 - c)
}

/// Optimal rigid superposition of `p` onto `q`.
///
/// Returns the frame `F` minimizing `sum |F(p_i) - q_i|^2` (proper rotations
/// only) together with the resulting RMSD.
pub fn kabsch(p: &[Vec3], q: &[Vec3]) -> Result<(RigidFrame, f64), GeomError> {
    if p.len() != q.len() {
        return Err(GeomError::LengthMismatch(p.len(), q.len()));
    }
    if p.len() < 3 {
        return Err(GeomError::DegenerateGeometry(format!(
            "need at least 3 points, got {}",
            p.len()
        )));
    }
    let cp = centroid(p);
    let cq = centroid(q);
    check_spread(p, &cp, "first")?;
    check_spread(q, &cq, "second")?;

    let mut h = Mat3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - cp) * (b - cq).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let corr = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v * corr * u.transpose();
    let frame = RigidFrame::new(r, cq - r * cp);
    Ok((frame, rmsd_under(&frame, p, q)))
}

/// RMSD between `frame(p_i)` and `q_i`.
pub fn rmsd_under(frame: &RigidFrame, p: &[Vec3], q: &[Vec3]) -> f64 {
    let ss: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (frame.apply(a) - b).norm_squared())
        .sum();
    (ss / p.len() as f64).sqrt()
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = Vec3::zeros();
    for p in points {
        c += p;
    }
    c / points.len().max(1) as f64
}

// Collinear or coincident sets have fewer than two non-negligible principal
// directions.
fn check_spread(points: &[Vec3], c: &Vec3, which: &str) -> Result<(), GeomError> {
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if !(ev[0] > 1e-20) {
        return Err(GeomError::DegenerateGeometry(format!(
            "{which} point set is coincident"
        )));
    }
    if ev[1] <= 1e-12 * ev[0] {
        return Err(GeomError::DegenerateGeometry(format!(
            "{which} point set is collinear"
        )));
    }
    Ok(())
}
