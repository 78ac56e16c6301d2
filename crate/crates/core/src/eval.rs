//! Ensemble-level evaluation: RMSD matrices, optimal assignment, EMD-RMSD,
//! inter-atomic distance marginals, quadrant proportions, posterior
//! correlation against ground truth and latent interpolation.

use std::io::{self, Write};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{kabsch, GeomError, Vec3};
use crate::model::{Model, ModelError};
use crate::nn::{counter_rng, sample_reparameterized, standard_normal_vec, Matrix, NnError, ParameterStore};
use crate::structure::Conformation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("need {needed} samples, ensemble has {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("unknown atom {atom} in residue {residue}")]
    UnknownAtom { residue: usize, atom: String },
    #[error("ground truth is required for this analysis")]
    MissingGroundTruth,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Atoms compared by RMSD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomSet {
    #[default]
    Ca,
    Backbone,
}

fn coords(c: &Conformation, set: AtomSet) -> Vec<Vec3> {
    match set {
        AtomSet::Ca => c.ca_coords(),
        AtomSet::Backbone => c.select(&c.topology.backbone_indices()),
    }
}

/// Pairwise RMSD after optimal superposition; entry `[i][j]` compares
/// `a[i]` with `b[j]`.
pub fn rmsd_matrix(a: &[Conformation], b: &[Conformation], set: AtomSet) -> Result<Vec<Vec<f64>>, EvalError> {
    let ca: Vec<Vec<Vec3>> = a.iter().map(|c| coords(c, set)).collect();
    let cb: Vec<Vec<Vec3>> = b.iter().map(|c| coords(c, set)).collect();
    let n = ca.first().or(cb.first()).map_or(0, |v| v.len());
    if let Some(bad) = ca.iter().chain(&cb).find(|v| v.len() != n) {
        return Err(EvalError::LengthMismatch(format!("{} vs {} atoms", bad.len(), n)));
    }
    ca.par_iter()
        .map(|p| cb.iter().map(|q| Ok(kabsch(p, q)?.1)).collect::<Result<Vec<f64>, EvalError>>())
        .collect()
}

/// An optimal one-to-one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `permutation[i]` is the column assigned to row `i`.
    pub permutation: Vec<usize>,
    /// Cost of each assigned pair, by row.
    pub costs: Vec<f64>,
    pub mean: f64,
}

impl AssignmentResult {
    pub fn total(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Minimum-cost perfect matching on a square matrix, O(n³) shortest
/// augmenting paths with row and column potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult, EvalError> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(EvalError::LengthMismatch(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite { row: i, col: j });
        }
    }
    if n == 0 {
        return Ok(AssignmentResult {
            permutation: Vec::new(),
            costs: Vec::new(),
            mean: 0.0,
        });
    }
    // 1-based arrays; column 0 is a virtual start node
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let costs: Vec<f64> = permutation.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    let mean = costs.iter().sum::<f64>() / n as f64;
    Ok(AssignmentResult { permutation, costs, mean })
}

/// Mean RMSD of the optimal pairing between two equally sized ensembles.
pub fn emd_rmsd_paired(a: &[Conformation], b: &[Conformation], set: AtomSet) -> Result<AssignmentResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(format!("ensembles of {} and {}", a.len(), b.len())));
    }
    hungarian(&rmsd_matrix(a, b, set)?)
}

/// Seeded subsample of `n` members without replacement, in original order.
pub fn subsample<'a>(ens: &'a [Conformation], n: usize, seed: u64, stream: u64) -> Result<Vec<&'a Conformation>, EvalError> {
    if ens.len() < n {
        return Err(EvalError::InsufficientSamples {
            needed: n,
            available: ens.len(),
        });
    }
    let mut idx = sample(&mut counter_rng(seed, stream, 0, 0), ens.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| &ens[i]).collect())
}

/// EMD-RMSD between two ensembles using `n` seeded draws from each. Both
/// draws use the same index stream, so equal ensembles give zero.
pub fn emd_rmsd(a: &[Conformation], b: &[Conformation], n: usize, seed: u64, set: AtomSet) -> Result<AssignmentResult, EvalError> {
    let sa: Vec<Conformation> = subsample(a, n, seed, 0)?.into_iter().cloned().collect();
    let sb: Vec<Conformation> = subsample(b, n, seed, 0)?.into_iter().cloned().collect();
    emd_rmsd_paired(&sa, &sb, set)
}

/// Names one atom: residue index and atom name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomRef {
    pub residue: usize,
    pub atom: String,
}

impl AtomRef {
    pub fn new(residue: usize, atom: &str) -> Self {
        Self {
            residue,
            atom: atom.to_string(),
        }
    }

    /// Parses `"<residue>:<atom>"`, e.g. `"0:CA"`.
    pub fn parse(s: &str) -> Option<Self> {
        let (r, a) = s.split_once(':')?;
        Some(Self::new(r.trim().parse().ok()?, a.trim()))
    }
}

/// Distance between two atoms in every member of an ensemble (Å).
pub fn distance_marginal(ens: &[Conformation], a: &AtomRef, b: &AtomRef) -> Result<Vec<f64>, EvalError> {
    ens.iter()
        .map(|c| {
            let get = |r: &AtomRef| {
                c.atom(r.residue, &r.atom).ok_or_else(|| EvalError::UnknownAtom {
                    residue: r.residue,
                    atom: r.atom.clone(),
                })
            };
            Ok((get(a)? - get(b)?).norm())
        })
        .collect()
}

/// Fractions of points in each quadrant defined by two cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrants {
    /// x < x_cut, y < y_cut
    pub low_low: f64,
    /// x ≥ x_cut, y < y_cut
    pub high_low: f64,
    /// x < x_cut, y ≥ y_cut
    pub low_high: f64,
    /// x ≥ x_cut, y ≥ y_cut
    pub high_high: f64,
}

impl Quadrants {
    pub fn as_array(&self) -> [f64; 4] {
        [self.low_low, self.high_low, self.low_high, self.high_high]
    }
}

pub fn mode_proportions(xs: &[f64], ys: &[f64], x_cut: f64, y_cut: f64) -> Result<Quadrants, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(format!("{} x values, {} y values", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Err(EvalError::InsufficientSamples { needed: 1, available: 0 });
    }
    let mut counts = [0usize; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        counts[(x >= x_cut) as usize + 2 * (y >= y_cut) as usize] += 1;
    }
    // the last fraction absorbs rounding so that a left-to-right sum is exactly 1
    let n = xs.len() as f64;
    let f = |k: usize| counts[k] as f64 / n;
    let (a, b, c) = (f(0), f(1), f(2));
    Ok(Quadrants {
        low_low: a,
        high_low: b,
        low_high: c,
        high_high: if counts[3] == 0 { 0.0 } else { 1.0 - ((a + b) + c) },
    })
}

/// Fraction of values below `cut`.
pub fn fraction_below(xs: &[f64], cut: f64) -> f64 {
    xs.iter().filter(|&&x| x < cut).count() as f64 / xs.len() as f64
}

/// Sarle's bimodality coefficient `(g² + 1) / (k + 3(n-1)²/((n-2)(n-3)))`
/// with sample skewness `g` and excess kurtosis `k`; values above 5/9 point
/// to a bimodal distribution.
pub fn bimodality_coefficient(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let g1 = m3 / m2.powf(1.5);
    let g1 = g1 * (n * (n - 1.0)).sqrt() / (n - 2.0);
    let k = m4 / (m2 * m2) - 3.0;
    let k = (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * k + 6.0);
    (g1 * g1 + 1.0) / (k + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(format!("{} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(EvalError::InsufficientSamples {
            needed: 2,
            available: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One-sided Fisher z statistic for `r > 0` with `n` pairs; exceeds 2.326
/// at the 99% level.
pub fn correlation_z(r: f64, n: usize) -> f64 {
    r.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh() * (n as f64 - 3.0).sqrt()
}

pub const Z_99_ONE_SIDED: f64 = 2.326_347_874_040_841;

/// Predicted against true distances for a set of particles.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub r: f64,
    pub z: f64,
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Draws one posterior conformation per image and correlates the chosen
/// distance with the ground-truth distance of the same particle.
pub fn conditional_correlation(
    model: &Model,
    store: &ParameterStore,
    images: &[Vec<f64>],
    truth: Option<&[Conformation]>,
    pair: (&AtomRef, &AtomRef),
    seed: u64,
) -> Result<CorrelationResult, EvalError> {
    let truth = truth.ok_or(EvalError::MissingGroundTruth)?;
    if truth.len() != images.len() {
        return Err(EvalError::LengthMismatch(format!("{} images, {} truth records", images.len(), truth.len())));
    }
    let predicted_confs = posterior_samples(model, store, images, seed)?;
    let predicted = distance_marginal(&predicted_confs, pair.0, pair.1)?;
    let truth = distance_marginal(truth, pair.0, pair.1)?;
    let r = pearson(&predicted, &truth)?;
    Ok(CorrelationResult {
        r,
        z: correlation_z(r, predicted.len()),
        predicted,
        truth,
    })
}

/// Posterior means of the conformation latent for each image.
pub fn encode_means(model: &Model, store: &ParameterStore, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let refs: Vec<&[f64]> = chunk.iter().map(|v| v.as_slice()).collect();
        let rep = model.encode_representation(store, &refs)?;
        out.extend(model.encode_conformation(store, &rep).into_iter().map(|q| q.mu));
    }
    Ok(out)
}

/// One reparameterized posterior sample per image, decoded to atoms.
pub fn posterior_samples(model: &Model, store: &ParameterStore, images: &[Vec<f64>], seed: u64) -> Result<Vec<Conformation>, EvalError> {
    let d = model.config.conf_dim;
    let mut out = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(64).enumerate() {
        let refs: Vec<&[f64]> = chunk.iter().map(|v| v.as_slice()).collect();
        let rep = model.encode_representation(store, &refs)?;
        let qs = model.encode_conformation(store, &rep);
        let mut z = Matrix::zeros(qs.len(), d);
        for (k, q) in qs.iter().enumerate() {
            let eps = standard_normal_vec(&mut counter_rng(seed, 1, (c * 64 + k) as u64, 0), d);
            z.row_mut(k).copy_from_slice(&sample_reparameterized(q, &eps)?);
        }
        out.extend(model.decode_structures(store, &z)?);
    }
    Ok(out)
}

/// `n` draws from the standard-normal prior, decoded; row `i` of the
/// returned matrix is the latent of conformation `i`.
pub fn prior_samples(model: &Model, store: &ParameterStore, n: usize, seed: u64) -> Result<(Vec<Conformation>, Matrix), EvalError> {
    let d = model.config.conf_dim;
    let mut rng = counter_rng(seed, 2, 0, 0);
    let z = Matrix::from_vec(n, d, standard_normal_vec(&mut rng, n * d))?;
    Ok((decode_rows(model, store, &z)?, z))
}

/// Decodes every row of `z` in chunks.
pub fn decode_rows(model: &Model, store: &ParameterStore, z: &Matrix) -> Result<Vec<Conformation>, EvalError> {
    let mut out = Vec::with_capacity(z.rows);
    let chunk = 256;
    for start in (0..z.rows).step_by(chunk) {
        let end = (start + chunk).min(z.rows);
        let part = Matrix::from_vec(end - start, z.cols, z.data[start * z.cols..end * z.cols].to_vec())?;
        out.extend(model.decode_structures(store, &part)?);
    }
    Ok(out)
}

/// Decodes `steps` equally spaced points on the segment from `z_start` to
/// `z_end`; the first and last use the endpoints exactly.
pub fn latent_interpolation(
    model: &Model,
    store: &ParameterStore,
    z_start: &[f64],
    z_end: &[f64],
    steps: usize,
) -> Result<(Vec<Conformation>, Matrix), EvalError> {
    let d = model.config.conf_dim;
    if steps < 2 {
        return Err(EvalError::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    if z_start.len() != d || z_end.len() != d {
        return Err(EvalError::LengthMismatch(format!("latents must have {d} entries")));
    }
    let mut z = Matrix::zeros(steps, d);
    for k in 0..steps {
        let row = z.row_mut(k);
        if k + 1 == steps {
            row.copy_from_slice(z_end);
        } else {
            let t = k as f64 / (steps - 1) as f64;
            for i in 0..d {
                row[i] = z_start[i] + t * (z_end[i] - z_start[i]);
            }
        }
    }
    Ok((decode_rows(model, store, &z)?, z))
}

pub fn write_assignment_csv<W: Write>(mut w: W, a: &AssignmentResult) -> io::Result<()> {
    writeln!(w, "row,col,rmsd")?;
    for (i, (&j, c)) in a.permutation.iter().zip(&a.costs).enumerate() {
        writeln!(w, "{i},{j},{c}")?;
    }
    Ok(())
}

/// One column per named series; series must have equal length.
pub fn write_columns_csv<W: Write>(mut w: W, columns: &[(&str, &[f64])]) -> io::Result<()> {
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    writeln!(w, "index,{}", names.join(","))?;
    let n = columns.first().map_or(0, |c| c.1.len());
    for i in 0..n {
        write!(w, "{i}")?;
        for (_, col) in columns {
            write!(w, ",{}", col[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_quadrants_csv<W: Write>(mut w: W, q: &Quadrants, x_cut: f64, y_cut: f64) -> io::Result<()> {
    writeln!(w, "x_cut,y_cut,low_low,high_low,low_high,high_high")?;
    writeln!(w, "{x_cut},{y_cut},{},{},{},{}", q.low_low, q.high_low, q.low_high, q.high_high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{gram_schmidt, RigidFrame};
    use crate::simulate::{generate_ensemble, ToyEnsembleSpec};
    use brute::permutations;
    use rand::Rng;

    // small exhaustive permutation generator for the brute-force oracle
    mod brute {
        pub fn permutations(n: usize) -> Vec<Vec<usize>> {
            let mut out = Vec::new();
            let mut p: Vec<usize> = (0..n).collect();
            heap(n, &mut p, &mut out);
            out
        }

        fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(p.clone());
                return;
            }
            for i in 0..k - 1 {
                heap(k - 1, p, out);
                if k % 2 == 0 {
                    p.swap(i, k - 1);
                } else {
                    p.swap(0, k - 1);
                }
            }
            heap(k - 1, p, out);
        }
    }

    fn toy(n: usize, seed: u64) -> Vec<Conformation> {
        generate_ensemble(&ToyEnsembleSpec::default(), n, &mut counter_rng(seed, 0, 0, 0)).unwrap().0
    }

    fn random_frame(rng: &mut impl Rng) -> RigidFrame {
        let v = |rng: &mut dyn rand::RngCore| Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        RigidFrame::new(gram_schmidt(&v(rng), &v(rng)).unwrap(), v(rng) * 40.0)
    }

    #[test]
    fn hungarian_two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.total(), 2.0);
    }

    #[test]
    fn hungarian_prefers_zero_diagonal() {
        let n = 6;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 100.0 + (i * n + j) as f64 }).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.permutation, (0..n).collect::<Vec<_>>());
        assert_eq!(a.total(), 0.0);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let perms = permutations(8);
        assert_eq!(perms.len(), 40_320);
        let mut rng = counter_rng(11, 0, 0, 0);
        for _ in 0..100 {
            let cost: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|_| rng.gen::<f64>() * 10.0).collect()).collect();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&cost).unwrap();
            assert!((a.total() - best).abs() < 1e-9);
            let mut seen = a.permutation.clone();
            seen.sort();
            assert_eq!(seen, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn hungarian_rejects_nan() {
        let r = hungarian(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]);
        assert!(matches!(r, Err(EvalError::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn rmsd_matrix_properties() {
        let ens = toy(4, 1);
        let m = rmsd_matrix(&ens, &ens, AtomSet::Ca).unwrap();
        for i in 0..4 {
            assert!(m[i][i] < 1e-9);
        }
        let mut rng = counter_rng(2, 0, 0, 0);
        let moved: Vec<Conformation> = ens.iter().map(|c| c.transformed(&random_frame(&mut rng))).collect();
        let m2 = rmsd_matrix(&moved, &ens, AtomSet::Ca).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((m[i][j] - m2[i][j]).abs() < 1e-9);
            }
        }
        let sub = &ens[..3];
        let m3 = rmsd_matrix(sub, sub, AtomSet::Backbone).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let p = sub[i].select(&sub[i].topology.backbone_indices());
                let q = sub[j].select(&sub[j].topology.backbone_indices());
                assert_eq!(m3[i][j], kabsch(&p, &q).unwrap().1);
            }
        }
    }

    #[test]
    fn emd_rmsd_identities() {
        let ens = toy(20, 3);
        assert!(emd_rmsd(&ens, &ens, 20, 0, AtomSet::Ca).unwrap().mean < 1e-9);
        assert!(emd_rmsd(&ens, &ens, 7, 5, AtomSet::Ca).unwrap().mean < 1e-9);
        let single_a = &ens[..1];
        let single_b = &ens[1..2];
        let e = emd_rmsd(single_a, single_b, 1, 0, AtomSet::Ca).unwrap();
        let direct = kabsch(&single_a[0].ca_coords(), &single_b[0].ca_coords()).unwrap().1;
        assert_eq!(e.mean, direct);
        assert!(matches!(
            emd_rmsd(single_a, &ens, 2, 0, AtomSet::Ca),
            Err(EvalError::InsufficientSamples { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn emd_rmsd_is_symmetric_and_sensitive() {
        let a = toy(48, 4);
        let b = toy(48, 5);
        let ab = emd_rmsd_paired(&a, &b, AtomSet::Ca).unwrap().mean;
        let ba = emd_rmsd_paired(&b, &a, AtomSet::Ca).unwrap().mean;
        assert!((ab - ba).abs() < 1e-9);
        let base = ToyEnsembleSpec::default().base_structure().unwrap().conformation();
        let degenerate = vec![base; 48];
        assert!(emd_rmsd_paired(&degenerate, &a, AtomSet::Ca).unwrap().mean > ab);
    }

    #[test]
    fn distance_marginal_basics() {
        let ens = toy(30, 6);
        let a = AtomRef::new(0, "CA");
        let b = AtomRef::new(31, "CA");
        let d = distance_marginal(&ens, &a, &b).unwrap();
        let mut rng = counter_rng(7, 0, 0, 0);
        let moved: Vec<Conformation> = ens.iter().map(|c| c.transformed(&random_frame(&mut rng))).collect();
        let d2 = distance_marginal(&moved, &a, &b).unwrap();
        for (x, y) in d.iter().zip(&d2) {
            assert!((x - y).abs() < 1e-9);
        }
        let direct = (ens[0].atom(0, "CA").unwrap() - ens[0].atom(31, "CA").unwrap()).norm();
        assert_eq!(d[0], direct);
        assert!(matches!(
            distance_marginal(&ens, &AtomRef::new(0, "CB"), &b),
            Err(EvalError::UnknownAtom { residue: 0, .. })
        ));
        assert_eq!(AtomRef::parse("12:CA"), Some(AtomRef::new(12, "CA")));
    }

    #[test]
    fn toy_marginal_is_bimodal_at_hinge_geometry() {
        let spec = ToyEnsembleSpec::default();
        let base = spec.base_structure().unwrap();
        let (ens, labels) = generate_ensemble(&spec, 4000, &mut counter_rng(8, 0, 0, 0)).unwrap();
        let a = AtomRef::new(0, "CA");
        let b = AtomRef::new(31, "CA");
        let d = distance_marginal(&ens, &a, &b).unwrap();
        let centers: Vec<f64> = spec
            .modes
            .iter()
            .map(|m| {
                let c = crate::simulate::hinge_conformation(&base, m, m.angle_mean);
                (c.atom(0, "CA").unwrap() - c.atom(31, "CA").unwrap()).norm()
            })
            .collect();
        for k in 0..2 {
            let mine: Vec<f64> = d.iter().zip(&labels).filter(|(_, l)| l.mode == k).map(|(x, _)| *x).collect();
            let mean = mine.iter().sum::<f64>() / mine.len() as f64;
            assert!((mean - centers[k]).abs() < 0.3, "{mean} vs {}", centers[k]);
        }
        assert!(bimodality_coefficient(&d) > 5.0 / 9.0);
        let cut = 0.5 * (centers[0] + centers[1]);
        let frac_mode0 = if centers[0] < centers[1] {
            fraction_below(&d, cut)
        } else {
            1.0 - fraction_below(&d, cut)
        };
        assert!((frac_mode0 - 0.6).abs() < 0.03);
    }

    #[test]
    fn bimodality_coefficient_separates_shapes() {
        let mut rng = counter_rng(9, 0, 0, 0);
        let uni: Vec<f64> = standard_normal_vec(&mut rng, 5000);
        assert!(bimodality_coefficient(&uni) < 0.4);
        let bi: Vec<f64> = uni.iter().enumerate().map(|(i, x)| x * 0.3 + if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
        assert!(bimodality_coefficient(&bi) > 0.8);
    }

    #[test]
    fn quadrant_fractions() {
        let q = mode_proportions(&[1.0, 2.0], &[1.0, 1.5], 5.0, 5.0).unwrap();
        assert_eq!(q.as_array(), [1.0, 0.0, 0.0, 0.0]);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                xs.push(i as f64);
                ys.push(j as f64);
            }
        }
        let q = mode_proportions(&xs, &ys, 20.0, 20.0).unwrap();
        assert_eq!(q.as_array().iter().sum::<f64>(), 1.0);
        for f in q.as_array() {
            assert!((f - 0.25).abs() < 0.01);
        }
        let mut rng = counter_rng(10, 0, 0, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..200);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let q = mode_proportions(&xs, &ys, 0.3, 0.7).unwrap();
            assert_eq!(q.as_array().iter().sum::<f64>(), 1.0);
        }
        assert!(matches!(mode_proportions(&[1.0], &[], 0.0, 0.0), Err(EvalError::LengthMismatch(_))));
    }

    #[test]
    fn pearson_limits() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.7).collect();
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = counter_rng(12, 0, 0, 0);
        let n = 2000;
        let a = standard_normal_vec(&mut rng, n);
        let b = standard_normal_vec(&mut rng, n);
        assert!(pearson(&a, &b).unwrap().abs() < 3.0 / (n as f64).sqrt());
        assert!(correlation_z(0.2, 400) > Z_99_ONE_SIDED);
        assert!(correlation_z(0.05, 400) < Z_99_ONE_SIDED);
    }
}
