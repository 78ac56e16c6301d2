//! Small end-to-end run on the toy dataset with per-epoch diagnostics.
//!
//! Arguments are `key=value` pairs, e.g.
//! `cargo run --release --example recovery -- particles=2000 snr=1 e1=5 e2=5`.

use std::collections::HashMap;
use std::time::Instant;

use cryoflex::eval::{
    bimodality_coefficient, conditional_correlation, distance_marginal, emd_rmsd, fraction_below, prior_samples, AtomRef, AtomSet,
};
use cryoflex::geom::{geodesic_angle, Vec3};
use cryoflex::model::{decode_pose, ModelConfig, Stage};
use cryoflex::nn::Matrix;
use cryoflex::simulate::{hinge_conformation, simulate_dataset, ParticleDataset, SimulationConfig};
use cryoflex::structure::Conformation;
use cryoflex::train::{configure_for_dataset, split_indices, TrainConfig, Trainer};

fn main() {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().unwrap());
    let particles = get("particles", 8000.0) as usize;
    let verbose = get("verbose", 0.0) > 0.0;
    let enc: Vec<usize> = args
        .get("enc")
        .map_or("2048,1024,512,512", |s| s.as_str())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();

    let sim = SimulationConfig {
        particles,
        snr: get("snr", 0.1),
        seed: get("dseed", 0.0) as u64,
        ..SimulationConfig::default()
    };
    let t0 = Instant::now();
    let full = simulate_dataset(&sim).unwrap();
    println!("simulated {} particles, sigma {:.4}, {:.1}s", particles, full.meta.noise_sigma, t0.elapsed().as_secs_f64());
    let truth_all: Vec<Conformation> = (0..particles).map(|i| full.truth_conformation(i)).collect();
    let truth_rot: Vec<_> = full.truth.iter().map(|r| r.rotation).collect();
    let spec = full.meta.ensemble.clone();
    let data: ParticleDataset = full.into();

    let mut mcfg = ModelConfig {
        encoder_widths: enc,
        stage1_pose_samples: get("p1", 16.0) as usize,
        stage2_conf_samples: get("c2", 8.0) as usize,
        stage2_pose_samples: get("p2", 2.0) as usize,
        ..ModelConfig::default()
    };
    configure_for_dataset(&mut mcfg, &data.meta, data.base.n_residues());
    if let Some(s) = args.get("sigma") {
        mcfg.image_sigma = s.parse().unwrap();
    }
    let tcfg = TrainConfig {
        batch_size: get("batch", 64.0) as usize,
        stage1_epochs: get("e1", 10.0) as usize,
        stage2_epochs: get("e2", 10.0) as usize,
        learning_rate: get("lr", 3e-4),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&data, mcfg, tcfg.clone(), get("seed", 0.0) as u64).unwrap();

    let (_, held) = split_indices(particles, 20);
    let held: Vec<usize> = held.into_iter().take(400).collect();
    let held_imgs: Vec<Vec<f64>> = held.iter().map(|&i| data.stack.image_f64(i)).collect();
    let held_truth: Vec<Conformation> = held.iter().map(|&i| truth_all[i].clone()).collect();
    let base_conf = data.base.conformation();
    let a = AtomRef::new(0, "CA");
    let b = AtomRef::new(spec.n_residues - 1, "CA");
    let centers: Vec<f64> = spec
        .modes
        .iter()
        .map(|m| {
            let c = hinge_conformation(&data.base, m, m.angle_mean);
            (c.atom(a.residue, &a.atom).unwrap() - c.atom(b.residue, &b.atom).unwrap()).norm()
        })
        .collect();
    let cut = 0.5 * (centers[0] + centers[1]);
    println!("mode distances {centers:?}, cut {cut:.2}");
    let gt_n = held_truth.len().min(256);
    let degenerate = vec![base_conf.clone(); gt_n];
    let emd_base = emd_rmsd(&degenerate, &held_truth, gt_n, 0, AtomSet::Ca).unwrap().mean;
    println!("baseline emd {emd_base:.3}");

    let axis = {
        let ca = base_conf.ca_coords();
        let c = ca.iter().fold(Vec3::zeros(), |a, b| a + b) / ca.len() as f64;
        let mut v = Vec3::new(1.0, 0.3, 0.1);
        let cov = ca.iter().fold(nalgebra::Matrix3::zeros(), |m, p| m + (p - c) * (p - c).transpose());
        for _ in 0..100 {
            v = (cov * v).normalize();
        }
        println!("long axis {:.3?}", v.as_slice());
        v
    };
    let pose_err = |t: &Trainer| -> (f64, f64, f64, f64) {
        let refs: Vec<&[f64]> = held_imgs.iter().take(200).map(|v| v.as_slice()).collect();
        let rep = t.model.encode_representation(&t.store, &refs).unwrap();
        let q = t.model.encode_conformation(&t.store, &rep);
        let z = Matrix::from_vec(q.len(), t.model.config.conf_dim, q.iter().flat_map(|g| g.mu.clone()).collect()).unwrap();
        let (_, drep) = t.model.decode_conformation(&t.store, &z).unwrap();
        let pq = t.model.encode_pose(&t.store, &rep, &drep, 1).unwrap();
        let preds: Vec<_> = pq.iter().map(|g| decode_pose(&g.mu, t.model.config.translation_scale).unwrap().rotation).collect();
        let truth: Vec<_> = held.iter().take(preds.len()).map(|&i| truth_rot[i]).collect();
        let med = |mut v: Vec<f64>| {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v[v.len() / 2]
        };
        let n = preds.len();
        let direct = med((0..n).map(|i| geodesic_angle(&preds[i], &truth[i]).to_degrees()).collect());
        // invariant to a fixed body-frame offset
        let rel = med((0..n - 1)
            .map(|i| geodesic_angle(&(preds[i] * preds[i + 1].transpose()), &(truth[i] * truth[i + 1].transpose())).to_degrees())
            .collect());
        let rel_t = med((0..n - 1)
            .map(|i| geodesic_angle(&(preds[i].transpose() * preds[i + 1]), &(truth[i] * truth[i + 1].transpose())).to_degrees())
            .collect());
        // in-plane direction of the long axis, modulo 180°
        let rod = med((0..n)
            .map(|i| {
                let (p, q) = (preds[i] * axis, truth[i] * axis);
                let d = (p.y.atan2(p.x) - q.y.atan2(q.x)).to_degrees().rem_euclid(180.0);
                d.min(180.0 - d)
            })
            .collect());
        (direct, rel, rel_t, rod)
    };

    for stage in [Stage::PoseOnly, Stage::Full] {
        let epochs = tcfg.epochs(stage);
        for e in 0..epochs {
            let te = Instant::now();
            let mut sum = [0.0f64; 6];
            let mut n = 0;
            while t.progress.epoch == e && t.progress.stage == stage {
                let r = t.step().unwrap();
                let l = r.loss;
                if verbose {
                    println!("  step {} {:?}", r.step, l);
                }
                for (s, v) in sum.iter_mut().zip([l.total, l.reconstruction, l.kl_conf, l.kl_pose, l.centering, l.backbone]) {
                    *s += v;
                }
                n += 1;
            }
            let m: Vec<String> = sum.iter().map(|s| format!("{:.4}", s / n as f64)).collect();
            let mut line = format!(
                "{stage:?} epoch {e} [{:.0}s] loss {} pose_err_med {:.1?}",
                te.elapsed().as_secs_f64(),
                m.join(" "),
                pose_err(&t)
            );
            if stage == Stage::Full && (e + 1) % get("every", 1.0) as usize == 0 || e + 1 == epochs && stage == Stage::Full {
                let (prior, _) = prior_samples(&t.model, &t.store, 2048, 1).unwrap();
                let emd = emd_rmsd(&prior, &held_truth, gt_n, 0, AtomSet::Ca).unwrap().mean;
                let d = distance_marginal(&prior, &a, &b).unwrap();
                let bc = bimodality_coefficient(&d);
                let frac_long = 1.0 - fraction_below(&d, cut);
                let mean_d = d.iter().sum::<f64>() / d.len() as f64;
                let cc = conditional_correlation(&t.model, &t.store, &held_imgs, Some(&held_truth), (&a, &b), 3).unwrap();
                line += &format!(
                    " | emd {emd:.3} ({:.0}% of base) bc {bc:.3} frac_long {frac_long:.3} mean_d {mean_d:.2} r {:.3} z {:.1}",
                    100.0 * emd / emd_base,
                    cc.r,
                    cc.z
                );
            }
            println!("{line}");
        }
        t.advance_stage();
    }
}
