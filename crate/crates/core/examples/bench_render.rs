use std::time::Instant;

use cryoflex::geom::Vec3;
use cryoflex::render::{project_into, CtfParams, Pose, ProjectionScratch, RenderConfig, Renderer};
use cryoflex::structure::{ideal_chain, BackboneTorsions};

fn main() {
    let base = ideal_chain(32, &[BackboneTorsions::ALPHA_HELIX]).unwrap();
    let cfg = RenderConfig::default();
    let r = Renderer::new(cfg, Some(&CtfParams::default())).unwrap();
    let atoms: Vec<Vec3> = base.posed_atoms().to_vec();
    let mut s = r.scratch();
    let mut out = vec![0.0; 4096];
    let n = 2000;
    let t = Instant::now();
    for _ in 0..n {
        r.render_into(&atoms, &Pose::identity(), &mut out, &mut s);
    }
    println!("render {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);
    let mut ps = ProjectionScratch::default();
    let t = Instant::now();
    for _ in 0..n {
        out.iter_mut().for_each(|v| *v = 0.0);
        project_into(&atoms, &cfg, &mut out, &mut ps);
    }
    println!("project {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);
    let conv = r.convolver();
    let mut cs = conv.scratch();
    let inp = out.clone();
    let t = Instant::now();
    for _ in 0..n {
        conv.apply_into(&inp, &mut out, &mut cs);
    }
    println!("conv {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);
    let up = out.clone();
    let mut g = r.render_backward(&atoms, &Pose::identity(), &cfg.blank());
    let t = Instant::now();
    for _ in 0..n {
        r.render_backward_into(&atoms, &Pose::identity(), &up, &mut g, &mut s);
    }
    println!("backward {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);
}
