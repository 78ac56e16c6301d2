use std::sync::Arc;
use std::time::Instant;

use cryoflex::model::{ImageNoise, Model, ModelConfig, Stage};
use cryoflex::nn::{counter_rng, standard_normal_vec, ParameterStore};
use cryoflex::render::{CtfParams, RenderConfig, Renderer};
use cryoflex::structure::{ideal_chain, BackboneTorsions};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (batch, p1, c2, p2) = (args[0], args[1], args[2], args[3]);
    let base = Arc::new(ideal_chain(32, &[BackboneTorsions::ALPHA_HELIX]).unwrap());
    let renderer = Renderer::new(RenderConfig::default(), Some(&CtfParams::default())).unwrap();
    let cfg = ModelConfig {
        stage1_pose_samples: p1,
        stage2_conf_samples: c2,
        stage2_pose_samples: p2,
        ..ModelConfig::default()
    };
    let mut store = ParameterStore::new();
    let mut rng = counter_rng(0, 0, 0, 0);
    let model = Model::new(cfg.clone(), base, renderer, &mut store, &mut rng).unwrap();
    let imgs: Vec<Vec<f64>> = (0..batch).map(|_| standard_normal_vec(&mut rng, 4096)).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    for stage in [Stage::PoseOnly, Stage::Full] {
        let noise: Vec<ImageNoise> = (0..batch).map(|_| ImageNoise::draw(&cfg, stage, &mut rng)).collect();
        let mut g = store.grad_buffer();
        let t = Instant::now();
        model.objective_batch(&store, &refs, &noise, stage, Some(&mut g)).unwrap();
        let dt = t.elapsed().as_secs_f64();
        println!("{stage:?}: {dt:.3} s per batch of {batch}, {:.2} ms/image", dt * 1e3 / batch as f64);
    }
}
