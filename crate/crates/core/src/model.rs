//! The variational autoencoder: image encoder, conformation and pose
//! posteriors, the residue-frame decoder, and the per-image objective with
//! its full reverse-mode gradient.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{gram_schmidt, gram_schmidt_backward, GeomError, Mat3, RigidFrame, Vec3};
use crate::nn::{
    kl_backward, kl_to_standard_normal, layer_norm_backward, layer_norm_forward, leaky_relu, leaky_relu_grad,
    linear_backward_accumulate, linear_forward, map, map_backward, relu, relu_grad, softplus, softplus_grad,
    standard_normal_vec, truncated_normal_init, DiagonalGaussian, GradBuffer, LayerNormOut, Matrix, NnError, ParamId,
    ParameterStore,
};
use crate::render::{RenderScratch, Renderer, RenderGrad, Pose, HALF_LN_2PI};
use crate::structure::{
    apply_deltas, apply_deltas_backward, backbone_continuity_loss, centering_loss, BaseStructure, Conformation,
    DeltaFrames, StructureError, PEPTIDE_BOND,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub const POSE_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub encoder_widths: Vec<usize>,
    pub conf_dim: usize,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub decoded_dim: usize,
    pub pose_hidden: usize,
    pub pose_layers: usize,
    pub n_residues: usize,
    pub stage1_pose_samples: usize,
    pub stage2_conf_samples: usize,
    pub stage2_pose_samples: usize,
    pub beta_conf: f64,
    pub beta_pose: f64,
    pub w_center: f64,
    pub w_backbone: f64,
    /// Pixel noise scale of the Gaussian likelihood.
    pub image_sigma: f64,
    /// Å of in-plane shift per pose-latent unit.
    pub translation_scale: f64,
    pub ideal_bond: f64,
    /// Samples whose importance weight falls below this value skip the
    /// backward render; 0 keeps the gradient exact.
    pub grad_weight_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            encoder_widths: vec![2048, 1024, 512, 512],
            conf_dim: 32,
            decoder_width: 256,
            decoder_blocks: 5,
            decoded_dim: 512,
            pose_hidden: 32,
            pose_layers: 3,
            n_residues: 32,
            stage1_pose_samples: 128,
            stage2_conf_samples: 64,
            stage2_pose_samples: 4,
            beta_conf: 1.0,
            beta_pose: 0.01,
            w_center: 0.1,
            w_backbone: 0.01,
            image_sigma: 1.0,
            translation_scale: 10.0,
            ideal_bond: PEPTIDE_BOND,
            grad_weight_floor: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("conf_dim", self.conf_dim),
            ("decoder_width", self.decoder_width),
            ("decoded_dim", self.decoded_dim),
            ("pose_hidden", self.pose_hidden),
            ("n_residues", self.n_residues),
            ("stage1_pose_samples", self.stage1_pose_samples),
            ("stage2_conf_samples", self.stage2_conf_samples),
            ("stage2_pose_samples", self.stage2_pose_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(ModelError::InvalidConfig("encoder widths must be non-empty and positive".into()));
        }
        let weights = [
            ("beta_conf", self.beta_conf),
            ("beta_pose", self.beta_pose),
            ("w_center", self.w_center),
            ("w_backbone", self.w_backbone),
            ("grad_weight_floor", self.grad_weight_floor),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) {
                return Err(ModelError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if !(self.image_sigma > 0.0) || !(self.translation_scale > 0.0) {
            return Err(ModelError::InvalidConfig("image_sigma and translation_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn rep_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    /// `(conformation samples, pose samples per conformation)` per image.
    pub fn samples(&self, stage: Stage) -> (usize, usize) {
        match stage {
            Stage::PoseOnly => (1, self.stage1_pose_samples),
            Stage::Full => (self.stage2_conf_samples, self.stage2_pose_samples),
        }
    }
}

/// Training stage: pose-only against the base structure, or the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[serde(rename = "pose")]
    PoseOnly,
    Full,
}

/// Per-image objective components. `total` is the minimized quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Negative log-mean-exp of the sample log-likelihoods.
    pub reconstruction: f64,
    pub kl_conf: f64,
    pub kl_pose: f64,
    pub centering: f64,
    pub backbone: f64,
}

impl LossBreakdown {
    pub fn assemble(cfg: &ModelConfig, reconstruction: f64, kl_conf: f64, kl_pose: f64, centering: f64, backbone: f64) -> Self {
        Self {
            total: reconstruction
                + cfg.beta_conf * kl_conf
                + cfg.beta_pose * kl_pose
                + cfg.w_center * centering
                + cfg.w_backbone * backbone,
            reconstruction,
            kl_conf,
            kl_pose,
            centering,
            backbone,
        }
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for it in items {
            m.total += it.total / n;
            m.reconstruction += it.reconstruction / n;
            m.kl_conf += it.kl_conf / n;
            m.kl_pose += it.kl_pose / n;
            m.centering += it.centering / n;
            m.backbone += it.backbone / n;
        }
        m
    }
}

/// `log(mean(exp(x)))`, stabilized by the maximum.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln() - (xs.len() as f64).ln()
}

/// Normalized importance weights `exp(x_n) / sum exp(x)`.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Standard-normal draws consumed by one image's objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageNoise {
    /// One row per conformation sample.
    pub conf: Vec<Vec<f64>>,
    /// `conf.len() * pose_per_conf` rows, grouped by conformation sample.
    pub pose: Vec<Vec<f64>>,
}

impl ImageNoise {
    pub fn draw(cfg: &ModelConfig, stage: Stage, rng: &mut impl Rng) -> Self {
        let (c, p) = cfg.samples(stage);
        let conf = (0..c).map(|_| standard_normal_vec(rng, cfg.conf_dim)).collect();
        let pose = (0..c * p).map(|_| standard_normal_vec(rng, POSE_DIM)).collect();
        Self { conf, pose }
    }
}

/// Maps a pose latent to an in-plane shift and a rotation.
pub fn decode_pose(z: &[f64], translation_scale: f64) -> Result<Pose, ModelError> {
    if z.len() != POSE_DIM {
        return Err(ModelError::ShapeMismatch(format!("pose latent has {} entries, expected 8", z.len())));
    }
    let v1 = Vec3::new(z[2], z[3], z[4]);
    let v2 = Vec3::new(z[5], z[6], z[7]);
    Ok(Pose {
        rotation: gram_schmidt(&v1, &v2)?,
        shift: [translation_scale * z[0], translation_scale * z[1]],
    })
}

/// Pullback of [`decode_pose`].
pub fn decode_pose_backward(z: &[f64], translation_scale: f64, d_rot: &Mat3, d_shift: [f64; 2]) -> Result<[f64; 8], ModelError> {
    let v1 = Vec3::new(z[2], z[3], z[4]);
    let v2 = Vec3::new(z[5], z[6], z[7]);
    let (g1, g2) = gram_schmidt_backward(&v1, &v2, d_rot)?;
    Ok([
        translation_scale * d_shift[0],
        translation_scale * d_shift[1],
        g1.x,
        g1.y,
        g1.z,
        g2.x,
        g2.y,
        g2.z,
    ])
}

/// Converts one row of decoder head output into residue deltas.
pub fn head_to_deltas(row: &[f64]) -> Result<DeltaFrames, ModelError> {
    if row.len() % 9 != 0 {
        return Err(ModelError::ShapeMismatch(format!("head row length {} is not a multiple of 9", row.len())));
    }
    row.chunks_exact(9)
        .map(|c| {
            let r = gram_schmidt(&Vec3::new(c[3], c[4], c[5]), &Vec3::new(c[6], c[7], c[8]))?;
            Ok(RigidFrame::new(r, Vec3::new(c[0], c[1], c[2])))
        })
        .collect::<Result<Vec<_>, ModelError>>()
        .map(DeltaFrames)
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

enum Init {
    TruncNormal,
    Zero,
}

impl Linear {
    fn create(store: &mut ParameterStore, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let w = match init {
            Init::TruncNormal => truncated_normal_init(n_in * n_out, n_in, rng),
            Init::Zero => vec![0.0; n_in * n_out],
        };
        Ok(Self {
            w: store.add(&format!("{name}.w"), vec![n_in, n_out], w)?,
            b: store.add(&format!("{name}.b"), vec![n_out], vec![0.0; n_out])?,
        })
    }

    fn attach(store: &ParameterStore, name: &str, n_in: usize, n_out: usize) -> Result<Self, ModelError> {
        let get = |suffix: &str, shape: Vec<usize>| {
            let full = format!("{name}.{suffix}");
            let id = store.id(&full).ok_or_else(|| NnError::UnknownParameter(full.clone()))?;
            if store.param(id).shape != shape {
                return Err(ModelError::ShapeMismatch(format!(
                    "{full}: stored shape {:?}, expected {shape:?}",
                    store.param(id).shape
                )));
            }
            Ok(id)
        };
        Ok(Self {
            w: get("w", vec![n_in, n_out])?,
            b: get("b", vec![n_out])?,
        })
    }

    fn forward(&self, s: &ParameterStore, x: &Matrix) -> Matrix {
        linear_forward(x, s.value(self.w), s.value(self.b)).expect("layer shapes fixed at construction")
    }

    fn backward(&self, s: &ParameterStore, g: &mut GradBuffer, x: &Matrix, dy: &Matrix, want_dx: bool) -> Option<Matrix> {
        let mut db = std::mem::take(&mut g.grads[self.b.0]);
        let dx = linear_backward_accumulate(x, s.value(self.w), dy, &mut g.grads[self.w.0], &mut db, want_dx);
        g.grads[self.b.0] = db;
        dx
    }
}

/// Stack of linear layers with activations between them (and after the
/// last one if `activate_final`).
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    activate_final: bool,
}

struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Mlp {
    fn forward(&self, s: &ParameterStore, x: Matrix) -> (Matrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(s, &h);
            inputs.push(h);
            let last = i + 1 == self.layers.len();
            h = if last && !self.activate_final { z.clone() } else { map(&z, relu) };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    fn backward(&self, s: &ParameterStore, g: &mut GradBuffer, c: &MlpCache, dy: Matrix, want_dx: bool) -> Option<Matrix> {
        let mut d = dy;
        let n = self.layers.len();
        for i in (0..n).rev() {
            if i + 1 < n || self.activate_final {
                d = map_backward(&c.pre[i], &d, relu_grad);
            }
            let need = i > 0 || want_dx;
            match self.layers[i].backward(s, g, &c.inputs[i], &d, need) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

#[derive(Debug, Clone)]
struct Block {
    l1: Linear,
    l2: Linear,
}

struct BlockCache {
    ln: LayerNormOut,
    pre: Matrix,
    act: Matrix,
}

struct DecoderCache {
    z: Matrix,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormOut,
    drep: Matrix,
}

#[derive(Debug, Clone)]
struct Layers {
    encoder: Mlp,
    conf_mu: Linear,
    conf_sigma: Linear,
    dec_in: Linear,
    blocks: Vec<Block>,
    dec_out: Linear,
    head: Linear,
    pose_proj: Linear,
    pose_mlp: Mlp,
    pose_mu: Linear,
    pose_sigma: Linear,
}

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Image encoder shared by both posteriors.
    Trunk,
    /// Conformation posterior and structure decoder.
    ConfPath,
    /// Pose posterior.
    PosePath,
}

/// Group of a parameter name.
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("enc.") {
        ParamGroup::Trunk
    } else if name.starts_with("pose.") {
        ParamGroup::PosePath
    } else {
        ParamGroup::ConfPath
    }
}

/// Whether the named parameter is trained in `stage`.
pub fn trainable_in(name: &str, stage: Stage) -> bool {
    match stage {
        Stage::Full => true,
        Stage::PoseOnly => param_group(name) != ParamGroup::ConfPath,
    }
}

/// Model definition bound to a base structure and an image-formation model.
/// Parameter values live in a separate [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub base: Arc<BaseStructure>,
    pub renderer: Renderer,
    layers: Layers,
}

struct Forward {
    enc: MlpCache,
    conf_ln: LayerNormOut,
    conf_pre_sigma: Matrix,
    conf_q: Vec<DiagonalGaussian>,
    dec: DecoderCache,
    head_out: Option<Matrix>,
    pose_ln: LayerNormOut,
    pose_mlp: MlpCache,
    pose_hidden_ln: LayerNormOut,
    pose_pre_sigma: Matrix,
    pose_q: Vec<DiagonalGaussian>,
}

struct ImageTerms {
    loss: LossBreakdown,
    // per conformation sample, gradient of the per-image total
    d_atoms: Vec<Vec<Vec3>>,
    d_pose_mu: Vec<Vec<f64>>,
    d_pose_sigma: Vec<Vec<f64>>,
}

impl Model {
    /// Registers freshly initialized parameters in `store`.
    pub fn new(config: ModelConfig, base: Arc<BaseStructure>, renderer: Renderer, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self, ModelError> {
        Self::check(&config, &base, &renderer)?;
        let c = &config;
        let mut enc = Vec::new();
        let mut n_in = c.n_pixels();
        for (i, &w) in c.encoder_widths.iter().enumerate() {
            enc.push(Linear::create(store, &format!("enc.l{i}"), n_in, w, Init::TruncNormal, rng)?);
            n_in = w;
        }
        let rep = c.rep_dim();
        let conf_mu = Linear::create(store, "conf.mu", rep, c.conf_dim, Init::TruncNormal, rng)?;
        let conf_sigma = Linear::create(store, "conf.sigma", rep, c.conf_dim, Init::TruncNormal, rng)?;
        let dec_in = Linear::create(store, "dec.in", c.conf_dim, c.decoder_width, Init::TruncNormal, rng)?;
        let mut blocks = Vec::new();
        for k in 0..c.decoder_blocks {
            blocks.push(Block {
                l1: Linear::create(store, &format!("dec.block{k}.l1"), c.decoder_width, c.decoder_width, Init::TruncNormal, rng)?,
                l2: Linear::create(store, &format!("dec.block{k}.l2"), c.decoder_width, c.decoder_width, Init::Zero, rng)?,
            });
        }
        let dec_out = Linear::create(store, "dec.out", c.decoder_width, c.decoded_dim, Init::TruncNormal, rng)?;
        let head = Linear::create(store, "dec.head", c.decoded_dim, 9 * c.n_residues, Init::Zero, rng)?;
        // identity deltas: t = 0, v1 = e1, v2 = e2
        {
            let bias = &mut store.param_mut(head.b).value;
            for r in 0..c.n_residues {
                bias[9 * r + 3] = 1.0;
                bias[9 * r + 7] = 1.0;
            }
        }
        let pose_proj = Linear::create(store, "pose.proj", rep, c.decoded_dim, Init::TruncNormal, rng)?;
        let mut pl = Vec::new();
        let mut n_in = c.decoded_dim;
        for i in 0..c.pose_layers {
            pl.push(Linear::create(store, &format!("pose.h{i}"), n_in, c.pose_hidden, Init::TruncNormal, rng)?);
            n_in = c.pose_hidden;
        }
        let pose_mu = Linear::create(store, "pose.mu", n_in, POSE_DIM, Init::TruncNormal, rng)?;
        let pose_sigma = Linear::create(store, "pose.sigma", n_in, POSE_DIM, Init::TruncNormal, rng)?;
        Ok(Self {
            config,
            base,
            renderer,
            layers: Layers {
                encoder: Mlp {
                    layers: enc,
                    activate_final: false,
                },
                conf_mu,
                conf_sigma,
                dec_in,
                blocks,
                dec_out,
                head,
                pose_proj,
                pose_mlp: Mlp {
                    layers: pl,
                    activate_final: true,
                },
                pose_mu,
                pose_sigma,
            },
        })
    }

    /// Binds to parameters already present in `store` (e.g. a loaded checkpoint).
    pub fn attach(config: ModelConfig, base: Arc<BaseStructure>, renderer: Renderer, store: &ParameterStore) -> Result<Self, ModelError> {
        Self::check(&config, &base, &renderer)?;
        let c = &config;
        let mut enc = Vec::new();
        let mut n_in = c.n_pixels();
        for (i, &w) in c.encoder_widths.iter().enumerate() {
            enc.push(Linear::attach(store, &format!("enc.l{i}"), n_in, w)?);
            n_in = w;
        }
        let rep = c.rep_dim();
        let mut blocks = Vec::new();
        for k in 0..c.decoder_blocks {
            blocks.push(Block {
                l1: Linear::attach(store, &format!("dec.block{k}.l1"), c.decoder_width, c.decoder_width)?,
                l2: Linear::attach(store, &format!("dec.block{k}.l2"), c.decoder_width, c.decoder_width)?,
            });
        }
        let mut pl = Vec::new();
        let mut n_in = c.decoded_dim;
        for i in 0..c.pose_layers {
            pl.push(Linear::attach(store, &format!("pose.h{i}"), n_in, c.pose_hidden)?);
            n_in = c.pose_hidden;
        }
        let layers = Layers {
            encoder: Mlp {
                layers: enc,
                activate_final: false,
            },
            conf_mu: Linear::attach(store, "conf.mu", rep, c.conf_dim)?,
            conf_sigma: Linear::attach(store, "conf.sigma", rep, c.conf_dim)?,
            dec_in: Linear::attach(store, "dec.in", c.conf_dim, c.decoder_width)?,
            blocks,
            dec_out: Linear::attach(store, "dec.out", c.decoder_width, c.decoded_dim)?,
            head: Linear::attach(store, "dec.head", c.decoded_dim, 9 * c.n_residues)?,
            pose_proj: Linear::attach(store, "pose.proj", rep, c.decoded_dim)?,
            pose_mlp: Mlp {
                layers: pl,
                activate_final: true,
            },
            pose_mu: Linear::attach(store, "pose.mu", n_in, POSE_DIM)?,
            pose_sigma: Linear::attach(store, "pose.sigma", n_in, POSE_DIM)?,
        };
        Ok(Self {
            config,
            base,
            renderer,
            layers,
        })
    }

    fn check(config: &ModelConfig, base: &BaseStructure, renderer: &Renderer) -> Result<(), ModelError> {
        config.validate()?;
        if base.n_residues() != config.n_residues {
            return Err(ModelError::ShapeMismatch(format!(
                "base structure has {} residues, config expects {}",
                base.n_residues(),
                config.n_residues
            )));
        }
        if renderer.config.height != config.image_height || renderer.config.width != config.image_width {
            return Err(ModelError::ShapeMismatch("renderer and model image sizes differ".into()));
        }
        Ok(())
    }

    fn images_matrix(&self, images: &[&[f64]]) -> Result<Matrix, ModelError> {
        let d = self.config.n_pixels();
        let mut data = Vec::with_capacity(images.len() * d);
        for (i, img) in images.iter().enumerate() {
            if img.len() != d {
                return Err(ModelError::ShapeMismatch(format!("image {i} has {} pixels, expected {d}", img.len())));
            }
            data.extend_from_slice(img);
        }
        Ok(Matrix::from_vec(images.len(), d, data)?)
    }

    /// Image representation (one row per image).
    pub fn encode_representation(&self, store: &ParameterStore, images: &[&[f64]]) -> Result<Matrix, ModelError> {
        let x = self.images_matrix(images)?;
        let ln = layer_norm_forward(&x);
        Ok(self.layers.encoder.forward(store, ln.y).0)
    }

    fn conf_head(&self, store: &ParameterStore, rep: &Matrix) -> (LayerNormOut, Matrix, Vec<DiagonalGaussian>) {
        let ln = layer_norm_forward(rep);
        let mu = self.layers.conf_mu.forward(store, &ln.y);
        let pre = self.layers.conf_sigma.forward(store, &ln.y);
        let q = gaussians(&mu, &pre);
        (ln, pre, q)
    }

    pub fn encode_conformation(&self, store: &ParameterStore, rep: &Matrix) -> Vec<DiagonalGaussian> {
        self.conf_head(store, rep).2
    }

    fn decoder_trunk(&self, store: &ParameterStore, z: Matrix) -> DecoderCache {
        let mut h = self.layers.dec_in.forward(store, &z);
        let mut blocks = Vec::with_capacity(self.layers.blocks.len());
        for b in &self.layers.blocks {
            let ln = layer_norm_forward(&h);
            let pre = b.l1.forward(store, &ln.y);
            let act = map(&pre, leaky_relu);
            h.add_assign(&b.l2.forward(store, &act));
            blocks.push(BlockCache { ln, pre, act });
        }
        let final_ln = layer_norm_forward(&h);
        let drep = self.layers.dec_out.forward(store, &final_ln.y);
        DecoderCache { z, blocks, final_ln, drep }
    }

    /// Decodes conformation latents (one per row) into residue deltas and
    /// the decoded representation.
    pub fn decode_conformation(&self, store: &ParameterStore, z: &Matrix) -> Result<(Vec<DeltaFrames>, Matrix), ModelError> {
        if z.cols != self.config.conf_dim {
            return Err(ModelError::ShapeMismatch(format!("latent width {} vs {}", z.cols, self.config.conf_dim)));
        }
        let cache = self.decoder_trunk(store, z.clone());
        let out = self.layers.head.forward(store, &cache.drep);
        let deltas = (0..out.rows).map(|r| head_to_deltas(out.row(r))).collect::<Result<Vec<_>, _>>()?;
        Ok((deltas, cache.drep))
    }

    /// Atomic conformations for each latent row.
    pub fn decode_structures(&self, store: &ParameterStore, z: &Matrix) -> Result<Vec<Conformation>, ModelError> {
        let (deltas, _) = self.decode_conformation(store, z)?;
        deltas.iter().map(|d| Ok(apply_deltas(&self.base, d)?)).collect()
    }

    fn pose_head(&self, store: &ParameterStore, rep: &Matrix, drep: &Matrix, per_image: usize) -> (LayerNormOut, MlpCache, LayerNormOut, Matrix, Vec<DiagonalGaussian>) {
        let ln = layer_norm_forward(rep);
        let proj = self.layers.pose_proj.forward(store, &ln.y);
        let mut s = drep.clone();
        for m in 0..s.rows {
            for (a, b) in s.row_mut(m).iter_mut().zip(proj.row(m / per_image)) {
                *a += b;
            }
        }
        let (h, cache) = self.layers.pose_mlp.forward(store, s);
        let hln = layer_norm_forward(&h);
        let mu = self.layers.pose_mu.forward(store, &hln.y);
        let pre = self.layers.pose_sigma.forward(store, &hln.y);
        let q = gaussians(&mu, &pre);
        (ln, cache, hln, pre, q)
    }

    /// Pose posteriors; row `m` of `drep` pairs with image `m / per_image`.
    pub fn encode_pose(&self, store: &ParameterStore, rep: &Matrix, drep: &Matrix, per_image: usize) -> Result<Vec<DiagonalGaussian>, ModelError> {
        if drep.rows != rep.rows * per_image || drep.cols != self.config.decoded_dim {
            return Err(ModelError::ShapeMismatch("pose encoder inputs".into()));
        }
        Ok(self.pose_head(store, rep, drep, per_image).4)
    }

    fn forward(&self, store: &ParameterStore, x: Matrix, noise: &[ImageNoise], stage: Stage) -> Result<Forward, ModelError> {
        let c = &self.config;
        let (n_conf, _) = c.samples(stage);
        let rep_ln_in = layer_norm_forward(&x);
        let (rep, enc) = self.layers.encoder.forward(store, rep_ln_in.y);
        let (conf_ln, conf_pre_sigma, conf_q) = self.conf_head(store, &rep);
        let mut z = Matrix::zeros(rep.rows * n_conf, c.conf_dim);
        for (b, q) in conf_q.iter().enumerate() {
            for k in 0..n_conf {
                let row = z.row_mut(b * n_conf + k);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = q.mu[j] + q.sigma[j] * noise[b].conf[k][j];
                }
            }
        }
        let dec = self.decoder_trunk(store, z);
        let head_out = match stage {
            Stage::Full => Some(self.layers.head.forward(store, &dec.drep)),
            Stage::PoseOnly => None,
        };
        let (pose_ln, pose_mlp, pose_hidden_ln, pose_pre_sigma, pose_q) = self.pose_head(store, &rep, &dec.drep, n_conf);
        Ok(Forward {
            enc,
            conf_ln,
            conf_pre_sigma,
            conf_q,
            dec,
            head_out,
            pose_ln,
            pose_mlp,
            pose_hidden_ln,
            pose_pre_sigma,
            pose_q,
        })
    }

    /// Evaluates the objective on a batch of images. When `grads` is given,
    /// the gradient of the batch-mean total with respect to every parameter
    /// is accumulated into it (freezing is the optimizer's business).
    pub fn objective_batch(
        &self,
        store: &ParameterStore,
        images: &[&[f64]],
        noise: &[ImageNoise],
        stage: Stage,
        grads: Option<&mut GradBuffer>,
    ) -> Result<Vec<LossBreakdown>, ModelError> {
        let cfg = &self.config;
        let (n_conf, n_pose) = cfg.samples(stage);
        if noise.len() != images.len() {
            return Err(ModelError::ShapeMismatch("one noise record per image required".into()));
        }
        for nz in noise {
            if nz.conf.len() != n_conf || nz.pose.len() != n_conf * n_pose {
                return Err(ModelError::ShapeMismatch("noise sample counts do not match the stage".into()));
            }
        }
        let x = self.images_matrix(images)?;
        let fwd = self.forward(store, x, noise, stage)?;
        let n_img = images.len();

        // atoms for every conformation sample
        let deltas: Option<Vec<DeltaFrames>> = match &fwd.head_out {
            Some(out) => Some((0..out.rows).map(|r| head_to_deltas(out.row(r))).collect::<Result<_, _>>()?),
            None => None,
        };
        let confs: Option<Vec<Conformation>> = match &deltas {
            Some(ds) => Some(ds.iter().map(|d| apply_deltas(&self.base, d)).collect::<Result<_, _>>()?),
            None => None,
        };
        let base_atoms = self.base.posed_atoms();
        let want_grad = grads.is_some();

        let terms: Vec<ImageTerms> = (0..n_img)
            .into_par_iter()
            .map_init(
                || self.renderer.scratch(),
                |scratch, b| {
                    let atoms: Vec<&[Vec3]> = (0..n_conf)
                        .map(|k| match &confs {
                            Some(cs) => cs[b * n_conf + k].atoms.as_slice(),
                            None => base_atoms,
                        })
                        .collect();
                    let qs = &fwd.pose_q[b * n_conf..(b + 1) * n_conf];
                    self.image_terms(images[b], &atoms, qs, &fwd.conf_q[b], &noise[b].pose, stage, want_grad, scratch)
                },
            )
            .collect::<Result<_, _>>()?;

        let losses: Vec<LossBreakdown> = terms.iter().map(|t| t.loss).collect();
        if let Some(g) = grads {
            self.backward(store, &fwd, noise, stage, &terms, g)?;
        }
        Ok(losses)
    }

    #[allow(clippy::too_many_arguments)]
    fn image_terms(
        &self,
        y: &[f64],
        atoms: &[&[Vec3]],
        pose_q: &[DiagonalGaussian],
        conf_q: &DiagonalGaussian,
        pose_noise: &[Vec<f64>],
        stage: Stage,
        want_grad: bool,
        scratch: &mut RenderScratch,
    ) -> Result<ImageTerms, ModelError> {
        let cfg = &self.config;
        let n_conf = atoms.len();
        let n_pose = pose_noise.len() / n_conf;
        let d = y.len();
        let sigma = cfg.image_sigma;
        let ll_const = -(d as f64) * (sigma.ln() + HALF_LN_2PI);
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);

        let mut zs = Vec::with_capacity(n_conf * n_pose);
        let mut poses = Vec::with_capacity(n_conf * n_pose);
        let mut lls = Vec::with_capacity(n_conf * n_pose);
        let mut residuals = if want_grad { Vec::with_capacity(n_conf * n_pose) } else { Vec::new() };
        let mut mean = vec![0.0; d];
        for k in 0..n_conf {
            for p in 0..n_pose {
                let eps = &pose_noise[k * n_pose + p];
                let q = &pose_q[k];
                let z: Vec<f64> = (0..POSE_DIM).map(|j| q.mu[j] + q.sigma[j] * eps[j]).collect();
                let pose = decode_pose(&z, cfg.translation_scale)?;
                self.renderer.render_into(atoms[k], &pose, &mut mean, scratch);
                let mut ss = 0.0;
                if want_grad {
                    let r: Vec<f64> = y.iter().zip(&mean).map(|(a, m)| a - m).collect();
                    ss = r.iter().map(|v| v * v).sum();
                    residuals.push(r);
                } else {
                    for (a, m) in y.iter().zip(&mean) {
                        ss += (a - m) * (a - m);
                    }
                }
                lls.push(ll_const - ss * inv2s2);
                zs.push(z);
                poses.push(pose);
            }
        }
        let reconstruction = -log_mean_exp(&lls);
        if !reconstruction.is_finite() {
            return Err(ModelError::NumericalOverflow(format!("reconstruction term is {reconstruction}")));
        }
        // the conformation posterior is not part of the pose-only objective
        let kl_conf = match stage {
            Stage::Full => kl_to_standard_normal(conf_q)?,
            Stage::PoseOnly => 0.0,
        };
        let mut kl_pose = 0.0;
        for q in pose_q {
            kl_pose += kl_to_standard_normal(q)? / n_conf as f64;
        }
        let (mut centering, mut backbone) = (0.0, 0.0);
        let mut d_atoms = Vec::new();
        if stage == Stage::Full {
            for a in atoms {
                let (cl, cg) = centering_loss(a);
                let (bl, bg) = backbone_continuity_loss(self.base.topology(), a, cfg.ideal_bond);
                centering += cl / n_conf as f64;
                backbone += bl / n_conf as f64;
                if want_grad {
                    let sc = cfg.w_center / n_conf as f64;
                    let sb = cfg.w_backbone / n_conf as f64;
                    d_atoms.push(cg.iter().zip(&bg).map(|(c, b)| c * sc + b * sb).collect::<Vec<Vec3>>());
                }
            }
        }
        let loss = LossBreakdown::assemble(cfg, reconstruction, kl_conf, kl_pose, centering, backbone);
        if !loss.total.is_finite() {
            return Err(ModelError::NumericalOverflow(format!("objective is {}", loss.total)));
        }
        let mut terms = ImageTerms {
            loss,
            d_atoms,
            d_pose_mu: Vec::new(),
            d_pose_sigma: Vec::new(),
        };
        if !want_grad {
            return Ok(terms);
        }

        // d(-log_mean_exp)/d(ll_n) = -w_n and d(ll)/d(mean) = residual / sigma^2
        let w = softmax(&lls);
        let inv_s2 = 1.0 / (sigma * sigma);
        let mut upstream = vec![0.0; d];
        let mut rg = RenderGrad {
            atoms: Vec::new(),
            rotation: Mat3::zeros(),
            shift: [0.0; 2],
        };
        for k in 0..n_conf {
            let q = &pose_q[k];
            let (mut dmu, mut dsig) = kl_backward(q);
            let s = cfg.beta_pose / n_conf as f64;
            dmu.iter_mut().for_each(|v| *v *= s);
            dsig.iter_mut().for_each(|v| *v *= s);
            for p in 0..n_pose {
                let n = k * n_pose + p;
                if w[n] == 0.0 || w[n] < cfg.grad_weight_floor {
                    continue;
                }
                let scale = -w[n] * inv_s2;
                for (u, r) in upstream.iter_mut().zip(&residuals[n]) {
                    *u = scale * r;
                }
                self.renderer.render_backward_into(atoms[k], &poses[n], &upstream, &mut rg, scratch);
                let dz = decode_pose_backward(&zs[n], cfg.translation_scale, &rg.rotation, rg.shift)?;
                let eps = &pose_noise[n];
                for j in 0..POSE_DIM {
                    dmu[j] += dz[j];
                    dsig[j] += dz[j] * eps[j];
                }
                if stage == Stage::Full {
                    for (acc, g) in terms.d_atoms[k].iter_mut().zip(&rg.atoms) {
                        *acc += g;
                    }
                }
            }
            terms.d_pose_mu.push(dmu);
            terms.d_pose_sigma.push(dsig);
        }
        Ok(terms)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        store: &ParameterStore,
        fwd: &Forward,
        noise: &[ImageNoise],
        stage: Stage,
        terms: &[ImageTerms],
        g: &mut GradBuffer,
    ) -> Result<(), ModelError> {
        let cfg = &self.config;
        let l = &self.layers;
        let (n_conf, _) = cfg.samples(stage);
        let n_img = terms.len();
        let m_rows = n_img * n_conf;
        let inv_b = 1.0 / n_img as f64;

        // pose heads
        let mut d_mu = Matrix::zeros(m_rows, POSE_DIM);
        let mut d_pre = Matrix::zeros(m_rows, POSE_DIM);
        for (b, t) in terms.iter().enumerate() {
            for k in 0..n_conf {
                let m = b * n_conf + k;
                for j in 0..POSE_DIM {
                    d_mu.data[m * POSE_DIM + j] = t.d_pose_mu[k][j] * inv_b;
                    let pre = fwd.pose_pre_sigma.data[m * POSE_DIM + j];
                    d_pre.data[m * POSE_DIM + j] = t.d_pose_sigma[k][j] * inv_b * softplus_grad(pre);
                }
            }
        }
        let mut d_hln = l.pose_mu.backward(store, g, &fwd.pose_hidden_ln.y, &d_mu, true).expect("dx");
        d_hln.add_assign(&l.pose_sigma.backward(store, g, &fwd.pose_hidden_ln.y, &d_pre, true).expect("dx"));
        let d_h = layer_norm_backward(&fwd.pose_hidden_ln, &d_hln);
        let d_s = l.pose_mlp.backward(store, g, &fwd.pose_mlp, d_h, true).expect("dx");
        let mut d_proj = Matrix::zeros(n_img, cfg.decoded_dim);
        for m in 0..m_rows {
            for (a, v) in d_proj.row_mut(m / n_conf).iter_mut().zip(d_s.row(m)) {
                *a += v;
            }
        }
        let d_pln = l.pose_proj.backward(store, g, &fwd.pose_ln.y, &d_proj, true).expect("dx");
        let mut d_rep = layer_norm_backward(&fwd.pose_ln, &d_pln);

        let mut d_drep = d_s;
        if stage == Stage::Full {
            let head_out = fwd.head_out.as_ref().expect("full stage has head output");
            let nr = cfg.n_residues;
            let mut d_head = Matrix::zeros(m_rows, 9 * nr);
            for (b, t) in terms.iter().enumerate() {
                for k in 0..n_conf {
                    let m = b * n_conf + k;
                    let per_res = apply_deltas_backward(&self.base, &t.d_atoms[k]);
                    let row = head_out.row(m);
                    let drow = d_head.row_mut(m);
                    for (i, (d_rot, d_t)) in per_res.iter().enumerate() {
                        let c = &row[9 * i..9 * i + 9];
                        let (g1, g2) = gram_schmidt_backward(&Vec3::new(c[3], c[4], c[5]), &Vec3::new(c[6], c[7], c[8]), d_rot)?;
                        let out = &mut drow[9 * i..9 * i + 9];
                        for a in 0..3 {
                            out[a] = d_t[a] * inv_b;
                            out[3 + a] = g1[a] * inv_b;
                            out[6 + a] = g2[a] * inv_b;
                        }
                    }
                }
            }
            d_drep.add_assign(&l.head.backward(store, g, &fwd.dec.drep, &d_head, true).expect("dx"));
        }
        // the decoded representation also conditions the pose posterior, so
        // the trunk receives gradient through the decoder in both stages
        let d_fln = l.dec_out.backward(store, g, &fwd.dec.final_ln.y, &d_drep, true).expect("dx");
        let mut d_h = layer_norm_backward(&fwd.dec.final_ln, &d_fln);
        for (blk, bc) in l.blocks.iter().zip(&fwd.dec.blocks).rev() {
            let d_act = blk.l2.backward(store, g, &bc.act, &d_h, true).expect("dx");
            let d_pre = map_backward(&bc.pre, &d_act, leaky_relu_grad);
            let d_ln = blk.l1.backward(store, g, &bc.ln.y, &d_pre, true).expect("dx");
            d_h.add_assign(&layer_norm_backward(&bc.ln, &d_ln));
        }
        let d_z = l.dec_in.backward(store, g, &fwd.dec.z, &d_h, true).expect("dx");

        // conformation posterior: reparameterization, plus KL in the full stage
        let dim = cfg.conf_dim;
        let beta = if stage == Stage::Full { cfg.beta_conf } else { 0.0 };
        let mut d_cmu = Matrix::zeros(n_img, dim);
        let mut d_cpre = Matrix::zeros(n_img, dim);
        for b in 0..n_img {
            let q = &fwd.conf_q[b];
            let (kmu, ksig) = kl_backward(q);
            for j in 0..dim {
                let mut gm = beta * kmu[j] * inv_b;
                let mut gs = beta * ksig[j] * inv_b;
                for k in 0..n_conf {
                    let dz = d_z.data[(b * n_conf + k) * dim + j];
                    gm += dz;
                    gs += dz * noise[b].conf[k][j];
                }
                d_cmu.data[b * dim + j] = gm;
                d_cpre.data[b * dim + j] = gs * softplus_grad(fwd.conf_pre_sigma.data[b * dim + j]);
            }
        }
        let mut d_cln = l.conf_mu.backward(store, g, &fwd.conf_ln.y, &d_cmu, true).expect("dx");
        d_cln.add_assign(&l.conf_sigma.backward(store, g, &fwd.conf_ln.y, &d_cpre, true).expect("dx"));
        d_rep.add_assign(&layer_norm_backward(&fwd.conf_ln, &d_cln));

        l.encoder.backward(store, g, &fwd.enc, d_rep, false);
        Ok(())
    }

    /// Single-image convenience wrapper around [`Model::objective_batch`].
    pub fn objective(&self, store: &ParameterStore, image: &[f64], noise: &ImageNoise, stage: Stage, grads: Option<&mut GradBuffer>) -> Result<LossBreakdown, ModelError> {
        Ok(self.objective_batch(store, &[image], std::slice::from_ref(noise), stage, grads)?[0])
    }

    /// Held-out score: log-mean-exp of sample log-likelihoods (higher is better).
    pub fn log_likelihood_score(&self, store: &ParameterStore, images: &[&[f64]], noise: &[ImageNoise], stage: Stage) -> Result<Vec<f64>, ModelError> {
        Ok(self.objective_batch(store, images, noise, stage, None)?.iter().map(|l| -l.reconstruction).collect())
    }
}

fn gaussians(mu: &Matrix, pre_sigma: &Matrix) -> Vec<DiagonalGaussian> {
    (0..mu.rows)
        .map(|r| DiagonalGaussian {
            mu: mu.row(r).to_vec(),
            sigma: pre_sigma.row(r).iter().map(|&v| softplus(v).max(f64::MIN_POSITIVE)).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{counter_rng, relative_error};
    use crate::render::{CtfParams, RenderConfig};
    use crate::structure::{ideal_chain, BackboneTorsions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(n_res: usize, hw: usize) -> ModelConfig {
        ModelConfig {
            image_height: hw,
            image_width: hw,
            encoder_widths: vec![24, 16],
            conf_dim: 4,
            decoder_width: 8,
            decoder_blocks: 2,
            decoded_dim: 16,
            pose_hidden: 6,
            pose_layers: 3,
            n_residues: n_res,
            stage1_pose_samples: 3,
            stage2_conf_samples: 2,
            stage2_pose_samples: 2,
            image_sigma: 0.5,
            translation_scale: 2.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_model(n_res: usize, hw: usize, seed: u64) -> (Model, ParameterStore) {
        let base = Arc::new(ideal_chain(n_res, &[BackboneTorsions::ALPHA_HELIX]).unwrap());
        let rc = RenderConfig {
            height: hw,
            width: hw,
            pixel_size: 1.2,
            ..RenderConfig::default()
        };
        let renderer = Renderer::new(rc, Some(&CtfParams::default())).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::new(tiny_config(n_res, hw), base, renderer, &mut store, &mut rng).unwrap();
        (m, store)
    }

    /// Perturbs every parameter so zero-initialized layers carry signal.
    fn jitter(store: &mut ParameterStore, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.params_mut() {
            for v in &mut p.value {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
    }

    #[test]
    fn log_mean_exp_identities() {
        assert_eq!(log_mean_exp(&[-1234.5]), -1234.5);
        let xs = [-3000.0, -3001.5, -2999.2, -3010.0];
        let c = 17.25;
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        assert_eq!(log_mean_exp(&shifted) - log_mean_exp(&xs), c);
        let mean: f64 = xs.iter().sum::<f64>() / 4.0;
        assert!(log_mean_exp(&xs) >= mean);
        let w = softmax(&xs);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_pose_examples() {
        let p = decode_pose(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 10.0).unwrap();
        assert_eq!(p.shift, [0.0, 0.0]);
        assert!((p.rotation - Mat3::identity()).norm() < 1e-15);
        let z = [0.3, -0.2, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let a = decode_pose(&z, 10.0).unwrap();
        let b = decode_pose(&z, 20.0).unwrap();
        assert!((b.shift[0] - 2.0 * a.shift[0]).abs() < 1e-15 && (b.shift[1] - 2.0 * a.shift[1]).abs() < 1e-15);
        assert!(matches!(decode_pose(&[0.0; 7], 1.0), Err(ModelError::ShapeMismatch(_))));
        assert!(decode_pose(&[0.0; 8], 1.0).is_err());
    }

    #[test]
    fn decode_pose_is_haar_uniform_in_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = Mat3::zeros();
        let n = 100_000;
        for _ in 0..n {
            acc += decode_pose(&standard_normal_vec(&mut rng, 8), 10.0).unwrap().rotation;
        }
        assert!((acc / n as f64).norm() < 0.02);
    }

    #[test]
    fn parameter_shapes_and_init_contract() {
        let (m, mut store) = tiny_model(3, 16, 0);
        let z = Matrix::from_vec(2, 4, vec![0.3, -1.0, 2.0, 0.5, 4.0, 1.0, -3.0, 0.0]).unwrap();
        let (deltas, drep) = m.decode_conformation(&store, &z).unwrap();
        assert_eq!(drep.cols, 16);
        assert_eq!(deltas.len(), 2);
        for d in &deltas {
            assert_eq!(d.0.len(), 3);
            for f in &d.0 {
                assert!((f.rotation - Mat3::identity()).norm() < 1e-15);
                assert!(f.translation.norm() < 1e-15);
            }
        }
        // zero final conformation layers: mu = 0, sigma = softplus(0)
        for name in ["conf.mu.w", "conf.mu.b", "conf.sigma.w", "conf.sigma.b"] {
            let id = store.id(name).unwrap();
            store.param_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = vec![0.1; 256];
        let rep = m.encode_representation(&store, &[&img]).unwrap();
        assert_eq!(rep.cols, 16);
        let q = &m.encode_conformation(&store, &rep)[0];
        assert!(q.mu.iter().all(|&v| v == 0.0));
        assert!(q.sigma.iter().all(|&s| (s - std::f64::consts::LN_2).abs() < 1e-15));
        // the attached view sees the same parameters
        let m2 = Model::attach(m.config.clone(), m.base.clone(), m.renderer.clone(), &store).unwrap();
        let (d2, _) = m2.decode_conformation(&store, &z).unwrap();
        assert_eq!(d2.len(), 2);
    }

    #[test]
    fn zero_image_gives_finite_rep_and_distinct_images_differ() {
        let (m, store) = tiny_model(3, 16, 1);
        let zero = vec![0.0; 256];
        let rep = m.encode_representation(&store, &[&zero]).unwrap();
        assert!(rep.data.iter().all(|v| v.is_finite()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = standard_normal_vec(&mut rng, 256);
        let b = standard_normal_vec(&mut rng, 256);
        let r = m.encode_representation(&store, &[&a, &b]).unwrap();
        assert_ne!(r.row(0), r.row(1));
    }

    #[test]
    fn pose_posterior_depends_on_conformation() {
        let (m, mut store) = tiny_model(3, 16, 3);
        jitter(&mut store, 4, 0.3);
        let img = vec![0.2; 256];
        let rep = m.encode_representation(&store, &[&img]).unwrap();
        let z = Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let (_, drep) = m.decode_conformation(&store, &z).unwrap();
        let q = m.encode_pose(&store, &rep, &drep, 2).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].dim(), 8);
        assert_ne!(q[0].mu, q[1].mu);
        assert!(q.iter().all(|q| q.sigma.iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn breakdown_is_additive() {
        let (m, mut store) = tiny_model(3, 16, 5);
        jitter(&mut store, 6, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stage in [Stage::PoseOnly, Stage::Full] {
            let img = standard_normal_vec(&mut rng, 256);
            let nz = ImageNoise::draw(&m.config, stage, &mut rng);
            let l = m.objective(&store, &img, &nz, stage, None).unwrap();
            let c = &m.config;
            let want = l.reconstruction + c.beta_conf * l.kl_conf + c.beta_pose * l.kl_pose + c.w_center * l.centering + c.w_backbone * l.backbone;
            assert!((l.total - want).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_fit_reconstruction_is_normalizer() {
        // a single pose sample at the identity and an image equal to the render
        let (mut m, mut store) = tiny_model(3, 16, 8);
        m.config.stage1_pose_samples = 1;
        m.config.image_sigma = 0.7;
        for name in ["pose.mu.w", "pose.sigma.w", "conf.mu.w", "conf.sigma.w"] {
            let id = store.id(name).unwrap();
            store.param_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
        }
        // mu_pose = (0,0,1,0,0,0,1,0), sigma -> softplus(large negative) ~ 0
        let id = store.id("pose.mu.b").unwrap();
        store.param_mut(id).value = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let id = store.id("pose.sigma.b").unwrap();
        store.param_mut(id).value = vec![-60.0; 8];
        let img = m.renderer.render(m.base.posed_atoms(), &Pose::identity());
        let nz = ImageNoise::draw(&m.config, Stage::PoseOnly, &mut ChaCha8Rng::seed_from_u64(0));
        let l = m.objective(&store, &img.data, &nz, Stage::PoseOnly, None).unwrap();
        let d = 256.0;
        let want = d / 2.0 * (2.0 * std::f64::consts::PI * 0.49).ln();
        assert!((l.reconstruction - want).abs() < 1e-6, "{} vs {want}", l.reconstruction);
    }

    #[test]
    fn jensen_bound_on_random_batches() {
        let (m, mut store) = tiny_model(3, 16, 9);
        jitter(&mut store, 10, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<Vec<f64>> = (0..4).map(|_| standard_normal_vec(&mut rng, 256)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let noise: Vec<ImageNoise> = (0..4).map(|_| ImageNoise::draw(&m.config, Stage::Full, &mut rng)).collect();
        let losses = m.objective_batch(&store, &refs, &noise, Stage::Full, None).unwrap();
        // single-sample objectives give the per-sample negative log-likelihoods
        let mut one = m.clone();
        one.config.stage2_conf_samples = 1;
        one.config.stage2_pose_samples = 1;
        for (b, l) in losses.iter().enumerate() {
            let mut nll = 0.0;
            for k in 0..2 {
                for p in 0..2 {
                    let nz = ImageNoise {
                        conf: vec![noise[b].conf[k].clone()],
                        pose: vec![noise[b].pose[k * 2 + p].clone()],
                    };
                    nll += one.objective(&store, refs[b], &nz, Stage::Full, None).unwrap().reconstruction / 4.0;
                }
            }
            assert!(l.reconstruction <= nll + 1e-9);
        }
    }

    fn check_full_gradient(stage: Stage, seed: u64) -> f64 {
        let (m, mut store) = tiny_model(3, 16, seed);
        jitter(&mut store, seed + 100, 0.15);
        let mut rng = counter_rng(seed, 0, 0, 0);
        // an image from a nearby pose so importance weights are not degenerate
        let target = m.renderer.render(m.base.posed_atoms(), &decode_pose(&[0.1, -0.05, 1.0, 0.1, 0.0, 0.0, 1.0, 0.2], 2.0).unwrap());
        let img: Vec<f64> = target.data.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let other = m.renderer.render(m.base.posed_atoms(), &decode_pose(&[-0.2, 0.1, 0.3, 1.0, 0.0, -0.5, 0.2, 1.0], 2.0).unwrap());
        let img2: Vec<f64> = other.data.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let refs = [img.as_slice(), img2.as_slice()];
        let noise: Vec<ImageNoise> = (0..2).map(|_| ImageNoise::draw(&m.config, stage, &mut rng)).collect();
        let mut g = store.grad_buffer();
        m.objective_batch(&store, &refs, &noise, stage, Some(&mut g)).unwrap();
        let analytic: Vec<f64> = g.grads.iter().flatten().copied().collect();
        let x0 = store.flat_values();
        let mut work = store.clone();
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(x0.len());
        let mut xs = x0.clone();
        let mut f = |xs: &[f64]| {
            work.set_flat_values(xs);
            let l = m.objective_batch(&work, &refs, &noise, stage, None).unwrap();
            LossBreakdown::mean(&l).total
        };
        for i in 0..x0.len() {
            xs[i] = x0[i] + h;
            let fp = f(&xs);
            xs[i] = x0[i] - h;
            let fm = f(&xs);
            xs[i] = x0[i];
            numeric.push((fp - fm) / (2.0 * h));
        }
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn end_to_end_gradient_full_stage() {
        let e = check_full_gradient(Stage::Full, 21);
        assert!(e < 1e-4, "max relative error {e}");
    }

    #[test]
    fn end_to_end_gradient_pose_stage() {
        let e = check_full_gradient(Stage::PoseOnly, 22);
        assert!(e < 1e-4, "max relative error {e}");
    }

    #[test]
    fn decoder_gradient_to_latent() {
        let (m, mut store) = tiny_model(3, 16, 30);
        jitter(&mut store, 31, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let z0 = standard_normal_vec(&mut rng, 4);
        let up = standard_normal_vec(&mut rng, 27);
        let f = |z: &[f64]| {
            let zm = Matrix::from_vec(1, 4, z.to_vec()).unwrap();
            let cache = m.decoder_trunk(&store, zm);
            let out = m.layers.head.forward(&store, &cache.drep);
            out.data.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        // analytic through the hand-written chain
        let mut g = store.grad_buffer();
        let cache = m.decoder_trunk(&store, Matrix::from_vec(1, 4, z0.clone()).unwrap());
        let dy = Matrix::from_vec(1, 27, up.clone()).unwrap();
        let d_drep = m.layers.head.backward(&store, &mut g, &cache.drep, &dy, true).unwrap();
        let d_fln = m.layers.dec_out.backward(&store, &mut g, &cache.final_ln.y, &d_drep, true).unwrap();
        let mut d_h = layer_norm_backward(&cache.final_ln, &d_fln);
        for (blk, bc) in m.layers.blocks.iter().zip(&cache.blocks).rev() {
            let d_act = blk.l2.backward(&store, &mut g, &bc.act, &d_h, true).unwrap();
            let d_pre = map_backward(&bc.pre, &d_act, leaky_relu_grad);
            let d_ln = blk.l1.backward(&store, &mut g, &bc.ln.y, &d_pre, true).unwrap();
            d_h.add_assign(&layer_norm_backward(&bc.ln, &d_ln));
        }
        let dz = m.layers.dec_in.backward(&store, &mut g, &cache.z, &d_h, true).unwrap();
        let e = crate::nn::grad_check(f, &z0, &dz.data, 1e-5);
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn model_render_matches_direct_render_with_identity_deltas() {
        let (m, store) = tiny_model(3, 16, 40);
        let z = Matrix::zeros(1, 4);
        let conf = &m.decode_structures(&store, &z).unwrap()[0];
        let pose = decode_pose(&[0.2, 0.1, 0.3, 1.0, 0.0, -0.5, 0.2, 1.0], 2.0).unwrap();
        let a = m.renderer.render(&conf.atoms, &pose);
        let b = m.renderer.render(m.base.posed_atoms(), &pose);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.stage2_conf_samples = 0;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            beta_pose: -1.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(param_group("enc.l0.w"), ParamGroup::Trunk);
        assert_eq!(param_group("pose.h1.b"), ParamGroup::PosePath);
        assert_eq!(param_group("dec.head.w"), ParamGroup::ConfPath);
        assert!(!trainable_in("conf.mu.w", Stage::PoseOnly));
        assert!(trainable_in("enc.l0.w", Stage::PoseOnly));
    }
}
