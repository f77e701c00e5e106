//! The composed affordance model: conditioning image in, sampled goal images
//! out, plus the other goal samplers that exploration and evaluation accept.

use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::{sample, Prior, SampleConfig};
use crate::seed;
use crate::simenv::{parse, EnvConfig, ParseConfig, SceneState};
use crate::vqvae::{LatentCode, VqVae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffordanceConfig {
    pub sampling: SampleConfig,
    /// Resample goals the scene parser rejects.
    pub reject_implausible: bool,
    pub max_attempts: usize,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        Self { sampling: SampleConfig::default(), reject_implausible: false, max_attempts: 5 }
    }
}

/// Produces goal images for a conditioning frame. `scene` is the ground-truth
/// state behind `o_c` when one exists; only oracle samplers read it.
pub trait GoalSampler {
    fn name(&self) -> &str;
    fn sample_goals(&self, o_c: &Image, scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>>;
}

/// Frozen VQ-VAE plus frozen prior.
pub struct AffordanceModel {
    vqvae: VqVae,
    prior: Prior,
    cfg: AffordanceConfig,
    /// Scene description used by the optional rejection step.
    rejection: Option<(EnvConfig, ParseConfig)>,
}

impl AffordanceModel {
    pub fn new(vqvae: VqVae, prior: Prior, cfg: AffordanceConfig) -> Result<Self> {
        cfg.sampling.validate()?;
        let (vc, pc) = (vqvae.config(), prior.config());
        if pc.vocab != vc.codebook_size {
            return Err(Error::Incompatible(format!(
                "prior vocabulary {} differs from codebook size {}",
                pc.vocab, vc.codebook_size
            )));
        }
        if pc.seq_len != vc.seq_len() {
            return Err(Error::Incompatible(format!("prior sequence length {} differs from latent grid {}", pc.seq_len, vc.seq_len())));
        }
        Ok(Self { vqvae, prior, cfg, rejection: None })
    }

    /// Loads both checkpoints and checks that the prior was trained on this
    /// VQ-VAE's codes.
    pub fn from_checkpoints(vqvae: &Checkpoint, prior: &Checkpoint, cfg: AffordanceConfig) -> Result<Self> {
        prior.require_parent("vqvae", &vqvae.identity()?)?;
        Self::new(VqVae::from_checkpoint(vqvae, DType::F32)?, Prior::from_checkpoint(prior, DType::F32)?, cfg)
    }

    pub fn with_rejection(mut self, env: EnvConfig, parse_cfg: ParseConfig) -> Self {
        self.rejection = Some((env, parse_cfg));
        self
    }

    pub fn vqvae(&self) -> &VqVae {
        &self.vqvae
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn config(&self) -> &AffordanceConfig {
        &self.cfg
    }

    pub fn encode(&self, o_c: &Image) -> Result<LatentCode> {
        Ok(self.vqvae.codes(&[o_c])?.remove(0))
    }

    /// Goal code `i` depends only on (`seed`, `i`).
    pub fn sample_code(&self, cond: &LatentCode, seed: u64, i: usize) -> Result<LatentCode> {
        let s = seed::derive_seed(seed, i as u64);
        let tokens = sample(&self.prior, &cond.indices, &self.cfg.sampling, s)?;
        LatentCode::new(cond.h, cond.w, tokens)
    }

    /// Decoded goals together with the codes they were decoded from.
    pub fn sample_with_codes(&self, o_c: &Image, n: usize, seed: u64) -> Result<Vec<(LatentCode, Image)>> {
        if n == 0 {
            return Err(Error::Invalid("goal count must be >= 1".into()));
        }
        let cond = self.encode(o_c)?;
        let reference = match (&self.rejection, self.cfg.reject_implausible) {
            (Some((env, pc)), true) => Some(parse(o_c, env, pc, None)?.multiset()),
            _ => None,
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let attempts = if reference.is_some() { self.cfg.max_attempts.max(1) } else { 1 };
            let mut kept = None;
            for a in 0..attempts {
                let code = self.sample_code(&cond, seed::derive_seed(seed, a as u64), i)?;
                let img = self.vqvae.decode_codes(std::slice::from_ref(&code))?.remove(0);
                let accept = match (&reference, &self.rejection) {
                    (Some(r), Some((env, pc))) => parse(&img, env, pc, Some(r))?.is_plausible(),
                    _ => true,
                };
                kept = Some((code, img));
                if accept {
                    break;
                }
            }
            out.push(kept.expect("at least one attempt"));
        }
        Ok(out)
    }

    pub fn sample_goal(&self, o_c: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
        Ok(self.sample_with_codes(o_c, n, seed)?.into_iter().map(|(_, im)| im).collect())
    }
}

impl GoalSampler for AffordanceModel {
    fn name(&self) -> &str {
        "affordance"
    }

    fn sample_goals(&self, o_c: &Image, _scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>> {
        self.sample_goal(o_c, n, seed)
    }
}

/// Mean pairwise normalised Hamming distance between codes.
pub fn diversity(codes: &[LatentCode]) -> Result<f64> {
    if codes.len() < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 goals, got {}", codes.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            total += codes[i].hamming(&codes[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// [`diversity`] of goal images encoded by `vqvae`.
pub fn image_diversity(goals: &[Image], vqvae: &VqVae) -> Result<f64> {
    let refs: Vec<&Image> = goals.iter().collect();
    diversity(&vqvae.codes(&refs)?)
}

/// Uniformly random latent codes decoded by the VQ-VAE: goals with no
/// knowledge of the scene.
pub struct RandomCodeSampler {
    vqvae: VqVae,
}

impl RandomCodeSampler {
    pub fn new(vqvae: VqVae) -> Self {
        Self { vqvae }
    }
}

impl GoalSampler for RandomCodeSampler {
    fn name(&self) -> &str {
        "random"
    }

    fn sample_goals(&self, o_c: &Image, _scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>> {
        let cfg = self.vqvae.config();
        if o_c.dims() != (cfg.image_size, cfg.image_size) {
            return Err(Error::shape(format!("{0}x{0} image", cfg.image_size), format!("{:?}", o_c.dims())));
        }
        let hw = cfg.latent_size();
        let codes = (0..n)
            .map(|i| {
                let mut rng = seed::rng(seed::derive_seed(seed, i as u64));
                LatentCode::new(hw, hw, (0..hw * hw).map(|_| rng.random_range(0..cfg.codebook_size as u32)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        self.vqvae.decode_codes(&codes)
    }
}

/// Returns the conditioning image unchanged.
pub struct IdentitySampler;

impl GoalSampler for IdentitySampler {
    fn name(&self) -> &str {
        "identity"
    }

    fn sample_goals(&self, o_c: &Image, _scene: Option<&SceneState>, n: usize, _seed: u64) -> Result<Vec<Image>> {
        Ok(vec![o_c.clone(); n])
    }
}

/// Uniform per-channel noise images.
pub struct NoiseSampler;

impl GoalSampler for NoiseSampler {
    fn name(&self) -> &str {
        "noise"
    }

    fn sample_goals(&self, o_c: &Image, _scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>> {
        let (h, w) = o_c.dims();
        (0..n)
            .map(|i| {
                let mut rng = seed::rng(seed::derive_seed(seed, i as u64));
                Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect::<Vec<f32>>()).map(|im| im.quantized())
            })
            .collect()
    }
}

/// Renders the outcome of a scripted behavior executed from the true scene,
/// so every goal is reachable.
pub struct OracleSampler {
    pub env: EnvConfig,
    pub behaviors: Vec<crate::simenv::scripted::Behavior>,
}

impl GoalSampler for OracleSampler {
    fn name(&self) -> &str {
        "oracle"
    }

    fn sample_goals(&self, o_c: &Image, scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>> {
        let scene = scene.ok_or_else(|| Error::Invalid("oracle sampler needs the ground-truth scene".into()))?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = seed::rng(seed::derive_seed(seed, i as u64));
            let b = self.behaviors[rng.random_range(0..self.behaviors.len())];
            let goal = crate::simenv::scripted::perform(scene, &self.env, b, &mut rng).map(|(s, _)| s);
            out.push(goal.map_or_else(|| o_c.clone(), |g| crate::simenv::render(&g, &self.env)));
        }
        Ok(out)
    }
}
