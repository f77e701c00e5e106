//! Conditional VAE goal sampler, the generative baseline.
//!
//! The recognition network reads o_g and o_c channel-stacked and outputs a
//! diagonal Gaussian over z. The decoder maps z to a feature grid,
//! channel-concatenates conditioning features of o_c and upsamples to an
//! image.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{
    conv2d, conv_transpose2d, linear, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear, Optimizer, VarBuilder,
    VarMap,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affordance::GoalSampler;
use crate::checkpoint::{Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::simenv::SceneState;
use crate::{nn, seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub image_size: usize,
    pub downsample: usize,
    pub hidden: usize,
    /// d_z.
    pub latent_dim: usize,
    /// β_kl.
    pub beta_kl: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample: 4,
            hidden: 32,
            latent_dim: 64,
            beta_kl: 1.0,
            lr: 5e-4,
            batch_size: 32,
            steps: 20_000,
            log_every: 100,
            checkpoint_every: 5_000,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cvae: {m}")));
        if !self.downsample.is_power_of_two() || self.downsample < 2 || self.image_size % self.downsample != 0 {
            return bad("downsample must be a power of two >= 2 dividing image_size");
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("latent_dim, hidden and batch_size must be >= 1");
        }
        if !(self.beta_kl >= 0.0 && self.lr > 0.0) {
            return bad("beta_kl must be >= 0 and lr > 0");
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_size / self.downsample
    }
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²), summed over the
/// last dimension.
pub fn kl_diag_normal(mu: &Tensor, logvar: &Tensor) -> candle_core::Result<Tensor> {
    ((mu.sqr()? + logvar.exp()?)? - 1.0 - logvar)?.sum(D::Minus1)? * 0.5
}

fn down_stack(c_in: usize, hidden: usize, n: usize, vb: VarBuilder) -> candle_core::Result<Vec<Conv2d>> {
    let s2 = Conv2dConfig { stride: 2, padding: 1, ..Default::default() };
    (0..n).map(|i| conv2d(if i == 0 { c_in } else { hidden }, hidden, 4, s2, vb.pp(format!("d{i}")))).collect()
}

fn run_down(stack: &[Conv2d], x: &Tensor) -> candle_core::Result<Tensor> {
    let mut h = x.clone();
    for c in stack {
        h = c.forward(&h)?.relu()?;
    }
    Ok(h)
}

pub struct Elbo {
    /// recon + β_kl·kl, averaged over the batch.
    pub loss: Tensor,
    /// Summed squared error per image, averaged over the batch.
    pub recon: Tensor,
    pub kl: Tensor,
}

pub struct Cvae {
    cfg: CvaeConfig,
    vars: VarMap,
    cond: Vec<Conv2d>,
    recog: Vec<Conv2d>,
    recog_out: Linear,
    from_z: Linear,
    mix: Conv2d,
    ups: Vec<ConvTranspose2d>,
    dtype: DType,
    device: Device,
}

impl Cvae {
    pub fn new(cfg: &CvaeConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = nn::device();
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, &device);
        let n = cfg.downsample.trailing_zeros() as usize;
        let (c, g) = (cfg.hidden, cfg.grid());
        let cond = down_stack(3, c, n, vb.pp("cond"))?;
        let recog = down_stack(6, c, n, vb.pp("recog"))?;
        let recog_out = linear(c * g * g, 2 * cfg.latent_dim, vb.pp("recog_out"))?;
        let from_z = linear(cfg.latent_dim, c * g * g, vb.pp("from_z"))?;
        let mix = conv2d(2 * c, c, 3, Conv2dConfig { padding: 1, ..Default::default() }, vb.pp("mix"))?;
        let t = ConvTranspose2dConfig { stride: 2, padding: 1, ..Default::default() };
        let ups = (0..n)
            .map(|i| conv_transpose2d(c, if i + 1 == n { 3 } else { c }, 4, t, vb.pp(format!("up{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        nn::seeded_init(&vars, seed)?;
        Ok(Self { cfg: cfg.clone(), vars, cond, recog, recog_out, from_z, mix, ups, dtype, device })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.cfg
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn images_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if let Some(bad) = images.iter().find(|im| im.dims() != (s, s)) {
            return Err(Error::shape(format!("{s}x{s} image"), format!("{:?}", bad.dims())));
        }
        Ok((Image::batch_tensor(images, self.dtype, &self.device)? - 0.5)?)
    }

    /// Posterior mean and log-variance, each (N, d_z).
    pub fn posterior(&self, o_c: &Tensor, o_g: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = run_down(&self.recog, &Tensor::cat(&[o_g, o_c], 1)?)?;
        let out = self.recog_out.forward(&h.flatten_from(1)?)?;
        let d = self.cfg.latent_dim;
        Ok((out.narrow(1, 0, d)?, out.narrow(1, d, d)?))
    }

    /// Image batch in [0, 1] from latents (N, d_z) and conditioning images.
    pub fn decode(&self, z: &Tensor, o_c: &Tensor) -> Result<Tensor> {
        let (c, g) = (self.cfg.hidden, self.cfg.grid());
        let n = z.dim(0)?;
        let fz = self.from_z.forward(z)?.relu()?.reshape((n, c, g, g))?;
        let fc = run_down(&self.cond, o_c)?;
        let mut h = self.mix.forward(&Tensor::cat(&[&fz, &fc], 1)?)?.relu()?;
        let last = self.ups.len() - 1;
        for (i, u) in self.ups.iter().enumerate() {
            h = u.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(nn::sigmoid(&h)?)
    }

    /// Negative ELBO with a reparameterised posterior sample drawn from `eps`
    /// (standard-normal noise of shape (N, d_z)).
    pub fn elbo(&self, o_c: &Tensor, o_g: &Tensor, eps: &Tensor) -> Result<Elbo> {
        let (mu, logvar) = self.posterior(o_c, o_g)?;
        let z = (&mu + (logvar.clone() * 0.5)?.exp()?.mul(eps)?)?;
        let y = self.decode(&z, o_c)?;
        let target = (o_g + 0.5)?;
        let recon = (y - target)?.sqr()?.flatten_from(1)?.sum(1)?.mean_all()?;
        let kl = kl_diag_normal(&mu, &logvar)?.mean_all()?;
        let loss = (&recon + (&kl * self.cfg.beta_kl)?)?;
        Ok(Elbo { loss, recon, kl })
    }

    fn noise(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = seed::rng(seed);
        let v: Vec<f64> = (0..n * self.cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(v, (n, self.cfg.latent_dim), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Reconstruction of o_g decoded from the posterior mean.
    pub fn reconstruct(&self, o_c: &Image, o_g: &Image) -> Result<Image> {
        let c = self.images_tensor(&[o_c])?;
        let (mu, _) = self.posterior(&c, &self.images_tensor(&[o_g])?)?;
        Ok(Image::from_batch_tensor(&self.decode(&mu, &c)?)?.remove(0))
    }

    /// Goals decoded from z ~ N(0, I); goal `i` uses stream (seed, i).
    pub fn sample_goal(&self, o_c: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
        let c = self.images_tensor(&[o_c])?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let z = self.noise(1, seed::derive_seed(seed, i as u64))?;
            out.extend(Image::from_batch_tensor(&self.decode(&z, &c)?)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(Payload::Cvae, &self.cfg)?;
        c.add_vars("net.", &self.vars);
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.payload != Payload::Cvae {
            return Err(Error::Incompatible(format!("expected a cvae checkpoint, got {}", ckpt.payload)));
        }
        let m = Self::new(&ckpt.config()?, DType::F32, 0)?;
        ckpt.load_vars("net.", &m.vars)?;
        Ok(m)
    }
}

impl GoalSampler for Cvae {
    fn name(&self) -> &str {
        "cvae"
    }

    fn sample_goals(&self, o_c: &Image, _scene: Option<&SceneState>, n: usize, seed: u64) -> Result<Vec<Image>> {
        self.sample_goal(o_c, n, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeLogEntry {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn train_cvae(
    pairs: &[(&Image, &Image)],
    cfg: &CvaeConfig,
    seed: u64,
    mut on_log: impl FnMut(&CvaeLogEntry),
    mut on_checkpoint: impl FnMut(usize, &Cvae) -> Result<()>,
) -> Result<(Cvae, Vec<CvaeLogEntry>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = Cvae::new(cfg, DType::F32, seed::derive_named(seed, "cvae.init"))?;
    let mut opt = nn::adam(&model.vars, cfg.lr)?;
    let mut rng = seed::rng(seed::derive_named(seed, "cvae.batches"));
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let c = model.images_tensor(&idx.iter().map(|&i| pairs[i].0).collect::<Vec<_>>())?;
        let g = model.images_tensor(&idx.iter().map(|&i| pairs[i].1).collect::<Vec<_>>())?;
        let eps = model.noise(idx.len(), rng.random())?;
        let e = model.elbo(&c, &g, &eps)?;
        opt.backward_step(&e.loss)?;
        let last = step + 1 == cfg.steps;
        if last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let entry = CvaeLogEntry {
                step,
                loss: e.loss.to_dtype(DType::F64)?.to_scalar()?,
                recon: e.recon.to_dtype(DType::F64)?.to_scalar()?,
                kl: e.kl.to_dtype(DType::F64)?.to_scalar()?,
            };
            tracing::info!(step, loss = entry.loss, recon = entry.recon, kl = entry.kl, "cvae");
            on_log(&entry);
            log.push(entry);
        }
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl_1d(mu: f64, logvar: f64) -> f64 {
        let t = |v: f64| Tensor::new(&[[v]], &Device::Cpu).unwrap();
        kl_diag_normal(&t(mu), &t(logvar)).unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn kl_closed_form_cases() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros((1, 5), DType::F64, &dev).unwrap();
        assert_eq!(kl_diag_normal(&zero, &zero).unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
        let mu = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let lv = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        assert!((kl_diag_normal(&mu, &lv).unwrap().to_vec1::<f64>().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    /// ∫ q ln(q/p) by the trapezoid rule on a wide grid.
    fn kl_numeric(mu: f64, sigma: f64) -> f64 {
        let (lo, hi, n) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 200_000);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let lq = -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let lp = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lq.exp() * (lq - lp)
        };
        (0..=n).map(|i| f(lo + i as f64 * h) * if i == 0 || i == n { 0.5 } else { 1.0 }).sum::<f64>() * h
    }

    #[test]
    fn kl_matches_numerical_integration() {
        for (mu, sigma) in [(0.0, 1.0), (1.0, 1.0), (-0.7, 0.4), (2.0, 1.8), (0.3, 0.05)] {
            let a = kl_1d(mu, 2.0 * f64::ln(sigma));
            let b = kl_numeric(mu, sigma);
            assert!((a - b).abs() < 1e-4, "mu={mu} sigma={sigma}: {a} vs {b}");
        }
    }

    #[test]
    fn sampling_shapes_and_determinism() {
        let m = Cvae::new(&CvaeConfig { hidden: 8, latent_dim: 4, ..Default::default() }, DType::F32, 1).unwrap();
        let o = Image::filled(32, 32, [0.2, 0.3, 0.4]);
        let a = m.sample_goal(&o, 3, 5).unwrap();
        assert!(a.iter().all(|g| g.dims() == (32, 32) && g.is_finite_unit()));
        assert_eq!(a, m.sample_goal(&o, 3, 5).unwrap());
        assert!(m.sample_goal(&Image::filled(8, 8, [0.0; 3]), 1, 0).is_err());
    }

    #[test]
    fn elbo_terms_are_consistent() {
        let m = Cvae::new(&CvaeConfig { hidden: 8, latent_dim: 4, beta_kl: 2.5, ..Default::default() }, DType::F64, 2).unwrap();
        let o = Image::filled(32, 32, [0.2, 0.3, 0.4]);
        let g = Image::filled(32, 32, [0.6, 0.3, 0.1]);
        let (c, t) = (m.images_tensor(&[&o]).unwrap(), m.images_tensor(&[&g]).unwrap());
        let e = m.elbo(&c, &t, &m.noise(1, 3).unwrap()).unwrap();
        let (l, r, k) = (e.loss.to_scalar::<f64>().unwrap(), e.recon.to_scalar::<f64>().unwrap(), e.kl.to_scalar::<f64>().unwrap());
        assert!(r >= 0.0 && k >= 0.0);
        assert!((l - (r + 2.5 * k)).abs() < 1e-10);
    }
}
