//! Discrete image codec: convolutional encoder, EMA codebook, convolutional
//! decoder.

mod codebook;
mod train;

pub use codebook::{Codebook, LatentCode};
pub use train::{train_vqvae, VqLogEntry};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, conv_transpose2d, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqVaeConfig {
    pub image_size: usize,
    /// Spatial downsampling H/h; a power of two.
    pub downsample: usize,
    /// K.
    pub codebook_size: usize,
    /// L.
    pub code_dim: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub res_hidden: usize,
    /// EMA decay γ.
    pub gamma: f64,
    /// Commitment weight β.
    pub beta: f64,
    pub count_floor: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub val_every: usize,
    /// Validation images used for reconstruction MSE.
    pub val_images: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample: 4,
            codebook_size: 128,
            code_dim: 64,
            hidden: 64,
            res_blocks: 2,
            res_hidden: 32,
            gamma: 0.99,
            beta: 1.0,
            count_floor: 1e-5,
            lr: 5e-4,
            batch_size: 32,
            steps: 20_000,
            log_every: 100,
            val_every: 1_000,
            val_images: 256,
            checkpoint_every: 5_000,
        }
    }
}

impl VqVaeConfig {
    /// Full-scale configuration: 64×64 inputs, 32×32 latents, K=1024, L=256,
    /// 300K steps.
    pub fn full() -> Self {
        Self {
            image_size: 64,
            downsample: 2,
            codebook_size: 1024,
            code_dim: 256,
            hidden: 128,
            steps: 300_000,
            ..Self::default()
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn seq_len(&self) -> usize {
        self.latent_size() * self.latent_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vqvae: {m}")));
        if !self.downsample.is_power_of_two() {
            return bad(format!("downsample {} is not a power of two", self.downsample));
        }
        if self.image_size == 0 || self.image_size % self.downsample != 0 {
            return bad(format!("image_size {} not divisible by downsample {}", self.image_size, self.downsample));
        }
        if self.codebook_size < 2 || self.code_dim == 0 || self.hidden == 0 || self.res_hidden == 0 {
            return bad("codebook_size must be >= 2 and widths >= 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.beta >= 0.0 && self.count_floor > 0.0 && self.lr > 0.0) {
            return bad("beta must be >= 0, count_floor and lr > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(c: usize, hidden: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(Self { a: conv2d(c, hidden, 3, pad, vb.pp("a"))?, b: conv2d(hidden, c, 1, Default::default(), vb.pp("b"))? })
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x + self.b.forward(&self.a.forward(&x.relu()?)?.relu()?)?
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    downs: Vec<Conv2d>,
    mid: Option<Conv2d>,
    res: Vec<ResBlock>,
    out: Conv2d,
}

impl Encoder {
    fn new(cfg: &VqVaeConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let n = cfg.downsample.trailing_zeros() as usize;
        let s2 = Conv2dConfig { stride: 2, padding: 1, ..Default::default() };
        let downs = (0..n)
            .map(|i| conv2d(if i == 0 { 3 } else { cfg.hidden }, cfg.hidden, 4, s2, vb.pp(format!("down{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let c_in = if n == 0 { 3 } else { cfg.hidden };
        let mid = if cfg.res_blocks > 0 || n == 0 {
            Some(conv2d(c_in, cfg.hidden, 3, Conv2dConfig { padding: 1, ..Default::default() }, vb.pp("mid"))?)
        } else {
            None
        };
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(cfg.hidden, cfg.res_hidden, vb.pp(format!("res{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let out = conv2d(cfg.hidden, cfg.code_dim, 1, Default::default(), vb.pp("out"))?;
        Ok(Self { downs, mid, res, out })
    }
}

impl Module for Encoder {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = (x - 0.5)?;
        for d in &self.downs {
            h = d.forward(&h)?.relu()?;
        }
        if let Some(m) = &self.mid {
            h = m.forward(&h)?;
        }
        for r in &self.res {
            h = r.forward(&h)?;
        }
        if !self.res.is_empty() {
            h = h.relu()?;
        }
        self.out.forward(&h)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Conv2d,
    res: Vec<ResBlock>,
    ups: Vec<ConvTranspose2d>,
    out: Option<Conv2d>,
}

impl Decoder {
    fn new(cfg: &VqVaeConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let n = cfg.downsample.trailing_zeros() as usize;
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        let input = conv2d(cfg.code_dim, cfg.hidden, 3, pad, vb.pp("in"))?;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(cfg.hidden, cfg.res_hidden, vb.pp(format!("res{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let t = ConvTranspose2dConfig { stride: 2, padding: 1, ..Default::default() };
        let ups = (0..n)
            .map(|i| conv_transpose2d(cfg.hidden, if i + 1 == n { 3 } else { cfg.hidden }, 4, t, vb.pp(format!("up{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let out = if n == 0 { Some(conv2d(cfg.hidden, 3, 3, pad, vb.pp("out"))?) } else { None };
        Ok(Self { input, res, ups, out })
    }
}

impl Module for Decoder {
    /// Pre-activation output; the image is its sigmoid.
    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(z)?;
        for r in &self.res {
            h = r.forward(&h)?;
        }
        h = h.relu()?;
        let last = self.ups.len().saturating_sub(1);
        for (i, u) in self.ups.iter().enumerate() {
            h = u.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        if let Some(o) = &self.out {
            h = o.forward(&h)?;
        }
        Ok(h)
    }
}

/// Loss terms for one batch, plus the quantization it used.
pub struct LossTerms {
    pub total: Tensor,
    pub recon: Tensor,
    pub commit: Tensor,
    /// Encoder output cells, row-major (N·h·w)×L.
    pub cells: Vec<f64>,
    pub assign: Vec<u32>,
}

pub struct VqVae {
    cfg: VqVaeConfig,
    vars: VarMap,
    enc: Encoder,
    dec: Decoder,
    pub codebook: Codebook,
    dtype: DType,
    device: Device,
}

impl VqVae {
    pub fn new(cfg: &VqVaeConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = nn::device();
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, &device);
        let enc = Encoder::new(cfg, vb.pp("enc"))?;
        let dec = Decoder::new(cfg, vb.pp("dec"))?;
        nn::seeded_init(&vars, seed)?;
        let mut rng = crate::seed::rng(crate::seed::derive_named(seed, "codebook"));
        let codebook = Codebook::random(cfg.codebook_size, cfg.code_dim, cfg.count_floor, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), vars, enc, dec, codebook, dtype, device })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.cfg
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn images_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if let Some(bad) = images.iter().find(|im| im.dims() != (s, s)) {
            return Err(Error::shape(format!("{s}x{s} image"), format!("{}x{}", bad.height(), bad.width())));
        }
        Image::batch_tensor(images, self.dtype, &self.device)
    }

    /// Continuous latents (N, L, h, w).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.cfg.image_size;
        match x.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(self.enc.forward(x)?),
            d => Err(Error::shape(format!("(N, 3, {s}, {s})"), format!("{d:?}"))),
        }
    }

    /// (N, L, h, w) → row-major cells (N·h·w)×L.
    pub fn cells(z: &Tensor) -> Result<Vec<f64>> {
        Ok(z.permute((0, 2, 3, 1))?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Grid of codebook vectors (N, L, h, w) for flat raster indices.
    pub fn lookup(&self, assign: &[u32], n: usize) -> Result<Tensor> {
        let hw = self.cfg.latent_size();
        let v = self.codebook.lookup(assign)?;
        Ok(Tensor::from_vec(v, (n, hw, hw, self.cfg.code_dim), &self.device)?
            .to_dtype(self.dtype)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<(Vec<LatentCode>, Tensor)> {
        let (n, l, h, w) = z.dims4()?;
        if l != self.cfg.code_dim || h != self.cfg.latent_size() || w != self.cfg.latent_size() {
            return Err(Error::shape(
                format!("(N, {}, {h2}, {h2})", self.cfg.code_dim, h2 = self.cfg.latent_size()),
                format!("{:?}", z.dims()),
            ));
        }
        let assign = self.codebook.quantize(&Self::cells(z)?)?;
        let zq = self.lookup(&assign, n)?;
        let codes = assign.chunks(h * w).map(|c| LatentCode { h, w, indices: c.to_vec() }).collect();
        Ok((codes, zq))
    }

    /// Image batch in [0, 1] from a quantized grid.
    pub fn decode(&self, zq: &Tensor) -> Result<Tensor> {
        let hw = self.cfg.latent_size();
        match zq.dims() {
            [_, l, h, w] if *l == self.cfg.code_dim && *h == hw && *w == hw => Ok(nn::sigmoid(&self.dec.forward(zq)?)?),
            d => Err(Error::shape(format!("(N, {}, {hw}, {hw})", self.cfg.code_dim), format!("{d:?}"))),
        }
    }

    /// Reconstruction, commitment and total loss for `x` given its encoder
    /// output `z_e`.
    ///
    /// The decoder reads `sg[z_q] + (z_e − sg[z_e])`: numerically z_q, with the
    /// decoder-input gradient copied unchanged onto z_e. The commitment term
    /// compares z_e with the constant z_q, so it reaches only the encoder. The
    /// codebook is not a variable here and learns only through EMA.
    pub fn loss_terms(&self, x: &Tensor, z_e: &Tensor) -> Result<LossTerms> {
        let cells = Self::cells(z_e)?;
        let assign = self.codebook.quantize(&cells)?;
        let zq = self.lookup(&assign, z_e.dim(0)?)?;
        let z_st = (zq.detach() + (z_e - z_e.detach())?)?;
        let recon = (self.decode(&z_st)? - x)?.sqr()?.mean_all()?;
        let commit = (z_e - zq.detach())?.sqr()?.mean_all()?;
        let total = (&recon + (&commit * self.cfg.beta)?)?;
        Ok(LossTerms { total, recon, commit, cells, assign })
    }

    pub fn codes(&self, images: &[&Image]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let z = self.encode(&self.images_tensor(chunk)?)?;
            out.extend(self.quantize(&z)?.0);
        }
        Ok(out)
    }

    pub fn decode_codes(&self, codes: &[LatentCode]) -> Result<Vec<Image>> {
        let hw = self.cfg.latent_size();
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(256) {
            let mut flat = Vec::with_capacity(chunk.len() * hw * hw);
            for c in chunk {
                if c.h != hw || c.w != hw {
                    return Err(Error::shape(format!("{hw}x{hw} code"), format!("{}x{}", c.h, c.w)));
                }
                flat.extend_from_slice(&c.indices);
            }
            out.extend(Image::from_batch_tensor(&self.decode(&self.lookup(&flat, chunk.len())?)?)?);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        self.decode_codes(&self.codes(images)?)
    }

    /// Mean squared reconstruction error over `images`.
    pub fn recon_mse(&self, images: &[&Image]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let rec = self.reconstruct(images)?;
        Ok(rec.iter().zip(images).map(|(r, o)| r.mse(o) as f64).sum::<f64>() / images.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(Payload::Vqvae, &self.cfg)?;
        c.add_vars("net.", &self.vars);
        let (k, l) = (self.codebook.k(), self.codebook.dim());
        let dev = Device::Cpu;
        c.insert("codebook.vectors", Tensor::from_slice(self.codebook.vectors(), (k, l), &dev)?);
        c.insert("codebook.counts", Tensor::from_slice(self.codebook.counts(), k, &dev)?);
        c.insert("codebook.sums", Tensor::from_slice(self.codebook.sums(), (k, l), &dev)?);
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        if ckpt.payload != Payload::Vqvae {
            return Err(Error::Incompatible(format!("expected a vqvae checkpoint, got {}", ckpt.payload)));
        }
        let cfg: VqVaeConfig = ckpt.config()?;
        let mut m = Self::new(&cfg, dtype, 0)?;
        ckpt.load_vars("net.", &m.vars)?;
        let get = |n: &str| -> Result<Vec<f64>> { Ok(ckpt.tensor(n)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?) };
        m.codebook = Codebook::from_state(
            cfg.codebook_size,
            cfg.code_dim,
            cfg.count_floor,
            get("codebook.vectors")?,
            get("codebook.counts")?,
            get("codebook.sums")?,
        )?;
        Ok(m)
    }

    pub fn identity(&self) -> Result<String> {
        self.to_checkpoint()?.identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::Rng;

    fn tiny() -> VqVaeConfig {
        VqVaeConfig {
            image_size: 4,
            downsample: 2,
            codebook_size: 4,
            code_dim: 3,
            hidden: 4,
            res_blocks: 0,
            res_hidden: 2,
            ..Default::default()
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|_| Image::from_vec(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = VqVaeConfig { hidden: 8, res_hidden: 4, code_dim: 6, ..Default::default() };
        let m = VqVae::new(&cfg, DType::F32, 1).unwrap();
        let imgs = random_images(2, 32, 1);
        let x = m.images_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let z = m.encode(&x).unwrap();
        assert_eq!(z.dims(), &[2, 6, 8, 8]);
        let (codes, zq) = m.quantize(&z).unwrap();
        assert_eq!(codes[0].indices.len(), 64);
        let y = m.decode(&zq).unwrap();
        assert_eq!(y.dims(), &[2, 3, 32, 32]);
        assert!(m.encode(&Tensor::zeros((1, 3, 16, 16), DType::F32, m.device()).unwrap()).is_err());
    }

    #[test]
    fn full_config_shapes() {
        let cfg = VqVaeConfig { hidden: 4, res_hidden: 2, res_blocks: 1, code_dim: 8, codebook_size: 16, ..VqVaeConfig::full() };
        let m = VqVae::new(&cfg, DType::F32, 1).unwrap();
        let z = m.encode(&Tensor::zeros((1, 3, 64, 64), DType::F32, m.device()).unwrap()).unwrap();
        assert_eq!(z.dims(), &[1, 8, 32, 32]);
        let p = VqVaeConfig::full();
        assert_eq!((p.codebook_size, p.code_dim, p.lr, p.batch_size, p.steps, p.gamma), (1024, 256, 5e-4, 32, 300_000, 0.99));
    }

    #[test]
    fn decode_stays_in_unit_range() {
        let m = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, ..Default::default() }, DType::F32, 2).unwrap();
        let mut rng = crate::seed::rng(3);
        for _ in 0..5 {
            let z = Tensor::from_vec(
                (0..64 * 64).map(|_| rng.random_range(-20.0f32..20.0)).collect::<Vec<_>>(),
                (1, 64, 8, 8),
                m.device(),
            )
            .unwrap();
            let v: Vec<f32> = m.decode(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let m = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, ..Default::default() }, DType::F32, 4).unwrap();
        let imgs = random_images(3, 32, 4);
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(m.reconstruct(&refs).unwrap(), m.reconstruct(&refs).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, ..Default::default() }, DType::F32, 5).unwrap();
        let path = dir.path().join("vq.safetensors");
        let r = m.to_checkpoint().unwrap().save(&path).unwrap();
        let ck = Checkpoint::load(&path, Payload::Vqvae, &Device::Cpu).unwrap();
        let back = VqVae::from_checkpoint(&ck, DType::F32).unwrap();
        assert_eq!(back.identity().unwrap(), r.identity);
        let imgs = random_images(2, 32, 5);
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(back.reconstruct(&refs).unwrap(), m.reconstruct(&refs).unwrap());
    }

    #[test]
    fn loss_is_sum_of_terms() {
        let m = VqVae::new(&VqVaeConfig { beta: 0.7, ..tiny() }, DType::F64, 6).unwrap();
        let imgs = random_images(2, 4, 6);
        let x = m.images_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let z = m.encode(&x).unwrap();
        let t = m.loss_terms(&x, &z).unwrap();
        let total = t.total.to_scalar::<f64>().unwrap();
        let (r, c) = (t.recon.to_scalar::<f64>().unwrap(), t.commit.to_scalar::<f64>().unwrap());
        assert!(r >= 0.0 && c >= 0.0);
        assert!((total - (r + 0.7 * c)).abs() < 1e-12);
        // independent recomputation of both terms
        let (_, zq) = m.quantize(&z).unwrap();
        let rec: Vec<f64> = m.decode(&zq).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let r2 = rec.iter().zip(&xs).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / xs.len() as f64;
        let ze = VqVae::cells(&z).unwrap();
        let zqv = VqVae::cells(&zq).unwrap();
        let c2 = ze.iter().zip(&zqv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ze.len() as f64;
        assert!((r - r2).abs() < 1e-12 && (c - c2).abs() < 1e-12);
    }

    #[test]
    fn commitment_gradient_skips_decoder() {
        let m = VqVae::new(&tiny(), DType::F64, 7).unwrap();
        let imgs = random_images(1, 4, 7);
        let x = m.images_tensor(&[&imgs[0]]).unwrap();
        let t = m.loss_terms(&x, &m.encode(&x).unwrap()).unwrap();
        let g = t.commit.backward().unwrap();
        let data = m.vars.data().lock().unwrap();
        for (name, var) in data.iter() {
            let has = g.get(var.as_tensor()).is_some();
            assert_eq!(has, name.starts_with("enc."), "{name}");
        }
    }

    #[test]
    fn straight_through_copies_gradient() {
        let m = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, code_dim: 8, codebook_size: 16, ..Default::default() }, DType::F64, 8)
            .unwrap();
        let imgs = random_images(2, 32, 8);
        let x = m.images_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let ze = Var::from_tensor(&m.encode(&x).unwrap()).unwrap();
        let t = m.loss_terms(&x, ze.as_tensor()).unwrap();
        let g_enc = t.recon.backward().unwrap().get(ze.as_tensor()).unwrap().clone();

        let (_, zq) = m.quantize(ze.as_tensor()).unwrap();
        let zq = Var::from_tensor(&zq).unwrap();
        let recon = (m.decode(zq.as_tensor()).unwrap() - &x).unwrap().sqr().unwrap().mean_all().unwrap();
        let g_dec = recon.backward().unwrap().get(zq.as_tensor()).unwrap().clone();
        let a: Vec<f64> = g_enc.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = g_dec.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|v| *v != 0.0));
    }

    // Assignments do not depend on decoder weights, so the loss is smooth in
    // them and plain central differences apply.
    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let m = VqVae::new(&VqVaeConfig { res_blocks: 1, ..tiny() }, DType::F64, 10).unwrap();
        let imgs = random_images(2, 4, 10);
        let x = m.images_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let z = m.encode(&x).unwrap();
        let loss = |m: &VqVae| m.loss_terms(&x, &z).unwrap().total.to_scalar::<f64>().unwrap();
        let grads = m.loss_terms(&x, &z).unwrap().total.backward().unwrap();
        let vars: Vec<(String, Var)> =
            m.vars.data().lock().unwrap().iter().filter(|(n, _)| n.starts_with("dec.")).map(|(n, v)| (n.clone(), v.clone())).collect();
        assert!(!vars.is_empty());
        let h = 1e-6;
        for (name, var) in vars {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let shape = var.as_tensor().shape().clone();
            let set = |v: Vec<f64>| var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                set(p.clone());
                let up = loss(&m);
                p[i] -= 2.0 * h;
                set(p);
                let down = loss(&m);
                set(base.clone());
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "{name}[{i}]: fd {fd} vs {}", g[i]);
            }
        }
    }
}
