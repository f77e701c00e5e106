use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{embedding, linear, Embedding, Linear, Optimizer, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::Tuple;
use crate::checkpoint::{Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::nn;
use crate::simenv::Action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyInput {
    /// Code indices scaled to [0, 1] by index / K.
    Normalized,
    /// A learned embedding per code index.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub input: PolicyInput,
    /// Tokens per latent code, S.
    pub seq_len: usize,
    /// Codebook size K.
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Displacement that maps to one action unit; the env step cap.
    pub action_scale: f64,
    pub lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { input: PolicyInput::Normalized, seq_len: 64, vocab: 128, embed_dim: 4, hidden: vec![256, 64], action_scale: 0.06, lr: 1e-3 }
    }
}

impl PolicyConfig {
    /// Full-scale trunk: 2048 → 256 → 64 → 4 on two 32×32 codes.
    pub fn full() -> Self {
        Self { seq_len: 1024, vocab: 1024, ..Self::default() }
    }

    pub fn input_dim(&self) -> usize {
        match self.input {
            PolicyInput::Normalized => 2 * self.seq_len,
            PolicyInput::Embedding => 2 * self.seq_len * self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.vocab < 2 || self.hidden.iter().any(|&h| h == 0) || !(self.action_scale > 0.0 && self.lr > 0.0) {
            return Err(Error::Config("policy: seq_len, vocab, hidden widths, action_scale and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Policy outputs for a batch: displacement means in action units (N, 3) and
/// gripper logits (N,).
pub struct PolicyOutput {
    pub mean: Tensor,
    pub grip_logit: Tensor,
}

/// Goal-conditioned MLP π(a | z_t, z_g).
pub struct Policy {
    cfg: PolicyConfig,
    vars: VarMap,
    emb: Option<Embedding>,
    layers: Vec<Linear>,
    opt: candle_nn::AdamW,
    device: Device,
    dtype: DType,
}

impl Policy {
    pub fn new(cfg: &PolicyConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = nn::device();
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, &device);
        let emb = match cfg.input {
            PolicyInput::Embedding => Some(embedding(cfg.vocab, cfg.embed_dim, vb.pp("code_emb"))?),
            PolicyInput::Normalized => None,
        };
        let mut dims = vec![cfg.input_dim()];
        dims.extend(&cfg.hidden);
        dims.push(4);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(w[0], w[1], vb.pp(format!("fc{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        nn::seeded_init(&vars, seed)?;
        let opt = nn::adam(&vars, cfg.lr)?;
        Ok(Self { cfg: cfg.clone(), vars, emb, layers, opt, device, dtype })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn fingerprint(&self) -> Result<String> {
        nn::param_fingerprint(&self.vars)
    }

    fn input(&self, obs: &[&[u32]], goals: &[&[u32]]) -> Result<Tensor> {
        let s = self.cfg.seq_len;
        for c in obs.iter().chain(goals) {
            if c.len() != s {
                return Err(Error::shape(format!("{s}-token code"), c.len()));
            }
            if let Some(&t) = c.iter().find(|&&t| t as usize >= self.cfg.vocab) {
                return Err(Error::Vocabulary { token: t as usize, vocab: self.cfg.vocab });
            }
        }
        let n = obs.len();
        let flat: Vec<u32> = obs.iter().zip(goals).flat_map(|(o, g)| o.iter().chain(g.iter()).copied()).collect();
        match &self.emb {
            None => {
                let k = self.cfg.vocab as f64;
                let v: Vec<f64> = flat.iter().map(|&t| t as f64 / k).collect();
                Ok(Tensor::from_vec(v, (n, 2 * s), &self.device)?.to_dtype(self.dtype)?)
            }
            Some(e) => {
                let ids = Tensor::from_vec(flat, (n, 2 * s), &self.device)?;
                Ok(e.forward(&ids)?.flatten_from(1)?)
            }
        }
    }

    pub fn forward(&self, obs: &[&[u32]], goals: &[&[u32]]) -> Result<PolicyOutput> {
        let mut h = self.input(obs, goals)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(PolicyOutput { mean: h.narrow(1, 0, 3)?, grip_logit: h.narrow(1, 3, 1)?.squeeze(1)? })
    }

    /// Deterministic action: mean displacement and the gripper logit's sign.
    pub fn act(&self, obs: &[u32], goal: &[u32]) -> Result<(Action, [f64; 3], f64)> {
        let out = self.forward(&[obs], &[goal])?;
        let m: Vec<f64> = out.mean.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let logit: f64 = out.grip_logit.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        let s = self.cfg.action_scale;
        let a = Action::new(m[0] * s, m[1] * s, m[2] * s, if logit > 0.0 { 1.0 } else { -1.0 });
        Ok((a, [m[0], m[1], m[2]], logit))
    }

    /// Targets for a batch: displacements in action units (N, 3) and gripper
    /// labels in {0, 1} (N,).
    fn targets(&self, batch: &[Tuple]) -> Result<(Tensor, Tensor)> {
        let s = self.cfg.action_scale;
        let xyz: Vec<f64> = batch.iter().flat_map(|t| [t.action.dx / s, t.action.dy / s, t.action.dz / s]).collect();
        let grip: Vec<f64> = batch.iter().map(|t| if t.action.grip > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok((
            Tensor::from_vec(xyz, (batch.len(), 3), &self.device)?.to_dtype(self.dtype)?,
            Tensor::from_vec(grip, batch.len(), &self.device)?.to_dtype(self.dtype)?,
        ))
    }

    /// Batch-mean of ½‖a − μ‖² and of the gripper BCE, as separate tensors.
    pub fn loss_terms(&self, batch: &[Tuple]) -> Result<(Tensor, Tensor)> {
        if batch.is_empty() {
            return Err(Error::Invalid("behavior cloning needs a non-empty batch".into()));
        }
        let obs: Vec<&[u32]> = batch.iter().map(|t| &t.code_t.indices[..]).collect();
        let goals: Vec<&[u32]> = batch.iter().map(|t| &t.code_goal.indices[..]).collect();
        let out = self.forward(&obs, &goals)?;
        let (a, y) = self.targets(batch)?;
        let xyz = ((out.mean - a)?.sqr()?.sum(1)? * 0.5)?.mean_all()?;
        // softplus(x) − y·x, with softplus(x) = max(x, 0) + ln(1 + e^−|x|)
        let x = &out.grip_logit;
        let abs = (x.relu()? + x.neg()?.relu()?)?;
        let softplus = (x.relu()? + (abs.neg()?.exp()? + 1.0)?.log()?)?;
        let bce = (softplus - (y * x)?)?.mean_all()?;
        Ok((xyz, bce))
    }

    pub fn loss(&self, batch: &[Tuple]) -> Result<f64> {
        let (a, b) = self.loss_terms(batch)?;
        Ok((a + b)?.to_dtype(DType::F64)?.to_scalar()?)
    }

    /// One Adam step on the behavior-cloning loss; returns the pre-step loss.
    pub fn bc_update(&mut self, batch: &[Tuple]) -> Result<f64> {
        let (a, b) = self.loss_terms(batch)?;
        let loss = (a + b)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Invalid(format!("non-finite behavior-cloning loss {v}")));
        }
        self.opt.backward_step(&loss)?;
        Ok(v)
    }

    pub fn to_checkpoint(&self, vqvae: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(Payload::Policy, &self.cfg)?.with_parent("vqvae", vqvae);
        c.add_vars("net.", &self.vars);
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.payload != Payload::Policy {
            return Err(Error::Incompatible(format!("expected a policy checkpoint, got {}", ckpt.payload)));
        }
        let m = Self::new(&ckpt.config()?, DType::F32, 0)?;
        ckpt.load_vars("net.", &m.vars)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use candle_core::Var;
    use rand::Rng;

    use super::*;
    use crate::image::Image;
    use crate::seed;
    use crate::vqvae::LatentCode;

    fn config() -> PolicyConfig {
        PolicyConfig { seq_len: 6, vocab: 8, hidden: vec![16, 8], ..Default::default() }
    }

    fn tuples(n: usize, cfg: &PolicyConfig, seed_: u64) -> Vec<Tuple> {
        let mut rng = seed::rng(seed_);
        let img = Arc::new(Image::filled(1, 1, [0.0; 3]));
        let mut code = || {
            let idx = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab as u32)).collect();
            Arc::new(LatentCode::new(1, cfg.seq_len, idx).unwrap())
        };
        let codes: Vec<_> = (0..2 * n).map(|_| code()).collect();
        let mut rng = seed::rng(seed_ ^ 1);
        (0..n)
            .map(|i| {
                let s = cfg.action_scale;
                let action = Action::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    if rng.random::<bool>() { 1.0 } else { -1.0 },
                );
                Tuple {
                    episode: i as u64,
                    t: 0,
                    o_t: img.clone(),
                    action,
                    o_next: img.clone(),
                    goal: img.clone(),
                    code_t: codes[2 * i].clone(),
                    code_goal: codes[2 * i + 1].clone(),
                    terminal: true,
                }
            })
            .collect()
    }

    fn var(p: &Policy, name: &str) -> Var {
        p.vars.data().lock().unwrap().get(name).unwrap().clone()
    }

    #[test]
    fn exact_targets_give_zero_loss() {
        let cfg = config();
        let p = Policy::new(&cfg, DType::F32, 3).unwrap();
        let bias = var(&p, "fc2.bias");
        bias.set(&Tensor::new(&[0f32, 0.0, 0.0, 20.0], &p.device).unwrap()).unwrap();
        let mut batch = tuples(4, &cfg, 1);
        for t in &mut batch {
            let (a, _, _) = p.act(&t.code_t.indices, &t.code_goal.indices).unwrap();
            t.action = Action { grip: 1.0, ..a };
        }
        let (xyz, bce) = p.loss_terms(&batch).unwrap();
        assert!(xyz.to_scalar::<f32>().unwrap().abs() < 1e-10);
        assert!(bce.to_scalar::<f32>().unwrap() < 1e-3);
    }

    #[test]
    fn xyz_gradient_matches_finite_differences() {
        let cfg = config();
        let p = Policy::new(&cfg, DType::F64, 4).unwrap();
        let batch = tuples(1, &cfg, 2);
        let (xyz, _) = p.loss_terms(&batch).unwrap();
        let grads = xyz.backward().unwrap();
        let h = 1e-6;
        for name in ["fc0.weight", "fc1.bias", "fc2.weight"] {
            let v = var(&p, name);
            let g: Vec<f64> = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by((base.len() / 5).max(1)) {
                let at = |d: f64| {
                    let mut w = base.clone();
                    w[i] += d;
                    v.set(&Tensor::from_vec(w, v.shape(), &p.device).unwrap()).unwrap();
                    let (x, _) = p.loss_terms(&batch).unwrap();
                    x.to_scalar::<f64>().unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                v.set(&Tensor::from_vec(base.clone(), v.shape(), &p.device).unwrap()).unwrap();
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(err < 1e-3 || (fd - g[i]).abs() < 1e-9, "{name}[{i}]: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn repeated_updates_fit_a_fixed_batch() {
        let cfg = PolicyConfig { seq_len: 64, vocab: 128, ..Default::default() };
        let mut p = Policy::new(&cfg, DType::F32, 5).unwrap();
        let batch = tuples(32, &cfg, 3);
        let first = p.loss(&batch).unwrap();
        for _ in 0..200 {
            p.bc_update(&batch).unwrap();
        }
        let last = p.loss(&batch).unwrap();
        assert!(last <= 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_bad_codes() {
        let cfg = config();
        let p = Policy::new(&cfg, DType::F32, 6).unwrap();
        let q = Policy::from_checkpoint(&p.to_checkpoint("v").unwrap()).unwrap();
        assert_eq!(p.fingerprint().unwrap(), q.fingerprint().unwrap());
        assert!(p.act(&[0; 5], &[0; 6]).is_err());
        assert!(p.act(&[8; 6], &[0; 6]).is_err());
    }
}
