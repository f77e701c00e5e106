use candle_core::DType;
use candle_nn::Optimizer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Prior, PriorConfig};
use crate::error::{Error, Result};
use crate::vqvae::LatentCode;
use crate::{nn, seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorLogEntry {
    pub step: usize,
    /// Mean per-token nll of the batch.
    pub nll: f64,
    pub val_nll: Option<f64>,
}

/// Maximum-likelihood training on (z_c, z_g) code pairs.
pub fn train_prior(
    train: &[(LatentCode, LatentCode)],
    val: &[(LatentCode, LatentCode)],
    cfg: &PriorConfig,
    seed: u64,
    mut on_log: impl FnMut(&PriorLogEntry),
    mut on_checkpoint: impl FnMut(usize, &Prior) -> Result<()>,
) -> Result<(Prior, Vec<PriorLogEntry>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (c, g) in train.iter().chain(val) {
        if c.indices.len() != cfg.seq_len || g.indices.len() != cfg.seq_len {
            return Err(Error::shape(format!("{} tokens per code", cfg.seq_len), c.indices.len().max(g.indices.len())));
        }
        c.validate(cfg.vocab)?;
        g.validate(cfg.vocab)?;
    }
    let model = Prior::new(cfg, DType::F32, seed::derive_named(seed, "prior.init"))?;
    let mut opt = nn::adam(&model.vars, cfg.lr)?;
    let mut rng = seed::rng(seed::derive_named(seed, "prior.batches"));
    let val: Vec<(&[u32], &[u32])> = val.iter().take(cfg.val_pairs).map(|(c, g)| (&c.indices[..], &g.indices[..])).collect();
    let mut log = Vec::new();

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let conds: Vec<&[u32]> = idx.iter().map(|&i| &train[i].0.indices[..]).collect();
        let goals: Vec<&[u32]> = idx.iter().map(|&i| &train[i].1.indices[..]).collect();
        let loss = (model.nll_tensor(&conds, &goals)?.mean_all()? / cfg.seq_len as f64)?;
        opt.backward_step(&loss)?;

        let last = step + 1 == cfg.steps;
        let val_nll = if !val.is_empty() && (last || (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)) {
            Some(model.mean_token_nll(&val)?)
        } else {
            None
        };
        if val_nll.is_some() || last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let e = PriorLogEntry { step, nll: loss.to_dtype(DType::F64)?.to_scalar()?, val_nll };
            tracing::info!(step, nll = e.nll, val_nll = ?e.val_nll, "prior");
            on_log(&e);
            log.push(e);
        }
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok((model, log))
}
