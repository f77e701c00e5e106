//! Run configuration: one TOML tree with a section per module, a master seed
//! and an output root. Every key has a default and unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::affordance::AffordanceConfig;
use crate::checkpoint::config_hash;
use crate::cvae::CvaeConfig;
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::SuiteConfig;
use crate::explorer::ExplorerConfig;
use crate::prior::PriorConfig;
use crate::simenv::{EnvConfig, ParseConfig};
use crate::vqvae::VqVaeConfig;

/// Environment variable that overrides `output_root`.
pub const RUN_ROOT_ENV: &str = "AFFORD_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Trials per task.
    pub trials: usize,
    /// Held-out conditioning scenes for the affordance metrics.
    pub affordance_scenes: usize,
    pub samples_per_image: usize,
    pub suite: SuiteConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials: 10, affordance_scenes: 50, samples_per_image: 8, suite: SuiteConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_root: PathBuf,
    pub env: EnvConfig,
    pub parse: ParseConfig,
    pub dataset: DatasetConfig,
    pub vqvae: VqVaeConfig,
    pub prior: PriorConfig,
    pub affordance: AffordanceConfig,
    pub cvae: CvaeConfig,
    pub explorer: ExplorerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs"),
            env: EnvConfig::default(),
            parse: ParseConfig::default(),
            dataset: DatasetConfig::default(),
            vqvae: VqVaeConfig::default(),
            prior: PriorConfig::default(),
            affordance: AffordanceConfig::default(),
            cvae: CvaeConfig::default(),
            explorer: ExplorerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Desk-scale defaults.
    Desk,
    /// Tiny models and budgets for smoke tests.
    Micro,
    /// Full-scale model sizes and step budgets.
    Full,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::default(),
            Preset::Micro => Self::micro(),
            Preset::Full => Self::full(),
        }
    }

    /// Minutes on one CPU: 200 pairs, 200 training steps, 20 episodes.
    pub fn micro() -> Self {
        let d = Self::default();
        Self {
            dataset: DatasetConfig { pairs: 200, ..d.dataset },
            vqvae: VqVaeConfig {
                hidden: 16,
                res_hidden: 8,
                code_dim: 16,
                codebook_size: 32,
                steps: 200,
                log_every: 20,
                val_every: 100,
                val_images: 32,
                checkpoint_every: 0,
                ..d.vqvae
            },
            prior: PriorConfig {
                layers: 1,
                embed: 32,
                ff: 64,
                vocab: 32,
                steps: 200,
                log_every: 20,
                val_every: 100,
                val_pairs: 16,
                checkpoint_every: 0,
                ..d.prior
            },
            cvae: CvaeConfig { hidden: 8, latent_dim: 8, steps: 200, log_every: 20, checkpoint_every: 0, ..d.cvae },
            explorer: ExplorerConfig {
                episodes: 20,
                updates_per_episode: 5,
                batch_size: 16,
                checkpoint_every: 10,
                policy: crate::explorer::PolicyConfig { vocab: 32, hidden: vec![32, 16], ..d.explorer.policy },
                ..d.explorer
            },
            eval: EvalConfig {
                trials: 2,
                affordance_scenes: 4,
                samples_per_image: 2,
                suite: SuiteConfig { certify_probes: 2, ..d.eval.suite },
            },
            ..d
        }
    }

    pub fn full() -> Self {
        let d = Self::default();
        let vq = VqVaeConfig::full();
        let explorer = ExplorerConfig { policy: crate::explorer::PolicyConfig::full(), ..d.explorer };
        Self {
            env: EnvConfig { image_size: vq.image_size, ..d.env },
            cvae: CvaeConfig { image_size: vq.image_size, ..d.cvae },
            vqvae: vq,
            prior: PriorConfig::full(),
            explorer,
            ..d
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Checks every section and the cross-section size agreements.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.dataset.validate()?;
        self.vqvae.validate()?;
        self.prior.validate()?;
        self.affordance.sampling.validate()?;
        self.cvae.validate()?;
        self.explorer.validate()?;
        let (k, s) = (self.vqvae.codebook_size, self.vqvae.seq_len());
        let mismatch = |what: &str, got: usize, want: usize| {
            Err(Error::Config(format!("{what} = {got} must equal the vqvae's {want}")))
        };
        if self.vqvae.image_size != self.env.image_size {
            return mismatch("vqvae.image_size", self.vqvae.image_size, self.env.image_size);
        }
        if self.cvae.image_size != self.env.image_size {
            return mismatch("cvae.image_size", self.cvae.image_size, self.env.image_size);
        }
        if self.prior.vocab != k {
            return mismatch("prior.vocab", self.prior.vocab, k);
        }
        if self.prior.seq_len != s {
            return mismatch("prior.seq_len", self.prior.seq_len, s);
        }
        if self.explorer.policy.vocab != k {
            return mismatch("explorer.policy.vocab", self.explorer.policy.vocab, k);
        }
        if self.explorer.policy.seq_len != s {
            return mismatch("explorer.policy.seq_len", self.explorer.policy.seq_len, s);
        }
        Ok(())
    }

    /// `AFFORD_RUN_ROOT` when set, else `output_root`.
    pub fn run_root(&self) -> PathBuf {
        std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_root.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::Micro, Preset::Full] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn empty_file_is_the_desk_preset() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[vqvae]\ncodebook_sise = 3\n").unwrap_err().to_string();
        assert!(e.contains("codebook_sise"), "{e}");
        let e = RunConfig::from_toml("bogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn size_disagreements_are_rejected() {
        let e = RunConfig::from_toml("[prior]\nvocab = 64\n").unwrap_err().to_string();
        assert!(e.contains("prior.vocab"), "{e}");
    }
}
