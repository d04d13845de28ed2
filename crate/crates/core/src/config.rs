//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::ArchConfig;
use crate::child::ChildWeights;
use crate::error::{Error, Result};
use crate::parent::{Lipschitz, ParentWeights};

/// Loss terms that an ablation can remove.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_parent_cls: bool,
    pub no_child_cls: bool,
    pub no_mode_seek: bool,
    pub no_gene_adv: bool,
    pub single_gene_t: bool,
    pub inverse_in_image_space: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub batch_size: usize,
    /// Learning rates: step 1 parent, step 1 child, step 2 parent, step 2 inverse,
    /// step 3, step 4.
    pub lr: [f64; 6],
    pub epochs: [usize; 4],
    pub beta1: f64,
    pub beta2: f64,
    /// `(recon, cls, adv, gene_adv, child adv, child cls, mode-seek, branch 2, branch 3, branch 4)`.
    pub lambda: [f64; 10],
    pub ablations: Ablations,
    pub lipschitz: Lipschitz,
    pub critic_steps: usize,
    pub progressive: bool,
    /// Child GAN iterations per step-1 epoch; 0 means one pass over the child images.
    pub child_iters_per_epoch: usize,
    /// Iterations per step-2 inverse-encoder epoch; 0 means one pass over the child images.
    pub inverse_iters_per_epoch: usize,
    pub seed: u64,
}

pub const PAPER_LR: [f64; 6] = [2e-4, 1.5e-3, 2e-4, 1e-4, 1e-3, 1e-5];
pub const PAPER_EPOCHS: [usize; 4] = [200, 200, 200, 10];
pub const PAPER_LAMBDA: [f64; 10] = [100.0, 10.0, 1.0, 0.1, 1.0, 1.0, 5.0, 0.8, 0.6, 0.4];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            arch: ArchConfig {
                resolution: 128,
                d_g: crate::factors::DEFAULT_GENETIC_DIM,
                d_v: crate::factors::DEFAULT_VARIETY_DIM,
                width: 64,
                critic_width: 64,
                child_width: 128,
                inverse_width: 64,
                mapper_width: 512,
            },
            batch_size: 16,
            lr: PAPER_LR,
            epochs: PAPER_EPOCHS,
            beta1: 0.5,
            beta2: 0.999,
            lambda: PAPER_LAMBDA,
            ablations: Ablations::default(),
            lipschitz: Lipschitz::default(),
            critic_steps: 1,
            progressive: true,
            child_iters_per_epoch: 0,
            inverse_iters_per_epoch: 0,
            seed: 0,
        }
    }

    /// Desk-scale preset: 32×32 faces, `d_g = 32`, `d_v = 8`.
    pub fn toy() -> Self {
        Self {
            arch: ArchConfig::toy(),
            epochs: [40, 20, 200, 10],
            child_iters_per_epoch: 50,
            inverse_iters_per_epoch: 100,
            ..Self::paper()
        }
    }

    pub fn parent_weights(&self, step: u8) -> ParentWeights {
        let l = &self.lambda;
        let a = &self.ablations;
        ParentWeights {
            recon: l[0],
            cls: if a.no_parent_cls { 0.0 } else { l[1] },
            adv: l[2],
            gene_adv: if a.no_gene_adv { 0.0 } else { l[3] },
        }
        .for_step(step)
    }

    pub fn child_weights(&self) -> ChildWeights {
        let l = &self.lambda;
        let a = &self.ablations;
        ChildWeights {
            adv: l[4],
            cls: if a.no_child_cls { 0.0 } else { l[5] },
            mode_seek: if a.no_mode_seek { 0.0 } else { l[6] },
        }
    }

    pub fn branch_weights(&self) -> [f64; 3] {
        [self.lambda[7], self.lambda[8], self.lambda[9]]
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.lr.iter().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss coefficients must be finite and non-negative".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key, one per line, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    /// First eight bytes of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.arch;
        let ab = &self.ablations;
        let flag = |b: bool| u8::from(b).to_string();
        let (lipschitz, gp, clip) = match self.lipschitz {
            Lipschitz::GradientPenalty { weight } => ("gp", weight, 0.01),
            Lipschitz::WeightClip { limit } => ("clip", 10.0, limit),
        };
        let mut e = vec![
            ("resolution", a.resolution.to_string()),
            ("d_g", a.d_g.to_string()),
            ("d_v", a.d_v.to_string()),
            ("width", a.width.to_string()),
            ("critic_width", a.critic_width.to_string()),
            ("child_width", a.child_width.to_string()),
            ("inverse_width", a.inverse_width.to_string()),
            ("mapper_width", a.mapper_width.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ];
        for (k, v) in LR_KEYS.iter().zip(self.lr) {
            e.push((k, format!("{v:e}")));
        }
        for (k, v) in EPOCH_KEYS.iter().zip(self.epochs) {
            e.push((k, v.to_string()));
        }
        e.push(("beta1", self.beta1.to_string()));
        e.push(("beta2", self.beta2.to_string()));
        for (k, v) in LAMBDA_KEYS.iter().zip(self.lambda) {
            e.push((k, v.to_string()));
        }
        e.extend([
            ("no_parent_cls", flag(ab.no_parent_cls)),
            ("no_child_cls", flag(ab.no_child_cls)),
            ("no_mode_seek", flag(ab.no_mode_seek)),
            ("no_gene_adv", flag(ab.no_gene_adv)),
            ("single_gene_t", flag(ab.single_gene_t)),
            ("inverse_in_image_space", flag(ab.inverse_in_image_space)),
            ("lipschitz", lipschitz.to_string()),
            ("gp_weight", gp.to_string()),
            ("clip_limit", clip.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("progressive", flag(self.progressive)),
            ("child_iters_per_epoch", self.child_iters_per_epoch.to_string()),
            ("inverse_iters_per_epoch", self.inverse_iters_per_epoch.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        e
    }

    /// Applies `key = value` lines on top of the paper defaults. Unknown keys are
    /// rejected; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::paper();
        let mut gp_weight = 10.0;
        let mut clip_limit = 0.01;
        let mut use_clip = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("line {}: invalid value '{value}' for {key}", lineno + 1));
            let int = || value.parse::<usize>().map_err(|_| bad());
            let real = || value.parse::<f64>().map_err(|_| bad());
            let flag = || match value {
                "0" | "false" => Ok(false),
                "1" | "true" => Ok(true),
                _ => Err(bad()),
            };
            if let Some(i) = LR_KEYS.iter().position(|k| *k == key) {
                cfg.lr[i] = real()?;
                continue;
            }
            if let Some(i) = EPOCH_KEYS.iter().position(|k| *k == key) {
                cfg.epochs[i] = int()?;
                continue;
            }
            if let Some(i) = LAMBDA_KEYS.iter().position(|k| *k == key) {
                cfg.lambda[i] = real()?;
                continue;
            }
            match key {
                "resolution" => cfg.arch.resolution = int()?,
                "d_g" => cfg.arch.d_g = int()?,
                "d_v" => cfg.arch.d_v = int()?,
                "width" => cfg.arch.width = int()?,
                "critic_width" => cfg.arch.critic_width = int()?,
                "child_width" => cfg.arch.child_width = int()?,
                "inverse_width" => cfg.arch.inverse_width = int()?,
                "mapper_width" => cfg.arch.mapper_width = int()?,
                "batch_size" => cfg.batch_size = int()?,
                "beta1" => cfg.beta1 = real()?,
                "beta2" => cfg.beta2 = real()?,
                "no_parent_cls" => cfg.ablations.no_parent_cls = flag()?,
                "no_child_cls" => cfg.ablations.no_child_cls = flag()?,
                "no_mode_seek" => cfg.ablations.no_mode_seek = flag()?,
                "no_gene_adv" => cfg.ablations.no_gene_adv = flag()?,
                "single_gene_t" => cfg.ablations.single_gene_t = flag()?,
                "inverse_in_image_space" => cfg.ablations.inverse_in_image_space = flag()?,
                "lipschitz" => {
                    use_clip = match value {
                        "gp" => false,
                        "clip" => true,
                        _ => return Err(bad()),
                    }
                }
                "gp_weight" => gp_weight = real()?,
                "clip_limit" => clip_limit = real()?,
                "critic_steps" => cfg.critic_steps = int()?,
                "progressive" => cfg.progressive = flag()?,
                "child_iters_per_epoch" => cfg.child_iters_per_epoch = int()?,
                "inverse_iters_per_epoch" => cfg.inverse_iters_per_epoch = int()?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1))),
            }
        }
        cfg.lipschitz = if use_clip {
            Lipschitz::WeightClip { limit: clip_limit }
        } else {
            Lipschitz::GradientPenalty { weight: gp_weight }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

const LR_KEYS: [&str; 6] = [
    "lr_step1_parent",
    "lr_step1_child",
    "lr_step2_parent",
    "lr_step2_inverse",
    "lr_step3",
    "lr_step4",
];
const EPOCH_KEYS: [&str; 4] = ["epochs_step1", "epochs_step2", "epochs_step3", "epochs_step4"];
const LAMBDA_KEYS: [&str; 10] = [
    "lambda_parent_recon",
    "lambda_parent_cls",
    "lambda_parent_adv",
    "lambda_parent_gene_adv",
    "lambda_child_adv",
    "lambda_child_cls",
    "lambda_child_mode_seek",
    "lambda_branch2",
    "lambda_branch3",
    "lambda_branch4",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::paper();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr[5], 1e-5);
        assert_eq!(c.epochs[3], 10);
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
        assert_eq!(c.lambda, [100.0, 10.0, 1.0, 0.1, 1.0, 1.0, 5.0, 0.8, 0.6, 0.4]);
    }

    #[test]
    fn text_round_trip() {
        for cfg in [TrainConfig::paper(), TrainConfig::toy()] {
            let back = TrainConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let mut clip = TrainConfig::toy();
        clip.lipschitz = Lipschitz::WeightClip { limit: 0.02 };
        assert_eq!(TrainConfig::parse(&clip.to_text()).unwrap(), clip);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(TrainConfig::parse("mystery = 3").is_err());
        assert!(TrainConfig::parse("batch_size 3").is_err());
        assert!(TrainConfig::parse("batch_size = many").is_err());
        assert!(TrainConfig::parse("lr_step3 = -1").is_err());
        assert!(TrainConfig::parse("no_mode_seek = 2").is_err());
    }

    #[test]
    fn ablation_flags_zero_single_terms() {
        let mut c = TrainConfig::paper();
        c.ablations.no_mode_seek = true;
        assert_eq!(c.child_weights().mode_seek, 0.0);
        assert_eq!(c.child_weights().cls, 1.0);
        c.ablations.no_gene_adv = true;
        assert_eq!(c.parent_weights(2).gene_adv, 0.0);
        assert_eq!(c.parent_weights(2).cls, 10.0);
    }
}
