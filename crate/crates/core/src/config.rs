//! Model, ablation and training configuration.
//!
//! Three profiles ship: `full` (full-size architecture constants), `desk`
//! (64x64 scenes, trainable on one CPU core) and `minimal` (desk with 1x1
//! prototypes).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Patch side `S` in pixels.
    pub patch_size: usize,
    /// Token width `C`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of mutual-relation layers `L`.
    pub layers: usize,
    /// `[H, W]` of the query image.
    pub query_size: [usize; 2],
    /// `[H, W]` every exemplar crop is resized to.
    pub exemplar_size: [usize; 2],
    /// Number of exemplars `M` fed to the model.
    pub shots: usize,
    /// Replace exemplar images by a learnable token table.
    pub zero_shot: bool,
    /// Feed-forward hidden width as a multiple of `C`.
    pub mlp_ratio: usize,
    /// Pseudo-exemplars in the zero-shot token table.
    pub pseudo_exemplars: usize,
}

impl EncoderConfig {
    pub fn full() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            heads: 12,
            layers: 12,
            query_size: [512, 512],
            exemplar_size: [48, 48],
            shots: 3,
            zero_shot: false,
            mlp_ratio: 4,
            pseudo_exemplars: 3,
        }
    }

    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            heads: 2,
            layers: 2,
            query_size: [64, 64],
            exemplar_size: [16, 16],
            shots: 3,
            zero_shot: false,
            mlp_ratio: 2,
            pseudo_exemplars: 3,
        }
    }

    /// Query token grid `(h, w)`.
    pub fn query_grid(&self) -> (usize, usize) {
        (
            self.query_size[0] / self.patch_size,
            self.query_size[1] / self.patch_size,
        )
    }

    /// Exemplar token grid `(h, w)`.
    pub fn exemplar_grid(&self) -> (usize, usize) {
        (
            self.exemplar_size[0] / self.patch_size,
            self.exemplar_size[1] / self.patch_size,
        )
    }

    /// `N^Q = H W / S^2`.
    pub fn query_tokens(&self) -> usize {
        let (h, w) = self.query_grid();
        h * w
    }

    pub fn tokens_per_exemplar(&self) -> usize {
        let (h, w) = self.exemplar_grid();
        h * w
    }

    /// Number of exemplar sources: real crops, or pseudo-exemplars in zero-shot mode.
    pub fn exemplar_count(&self) -> usize {
        if self.zero_shot {
            self.pseudo_exemplars
        } else {
            self.shots
        }
    }

    /// `N^E`, the concatenated exemplar sequence length.
    pub fn exemplar_tokens(&self) -> usize {
        self.exemplar_count() * self.tokens_per_exemplar()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if s == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(config_err("patch_size, embed_dim and heads must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(config_err(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        for (what, [h, w]) in [("query", self.query_size), ("exemplar", self.exemplar_size)] {
            if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
                return Err(config_err(format!(
                    "{what} size {h}x{w} is not a positive multiple of patch size {s}"
                )));
            }
        }
        if self.zero_shot != (self.shots == 0) {
            return Err(config_err(format!(
                "shots = {} requires zero_shot = {}",
                self.shots,
                self.shots == 0
            )));
        }
        if self.zero_shot && self.pseudo_exemplars == 0 {
            return Err(config_err("zero-shot mode needs at least one pseudo-exemplar"));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    /// Prototype side `s`.
    pub prototype_size: usize,
    /// Adaptation iterations `K`; one correlation volume each.
    pub iterations: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl RelationConfig {
    pub fn full() -> Self {
        Self {
            prototype_size: 3,
            iterations: 3,
            heads: 8,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            prototype_size: 3,
            iterations: 3,
            heads: 2,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Negative slope of the hidden rectifiers.
    pub leaky_slope: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { leaky_slope: 0.01 }
    }
}

/// Which encoder components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    /// Cross-stream co-relation terms.
    pub mrm: bool,
    /// Learnable background token on the exemplar side.
    pub bt: bool,
    /// Target-background discriminative loss.
    pub tbd: bool,
}

impl AblationVariant {
    pub const BASELINE: Self = Self {
        mrm: false,
        bt: false,
        tbd: false,
    };
    pub const MRM: Self = Self {
        mrm: true,
        bt: false,
        tbd: false,
    };
    pub const MRM_BT: Self = Self {
        mrm: true,
        bt: true,
        tbd: false,
    };
    pub const FULL: Self = Self {
        mrm: true,
        bt: true,
        tbd: true,
    };

    /// The four rows of the component ablation, in order.
    pub const ALL: [Self; 4] = [Self::BASELINE, Self::MRM, Self::MRM_BT, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if self.tbd && !self.bt {
            return Err(config_err("the TBD loss needs the background token (tbd requires bt)"));
        }
        if self.bt && !self.mrm {
            return Err(config_err("the background token needs mutual relation modeling (bt requires mrm)"));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.mrm, self.bt, self.tbd) {
            (false, false, false) => "baseline",
            (true, false, false) => "mrm",
            (true, true, false) => "mrm+bt",
            (true, true, true) => "mrm+bt+tbd",
            _ => "invalid",
        }
    }
}

impl Default for AblationVariant {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub relation: RelationConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub variant: AblationVariant,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            relation: RelationConfig::full(),
            decoder: DecoderConfig::default(),
            variant: AblationVariant::FULL,
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            relation: RelationConfig::desk(),
            decoder: DecoderConfig::default(),
            variant: AblationVariant::FULL,
        }
    }

    pub fn minimal() -> Self {
        let mut cfg = Self::desk();
        cfg.relation.prototype_size = 1;
        cfg
    }

    /// Number of x2 upsampling stages the decoder needs to reach full
    /// resolution from the token grid.
    pub fn decoder_stages(&self) -> Result<usize> {
        let s = self.encoder.patch_size;
        if !s.is_power_of_two() {
            return Err(config_err(format!(
                "patch size {s} is not reachable by x2 upsampling stages"
            )));
        }
        Ok(s.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.variant.validate()?;
        let r = &self.relation;
        if r.prototype_size == 0 || r.prototype_size % 2 == 0 {
            return Err(config_err(format!(
                "prototype size {} must be odd",
                r.prototype_size
            )));
        }
        if r.iterations == 0 {
            return Err(config_err("relation learner needs at least one iteration"));
        }
        if r.heads == 0 || self.encoder.embed_dim % r.heads != 0 {
            return Err(config_err("relation heads must divide embed_dim"));
        }
        if r.mlp_ratio == 0 {
            return Err(config_err("relation mlp_ratio must be positive"));
        }
        let (eh, ew) = self.encoder.exemplar_grid();
        if eh != ew {
            return Err(config_err(format!("exemplar token grid {eh}x{ew} is not square")));
        }
        self.decoder_stages()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// The learning rate halves every this many epochs.
    pub halve_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl OptimConfig {
    pub fn full() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            halve_every: 40,
            clip_norm: 1.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            halve_every: 40,
            ..Self::full()
        }
    }

    /// `lr0 * 0.5^floor(epoch / halve_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.halve_every == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate on the held-out split every this many epochs; 0 = only at the end.
    #[serde(default)]
    pub eval_every: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 8,
            eval_every: 1,
            model: ModelConfig::full(),
            loss: LossWeights::default(),
            optim: OptimConfig::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 4,
            eval_every: 0,
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            optim: OptimConfig::desk(),
        }
    }

    /// Loss weights with the TBD term removed when the variant disables it.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if !self.model.variant.tbd {
            w.tbd = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(self.optim.lr > 0.0) || !self.optim.lr.is_finite() {
            return Err(config_err("learning rate must be positive"));
        }
        if self.loss.aux < 0.0 || self.loss.tbd < 0.0 {
            return Err(config_err("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Commented TOML template with the desk defaults.
    pub fn template() -> String {
        let body = Self::desk().to_toml();
        format!("{TEMPLATE_HEADER}{body}")
    }
}

const TEMPLATE_HEADER: &str = "\
# Training configuration (desk profile).
#
# seed               RNG seed for initialisation and data order
# epochs             passes over the training split
# batch_size         samples per optimiser step
# eval_every         held-out evaluation period in epochs (0 = final only)
#
# [model.encoder]    patch_size S, embed_dim C, heads, layers L,
#                    query_size / exemplar_size as [H, W] (multiples of S),
#                    shots M (0 requires zero_shot = true), mlp_ratio,
#                    pseudo_exemplars (zero-shot token table size)
# [model.relation]   prototype_size s (odd), iterations K, heads, mlp_ratio
# [model.decoder]    leaky_slope of hidden rectifiers
# [model.variant]    mrm / bt / tbd ablation switches (tbd needs bt, bt needs mrm)
# [loss]             aux = auxiliary-map weight, tbd = TBD loss weight
# [optim]            AdamW lr, beta1, beta2, eps, weight_decay;
#                    halve_every = lr halving period in epochs;
#                    clip_norm = global gradient-norm clip (0 = off)
#
# Full-size constants (`gencfg --profile full`): S=16, C=768, 12 heads, 12 layers, 512x512 queries,
# 48x48 exemplars, lr 1e-4 halved every 40 epochs, batch 8, 100 epochs.

";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_constants() {
        let e = EncoderConfig::full();
        assert_eq!(e.query_tokens(), 1024);
        assert_eq!(e.tokens_per_exemplar(), 9);
        assert_eq!(e.exemplar_tokens(), 27);
        assert_eq!(ModelConfig::full().decoder_stages().unwrap(), 4);
        ModelConfig::full().validate().unwrap();
    }

    #[test]
    fn desk_shapes() {
        let e = EncoderConfig::desk();
        assert_eq!(e.query_tokens(), 64);
        assert_eq!(e.exemplar_tokens(), 12);
        assert_eq!(ModelConfig::desk().decoder_stages().unwrap(), 3);
        ModelConfig::minimal().validate().unwrap();
    }

    #[test]
    fn ablation_constraints() {
        for v in AblationVariant::ALL {
            v.validate().unwrap();
        }
        let bad = AblationVariant {
            mrm: true,
            bt: false,
            tbd: true,
        };
        assert!(bad.validate().is_err());
        let bad = AblationVariant {
            mrm: false,
            bt: true,
            tbd: false,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shots_and_zero_shot_must_agree() {
        let mut e = EncoderConfig::desk();
        e.shots = 0;
        assert!(e.validate().is_err());
        e.zero_shot = true;
        e.validate().unwrap();
        assert_eq!(e.exemplar_tokens(), 12);
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let mut e = EncoderConfig::desk();
        e.query_size = [60, 64];
        assert!(e.validate().is_err());
        let mut e = EncoderConfig::desk();
        e.heads = 3;
        assert!(e.validate().is_err());
    }

    #[test]
    fn lr_schedule_halves() {
        let o = OptimConfig::full();
        assert_eq!(o.lr_at(0), 1e-4);
        assert_eq!(o.lr_at(39), 1e-4);
        assert_eq!(o.lr_at(40), 5e-5);
        assert_eq!(o.lr_at(99), 2.5e-5);
    }

    #[test]
    fn template_round_trips() {
        let text = TrainConfig::template();
        let cfg = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, TrainConfig::desk());
    }

    #[test]
    fn tbd_off_zeroes_weight() {
        let mut cfg = TrainConfig::desk();
        cfg.model.variant = AblationVariant::MRM_BT;
        assert_eq!(cfg.effective_loss().tbd, 0.0);
        assert_eq!(cfg.effective_loss().aux, 0.3);
    }
}
