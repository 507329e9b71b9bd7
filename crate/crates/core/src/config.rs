//! Run configuration: model architecture, loss weighting, optimizer
//! schedule, and data source, deserialized from TOML with unknown keys
//! rejected so typos fail loudly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Which structural variant of the model to build. Exactly one variant is
/// active at a time; `Full` is the complete architecture and every other
/// state removes or replaces one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationState {
    /// Complete model.
    Full,
    /// Patch embedding without the soft-pooled absolute position pathway:
    /// plain flatten + linear projection.
    NoApe,
    /// Window attention runs independently per branch (no cross-branch score
    /// coupling, no shared attention weights).
    NoHst,
    /// Decoder skips use channel concatenation instead of bilinear
    /// (elementwise product) fusion.
    NoMbp,
    /// Channel attention removed from decoder stages (identity).
    NoSca,
    /// Channel attention replaced by a shared-MLP max+avg descriptor gate.
    MaxavgCa,
    /// Single receptive field: the second encoder branch is removed and
    /// attention degenerates to standard single-stream window attention.
    OneRf,
}

impl AblationState {
    pub const ALL: [AblationState; 7] = [
        AblationState::Full,
        AblationState::NoApe,
        AblationState::NoHst,
        AblationState::NoMbp,
        AblationState::NoSca,
        AblationState::MaxavgCa,
        AblationState::OneRf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationState::Full => "full",
            AblationState::NoApe => "no_ape",
            AblationState::NoHst => "no_hst",
            AblationState::NoMbp => "no_mbp",
            AblationState::NoSca => "no_sca",
            AblationState::MaxavgCa => "maxavg_ca",
            AblationState::OneRf => "one_rf",
        }
    }

    pub fn parse(s: &str) -> Result<AblationState> {
        AblationState::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationState::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation state `{s}`; expected one of {names:?}"))
            })
    }

    /// True when the model has a second encoder branch.
    pub fn dual_branch(self) -> bool {
        self != AblationState::OneRf
    }

    /// True when attention couples the two branches through shared weights.
    pub fn coupled_attention(self) -> bool {
        matches!(
            self,
            AblationState::Full
                | AblationState::NoApe
                | AblationState::NoMbp
                | AblationState::NoSca
                | AblationState::MaxavgCa
        )
    }
}

fn default_eps() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
///
/// Stage widths follow the doubling ladder: the stem emits `base_channels`,
/// the pre-embedding downsample doubles it, and the three attention stages
/// hold 4x, 8x, 16x. `hidden_dim` is the attention projection width shared
/// by all stages; `window` is the square attention window edge in tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Attention blocks per stage; must be even (blocks alternate between
    /// unshifted and shifted windows in pairs).
    pub blocks_per_stage: usize,
    /// Dropout probability inside the channel-attention MLP.
    pub dropout: f64,
    /// Learned relative-position bias added to attention scores
    /// (off by default; the base model does not use it).
    #[serde(default)]
    pub pos_bias: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "AblationState::default")]
    pub ablation: AblationState,
}

impl Default for AblationState {
    fn default() -> Self {
        AblationState::Full
    }
}

impl ModelConfig {
    /// Defaults sized for desk-scale experiments on 64x64 inputs.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 8,
            hidden_dim: 32,
            heads: 4,
            window: 4,
            blocks_per_stage: 2,
            dropout: 0.1,
            pos_bias: false,
            norm_eps: 1e-5,
            ablation: AblationState::Full,
        }
    }

    /// Channels entering each of the five encoder stages' outputs.
    pub fn stage_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, 16 * c]
    }

    /// Token-grid edge lengths for the three attention stages given the
    /// input image edge.
    pub fn stage_grids(&self, image_size: usize) -> [usize; 3] {
        [image_size / 4, image_size / 8, image_size / 16]
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.base_channels < 2 {
            return fail(format!("base_channels must be >= 2 (channel-attention bottleneck halves it), got {}", self.base_channels));
        }
        if self.hidden_dim == 0 || self.heads == 0 {
            return fail("hidden_dim and heads must be positive".into());
        }
        if self.hidden_dim % self.heads != 0 {
            return fail(format!("hidden_dim {} must divide evenly into {} heads", self.hidden_dim, self.heads));
        }
        if self.blocks_per_stage == 0 || self.blocks_per_stage % 2 != 0 {
            return fail(format!("blocks_per_stage must be a positive even number (plain/shifted pairs), got {}", self.blocks_per_stage));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.norm_eps <= 0.0 {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if image_size < 16 || image_size % 16 != 0 {
            return fail(format!("image size must be a positive multiple of 16 (four halvings), got {image_size}"));
        }
        for (i, grid) in self.stage_grids(image_size).into_iter().enumerate() {
            if grid % self.window != 0 {
                return fail(format!(
                    "stage {} token grid {}x{} is not divisible by window {} (image size {}, window {})",
                    i + 3,
                    grid,
                    grid,
                    self.window,
                    image_size,
                    self.window
                ));
            }
        }
        Ok(())
    }
}

/// Composite loss weighting. The three terms (weighted region-overlap,
/// weighted cross-entropy, asymmetric overlap) are summed per head and
/// combined across heads as `a*final + b*deep1 + c*deep3`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Final-head weight `a`.
    pub a: f64,
    /// First deep-supervision head weight `b`.
    pub b: f64,
    /// Second deep-supervision head weight `c`.
    pub c: f64,
    /// False-positive weight in the asymmetric overlap term.
    pub eta: f64,
    /// False-negative weight in the asymmetric overlap term.
    pub gamma: f64,
    /// Boundary emphasis gain in the pixel weight map `1 + gain*|pool(g)-g|`.
    pub boundary_gain: f64,
    /// Odd window edge for the boundary-detecting average pool.
    pub boundary_pool: usize,
    /// Smoothing constant added to overlap numerators and denominators.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            a: 0.6,
            b: 0.2,
            c: 0.2,
            eta: 0.7,
            gamma: 0.3,
            boundary_gain: 5.0,
            boundary_pool: 7,
            smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("eta", self.eta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("loss weight `{name}` must be in [0, 1], got {v}"));
            }
        }
        if (self.a + self.b + self.c - 1.0).abs() > 1e-9 {
            return fail(format!("head weights a+b+c must sum to 1, got {}", self.a + self.b + self.c));
        }
        if (self.eta + self.gamma - 1.0).abs() > 1e-9 {
            return fail(format!("eta+gamma must sum to 1, got {}", self.eta + self.gamma));
        }
        if self.boundary_gain < 0.0 {
            return fail(format!("boundary_gain must be non-negative, got {}", self.boundary_gain));
        }
        if self.boundary_pool % 2 == 0 || self.boundary_pool == 0 {
            return fail(format!("boundary_pool must be odd and positive, got {}", self.boundary_pool));
        }
        if self.smooth <= 0.0 {
            return fail(format!("smooth must be positive, got {}", self.smooth));
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Linear warmup length; defaults to 5% of `steps` when absent.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping threshold; absent disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: u64,
    /// Evaluate on the train split every this many steps (and at the end).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 300,
            warmup_steps: None,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            grad_clip: None,
            checkpoint_every: 100,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup() > self.steps {
            return fail(format!("warmup_steps {} exceeds total steps {}", self.warmup(), self.steps));
        }
        if self.lr_max <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return fail(format!("need 0 <= lr_min <= lr_max and lr_max > 0, got lr_min {} lr_max {}", self.lr_min, self.lr_max));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return fail(format!("grad_clip must be positive when set, got {c}"));
            }
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return fail("checkpoint_every and eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Where samples come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Tab-separated manifest of image/mask/split rows; absent means the
    /// caller supplies samples directly (synthetic runs).
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Square edge that all samples are resized to.
    pub image_size: usize,
    /// Random horizontal flips during training.
    #[serde(default)]
    pub flip_augment: bool,
    /// Random quarter-turn rotations during training.
    #[serde(default)]
    pub rot_augment: bool,
    /// Keep loaded samples in their manifest order (shuffling still applies
    /// per epoch during training).
    #[serde(default = "default_true")]
    pub keep_order: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, image_size: 64, flip_augment: false, rot_augment: false, keep_order: true }
    }
}

/// Everything a reproducible run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.data.image_size)?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.loss.boundary_pool > self.data.image_size {
            return Err(Error::Config(format!(
                "boundary_pool {} exceeds image size {}",
                self.loss.boundary_pool, self.data.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    /// Small fully-synthetic run used by tests and examples.
    pub fn desk(seed: u64, out_dir: PathBuf) -> RunConfig {
        RunConfig {
            seed,
            out_dir,
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates() {
        let cfg = RunConfig::desk(1, PathBuf::from("runs/x"));
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk(3, PathBuf::from("runs/y"));
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.model.ablation, AblationState::Full);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::desk(1, PathBuf::from("r")).to_toml();
        text.push_str("\nnot_a_real_key = 5\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("not_a_real_key"), "{err}");
    }

    #[test]
    fn ablation_names_round_trip() {
        for state in AblationState::ALL {
            assert_eq!(AblationState::parse(state.name()).unwrap(), state);
        }
        assert!(AblationState::parse("nonsense").is_err());
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.hidden_dim = 30;
        cfg.heads = 4;
        assert!(cfg.validate(64).is_err());
    }

    #[test]
    fn odd_blocks_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.blocks_per_stage = 3;
        let err = cfg.validate(64).unwrap_err();
        assert!(err.to_string().contains("even"), "{err}");
    }

    #[test]
    fn window_divisibility_enforced_per_stage() {
        let mut cfg = ModelConfig::desk();
        cfg.window = 3;
        // 64/16 = 4 tokens at the deepest stage; 4 % 3 != 0.
        assert!(cfg.validate(64).is_err());
    }

    #[test]
    fn loss_weight_sums_enforced() {
        let mut loss = LossConfig::default();
        loss.a = 0.5;
        assert!(loss.validate().is_err());
        let mut loss2 = LossConfig::default();
        loss2.eta = 0.6;
        assert!(loss2.validate().is_err());
        let mut loss3 = LossConfig::default();
        loss3.boundary_pool = 6;
        assert!(loss3.validate().is_err());
    }

    #[test]
    fn schedule_bounds_enforced() {
        let mut train = TrainConfig::default();
        train.lr_min = 1.0;
        assert!(train.validate().is_err());
    }
}
