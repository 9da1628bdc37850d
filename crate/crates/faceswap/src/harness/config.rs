//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are hard errors so a
//! misspelled hyperparameter can never silently fall back to a default.

use crate::discriminator::DiscriminatorConfig;
use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::schedules::ScheduleState;
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Loss weights stay at their maxima for the whole run.
    Static,
    /// Polynomial decay with exponent `gamma`.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// x0.1 at 50% and again at 75% of the run.
    StepDecay,
    Cosine,
}

/// Full configuration of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: DType,
    // generator
    pub image_size: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub n_res_blocks: usize,
    pub use_self_attention: bool,
    pub use_cross_attention: bool,
    pub id_dim: usize,
    /// 0 selects channels/2 at the attention site.
    pub attn_d_k: usize,
    // embedder
    pub embedder_base_channels: usize,
    pub embedder_steps: usize,
    pub embedder_batch: usize,
    pub embedder_lr: f64,
    // discriminator
    pub disc_scales: usize,
    pub disc_layers: usize,
    pub disc_base_channels: usize,
    pub leaky_slope: f64,
    // loss weights and schedules
    pub lambda_id_max: f64,
    pub lambda_rec_max: f64,
    pub lambda_feat: f64,
    pub gamma: f64,
    pub weight_mode: WeightMode,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    /// Cosine cycle length; 0 means one cycle spanning the whole run.
    pub t_cycle: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    // training loop
    pub batch_size: usize,
    pub total_steps: usize,
    pub log_every: usize,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    pub self_swap_prob: f64,
    // dataset
    pub n_identities: usize,
    pub images_per_identity: usize,
    // evaluation
    pub eval_pairs: usize,
    pub probe_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            precision: DType::F64,
            image_size: 32,
            base_channels: 16,
            n_downsamples: 2,
            n_res_blocks: 4,
            use_self_attention: true,
            use_cross_attention: true,
            id_dim: 64,
            attn_d_k: 0,
            embedder_base_channels: 16,
            embedder_steps: 2000,
            embedder_batch: 8,
            embedder_lr: 1e-3,
            disc_scales: 2,
            disc_layers: 3,
            disc_base_channels: 16,
            leaky_slope: 0.2,
            lambda_id_max: 40.0,
            lambda_rec_max: 2.0,
            lambda_feat: 10.0,
            gamma: 1.0,
            weight_mode: WeightMode::Dynamic,
            lr_max: 2e-4,
            lr_min: 2e-6,
            lr_schedule: LrSchedule::Cosine,
            t_cycle: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 8,
            total_steps: 2000,
            log_every: 100,
            checkpoint_every: 1000,
            self_swap_prob: 0.25,
            n_identities: 32,
            images_per_identity: 16,
            eval_pairs: 64,
            probe_steps: 800,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        impl TrainConfig {
            /// Canonical text form; parsing it reproduces the config.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), fmt_value!($kind, self.$key)));)+
                out
            }

            fn set_key(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value!($kind, value, line)?;
                        Ok(())
                    })+
                    _ => Err(Error::Config {
                        line,
                        what: format!("unknown key `{key}`"),
                    }),
                }
            }
        }
    };
}

macro_rules! fmt_value {
    (usize, $v:expr) => {
        $v
    };
    (u64, $v:expr) => {
        $v
    };
    (f64, $v:expr) => {
        $v
    };
    (bool, $v:expr) => {
        $v
    };
    (precision, $v:expr) => {
        $v.name()
    };
    (weight_mode, $v:expr) => {
        match $v {
            WeightMode::Static => "static",
            WeightMode::Dynamic => "dynamic",
        }
    };
    (lr_schedule, $v:expr) => {
        match $v {
            LrSchedule::Constant => "constant",
            LrSchedule::StepDecay => "step",
            LrSchedule::Cosine => "cosine",
        }
    };
}

macro_rules! parse_value {
    (usize, $v:expr, $line:expr) => {
        $v.parse::<usize>().map_err(|_| Error::Config {
            line: $line,
            what: format!("expected an unsigned integer, got `{}`", $v),
        })
    };
    (u64, $v:expr, $line:expr) => {
        $v.parse::<u64>().map_err(|_| Error::Config {
            line: $line,
            what: format!("expected an unsigned integer, got `{}`", $v),
        })
    };
    (f64, $v:expr, $line:expr) => {
        $v.parse::<f64>().map_err(|_| Error::Config {
            line: $line,
            what: format!("expected a number, got `{}`", $v),
        })
    };
    (bool, $v:expr, $line:expr) => {
        match $v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Config {
                line: $line,
                what: format!("expected true/false, got `{}`", $v),
            }),
        }
    };
    (precision, $v:expr, $line:expr) => {
        match $v {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(Error::Config {
                line: $line,
                what: format!("expected f32/f64, got `{}`", $v),
            }),
        }
    };
    (weight_mode, $v:expr, $line:expr) => {
        match $v {
            "static" => Ok(WeightMode::Static),
            "dynamic" => Ok(WeightMode::Dynamic),
            _ => Err(Error::Config {
                line: $line,
                what: format!("expected static/dynamic, got `{}`", $v),
            }),
        }
    };
    (lr_schedule, $v:expr, $line:expr) => {
        match $v {
            "constant" => Ok(LrSchedule::Constant),
            "step" => Ok(LrSchedule::StepDecay),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config {
                line: $line,
                what: format!("expected constant/step/cosine, got `{}`", $v),
            }),
        }
    };
}

config_keys! {
    seed: u64,
    precision: precision,
    image_size: usize,
    base_channels: usize,
    n_downsamples: usize,
    n_res_blocks: usize,
    use_self_attention: bool,
    use_cross_attention: bool,
    id_dim: usize,
    attn_d_k: usize,
    embedder_base_channels: usize,
    embedder_steps: usize,
    embedder_batch: usize,
    embedder_lr: f64,
    disc_scales: usize,
    disc_layers: usize,
    disc_base_channels: usize,
    leaky_slope: f64,
    lambda_id_max: f64,
    lambda_rec_max: f64,
    lambda_feat: f64,
    gamma: f64,
    weight_mode: weight_mode,
    lr_max: f64,
    lr_min: f64,
    lr_schedule: lr_schedule,
    t_cycle: usize,
    adam_beta1: f64,
    adam_beta2: f64,
    batch_size: usize,
    total_steps: usize,
    log_every: usize,
    checkpoint_every: usize,
    self_swap_prob: f64,
    n_identities: usize,
    images_per_identity: usize,
    eval_pairs: usize,
    probe_steps: usize,
}

impl TrainConfig {
    /// Parses `key = value` text over the defaults.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines onto this config.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    what: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set_key(key.trim(), value.trim(), line_no)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig {
                what: "total_steps must be >= 1".into(),
            });
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig {
                what: "batch_size and log_every must be >= 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.self_swap_prob) {
            return Err(Error::InvalidConfig {
                what: format!(
                    "self_swap_prob must be in [0,1], got {}",
                    self.self_swap_prob
                ),
            });
        }
        if self.n_identities < 2 {
            return Err(Error::InvalidConfig {
                what: "need at least 2 identities".into(),
            });
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        self.embedder_config().validate()?;
        self.schedule_state(0).validate()?;
        crate::losses::LossWeights::new(self.lambda_id_max, self.lambda_feat, self.lambda_rec_max)?;
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            n_downsamples: self.n_downsamples,
            n_res_blocks: self.n_res_blocks,
            use_self_attention: self.use_self_attention,
            use_cross_attention: self.use_cross_attention,
            id_dim: self.id_dim,
            d_k: self.attn_d_k,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n_scales: self.disc_scales,
            n_layers: self.disc_layers,
            base_channels: self.disc_base_channels,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            id_dim: self.id_dim,
            base_channels: self.embedder_base_channels,
            image_size: self.image_size,
        }
    }

    pub fn schedule_state(&self, t: usize) -> ScheduleState {
        ScheduleState {
            t,
            t_total: self.total_steps,
            gamma: self.gamma,
            lambda_id_max: self.lambda_id_max,
            lambda_rec_max: self.lambda_rec_max,
            eta_min: self.lr_min,
            eta_max: self.lr_max,
            t_cycle: if self.t_cycle == 0 {
                self.total_steps
            } else {
                self.t_cycle
            },
        }
    }

    /// Effective loss weights at a step, honoring the weighting mode.
    pub fn weights_at(&self, t: usize) -> Result<crate::losses::LossWeights> {
        let (lambda_id, lambda_rec) = match self.weight_mode {
            WeightMode::Static => (self.lambda_id_max, self.lambda_rec_max),
            WeightMode::Dynamic => {
                let s = self.schedule_state(t);
                (
                    crate::schedules::lambda_id_at(&s)?,
                    crate::schedules::lambda_rec_at(&s)?,
                )
            }
        };
        crate::losses::LossWeights::new(lambda_id, self.lambda_feat, lambda_rec)
    }

    /// Learning rate at a step, honoring the schedule choice.
    pub fn lr_at(&self, t: usize) -> f64 {
        let s = self.schedule_state(t);
        match self.lr_schedule {
            LrSchedule::Constant => s.eta_max,
            LrSchedule::StepDecay => crate::schedules::lr_step_decay(&s),
            LrSchedule::Cosine => crate::schedules::lr_at(&s),
        }
    }
}
