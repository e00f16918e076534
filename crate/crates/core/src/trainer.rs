//! AdamW training of the light encoder and token learner against the frozen
//! teacher, with linear warm-up and cosine decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticImage;
use crate::encoders::{image_input, LightEncoderConfig, TeacherBundle, TeacherConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, TrainingExample};
use crate::model::{Mode, Model, ModelConfig, ModelInput};
use crate::numerics::{Array2, Gradients, ParamSet};
use crate::rng::{stream, Stream};
use crate::token_learner::TokenLearnerConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Token length `L`.
    pub tokens: usize,
    pub mode: Mode,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub augment: bool,
    pub noise_std: f64,
    pub hidden_self: usize,
    pub hidden_cross: usize,
    pub scaled_attention: bool,
    pub light: LightEncoderConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 20,
            warmup_epochs: 5,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
            tokens: 6,
            mode: Mode::Asymmetric,
            clip_norm: 5.0,
            augment: true,
            noise_std: 0.05,
            hidden_self: 256,
            hidden_cross: 512,
            scaled_attention: false,
            light: LightEncoderConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the step size raised for the small synthetic
    /// benchmarks, where the reference rate barely moves in 20 epochs.
    pub fn toy() -> Self {
        Self {
            lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.tokens == 0 {
            return fail("token length must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return fail(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return fail(format!("clip norm must be non-negative, got {}", self.clip_norm));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return fail(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        self.loss.validate()
    }

    pub fn model_config(&self, n_concepts: usize, teacher: &TeacherBundle) -> ModelConfig {
        let channels = match self.mode {
            Mode::Asymmetric => self.light.channels,
            Mode::Symmetric => teacher.map_channels(),
        };
        ModelConfig {
            mode: self.mode,
            n_concepts,
            light: self.light.clone(),
            learner: TokenLearnerConfig {
                tokens: self.tokens,
                channels,
                word_dim: teacher.word_dim(),
                hidden_self: self.hidden_self,
                hidden_cross: self.hidden_cross,
                scaled_attention: self.scaled_attention,
            },
        }
    }
}

/// Learning rate for update `step` (1-based); step 0 is the ramp start.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return lr;
        }
        return lr * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps - warmup_steps;
    let progress = (step - warmup_steps) as f64 / decay as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates for AdamW.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Array2>,
    pub v: BTreeMap<String, Array2>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam update of every parameter in `params`.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(crate::error::dim_err(
                "optimizer_step",
                format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.rows(), p.cols()));
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let mi = &mut m.data_mut()[i];
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gd[i];
            let mhat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let vhat = *vi / bc2;
            pd[i] = pd[i] * (1.0 - lr * weight_decay) - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gcd: f64,
    pub lar: f64,
    pub total: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub teacher_fingerprint: String,
    /// Rebuilds the frozen teacher; checked against the fingerprint.
    pub teacher_config: TeacherConfig,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    /// Resolved run configuration, as written by the command line.
    #[serde(default)]
    pub config_echo: String,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.model_config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn teacher(&self) -> Result<TeacherBundle> {
        let teacher = TeacherBundle::new(self.teacher_config.clone(), self.model_config.n_concepts)?;
        self.require_teacher(&teacher)?;
        Ok(teacher)
    }

    /// Checks the checkpoint was trained against `teacher`.
    pub fn require_teacher(&self, teacher: &TeacherBundle) -> Result<()> {
        let fp = teacher.fingerprint();
        if fp != self.teacher_fingerprint {
            return Err(Error::Config(format!(
                "checkpoint teacher fingerprint {} does not match {fp}",
                self.teacher_fingerprint
            )));
        }
        Ok(())
    }
}

/// Loss history as `epoch,gcd,lar,total,lr` lines.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,gcd,lar,total,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.gcd, r.lar, r.total, r.lr);
    }
    out
}

/// Teacher targets for one training image.
#[derive(Clone, Debug)]
struct Prepared {
    image: SyntheticImage,
    image_feature: Array2,
    pooled_map: Array2,
    map_input: Option<ModelInput>,
}

fn augmented_input(
    image: &SyntheticImage,
    n_concepts: usize,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> ModelInput {
    let flipped;
    let source = if config.augment && rng.random_bool(0.5) {
        flipped = image.flipped_horizontal();
        &flipped
    } else {
        image
    };
    let mut cells = image_input(source, n_concepts);
    if config.augment && config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("finite positive std");
        cells.data_mut().iter_mut().for_each(|x| *x += noise.sample(rng));
    }
    ModelInput::Grid {
        height: image.height,
        width: image.width,
        cells,
    }
}

pub fn train(
    images: &[SyntheticImage],
    n_concepts: usize,
    teacher: &TeacherBundle,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    train_with(images, n_concepts, teacher, config, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    images: &[SyntheticImage],
    n_concepts: usize,
    teacher: &TeacherBundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model_config = config.model_config(n_concepts, teacher);
    let mut model = Model::init(model_config.clone(), teacher, config.seed)?;
    let mut ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        seed: config.seed,
        teacher_fingerprint: teacher.fingerprint(),
        teacher_config: teacher.config.clone(),
        train_config: config.clone(),
        model_config,
        params: model.params.clone(),
        history: Vec::new(),
        config_echo: String::new(),
    };
    if config.epochs == 0 {
        return Ok(ckpt);
    }
    let steps_per_epoch = images.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training images",
            config.batch_size,
            images.len()
        )));
    }

    let prepared = images
        .iter()
        .map(|img| {
            let (v, fmap) = teacher.teacher_visual(img)?;
            Ok(Prepared {
                image: img.clone(),
                image_feature: v,
                pooled_map: fmap.pooled(),
                map_input: (config.mode == Mode::Symmetric).then_some(ModelInput::Map(fmap)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;
    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut augment_rng = stream(config.seed, Stream::Augment);
    let mut negatives_rng = stream(config.seed, Stream::Negatives);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks_exact(config.batch_size) {
            step += 1;
            let batch: Vec<TrainingExample> = chunk
                .iter()
                .map(|&i| {
                    let p = &prepared[i];
                    let input = match &p.map_input {
                        Some(map) => map.clone(),
                        None => augmented_input(&p.image, n_concepts, config, &mut augment_rng),
                    };
                    TrainingExample {
                        input,
                        image_feature: p.image_feature.clone(),
                        pooled_map: p.pooled_map.clone(),
                    }
                })
                .collect();
            let diverged = |reason: String, ckpt: &Checkpoint| Error::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(ckpt.clone()),
            };
            let (parts, mut grads) =
                total_loss(&model, teacher, &batch, &config.loss, &mut negatives_rng)?;
            if !parts.total.is_finite() {
                ckpt.params = model.params.clone();
                return Err(diverged(format!("loss is {}", parts.total), &ckpt));
            }
            if config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.clip_norm);
            }
            lr = lr_at(step, total_steps, warmup_steps, config.lr);
            let before = model.params.clone();
            if let Err(e) =
                optimizer_step(&mut model.params, &grads, &mut adam, lr, config.weight_decay)
            {
                ckpt.params = before;
                return Err(diverged(e.to_string(), &ckpt));
            }
            sums.gcd += parts.gcd;
            sums.lar += parts.lar;
            sums.total += parts.total;
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            gcd: sums.gcd / n,
            lar: sums.lar / n,
            total: sums.total / n,
            lr,
        };
        ckpt.history.push(record);
        on_epoch(&record);
    }
    ckpt.params = model.params;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let (total, warm, lr) = (100, 25, 3e-4);
        assert_eq!(lr_at(0, total, warm, lr), 0.0);
        assert_eq!(lr_at(warm, total, warm, lr), 3e-4);
        assert!(lr_at(total, total, warm, lr) <= 1e-9 * lr);
        assert!((lr_at(10, total, warm, lr) - lr * 0.4).abs() < 1e-18);
        let mid = lr_at(warm + 37, total, warm, lr);
        assert!((mid - lr * 0.5 * (1.0 + (std::f64::consts::PI * 37.0 / 75.0).cos())).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let lrs: Vec<f64> = (25..=100).map(|s| lr_at(s, 100, 25, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array2::row_vector(&[value]));
        p
    }

    fn grad(value: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("w".into(), Array2::row_vector(&[value]));
        g
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut p = single(1.5);
        let mut s = AdamState::default();
        for _ in 0..3 {
            optimizer_step(&mut p, &grad(0.0), &mut s, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, single(1.5));
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut p = single(2.0);
        let mut s = AdamState::default();
        optimizer_step(&mut p, &grad(0.0), &mut s, 0.1, 0.01).unwrap();
        assert_eq!(p.get("w").unwrap().get(0, 0), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn constant_gradient_matches_hand_recurrence() {
        let (lr, wd, g) = (0.01, 0.1, 0.5);
        let mut p = single(1.0);
        let mut s = AdamState::default();
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            optimizer_step(&mut p, &grad(g), &mut s, lr, wd).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta = theta * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("w").unwrap().get(0, 0) - theta).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = single(1.0);
        let mut s = AdamState::default();
        let r = optimizer_step(&mut p, &grad(f64::NAN), &mut s, 0.1, 0.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p, single(1.0));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = grad(3.0);
        g.insert("b".into(), Array2::row_vector(&[4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_epochs = 20;
        assert!(c.validate().is_err());
        c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn history_table_format() {
        let h = [EpochRecord {
            epoch: 1,
            gcd: 0.5,
            lar: 0.25,
            total: 0.75,
            lr: 1e-4,
        }];
        assert_eq!(history_csv(&h), "epoch,gcd,lar,total,lr\n1,0.5,0.25,0.75,0.0001\n");
    }
}
