//! Global contrastive distillation (GCD) and local alignment
//! regularization (LAR).
//!
//! GCD is a symmetric in-batch InfoNCE between teacher image features `v`
//! and student text features `t`, with strict diagonal targets. LAR is a
//! binary matching loss: each item's sentence tokens are scored against its
//! own teacher feature map (label 1) and one other item's map (label 0).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, TeacherBundle};
use crate::error::{dim_err, Error, Result};
use crate::model::{Model, ModelInput};
use crate::numerics::{dot, Array2, Axis, Gradients, Tape, Var};

/// How LAR picks the non-matching feature map for each item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePolicy {
    /// Uniform over the other batch items.
    #[default]
    Random,
    /// `argmax_{j≠i} v_j · t_i`.
    Hardest,
}

impl FromStr for NegativePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "hardest" => Ok(Self::Hardest),
            other => Err(Error::Config(format!("unknown negative policy `{other}`"))),
        }
    }
}

impl fmt::Display for NegativePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Hardest => "hardest",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub gcd_weight: f64,
    pub lar_weight: f64,
    pub negatives: NegativePolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            gcd_weight: 1.0,
            lar_weight: 1.0,
            negatives: NegativePolicy::Random,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.gcd_weight < 0.0 || self.lar_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One batch of teacher/student pairs.
#[derive(Clone, Debug)]
pub struct BatchPairs {
    /// `B × d` teacher image features `v_i`.
    pub image_features: Array2,
    /// `B × d` student text features `t_i`.
    pub text_features: Array2,
    /// Per-item sentence tokens `U_i`.
    pub tokens: Vec<Array2>,
    /// Per-item teacher feature maps `F^v_i`.
    pub teacher_maps: Vec<FeatureMap>,
}

impl BatchPairs {
    pub fn len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `½ [CE(softmax(V Tᵀ/τ), I) + CE(softmax(T Vᵀ/τ), I)]` on the tape.
pub fn gcd_on_tape(tape: &mut Tape, image: Var, text: Var, temperature: f64) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (b, d) = tape.value(image).shape();
    if tape.value(text).shape() != (b, d) {
        return Err(dim_err(
            "gcd_loss",
            format!("image {:?} vs text {:?}", (b, d), tape.value(text).shape()),
        ));
    }
    if b == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let tt = tape.transpose(text);
    let sims = tape.matmul(image, tt)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let i2t = tape.softmax(logits, Axis::Rows);
    let logits_t = tape.transpose(logits);
    let t2i = tape.softmax(logits_t, Axis::Rows);
    let ce1 = tape.cross_entropy(i2t, Array2::identity(b))?;
    let ce2 = tape.cross_entropy(t2i, Array2::identity(b))?;
    let sum = tape.add(ce1, ce2)?;
    Ok(tape.scale(sum, 0.5))
}

pub fn gcd_loss(batch: &BatchPairs, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(batch.image_features.clone());
    let t = tape.constant(batch.text_features.clone());
    let loss = gcd_on_tape(&mut tape, v, t, temperature)?;
    Ok(tape.scalar(loss))
}

/// Negative donor index per item.
pub fn choose_negatives(
    image_features: &Array2,
    text_features: &Array2,
    policy: NegativePolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let b = image_features.rows();
    if b < 2 {
        return Err(Error::Config(
            "in-batch negatives need a batch of at least 2".into(),
        ));
    }
    (0..b)
        .map(|i| {
            // Items sharing the anchor's teacher feature are not negatives;
            // fall back to every other item when the whole batch matches.
            let mut pool: Vec<usize> = (0..b)
                .filter(|&j| j != i && image_features.row(j) != image_features.row(i))
                .collect();
            if pool.is_empty() {
                pool = (0..b).filter(|&j| j != i).collect();
            }
            Ok(match policy {
                NegativePolicy::Random => pool[rng.random_range(0..pool.len())],
                NegativePolicy::Hardest => pool
                    .iter()
                    .map(|&j| (j, dot(image_features.row(j), text_features.row(i))))
                    .fold((pool[0], f64::NEG_INFINITY), |best, (j, s)| {
                        if s > best.1 {
                            (j, s)
                        } else {
                            best
                        }
                    })
                    .0,
            })
        })
        .collect()
}

/// Binary cross-entropy of matching probabilities over `B` positive and
/// `B` negative pairs, as a two-class softmax of `[logit, 0]`.
pub fn lar_on_tape(
    tape: &mut Tape,
    tokens: &[Var],
    pooled_maps: &Array2,
    teacher: &TeacherBundle,
    negatives: &[usize],
) -> Result<Var> {
    let b = tokens.len();
    if pooled_maps.rows() != b || negatives.len() != b {
        return Err(dim_err(
            "lar_loss",
            format!("{b} token sets, {} maps, {} negatives", pooled_maps.rows(), negatives.len()),
        ));
    }
    let mut means = Vec::with_capacity(b);
    for &u in tokens {
        let u = if teacher.config.token_norm {
            tape.l2_normalize(u)?
        } else {
            u
        };
        means.push(tape.mean_rows(u));
    }
    let stacked = tape.concat_rows(&means)?;
    let m = tape.constant(teacher.match_bilinear.clone());
    let left = tape.matmul(stacked, m)?;
    let maps_t = tape.constant(pooled_maps.transpose());
    let scores = tape.matmul(left, maps_t)?;
    let mut pairs: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    pairs.extend(negatives.iter().enumerate().map(|(i, &j)| (i, j)));
    let logits = tape.gather(scores, &pairs)?;
    let zeros = tape.constant(Array2::zeros(2 * b, 1));
    let two_class = tape.concat_cols(logits, zeros)?;
    let probs = tape.softmax(two_class, Axis::Rows);
    let mut target = Array2::zeros(2 * b, 2);
    for r in 0..b {
        target.set(r, 0, 1.0);
        target.set(b + r, 1, 1.0);
    }
    tape.cross_entropy(probs, target)
}

fn pooled_matrix(maps: &[FeatureMap]) -> Result<Array2> {
    let rows: Vec<Array2> = maps.iter().map(FeatureMap::pooled).collect();
    let refs: Vec<&Array2> = rows.iter().collect();
    Array2::vstack(&refs)
}

pub fn lar_loss(
    batch: &BatchPairs,
    teacher: &TeacherBundle,
    policy: NegativePolicy,
    rng: &mut impl Rng,
) -> Result<f64> {
    let negatives = choose_negatives(&batch.image_features, &batch.text_features, policy, rng)?;
    let mut tape = Tape::new();
    let tokens: Vec<Var> = batch.tokens.iter().map(|u| tape.constant(u.clone())).collect();
    let pooled = pooled_matrix(&batch.teacher_maps)?;
    let loss = lar_on_tape(&mut tape, &tokens, &pooled, teacher, &negatives)?;
    Ok(tape.scalar(loss))
}

/// A training item with teacher outputs precomputed.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub input: ModelInput,
    /// `1 × d` teacher image feature.
    pub image_feature: Array2,
    /// `1 × C_t` mean of the teacher feature map.
    pub pooled_map: Array2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gcd: f64,
    pub lar: f64,
    pub total: f64,
}

/// Builds the whole batch objective on `tape`, returning the total loss
/// node and its parts.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    teacher: &TeacherBundle,
    batch: &[TrainingExample],
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let bound = model.bind(tape, true)?;
    let prompt = tape.constant(teacher.prompt_rows());
    let mut texts = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    for ex in batch {
        let (out, _, _) = model.forward_on_tape(tape, &bound, &ex.input)?;
        let sentence = tape.concat_rows(&[prompt, out.sentence])?;
        texts.push(teacher.teacher_text_on_tape(tape, sentence)?);
        tokens.push(out.sentence);
    }
    let image_rows: Vec<&Array2> = batch.iter().map(|ex| &ex.image_feature).collect();
    let image_features = Array2::vstack(&image_rows)?;
    let text = tape.concat_rows(&texts)?;

    let mut parts = LossBreakdown::default();
    let mut terms = Vec::new();
    if config.gcd_weight > 0.0 {
        let v = tape.constant(image_features.clone());
        let gcd = gcd_on_tape(tape, v, text, config.temperature)?;
        parts.gcd = tape.scalar(gcd);
        terms.push(tape.scale(gcd, config.gcd_weight));
    }
    if config.lar_weight > 0.0 {
        let negatives = choose_negatives(
            &image_features,
            tape.value(text),
            config.negatives,
            rng,
        )?;
        let pooled_rows: Vec<&Array2> = batch.iter().map(|ex| &ex.pooled_map).collect();
        let pooled = Array2::vstack(&pooled_rows)?;
        let lar = lar_on_tape(tape, &tokens, &pooled, teacher, &negatives)?;
        parts.lar = tape.scalar(lar);
        terms.push(tape.scale(lar, config.lar_weight));
    }
    let total = match terms.as_slice() {
        [] => return Err(Error::Config("both loss weights are zero".into())),
        [only] => *only,
        [first, rest @ ..] => {
            let mut acc = *first;
            for t in rest {
                acc = tape.add(acc, *t)?;
            }
            acc
        }
    };
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

/// `L = w_gcd·L_GCD + w_lar·L_LAR` and its gradient for every trainable
/// parameter of `model`.
pub fn total_loss(
    model: &Model,
    teacher: &TeacherBundle,
    batch: &[TrainingExample],
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let (total, parts) = total_loss_on_tape(&mut tape, model, teacher, batch, config, rng)?;
    let back = tape.backward(total);
    Ok((parts, tape.param_grads(&back)))
}
