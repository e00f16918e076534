//! Finite-difference checks of the training losses through the whole
//! query-side graph (light encoder + token learner) at toy shapes.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datagen::{gen_dataset, DatagenParams};
use crate::encoders::{image_input, LightEncoderConfig, TeacherBundle, TeacherConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_on_tape, LossConfig, TrainingExample};
use crate::model::{Mode, Model, ModelConfig, ModelInput};
use crate::numerics::{grad_check, GradCheckReport, Gradients, Objective, ParamSet, Tape};
use crate::rng::{stream, Stream};
use crate::token_learner::{TokenLearnerConfig, LEARNER_PREFIX};

/// Which loss is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Gcd,
    Lar,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Gcd, LossTerm::Lar, LossTerm::Total];

    fn weights(self) -> (f64, f64) {
        match self {
            LossTerm::Gcd => (1.0, 0.0),
            LossTerm::Lar => (0.0, 1.0),
            LossTerm::Total => (1.0, 1.0),
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTerm::Gcd => "gcd",
            LossTerm::Lar => "lar",
            LossTerm::Total => "total",
        })
    }
}

impl FromStr for LossTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcd" => Ok(LossTerm::Gcd),
            "lar" => Ok(LossTerm::Lar),
            "total" => Ok(LossTerm::Total),
            other => Err(Error::Config(format!("unknown loss term `{other}`"))),
        }
    }
}

/// Deliberately corrupts one analytic gradient coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectedError {
    pub param: String,
    pub delta: f64,
}

/// The batch loss as a function of the model parameters. Negatives are
/// redrawn from the same seed on every evaluation so the function is fixed.
pub struct LossObjective {
    pub model_config: ModelConfig,
    pub teacher: TeacherBundle,
    pub batch: Vec<TrainingExample>,
    pub loss: LossConfig,
    pub negatives_seed: u64,
    pub inject: Option<InjectedError>,
}

impl LossObjective {
    fn model(&self, params: &ParamSet) -> Model {
        Model {
            config: self.model_config.clone(),
            params: params.clone(),
        }
    }
}

impl Objective for LossObjective {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let mut rng = stream(self.negatives_seed, Stream::Negatives);
        let mut tape = Tape::new();
        let (total, _) = total_loss_on_tape(
            &mut tape,
            &self.model(params),
            &self.teacher,
            &self.batch,
            &self.loss,
            &mut rng,
        )?;
        Ok(tape.scalar(total))
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)> {
        let mut rng = stream(self.negatives_seed, Stream::Negatives);
        let (parts, mut grads) =
            total_loss(&self.model(params), &self.teacher, &self.batch, &self.loss, &mut rng)?;
        if let Some(inj) = &self.inject {
            let g = grads
                .get_mut(&inj.param)
                .ok_or_else(|| Error::Lookup(format!("no parameter `{}`", inj.param)))?;
            g.data_mut()[0] += inj.delta;
        }
        Ok((parts.total, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub tokens: usize,
    pub hidden_self: usize,
    pub hidden_cross: usize,
    pub eps: f64,
    /// Token-learner parameters are multiplied by this at the check point.
    /// At plain initialization the spatial attention is nearly uniform, the
    /// tokens nearly coincide and the attention gradients sit at round-off.
    pub param_scale: f64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            tokens: 6,
            hidden_self: 16,
            hidden_cross: 32,
            eps: 2e-4,
            param_scale: 4.0,
            mode: Mode::Asymmetric,
        }
    }
}

/// Builds the toy problem: 8×8 grids, 8-channel maps, `d_w = 16`.
pub fn toy_objective(
    config: &GradCheckConfig,
    term: LossTerm,
    inject: Option<InjectedError>,
) -> Result<(LossObjective, ParamSet)> {
    let data = gen_dataset(&DatagenParams {
        n_train: config.batch_size,
        n_gallery: 8,
        n_queries: 4,
        seed: config.seed,
        ..DatagenParams::default()
    })?;
    let teacher = TeacherBundle::new(TeacherConfig::default(), data.params.n_concepts)?;
    let light = LightEncoderConfig::default();
    let channels = match config.mode {
        Mode::Asymmetric => light.channels,
        Mode::Symmetric => teacher.map_channels(),
    };
    let model_config = ModelConfig {
        mode: config.mode,
        n_concepts: data.params.n_concepts,
        light,
        learner: TokenLearnerConfig {
            tokens: config.tokens,
            channels,
            word_dim: teacher.word_dim(),
            hidden_self: config.hidden_self,
            hidden_cross: config.hidden_cross,
            scaled_attention: false,
        },
    };
    let model = Model::init(model_config.clone(), &teacher, config.seed)?;
    let mut noise = stream(config.seed, Stream::Augment);
    let batch = data
        .train
        .iter()
        .map(|img| {
            let (v, fmap) = teacher.teacher_visual(img)?;
            let input = match config.mode {
                Mode::Asymmetric => {
                    // jitter the one-hot input so no cell sits at an exact zero
                    let mut cells = image_input(img, data.params.n_concepts);
                    cells.data_mut().iter_mut().for_each(|x| {
                        *x += 0.05 * rand::Rng::random_range(&mut noise, -1.0..1.0)
                    });
                    ModelInput::Grid {
                        height: img.height,
                        width: img.width,
                        cells,
                    }
                }
                Mode::Symmetric => ModelInput::Map(fmap.clone()),
            };
            Ok(TrainingExample {
                input,
                image_feature: v,
                pooled_map: fmap.pooled(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (gcd_weight, lar_weight) = term.weights();
    let objective = LossObjective {
        model_config,
        teacher,
        batch,
        loss: LossConfig {
            gcd_weight,
            lar_weight,
            ..LossConfig::default()
        },
        negatives_seed: config.seed,
        inject,
    };
    let mut params = model.params;
    for (name, p) in params.iter_mut() {
        if name.starts_with(LEARNER_PREFIX) {
            p.data_mut().iter_mut().for_each(|x| *x *= config.param_scale);
        }
    }
    Ok((objective, params))
}

pub fn run_gradcheck(
    config: &GradCheckConfig,
    term: LossTerm,
    inject: Option<InjectedError>,
) -> Result<GradCheckReport> {
    let (objective, params) = toy_objective(config, term, inject)?;
    grad_check(&objective, &params, config.eps)
}
