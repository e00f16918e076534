//! Query-side model: light encoder (asymmetric mode only) followed by the
//! token learner.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticImage;
use crate::encoders::{
    image_input, light_encode_on_tape, FeatureMap, LightEncoderConfig, LightEncoderParams,
    LightEncoderVars, TeacherBundle,
};
use crate::error::{Error, Result};
use crate::numerics::{Array2, ParamSet, Tape, Var};
use crate::rng::{stream, Stream};
use crate::token_learner::{
    forward_on_tape, AttentionMaps, LearnerOutputs, LearnerVars, TokenLearnerConfig,
    TokenLearnerParams,
};

/// Which feature map the token learner consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Light encoder on the query side, teacher on the gallery side.
    #[default]
    Asymmetric,
    /// The teacher's own feature map replaces the light encoder.
    Symmetric,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Asymmetric => "asymmetric",
            Mode::Symmetric => "symmetric",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymmetric" => Ok(Mode::Asymmetric),
            "symmetric" => Ok(Mode::Symmetric),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub n_concepts: usize,
    pub light: LightEncoderConfig,
    pub learner: TokenLearnerConfig,
}

/// What the model is fed for one image.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    /// One-hot (possibly jittered) grid for the light encoder.
    Grid {
        height: usize,
        width: usize,
        cells: Array2,
    },
    /// A ready feature map (symmetric mode).
    Map(FeatureMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Model parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    pub light: Option<LightEncoderVars>,
    pub learner: LearnerVars,
}

impl Model {
    pub fn init(config: ModelConfig, teacher: &TeacherBundle, seed: u64) -> Result<Self> {
        config.learner.validate()?;
        let expected_channels = match config.mode {
            Mode::Asymmetric => config.light.channels,
            Mode::Symmetric => teacher.map_channels(),
        };
        if config.learner.channels != expected_channels {
            return Err(Error::Config(format!(
                "token learner expects {} channels but its input has {expected_channels}",
                config.learner.channels
            )));
        }
        if config.learner.word_dim != teacher.word_dim() {
            return Err(Error::Config(format!(
                "token learner emits {}-dim tokens, word embeddings are {}-dim",
                config.learner.word_dim,
                teacher.word_dim()
            )));
        }
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        if config.mode == Mode::Asymmetric {
            LightEncoderParams::init(config.n_concepts + 1, &config.light, &mut rng)
                .insert_into(&mut params);
        }
        TokenLearnerParams::init(&config.learner, &mut rng).insert_into(&mut params);
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let bound: BTreeMap<String, Var> = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let light = match self.config.mode {
            Mode::Asymmetric => Some(LightEncoderVars::lookup(&bound)?),
            Mode::Symmetric => None,
        };
        Ok(BoundModel {
            light,
            learner: LearnerVars::lookup(&bound)?,
        })
    }

    /// Un-augmented input for an image.
    pub fn input_for(&self, image: &SyntheticImage, teacher: &TeacherBundle) -> Result<ModelInput> {
        Ok(match self.config.mode {
            Mode::Asymmetric => ModelInput::Grid {
                height: image.height,
                width: image.width,
                cells: image_input(image, self.config.n_concepts),
            },
            Mode::Symmetric => ModelInput::Map(teacher.feature_map(image)?),
        })
    }

    /// Runs encoder + token learner on the tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        input: &ModelInput,
    ) -> Result<(LearnerOutputs, usize, usize)> {
        let (fmap, h, w) = match (input, &bound.light) {
            (
                ModelInput::Grid {
                    height,
                    width,
                    cells,
                },
                Some(light),
            ) => {
                let x = tape.constant(cells.clone());
                let f = light_encode_on_tape(tape, x, light, *height, *width)?;
                (f, *height, *width)
            }
            (ModelInput::Map(map), None) => {
                (tape.constant(map.data.clone()), map.height, map.width)
            }
            _ => {
                return Err(Error::Config(format!(
                    "input kind does not match {} mode",
                    self.config.mode
                )))
            }
        };
        let out = forward_on_tape(tape, fmap, &bound.learner, &self.config.learner)?;
        Ok((out, h, w))
    }

    /// Sentence tokens `U` and spatial attention for one image.
    pub fn encode_image(
        &self,
        image: &SyntheticImage,
        teacher: &TeacherBundle,
    ) -> Result<(Array2, AttentionMaps)> {
        let input = self.input_for(image, teacher)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let (out, h, w) = self.forward_on_tape(&mut tape, &bound, &input)?;
        let maps = AttentionMaps {
            height: h,
            width: w,
            maps: tape.value(out.attention).transpose(),
        };
        Ok((tape.value(out.sentence).clone(), maps))
    }
}
