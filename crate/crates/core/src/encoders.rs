//! Query-side light encoder and the frozen teacher bundle.
//!
//! The teacher stands in for a pretrained vision-language model. It is
//! built deterministically from a seed and never trained:
//!
//! * a word-embedding table shared by the text and matching encoders,
//! * a text encoder: mean of token rows, frozen projection, normalization,
//! * a visual encoder whose global feature equals the text feature of the
//!   image's ideal caption ("a photo of" followed by its concept words),
//!   and whose feature map holds projected concept embeddings per cell,
//! * a bilinear matching head between sentence tokens and the feature map.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::SyntheticImage;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, l2_normalize, Array2, ParamSet, Tape, Var};
use crate::rng::{stream, uniform_init, Stream};
use crate::vocab::{self, Vocabulary};

/// `H × W × C` feature map stored as `HW × C`, row index `h·W + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Array2) -> Result<Self> {
        if data.rows() != height * width {
            return Err(dim_err(
                "feature_map",
                format!("{} rows for a {height}x{width} map", data.rows()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// Mean feature over all cells (`1 × C`).
    pub fn pooled(&self) -> Array2 {
        self.data.mean_rows()
    }
}

// ---------------------------------------------------------------- light encoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightEncoderConfig {
    /// Width of the 1×1 layer.
    pub hidden_channels: usize,
    /// Output channels `C`.
    pub channels: usize,
}

impl Default for LightEncoderConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            channels: 8,
        }
    }
}

/// 1×1 convolution, GELU, then 3×3 same-padded convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LightEncoderParams {
    pub conv1: Array2,
    pub bias1: Array2,
    pub conv3: Array2,
    pub bias3: Array2,
}

pub const LIGHT_PREFIX: &str = "light.";

impl LightEncoderParams {
    pub fn init(in_channels: usize, cfg: &LightEncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            conv1: uniform_init(in_channels, cfg.hidden_channels, rng),
            bias1: Array2::zeros(1, cfg.hidden_channels),
            conv3: uniform_init(9 * cfg.hidden_channels, cfg.channels, rng),
            bias3: Array2::zeros(1, cfg.channels),
        }
    }

    pub fn insert_into(self, set: &mut ParamSet) {
        set.insert("light.conv1", self.conv1);
        set.insert("light.bias1", self.bias1);
        set.insert("light.conv3", self.conv3);
        set.insert("light.bias3", self.bias3);
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        Ok(Self {
            conv1: set.get("light.conv1")?.clone(),
            bias1: set.get("light.bias1")?.clone(),
            conv3: set.get("light.conv3")?.clone(),
            bias3: set.get("light.bias3")?.clone(),
        })
    }
}

/// Handles for light-encoder parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LightEncoderVars {
    pub conv1: Var,
    pub bias1: Var,
    pub conv3: Var,
    pub bias3: Var,
}

impl LightEncoderVars {
    pub fn lookup(bound: &std::collections::BTreeMap<String, Var>) -> Result<Self> {
        let get = |n: &str| {
            bound
                .get(n)
                .copied()
                .ok_or_else(|| Error::Lookup(format!("parameter `{n}`")))
        };
        Ok(Self {
            conv1: get("light.conv1")?,
            bias1: get("light.bias1")?,
            conv3: get("light.conv3")?,
            bias3: get("light.bias3")?,
        })
    }
}

/// One-hot cell encoding with channel 0 for background: `HW × (n+1)`.
pub fn image_input(image: &SyntheticImage, n_concepts: usize) -> Array2 {
    let mut x = Array2::zeros(image.height * image.width, n_concepts + 1);
    for (p, &cell) in image.grid.iter().enumerate() {
        x.set(p, usize::from(cell), 1.0);
    }
    x
}

pub fn light_encode_on_tape(
    tape: &mut Tape,
    input: Var,
    vars: &LightEncoderVars,
    height: usize,
    width: usize,
) -> Result<Var> {
    let h = tape.matmul(input, vars.conv1)?;
    let h = tape.add_row(h, vars.bias1)?;
    let h = tape.gelu(h);
    let cols = tape.im2col3x3(h, height, width)?;
    let out = tape.matmul(cols, vars.conv3)?;
    tape.add_row(out, vars.bias3)
}

/// Feature map of an already-encoded input grid.
pub fn light_encode_input(
    input: &Array2,
    height: usize,
    width: usize,
    params: &LightEncoderParams,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let vars = LightEncoderVars {
        conv1: tape.constant(params.conv1.clone()),
        bias1: tape.constant(params.bias1.clone()),
        conv3: tape.constant(params.conv3.clone()),
        bias3: tape.constant(params.bias3.clone()),
    };
    let out = light_encode_on_tape(&mut tape, x, &vars, height, width)?;
    FeatureMap::new(height, width, tape.value(out).clone())
}

pub fn light_encode(
    image: &SyntheticImage,
    n_concepts: usize,
    params: &LightEncoderParams,
) -> Result<FeatureMap> {
    let input = image_input(image, n_concepts);
    if input.cols() != params.conv1.rows() {
        return Err(dim_err(
            "light_encode",
            format!(
                "{} input channels, encoder expects {}",
                input.cols(),
                params.conv1.rows()
            ),
        ));
    }
    light_encode_input(&input, image.height, image.width, params)
}

// ---------------------------------------------------------------- teacher

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Word-embedding width `d_w`.
    pub word_dim: usize,
    /// Joint feature width `d`.
    pub feature_dim: usize,
    /// Teacher feature-map channels `C_t`.
    pub map_channels: usize,
    /// Scale of the bilinear matching head.
    pub match_gain: f64,
    /// Weight of each edit-clause word relative to the unit subject.
    pub clause_weight: f64,
    /// Scale every input row to unit length before pooling, as word
    /// embeddings already are.
    pub token_norm: bool,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            word_dim: 16,
            feature_dim: 16,
            map_channels: 8,
            match_gain: 4.0,
            clause_weight: 1.0,
            token_norm: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherBundle {
    pub config: TeacherConfig,
    pub vocab: Vocabulary,
    /// `V × d_w`, unit rows.
    pub embeddings: Array2,
    /// `d_w × d`.
    pub text_proj: Array2,
    /// `d_w × C_t`, maps cell concept embeddings to the feature map.
    pub map_proj: Array2,
    /// `d_w × C_t`, bilinear matching form.
    pub match_bilinear: Array2,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2 {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Array2::from_vec(rows, cols, data).expect("length matches shape")
}

/// Orthonormalizes rows in order (modified Gram–Schmidt). Rows that become
/// numerically dependent are left as normalized residue.
fn orthonormal_rows(mut a: Array2) -> Array2 {
    for i in 0..a.rows() {
        for j in 0..i {
            let proj = dot(a.row(i), a.row(j));
            let prev = a.row(j).to_vec();
            for (x, p) in a.row_mut(i).iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let norm = dot(a.row(i), a.row(i)).sqrt();
        a.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    a
}

impl TeacherBundle {
    pub fn new(config: TeacherConfig, n_concepts: usize) -> Result<Self> {
        if config.word_dim == 0 || config.feature_dim == 0 || config.map_channels == 0 {
            return Err(Error::Config("teacher dimensions must be positive".into()));
        }
        if !config.clause_weight.is_finite() || config.clause_weight < 0.0 {
            return Err(Error::Config(format!(
                "clause weight must be finite and non-negative, got {}",
                config.clause_weight
            )));
        }
        let vocab = Vocabulary::new(n_concepts);
        let mut rng = stream(config.seed, Stream::Teacher);
        let v = vocab.len();
        let dw = config.word_dim;
        // Orthonormal words when the table fits, otherwise random unit rows.
        let embeddings = if v <= dw {
            orthonormal_rows(gaussian(v, dw, &mut rng))
        } else {
            l2_normalize(&gaussian(v, dw, &mut rng))?
        };
        let text_proj = if config.feature_dim <= dw {
            // first d columns of a random orthogonal matrix
            let q = orthonormal_rows(gaussian(dw, dw, &mut rng));
            let mut t = Array2::zeros(dw, config.feature_dim);
            for r in 0..dw {
                for c in 0..config.feature_dim {
                    t.set(r, c, q.get(c, r));
                }
            }
            t
        } else {
            gaussian(dw, config.feature_dim, &mut rng).scale(1.0 / (dw as f64).sqrt())
        };
        // Each concept word gets its own orthonormal channel signature when
        // there are enough channels: `G = Eᵀ R` with `R` orthonormal rows.
        let n = vocab.n_concepts();
        let map_proj = if n <= config.map_channels && v <= dw {
            let r = orthonormal_rows(gaussian(n, config.map_channels, &mut rng));
            let concepts = Array2::from_vec(n, dw, embeddings.data()[..n * dw].to_vec())?;
            concepts.t_matmul(&r)?
        } else {
            gaussian(dw, config.map_channels, &mut rng)
        };
        let match_bilinear = map_proj.scale(config.match_gain);
        Ok(Self {
            config,
            vocab,
            embeddings,
            text_proj,
            map_proj,
            match_bilinear,
        })
    }

    pub fn word_dim(&self) -> usize {
        self.config.word_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn map_channels(&self) -> usize {
        self.config.map_channels
    }

    pub fn embedding(&self, word_id: usize) -> &[f64] {
        self.embeddings.row(word_id)
    }

    /// Embedding rows of "a photo of" (`3 × d_w`).
    pub fn prompt_rows(&self) -> Array2 {
        self.rows_for_ids(&self.vocab.prompt_ids())
    }

    pub fn connective_row(&self) -> Array2 {
        let id = self.vocab.id(vocab::CONNECTIVE).expect("connective in vocabulary");
        self.rows_for_ids(&[id])
    }

    fn rows_for_ids(&self, ids: &[usize]) -> Array2 {
        let rows: Vec<&[f64]> = ids.iter().map(|&i| self.embedding(i)).collect();
        Array2::from_rows(&rows).expect("embedding rows share width")
    }

    /// Plain word rows, read as a bag of words.
    pub fn embed_words(&self, words: &[String]) -> Result<Array2> {
        let ids = words
            .iter()
            .map(|w| self.vocab.id(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(if ids.is_empty() {
            Array2::zeros(0, self.word_dim())
        } else {
            self.rows_for_ids(&ids)
        })
    }

    /// Word rows of a modifier used as an edit clause (after "that"). The
    /// concept named right after `remove` or `replace` is negated: inside a
    /// clause the encoder reads it as something the subject must not have.
    pub fn embed_edit_clause(&self, words: &[String]) -> Result<Array2> {
        let mut rows = self.embed_words(words)?;
        let mut negate_next = false;
        for (i, w) in words.iter().enumerate() {
            let is_concept = self.vocab.concept_id(w).is_ok();
            if negate_next && is_concept {
                rows.row_mut(i).iter_mut().for_each(|x| *x = -*x);
            }
            negate_next = w == vocab::REMOVE || w == vocab::REPLACE;
        }
        Ok(rows)
    }

    /// `t = normalize(mean(tokens) · T)`.
    pub fn teacher_text(&self, tokens: &Array2) -> Result<Array2> {
        if tokens.rows() == 0 {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        if tokens.cols() != self.word_dim() {
            return Err(dim_err(
                "teacher_text",
                format!("{} token width, expected {}", tokens.cols(), self.word_dim()),
            ));
        }
        let pooled = if self.config.token_norm {
            l2_normalize(tokens)?.mean_rows()
        } else {
            tokens.mean_rows()
        };
        l2_normalize(&pooled.matmul(&self.text_proj)?)
    }

    pub fn teacher_text_on_tape(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        if tape.value(tokens).rows() == 0 {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        let rows = if self.config.token_norm {
            tape.l2_normalize(tokens)?
        } else {
            tokens
        };
        let mean = tape.mean_rows(rows);
        let proj = tape.constant(self.text_proj.clone());
        let feat = tape.matmul(mean, proj)?;
        tape.l2_normalize(feat)
    }

    /// Global feature `v` and feature map `F^v` of an image.
    pub fn teacher_visual(&self, image: &SyntheticImage) -> Result<(Array2, FeatureMap)> {
        let concepts = image.concepts();
        if concepts.is_empty() {
            return Err(Error::Degenerate(format!("image `{}` has no concepts", image.id)));
        }
        Ok((self.concept_feature(&concepts)?, self.feature_map(image)?))
    }

    /// `normalize(Σ_c S[c] · T)` over a concept set.
    pub fn concept_feature(&self, concepts: &[usize]) -> Result<Array2> {
        if concepts.is_empty() {
            return Err(Error::Degenerate("empty concept set".into()));
        }
        self.teacher_text(&self.rows_for_ids(concepts))
    }

    /// Feature of a "subject that clause" sentence: the pooled subject is
    /// normalized, then each clause row is added with weight `λ`:
    /// `normalize(normalize(mean(subject)·T) + λ Σ clause·T)`.
    pub fn composed_text(&self, subject: &Array2, clause: &Array2) -> Result<Array2> {
        let head = self.teacher_text(subject)?;
        if clause.rows() == 0 {
            return Ok(head);
        }
        if clause.cols() != self.word_dim() {
            return Err(dim_err(
                "composed_text",
                format!("{} clause width, expected {}", clause.cols(), self.word_dim()),
            ));
        }
        let summed = clause.mean_rows().scale(clause.rows() as f64);
        let tail = summed.matmul(&self.text_proj)?.scale(self.config.clause_weight);
        l2_normalize(&head.add(&tail)?)
    }

    pub fn feature_map(&self, image: &SyntheticImage) -> Result<FeatureMap> {
        let mut cells = Array2::zeros(image.height * image.width, self.word_dim());
        for (p, &cell) in image.grid.iter().enumerate() {
            if cell != 0 {
                cells
                    .row_mut(p)
                    .copy_from_slice(self.embedding(usize::from(cell) - 1));
            }
        }
        FeatureMap::new(image.height, image.width, cells.matmul(&self.map_proj)?)
    }

    /// Matching logit `mean(U) · M · pooled(F^v)ᵀ`.
    pub fn match_logit(&self, tokens: &Array2, fmap: &FeatureMap) -> Result<f64> {
        let mean = if self.config.token_norm {
            l2_normalize(tokens)?.mean_rows()
        } else {
            tokens.mean_rows()
        };
        let left = mean.matmul(&self.match_bilinear)?;
        let pooled = fmap.pooled();
        if pooled.cols() != left.cols() {
            return Err(dim_err(
                "teacher_match",
                format!("map has {} channels, expected {}", pooled.cols(), left.cols()),
            ));
        }
        Ok(dot(left.data(), pooled.data()))
    }

    /// Matching probability: logistic of [`Self::match_logit`].
    pub fn teacher_match(&self, tokens: &Array2, fmap: &FeatureMap) -> Result<f64> {
        let s = self.match_logit(tokens, fmap)?;
        Ok(1.0 / (1.0 + (-s).exp()))
    }

    /// Short hex digest over every frozen tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab.n_concepts() as u64).to_le_bytes());
        h.update(self.config.clause_weight.to_le_bytes());
        h.update([u8::from(self.config.token_norm)]);
        for a in [
            &self.embeddings,
            &self.text_proj,
            &self.map_proj,
            &self.match_bilinear,
        ] {
            h.update((a.rows() as u64).to_le_bytes());
            h.update((a.cols() as u64).to_le_bytes());
            for v in a.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
