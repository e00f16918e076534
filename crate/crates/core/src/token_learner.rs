//! Adaptive token learner: turns a feature map into `L` sentence tokens in
//! word-embedding space.
//!
//! Stages, each available on its own and chained by [`forward`]:
//!
//! 1. [`spatial_attention`]: per-pixel softmax over `L` semantic groups.
//! 2. [`aggregate_tokens`]: each token is the attention-weighted mean of
//!    pixel features (weights normalized by the group's attention mass).
//! 3. [`refine_tokens`]: residual self-attention over the tokens followed by
//!    a residual feed-forward block.
//! 4. [`cross_attend`]: pixels attend to tokens (softmax over tokens), the
//!    transposed attention gathers projected pixel values back into the
//!    tokens, then a residual feed-forward block and a linear projection to
//!    the word dimension.
//!
//! Attention logits are written key-first, `(X K)(Y Q)ᵀ`, and are unscaled
//! unless `scaled_attention` is set.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMap;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Array2, Axis, ParamSet, Tape, Var};
use crate::rng::uniform_init;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenLearnerConfig {
    /// Number of sentence tokens `L`.
    pub tokens: usize,
    /// Feature-map channels `C`.
    pub channels: usize,
    /// Word-embedding width `d_w`.
    pub word_dim: usize,
    /// Hidden width of the self-attention feed-forward block.
    pub hidden_self: usize,
    /// Hidden width of the cross-attention feed-forward block.
    pub hidden_cross: usize,
    pub scaled_attention: bool,
}

impl Default for TokenLearnerConfig {
    fn default() -> Self {
        Self {
            tokens: 6,
            channels: 8,
            word_dim: 16,
            hidden_self: 256,
            hidden_cross: 512,
            scaled_attention: false,
        }
    }
}

impl TokenLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::Config("token length must be at least 1".into()));
        }
        if self.channels == 0 || self.word_dim == 0 || self.hidden_self == 0 || self.hidden_cross == 0
        {
            return Err(Error::Config("token learner widths must be positive".into()));
        }
        Ok(())
    }

    fn attention_scale(&self) -> f64 {
        if self.scaled_attention {
            1.0 / (self.channels as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLearnerParams {
    /// `L × C` group weights.
    pub group_weights: Array2,
    pub q_r: Array2,
    pub k_r: Array2,
    pub v_r: Array2,
    pub w_r1: Array2,
    pub w_r2: Array2,
    pub q_c: Array2,
    pub k_c: Array2,
    pub v_c: Array2,
    pub w_c1: Array2,
    pub w_c2: Array2,
    /// `C × d_w` output projection.
    pub w_p: Array2,
}

const NAMES: [&str; 12] = [
    "group_weights",
    "q_r",
    "k_r",
    "v_r",
    "w_r1",
    "w_r2",
    "q_c",
    "k_c",
    "v_c",
    "w_c1",
    "w_c2",
    "w_p",
];

pub const LEARNER_PREFIX: &str = "learner.";

impl TokenLearnerParams {
    pub fn init(cfg: &TokenLearnerConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        Self {
            group_weights: uniform_init(c, cfg.tokens, rng).transpose(),
            q_r: uniform_init(c, c, rng),
            k_r: uniform_init(c, c, rng),
            v_r: uniform_init(c, c, rng),
            w_r1: uniform_init(c, cfg.hidden_self, rng),
            w_r2: uniform_init(cfg.hidden_self, c, rng),
            q_c: uniform_init(c, c, rng),
            k_c: uniform_init(c, c, rng),
            v_c: uniform_init(c, c, rng),
            w_c1: uniform_init(c, cfg.hidden_cross, rng),
            w_c2: uniform_init(cfg.hidden_cross, c, rng),
            w_p: uniform_init(c, cfg.word_dim, rng),
        }
    }

    /// All-zero parameters (useful for identity checks).
    pub fn zeros(cfg: &TokenLearnerConfig) -> Self {
        let c = cfg.channels;
        Self {
            group_weights: Array2::zeros(cfg.tokens, c),
            q_r: Array2::zeros(c, c),
            k_r: Array2::zeros(c, c),
            v_r: Array2::zeros(c, c),
            w_r1: Array2::zeros(c, cfg.hidden_self),
            w_r2: Array2::zeros(cfg.hidden_self, c),
            q_c: Array2::zeros(c, c),
            k_c: Array2::zeros(c, c),
            v_c: Array2::zeros(c, c),
            w_c1: Array2::zeros(c, cfg.hidden_cross),
            w_c2: Array2::zeros(cfg.hidden_cross, c),
            w_p: Array2::zeros(c, cfg.word_dim),
        }
    }

    fn fields(&self) -> [&Array2; 12] {
        [
            &self.group_weights,
            &self.q_r,
            &self.k_r,
            &self.v_r,
            &self.w_r1,
            &self.w_r2,
            &self.q_c,
            &self.k_c,
            &self.v_c,
            &self.w_c1,
            &self.w_c2,
            &self.w_p,
        ]
    }

    pub fn insert_into(&self, set: &mut ParamSet) {
        for (name, value) in NAMES.iter().zip(self.fields()) {
            set.insert(format!("{LEARNER_PREFIX}{name}"), value.clone());
        }
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let get = |n: &str| set.get(&format!("{LEARNER_PREFIX}{n}")).cloned();
        Ok(Self {
            group_weights: get("group_weights")?,
            q_r: get("q_r")?,
            k_r: get("k_r")?,
            v_r: get("v_r")?,
            w_r1: get("w_r1")?,
            w_r2: get("w_r2")?,
            q_c: get("q_c")?,
            k_c: get("k_c")?,
            v_c: get("v_c")?,
            w_c1: get("w_c1")?,
            w_c2: get("w_c2")?,
            w_p: get("w_p")?,
        })
    }

    /// Binds every array as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> LearnerVars {
        let v: Vec<Var> = self.fields().iter().map(|a| tape.constant((*a).clone())).collect();
        LearnerVars {
            group_weights: v[0],
            q_r: v[1],
            k_r: v[2],
            v_r: v[3],
            w_r1: v[4],
            w_r2: v[5],
            q_c: v[6],
            k_c: v[7],
            v_c: v[8],
            w_c1: v[9],
            w_c2: v[10],
            w_p: v[11],
        }
    }
}

/// Token-learner parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LearnerVars {
    pub group_weights: Var,
    pub q_r: Var,
    pub k_r: Var,
    pub v_r: Var,
    pub w_r1: Var,
    pub w_r2: Var,
    pub q_c: Var,
    pub k_c: Var,
    pub v_c: Var,
    pub w_c1: Var,
    pub w_c2: Var,
    pub w_p: Var,
}

impl LearnerVars {
    pub fn lookup(bound: &BTreeMap<String, Var>) -> Result<Self> {
        let get = |n: &str| {
            let key = format!("{LEARNER_PREFIX}{n}");
            bound
                .get(&key)
                .copied()
                .ok_or_else(|| Error::Lookup(format!("parameter `{key}`")))
        };
        Ok(Self {
            group_weights: get("group_weights")?,
            q_r: get("q_r")?,
            k_r: get("k_r")?,
            v_r: get("v_r")?,
            w_r1: get("w_r1")?,
            w_r2: get("w_r2")?,
            q_c: get("q_c")?,
            k_c: get("k_c")?,
            v_c: get("v_c")?,
            w_c1: get("w_c1")?,
            w_c2: get("w_c2")?,
            w_p: get("w_p")?,
        })
    }
}

/// `L × H × W` spatial attention, stored as `L × HW`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub height: usize,
    pub width: usize,
    pub maps: Array2,
}

impl AttentionMaps {
    pub fn tokens(&self) -> usize {
        self.maps.rows()
    }

    pub fn at(&self, token: usize, h: usize, w: usize) -> f64 {
        self.maps.get(token, h * self.width + w)
    }
}

/// Handles to every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LearnerOutputs {
    /// `HW × L`, rows sum to one.
    pub attention: Var,
    /// `Z`, `L × C`.
    pub tokens: Var,
    /// `Z_r`, `L × C`.
    pub refined: Var,
    /// `Z_c`, `L × C`.
    pub cross: Var,
    /// `U`, `L × d_w`.
    pub sentence: Var,
}

fn check_channels(tape: &Tape, fmap: Var, weights: Var, op: &'static str) -> Result<()> {
    let (c, wc) = (tape.value(fmap).cols(), tape.value(weights).cols());
    if c != wc {
        return Err(dim_err(op, format!("map has {c} channels, weights expect {wc}")));
    }
    Ok(())
}

/// Per-pixel softmax over groups: `HW × L`.
pub fn spatial_attention_on_tape(tape: &mut Tape, fmap: Var, group_weights: Var) -> Result<Var> {
    check_channels(tape, fmap, group_weights, "spatial_attention")?;
    let wt = tape.transpose(group_weights);
    let logits = tape.matmul(fmap, wt)?;
    Ok(tape.softmax(logits, Axis::Rows))
}

/// `Z = (A / ρ)ᵀ F`, with `ρ` the per-group attention mass.
pub fn aggregate_on_tape(tape: &mut Tape, fmap: Var, attention: Var) -> Result<Var> {
    let weights = tape.column_mass(attention);
    let wt = tape.transpose(weights);
    tape.matmul(wt, fmap)
}

fn feed_forward(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h);
    tape.matmul(h, w2)
}

fn attention_logits(
    tape: &mut Tape,
    keys_from: Var,
    k: Var,
    queries_from: Var,
    q: Var,
    scale: f64,
) -> Result<Var> {
    let keys = tape.matmul(keys_from, k)?;
    let queries = tape.matmul(queries_from, q)?;
    let qt = tape.transpose(queries);
    let logits = tape.matmul(keys, qt)?;
    Ok(if scale == 1.0 {
        logits
    } else {
        tape.scale(logits, scale)
    })
}

pub fn refine_on_tape(
    tape: &mut Tape,
    z: Var,
    vars: &LearnerVars,
    cfg: &TokenLearnerConfig,
) -> Result<Var> {
    let logits = attention_logits(tape, z, vars.k_r, z, vars.q_r, cfg.attention_scale())?;
    let attn = tape.softmax(logits, Axis::Rows);
    let values = tape.matmul(z, vars.v_r)?;
    let mixed = tape.matmul(attn, values)?;
    let z_out = tape.add(z, mixed)?;
    let ffn = feed_forward(tape, z_out, vars.w_r1, vars.w_r2)?;
    tape.add(z_out, ffn)
}

/// Returns `(Z_c, U)`.
pub fn cross_attend_on_tape(
    tape: &mut Tape,
    z_r: Var,
    fmap: Var,
    vars: &LearnerVars,
    cfg: &TokenLearnerConfig,
) -> Result<(Var, Var)> {
    let logits = attention_logits(tape, fmap, vars.k_c, z_r, vars.q_c, cfg.attention_scale())?;
    let attn = tape.softmax(logits, Axis::Rows);
    let values = tape.matmul(fmap, vars.v_c)?;
    let at = tape.transpose(attn);
    let gathered = tape.matmul(at, values)?;
    let z_c = tape.add(z_r, gathered)?;
    let ffn = feed_forward(tape, z_c, vars.w_c1, vars.w_c2)?;
    let pre = tape.add(z_c, ffn)?;
    let u = tape.matmul(pre, vars.w_p)?;
    Ok((z_c, u))
}

pub fn forward_on_tape(
    tape: &mut Tape,
    fmap: Var,
    vars: &LearnerVars,
    cfg: &TokenLearnerConfig,
) -> Result<LearnerOutputs> {
    let attention = spatial_attention_on_tape(tape, fmap, vars.group_weights)?;
    let tokens = aggregate_on_tape(tape, fmap, attention)?;
    let refined = refine_on_tape(tape, tokens, vars, cfg)?;
    let (cross, sentence) = cross_attend_on_tape(tape, refined, fmap, vars, cfg)?;
    Ok(LearnerOutputs {
        attention,
        tokens,
        refined,
        cross,
        sentence,
    })
}

// ---- array-level API ----

pub fn spatial_attention(fmap: &FeatureMap, group_weights: &Array2) -> Result<AttentionMaps> {
    let mut tape = Tape::new();
    let f = tape.constant(fmap.data.clone());
    let w = tape.constant(group_weights.clone());
    let a = spatial_attention_on_tape(&mut tape, f, w)?;
    Ok(AttentionMaps {
        height: fmap.height,
        width: fmap.width,
        maps: tape.value(a).transpose(),
    })
}

/// Visual tokens `Z` (`L × C`).
pub fn aggregate_tokens(fmap: &FeatureMap, maps: &AttentionMaps) -> Result<Array2> {
    if maps.maps.cols() != fmap.data.rows() {
        return Err(dim_err(
            "aggregate_tokens",
            format!("{} attention columns for {} pixels", maps.maps.cols(), fmap.data.rows()),
        ));
    }
    let mut tape = Tape::new();
    let f = tape.constant(fmap.data.clone());
    let a = tape.constant(maps.maps.transpose());
    let z = aggregate_on_tape(&mut tape, f, a)?;
    Ok(tape.value(z).clone())
}

/// Refined tokens `Z_r` (`L × C`).
pub fn refine_tokens(
    z: &Array2,
    params: &TokenLearnerParams,
    cfg: &TokenLearnerConfig,
) -> Result<Array2> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let zv = tape.constant(z.clone());
    let out = refine_on_tape(&mut tape, zv, &vars, cfg)?;
    Ok(tape.value(out).clone())
}

/// Sentence tokens `U` (`L × d_w`) from refined tokens and the map.
pub fn cross_attend(
    z_r: &Array2,
    fmap: &FeatureMap,
    params: &TokenLearnerParams,
    cfg: &TokenLearnerConfig,
) -> Result<Array2> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let zv = tape.constant(z_r.clone());
    let f = tape.constant(fmap.data.clone());
    let (_, u) = cross_attend_on_tape(&mut tape, zv, f, &vars, cfg)?;
    Ok(tape.value(u).clone())
}

/// Full pass; returns `U` and the spatial attention maps.
pub fn forward(
    fmap: &FeatureMap,
    params: &TokenLearnerParams,
    cfg: &TokenLearnerConfig,
) -> Result<(Array2, AttentionMaps)> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let f = tape.constant(fmap.data.clone());
    let out = forward_on_tape(&mut tape, f, &vars, cfg)?;
    let maps = AttentionMaps {
        height: fmap.height,
        width: fmap.width,
        maps: tape.value(out.attention).transpose(),
    };
    Ok((tape.value(out.sentence).clone(), maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small_cfg(tokens: usize) -> TokenLearnerConfig {
        TokenLearnerConfig {
            tokens,
            channels: 3,
            word_dim: 5,
            hidden_self: 4,
            hidden_cross: 6,
            scaled_attention: false,
        }
    }

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = stream(seed, Stream::Data);
        let data = (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap::new(h, w, Array2::from_vec(h * w, c, data).unwrap()).unwrap()
    }

    #[test]
    fn single_group_attention_is_all_ones() {
        let fmap = random_map(3, 3, 3, 1);
        let w = Array2::row_vector(&[0.4, -1.0, 2.0]);
        let maps = spatial_attention(&fmap, &w).unwrap();
        assert!(maps.maps.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn identical_groups_give_uniform_attention() {
        let fmap = random_map(2, 4, 3, 2);
        let w = Array2::from_rows(&[[0.3, 0.1, -0.2]; 4]).unwrap();
        let maps = spatial_attention(&fmap, &w).unwrap();
        assert!(maps.maps.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn attention_channel_mismatch_is_dimension_error() {
        let fmap = random_map(2, 2, 3, 3);
        let w = Array2::zeros(2, 4);
        assert!(matches!(
            spatial_attention(&fmap, &w),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn constant_map_gives_constant_tokens() {
        let row = [0.5, -1.5, 2.0];
        let data = Array2::from_rows(&[row; 6]).unwrap();
        let fmap = FeatureMap::new(2, 3, data).unwrap();
        let mut rng = stream(0, Stream::Init);
        let w = uniform_init(4, 3, &mut rng);
        let maps = spatial_attention(&fmap, &w).unwrap();
        let z = aggregate_tokens(&fmap, &maps).unwrap();
        for l in 0..4 {
            for (a, b) in z.row(l).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharp_attention_selects_one_pixel() {
        // Pixel 2 has a large positive first channel; the first group
        // weights that channel heavily and every other pixel is negative.
        let mut data = Array2::filled(4, 2, -1.0);
        data.set(2, 0, 1.0);
        data.set(2, 1, 0.25);
        let fmap = FeatureMap::new(2, 2, data.clone()).unwrap();
        let w = Array2::from_rows(&[[40.0, 0.0], [-40.0, 0.0]]).unwrap();
        let maps = spatial_attention(&fmap, &w).unwrap();
        let z = aggregate_tokens(&fmap, &maps).unwrap();
        for (a, b) in z.row(0).iter().zip(data.row(2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_parameters_refine_to_identity() {
        let cfg = small_cfg(3);
        let params = TokenLearnerParams::zeros(&cfg);
        let z = random_map(1, 3, 3, 4).data;
        let zr = refine_tokens(&z, &params, &cfg).unwrap();
        assert_eq!(zr, z);
    }

    #[test]
    fn single_token_refinement() {
        let cfg = small_cfg(1);
        let mut rng = stream(9, Stream::Init);
        let mut params = TokenLearnerParams::init(&cfg, &mut rng);
        params.w_r2 = Array2::zeros(cfg.hidden_self, cfg.channels);
        let z = Array2::row_vector(&[0.2, -0.7, 1.1]);
        let zr = refine_tokens(&z, &params, &cfg).unwrap();
        let expected = z.add(&z.matmul(&params.v_r).unwrap()).unwrap();
        assert!(zr.sub(&expected).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn cross_attention_pass_through_projection() {
        let cfg = small_cfg(2);
        let mut rng = stream(10, Stream::Init);
        let mut params = TokenLearnerParams::init(&cfg, &mut rng);
        params.v_c = Array2::zeros(3, 3);
        params.w_c1 = Array2::zeros(3, cfg.hidden_cross);
        let fmap = random_map(2, 2, 3, 11);
        let z_r = random_map(1, 2, 3, 12).data;
        let u = cross_attend(&z_r, &fmap, &params, &cfg).unwrap();
        let expected = z_r.matmul(&params.w_p).unwrap();
        assert!(u.sub(&expected).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_cfg(4);
        let mut rng = stream(3, Stream::Init);
        let params = TokenLearnerParams::init(&cfg, &mut rng);
        let fmap = random_map(3, 3, 3, 6);
        let (u, maps) = forward(&fmap, &params, &cfg).unwrap();
        assert_eq!(u.shape(), (4, 5));
        assert_eq!(maps.maps.shape(), (4, 9));
        let (u2, _) = forward(&fmap, &params, &cfg).unwrap();
        assert_eq!(u, u2);
    }

    #[test]
    fn param_set_round_trip() {
        let cfg = small_cfg(2);
        let mut rng = stream(1, Stream::Init);
        let params = TokenLearnerParams::init(&cfg, &mut rng);
        let mut set = ParamSet::new();
        params.insert_into(&mut set);
        assert_eq!(set.len(), 12);
        assert_eq!(TokenLearnerParams::from_set(&set).unwrap(), params);
    }
}
