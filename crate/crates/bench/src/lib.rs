//! Fixtures shared by the benchmarks: toy-scale inputs built from fixed seeds.

use isa_core::datagen::{gen_dataset, DatagenParams};
use isa_core::encoders::{FeatureMap, TeacherBundle, TeacherConfig};
use isa_core::gradcheck::{toy_objective, GradCheckConfig, LossObjective, LossTerm};
use isa_core::numerics::{Array2, ParamSet};
use isa_core::retrieval::{build_index, GalleryIndex, IndexMeta};
use isa_core::rng::{stream, Stream};
use isa_core::token_learner::{TokenLearnerConfig, TokenLearnerParams};

/// An 8×8×8 feature map with deterministic contents.
pub fn feature_map() -> FeatureMap {
    let data: Vec<f64> = (0..64 * 8).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
    FeatureMap::new(8, 8, Array2::from_vec(64, 8, data).unwrap()).unwrap()
}

/// Token learner at the training widths.
pub fn learner() -> (TokenLearnerConfig, TokenLearnerParams) {
    let cfg = TokenLearnerConfig::default();
    let params = TokenLearnerParams::init(&cfg, &mut stream(0, Stream::Init));
    (cfg, params)
}

/// Teacher-embedded gallery of `n` images and one unit query.
pub fn gallery(n: usize) -> (GalleryIndex, Vec<f64>) {
    let data = gen_dataset(&DatagenParams {
        n_gallery: n,
        n_train: 0,
        max_duplicates: n,
        n_queries: 1,
        ..DatagenParams::default()
    })
    .unwrap();
    let teacher = TeacherBundle::new(TeacherConfig::default(), data.params.n_concepts).unwrap();
    let index = build_index(&data.gallery, &teacher, IndexMeta::default()).unwrap();
    let (v, _) = teacher.teacher_visual(&data.queries[0]).unwrap();
    (index, v.data().to_vec())
}

/// Loss and parameters for one training batch of `batch_size` at full widths.
pub fn training_batch(batch_size: usize) -> (LossObjective, ParamSet) {
    let cfg = GradCheckConfig {
        batch_size,
        hidden_self: 256,
        hidden_cross: 512,
        param_scale: 1.0,
        ..GradCheckConfig::default()
    };
    toy_objective(&cfg, LossTerm::Total, None).unwrap()
}
