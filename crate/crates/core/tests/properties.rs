use std::collections::BTreeSet;

use proptest::prelude::*;

use isa_core::datagen::SyntheticImage;
use isa_core::encoders::{FeatureMap, TeacherBundle, TeacherConfig};
use isa_core::losses::{gcd_loss, BatchPairs};
use isa_core::numerics::{l2_normalize, softmax_over, Array2, Axis};
use isa_core::retrieval::{
    average_precision_at_k, hit_at_k, search_unchecked, GalleryIndex, IndexMeta,
};
use isa_core::token_learner::{
    aggregate_tokens, forward, spatial_attention, TokenLearnerConfig, TokenLearnerParams,
};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Array2> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |data| Array2::from_vec(rows, cols, data).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Array2> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, range))
}

fn feature_map(max_side: usize, channels: usize) -> impl Strategy<Value = FeatureMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        matrix(h * w, channels, 3.0).prop_map(move |m| FeatureMap::new(h, w, m).unwrap())
    })
}

fn grid_image(n_concepts: usize) -> impl Strategy<Value = SyntheticImage> {
    prop::collection::vec(0..=n_concepts as u8, 64).prop_filter_map("needs a concept", |mut grid| {
        if grid.iter().all(|&c| c == 0) {
            grid[0] = 1;
        }
        Some(SyntheticImage {
            id: "p".into(),
            height: 8,
            width: 8,
            grid,
        })
    })
}

fn teacher() -> TeacherBundle {
    TeacherBundle::new(TeacherConfig::default(), 6).unwrap()
}

fn row_norm(a: &Array2, r: usize) -> f64 {
    a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_and_columns_sum_to_one(a in sized_matrix(8, 8, 500.0)) {
        let rows = softmax_over(&a, Axis::Rows);
        for r in 0..a.rows() {
            prop_assert!((rows.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let cols = softmax_over(&a, Axis::Cols);
        for c in 0..a.cols() {
            let s: f64 = (0..a.rows()).map(|r| cols.get(r, c)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        prop_assert!(rows.data().iter().chain(cols.data()).all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn normalized_rows_are_unit(a in sized_matrix(6, 12, 10.0)) {
        prop_assume!((0..a.rows()).all(|r| row_norm(&a, r) > 1e-6));
        let n = l2_normalize(&a).unwrap();
        for r in 0..n.rows() {
            prop_assert!((row_norm(&n, r) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn spatial_attention_is_a_per_pixel_distribution(
        fmap in feature_map(6, 4),
        w in matrix(5, 4, 4.0),
    ) {
        let maps = spatial_attention(&fmap, &w).unwrap();
        for p in 0..fmap.data.rows() {
            let s: f64 = (0..maps.tokens()).map(|l| maps.maps.get(l, p)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn tokens_lie_in_the_convex_hull_of_pixels(
        fmap in feature_map(6, 4),
        w in matrix(3, 4, 4.0),
    ) {
        let maps = spatial_attention(&fmap, &w).unwrap();
        let z = aggregate_tokens(&fmap, &maps).unwrap();
        let hw = fmap.data.rows();
        for l in 0..z.rows() {
            let weights: Vec<f64> = (0..hw).map(|p| maps.maps.get(l, p)).collect();
            let mass: f64 = weights.iter().sum();
            prop_assert!(weights.iter().all(|&a| a >= 0.0));
            for c in 0..fmap.channels() {
                let col: Vec<f64> = (0..hw).map(|p| fmap.data.get(p, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = z.get(l, c);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                // explicit weighted average
                let oracle: f64 = weights.iter().zip(&col).map(|(a, f)| a * f).sum::<f64>() / mass;
                prop_assert!((v - oracle).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn convex_hull_survives_extreme_logits(
        fmap in feature_map(5, 3).prop_map(|f| FeatureMap::new(f.height, f.width, f.data.scale(100.0)).unwrap()),
        w in matrix(4, 3, 10.0),
    ) {
        // logits in the thousands: some tokens get no representable attention
        let maps = spatial_attention(&fmap, &w).unwrap();
        let z = aggregate_tokens(&fmap, &maps).unwrap();
        for l in 0..z.rows() {
            for c in 0..fmap.channels() {
                let col = (0..fmap.data.rows()).map(|p| fmap.data.get(p, c));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                let v = z.get(l, c);
                prop_assert!(v.is_finite() && v >= lo - 1e-9 * lo.abs().max(1.0) && v <= hi + 1e-9 * hi.abs().max(1.0));
            }
        }
    }

    #[test]
    fn teacher_features_are_unit(image in grid_image(6), tokens in sized_matrix(8, 16, 2.0)) {
        let t = teacher();
        let (v, _) = t.teacher_visual(&image).unwrap();
        prop_assert!((row_norm(&v, 0) - 1.0).abs() <= 1e-6);
        let tokens = Array2::from_vec(
            tokens.rows(),
            16,
            (0..tokens.rows() * 16).map(|i| tokens.data()[i % tokens.data().len()] + 0.01).collect(),
        ).unwrap();
        let text = t.teacher_text(&tokens).unwrap();
        prop_assert!((row_norm(&text, 0) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gcd_is_invariant_to_batch_order(
        v in matrix(5, 4, 1.0),
        t in matrix(5, 4, 1.0),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!((0..5).all(|r| row_norm(&v, r) > 1e-3 && row_norm(&t, r) > 1e-3));
        let (v, t) = (l2_normalize(&v).unwrap(), l2_normalize(&t).unwrap());
        let permute = |m: &Array2| {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
            Array2::from_rows(&rows).unwrap()
        };
        let pairs = |v: Array2, t: Array2| BatchPairs {
            image_features: v,
            text_features: t,
            tokens: Vec::new(),
            teacher_maps: Vec::new(),
        };
        let a = gcd_loss(&pairs(v.clone(), t.clone()), 0.07).unwrap();
        let b = gcd_loss(&pairs(permute(&v), permute(&t)), 0.07).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn search_matches_brute_force_sort(
        n in 1usize..=256,
        d in 1usize..=12,
        k in 1usize..=300,
        seed_data in prop::collection::vec(-4i8..=4, 256 * 12),
        query in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        // coarse integer-valued entries make exact score ties common
        let vectors: Vec<f32> = seed_data[..n * d].iter().map(|&x| f32::from(x) / 4.0).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("g{:03}", (i * 37) % 1000)).collect();
        prop_assume!(ids.iter().collect::<BTreeSet<_>>().len() == n);
        let q: Vec<f64> = query[..d].iter().map(|x| (x * 4.0).round() / 4.0).collect();
        let index = GalleryIndex::new(ids.clone(), d, vectors.clone(), IndexMeta::default()).unwrap();
        let got = search_unchecked(&index, &q, k).unwrap();

        let mut oracle: Vec<(f64, String)> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..d {
                    s += f64::from(vectors[i * d + j]) * q[j];
                }
                // +0.0 normalizes a negative zero, which ties with zero
                (s + 0.0, ids[i].clone())
            })
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        let want: Vec<String> = oracle.into_iter().map(|(_, id)| id).collect();
        prop_assert_eq!(got.ids, want);
        prop_assert_eq!(got.truncated, k > n);
    }

    #[test]
    fn average_precision_matches_definition(
        n in 1usize..=40,
        k in 1usize..=50,
        perm in Just((0..40).collect::<Vec<usize>>()).prop_shuffle(),
        n_targets in 1usize..=6,
    ) {
        let ranked: Vec<String> = perm[..n].iter().map(|i| format!("x{i}")).collect();
        let targets: Vec<String> = (0..n_targets).map(|i| format!("x{}", i * 3)).collect();
        // by definition: precision at each relevant rank, summed, over min(K, #targets)
        let mut sum = 0.0;
        for i in 1..=k.min(n) {
            if targets.contains(&ranked[i - 1]) {
                let relevant_so_far = ranked[..i].iter().filter(|id| targets.contains(id)).count();
                sum += relevant_so_far as f64 / i as f64;
            }
        }
        let oracle = sum / k.min(n_targets) as f64;
        let got = average_precision_at_k(&ranked, &targets, k);
        prop_assert!((got - oracle).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn recall_is_monotone_in_k(
        perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(),
        target in 0usize..30,
    ) {
        let ranked: Vec<String> = perm.iter().map(|i| i.to_string()).collect();
        let targets = vec![target.to_string()];
        let mut prev = 0.0;
        for k in 1..=30 {
            let h = hit_at_k(&ranked, &targets, k);
            prop_assert!(h >= prev);
            prev = h;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn permuting_groups_permutes_sentence_tokens(
        fmap in feature_map(4, 8),
        seed in 0u64..1000,
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cfg = TokenLearnerConfig {
            tokens: 4,
            channels: 8,
            word_dim: 16,
            hidden_self: 8,
            hidden_cross: 8,
            scaled_attention: false,
        };
        let mut rng = isa_core::rng::stream(seed, isa_core::rng::Stream::Init);
        let params = TokenLearnerParams::init(&cfg, &mut rng);
        let (u, _) = forward(&fmap, &params, &cfg).unwrap();
        let mut permuted = params.clone();
        let rows: Vec<&[f64]> = perm.iter().map(|&i| params.group_weights.row(i)).collect();
        permuted.group_weights = Array2::from_rows(&rows).unwrap();
        let (up, _) = forward(&fmap, &permuted, &cfg).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..16 {
                prop_assert!((up.get(new_row, c) - u.get(old_row, c)).abs() <= 1e-9);
            }
        }
    }
}
