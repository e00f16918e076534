//! Acceptance criteria 1 to 9. Runs without the libtest harness so the
//! criteria execute in order, one PASS/FAIL line each, with undisturbed
//! wall-clock timings. Exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isa_core::config::RunConfig;
use isa_core::datagen::{DatagenParams, TripletRecord};
use isa_core::encoders::{FeatureMap, TeacherBundle, TeacherConfig};
use isa_core::experiment::{run_seeds, sweep_table, Benchmark, Summary, SweepRow, TrialOutcome};
use isa_core::gradcheck::{run_gradcheck, GradCheckConfig, LossTerm};
use isa_core::io::MetricsDocument;
use isa_core::losses::{gcd_loss, lar_loss, BatchPairs, NegativePolicy};
use isa_core::model::{Mode, Model};
use isa_core::numerics::Array2;
use isa_core::retrieval::{
    compose_and_encode, map_at_k, search_unchecked, Baseline, GalleryIndex, IndexMeta, MetricSet,
    RankedList,
};
use isa_core::token_learner::{aggregate_tokens, spatial_attention};
use isa_core::trainer::TrainConfig;

const SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP: [usize; 6] = [1, 2, 4, 6, 8, 10];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in SEEDS {
        for term in LossTerm::ALL {
            let cfg = GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            };
            let r = run_gradcheck(&cfg, term, None).expect("gradient check runs");
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("seed {seed} {term}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-3 && secs < 60.0,
        format!("max rel error {:.2e} ({}) <= 1e-3, {secs:.1}s < 60s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 2

fn normalization_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let teacher_cfg = TeacherConfig::default();
    let bench = Benchmark::generate(&DatagenParams::profile("tiny").unwrap(), &teacher_cfg).unwrap();
    let teacher = &bench.teacher;
    let (mut att_err, mut unit_err, mut hull_violation) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..100u64 {
        // random spatial attention and convex hull
        let (h, w, c, l) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=12),
            rng.random_range(1..=10),
        );
        let scale = rng.random_range(0.1..50.0);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-scale..scale)).collect();
        let fmap = FeatureMap::new(h, w, Array2::from_vec(h * w, c, data).unwrap()).unwrap();
        let gw: Vec<f64> = (0..l * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let maps = spatial_attention(&fmap, &Array2::from_vec(l, c, gw).unwrap()).unwrap();
        for p in 0..h * w {
            let s: f64 = (0..l).map(|t| maps.maps.get(t, p)).sum();
            att_err = att_err.max((s - 1.0).abs());
        }
        let z = aggregate_tokens(&fmap, &maps).unwrap();
        for t in 0..l {
            for ch in 0..c {
                let col = (0..h * w).map(|p| fmap.data.get(p, ch));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                let v = z.get(t, ch);
                hull_violation = hull_violation.max(lo - v).max(v - hi);
            }
        }

        // teacher visual feature of a random grid
        let mut image = bench.dataset.gallery[i as usize % bench.dataset.gallery.len()].clone();
        for cell in image.grid.iter_mut() {
            *cell = rng.random_range(0..=bench.dataset.params.n_concepts as u8);
        }
        image.grid[0] = 1;
        let (v, _) = teacher.teacher_visual(&image).unwrap();
        unit_err = unit_err.max((norm(v.data()) - 1.0).abs());

        // composed query feature of a freshly initialized model
        let model = Model::init(
            TrainConfig {
                hidden_self: 16,
                hidden_cross: 16,
                mode: if i % 2 == 0 { Mode::Asymmetric } else { Mode::Symmetric },
                ..TrainConfig::toy()
            }
            .model_config(bench.dataset.params.n_concepts, teacher),
            teacher,
            i,
        )
        .unwrap();
        let triplet = &bench.dataset.triplets[i as usize % bench.dataset.triplets.len()];
        let reference = bench.dataset.query(&triplet.reference_id).unwrap();
        let q = compose_and_encode(reference, &triplet.modifier, &model, teacher).unwrap();
        unit_err = unit_err.max((norm(&q.vector) - 1.0).abs());
    }
    outcome(
        att_err <= 1e-6 && unit_err <= 1e-6 && hull_violation <= 1e-9,
        format!(
            "100 instances: attention sum err {att_err:.1e}, unit-norm err {unit_err:.1e} (<= 1e-6), hull violation {hull_violation:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn exact_loss_values() -> Outcome {
    // GCD, B = 2, orthonormal pairs, tau = 1: each row is softmax([1, 0]) at the diagonal.
    let eye = Array2::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    let batch = BatchPairs {
        image_features: eye.clone(),
        text_features: eye,
        tokens: Vec::new(),
        teacher_maps: Vec::new(),
    };
    let gcd = gcd_loss(&batch, 1.0).unwrap();
    let p_diag = 1f64.exp() / (1f64.exp() + 0f64.exp());
    let gcd_oracle = -p_diag.ln();

    let mut teacher = TeacherBundle::new(TeacherConfig::default(), 6).unwrap();
    teacher.match_bilinear = Array2::zeros(teacher.word_dim(), teacher.map_channels());
    let fmap = FeatureMap::new(2, 2, Array2::filled(4, teacher.map_channels(), 0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = BatchPairs {
        image_features: Array2::identity(4),
        text_features: Array2::identity(4),
        tokens: (0..4)
            .map(|_| {
                let d: Vec<f64> = (0..6 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Array2::from_vec(6, 16, d).unwrap()
            })
            .collect(),
        teacher_maps: vec![fmap; 4],
    };
    let lar = lar_loss(&batch, &teacher, NegativePolicy::Random, &mut rng).unwrap();
    let lar_oracle = -(0.5f64).ln();

    outcome(
        (gcd - gcd_oracle).abs() <= 1e-6 && (lar - lar_oracle).abs() <= 1e-6,
        format!("GCD {gcd:.9} vs {gcd_oracle:.9}, LAR {lar:.9} vs ln 2 {lar_oracle:.9} (1e-6)"),
    )
}

// ---------------------------------------------------------------- 4

/// Average precision from its definition, computed over the whole list.
fn ap_script(ranked: &[String], targets: &BTreeSet<String>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if targets.contains(id) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / k.min(targets.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut search_ok = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=256);
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=n + 10);
        let coarse = rng.random_bool(0.5);
        let draw = |r: &mut ChaCha8Rng| -> f64 {
            let x: f64 = r.random_range(-1.0..1.0);
            if coarse {
                (x * 2.0).round() / 2.0
            } else {
                x
            }
        };
        let vectors: Vec<f32> = (0..n * d).map(|_| draw(&mut rng) as f32).collect();
        let query: Vec<f64> = (0..d).map(|_| draw(&mut rng)).collect();
        let mut ids: Vec<String> = (0..n).map(|i| format!("img{i:04}")).collect();
        ids.shuffle(&mut rng);
        let index = GalleryIndex::new(ids.clone(), d, vectors.clone(), IndexMeta::default()).unwrap();
        let got = search_unchecked(&index, &query, k).unwrap();
        let mut all: Vec<(f64, &String)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let s = (0..d).map(|j| f64::from(vectors[i * d + j]) * query[j]).sum::<f64>();
                // +0.0 normalizes a negative zero, which ties with zero
                (s + 0.0, id)
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let want: Vec<String> = all.iter().take(k).map(|(_, id)| (*id).clone()).collect();
        if got.ids == want {
            search_ok += 1;
        }
    }

    let mut ap_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(5..=60);
        let mut pool: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
        pool.shuffle(&mut rng);
        let n_targets = rng.random_range(2..=6.min(n));
        let targets: Vec<String> = pool.choose_multiple(&mut rng, n_targets).cloned().collect();
        let k = *[5, 10, 25, 50].choose(&mut rng).unwrap();
        let ranked = RankedList {
            scores: vec![0.0; pool.len()],
            ids: pool.clone(),
            truncated: false,
        };
        let triplet = TripletRecord {
            reference_id: "r".into(),
            modifier: Vec::new(),
            target_ids: targets.clone(),
        };
        let got = map_at_k(&[ranked], &[triplet], k).unwrap();
        let oracle = ap_script(&pool, &targets.into_iter().collect(), k);
        ap_err = ap_err.max((got - oracle).abs());
    }

    let worked = |ranked: &[&str], targets: &[&str]| {
        let triplet = TripletRecord {
            reference_id: "r".into(),
            modifier: Vec::new(),
            target_ids: targets.iter().map(|s| s.to_string()).collect(),
        };
        let list = RankedList {
            ids: ranked.iter().map(|s| s.to_string()).collect(),
            scores: vec![0.0; ranked.len()],
            truncated: false,
        };
        map_at_k(&[list], &[triplet], 5).unwrap()
    };
    let ex1 = worked(&["a", "t", "b", "c", "d"], &["t"]);
    let ex2 = worked(&["t1", "a", "t2", "b", "c"], &["t1", "t2"]);
    let ex1_ok = (ex1 - 0.5).abs() <= 1e-12;
    let ex2_ok = (ex2 - (1.0 + 2.0 / 3.0) / 2.0).abs() <= 1e-12;

    outcome(
        search_ok == 50 && ap_err <= 1e-9 && ex1_ok && ex2_ok,
        format!(
            "search {search_ok}/50 exact, AP max err {ap_err:.1e} (1e-9), worked AP {ex1:.4} and {ex2:.4}"
        ),
    )
}

// ---------------------------------------------------------------- shared training runs

struct Variant {
    outcomes: Vec<TrialOutcome>,
    secs: f64,
}

impl Variant {
    fn metrics(&self) -> Vec<MetricSet> {
        self.outcomes.iter().map(|o| o.metrics.clone()).collect()
    }

    fn summary(&self) -> Summary {
        Summary::of(&self.metrics())
    }

    fn mean_r1(&self) -> f64 {
        self.summary().mean_of("recall@1")
    }

    fn mean_avg(&self) -> f64 {
        self.summary().mean_of("avg_recall")
    }

    fn per_seed_avg(&self) -> String {
        let v: Vec<String> = self
            .outcomes
            .iter()
            .map(|o| format!("{:.3}", o.metrics.average_recall()))
            .collect();
        v.join("/")
    }
}

fn toy() -> (DatagenParams, TeacherConfig) {
    let cfg = RunConfig::for_profile("toy").unwrap();
    (cfg.datagen, cfg.teacher)
}

fn run_variant(train: &TrainConfig) -> Variant {
    let (datagen, teacher) = toy();
    let started = Instant::now();
    let outcomes = run_seeds(&datagen, &teacher, train, &SEEDS).expect("training runs");
    Variant {
        outcomes,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn with_weights(gcd: f64, lar: f64) -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.loss.gcd_weight = gcd;
    c.loss.lar_weight = lar;
    c
}

// ---------------------------------------------------------------- 5

fn end_to_end(both: &Variant) -> Outcome {
    let (datagen, teacher) = toy();
    let started = Instant::now();
    let mut baseline_sets: BTreeMap<Baseline, Vec<MetricSet>> = BTreeMap::new();
    for seed in SEEDS {
        let bench = Benchmark::generate(&DatagenParams { seed, ..datagen.clone() }, &teacher).unwrap();
        for (b, m) in bench.baselines().unwrap() {
            baseline_sets.entry(b).or_default().push(m);
        }
    }
    let secs = both.secs + started.elapsed().as_secs_f64();
    let model_avg = both.mean_avg();
    let r1 = both.mean_r1();
    let mut beats = true;
    let mut parts = Vec::new();
    for (b, sets) in &baseline_sets {
        let avg = Summary::of(sets).mean_of("avg_recall");
        beats &= model_avg > avg;
        parts.push(format!("{} {avg:.3}", b.name()));
    }
    let p = &datagen;
    outcome(
        r1 >= 0.70 && beats && secs < 300.0,
        format!(
            "{} concepts, {}x{}, {} gallery, {} queries: R@1 {r1:.3} >= 0.70, avg recall {model_avg:.3} > [{}], {secs:.0}s < 300s",
            p.n_concepts, p.height, p.width, p.n_gallery, p.n_queries,
            parts.join(", ")
        ),
    )
}

fn loss_halves(both: &Variant) -> Outcome {
    let ratios: Vec<f64> = both
        .outcomes
        .iter()
        .map(|o| {
            let h = &o.checkpoint.history;
            h.last().unwrap().total / h[0].total
        })
        .collect();
    let text: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        ratios.iter().all(|&r| r < 0.5),
        format!("final/initial epoch loss {} < 0.5", text.join("/")),
    )
}

// ---------------------------------------------------------------- 6

fn loss_ablation(both: &Variant, gcd_only: &Variant, lar_only: &Variant) -> Outcome {
    let (b, g, l) = (both.mean_avg(), gcd_only.mean_avg(), lar_only.mean_avg());
    outcome(
        b >= g && b >= l,
        format!(
            "avg recall GCD+LAR {b:.4} ({}) vs GCD-only {g:.4} ({}) and LAR-only {l:.4} ({})",
            both.per_seed_avg(),
            gcd_only.per_seed_avg(),
            lar_only.per_seed_avg()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn token_length_sweep(both: &Variant) -> Outcome {
    let mut rows = Vec::new();
    for &l in &SWEEP {
        let summary = if l == TrainConfig::toy().tokens {
            both.summary()
        } else {
            run_variant(&TrainConfig {
                tokens: l,
                ..TrainConfig::toy()
            })
            .summary()
        };
        rows.push(SweepRow { tokens: l, summary });
    }
    for line in sweep_table(&rows).lines() {
        println!("    {line}");
    }
    let at = |l: usize| {
        rows.iter()
            .find(|r| r.tokens == l)
            .map(|r| r.summary.mean_of("avg_recall"))
            .unwrap()
    };
    let curve: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "L{} {:.3}±{:.3}",
                r.tokens,
                r.summary.mean_of("avg_recall"),
                r.summary.std.get("avg_recall").copied().unwrap_or(f64::NAN)
            )
        })
        .collect();
    outcome(
        at(6) >= at(1),
        format!("avg recall L6 {:.3} >= L1 {:.3}; {}", at(6), at(1), curve.join(", ")),
    )
}

// ---------------------------------------------------------------- 8

/// Expected Recall@K of a uniformly random ranking, averaged over triplets:
/// 1 - C(N - m, K) / C(N, K) for m targets among N items.
fn random_recall(n: usize, triplets: &[TripletRecord], k: usize) -> f64 {
    let miss = |m: usize| -> f64 {
        if k > n - m {
            return 0.0;
        }
        (0..k).map(|i| (n - m - i) as f64 / (n - i) as f64).product()
    };
    triplets.iter().map(|t| 1.0 - miss(t.target_ids.len())).sum::<f64>() / triplets.len() as f64
}

fn symmetric_parity(both: &Variant, sym: &Variant) -> Outcome {
    let (datagen, teacher) = toy();
    let mut random: BTreeMap<usize, f64> = BTreeMap::new();
    for seed in SEEDS {
        let bench = Benchmark::generate(&DatagenParams { seed, ..datagen.clone() }, &teacher).unwrap();
        for k in [1, 5, 10] {
            *random.entry(k).or_default() +=
                random_recall(bench.index.len(), &bench.dataset.triplets, k) / SEEDS.len() as f64;
        }
    }
    let (a, s) = (both.summary(), sym.summary());
    // "far above" means at least three times the random-ranking recall at every K
    let far = [1, 5, 10].iter().all(|k| {
        let key = format!("recall@{k}");
        a.mean_of(&key) >= 3.0 * random[k] && s.mean_of(&key) >= 3.0 * random[k]
    });
    let gap = (a.mean_of("recall@1") - s.mean_of("recall@1")).abs();
    outcome(
        gap <= 0.15 && far,
        format!(
            "R@1 asym {:.3} sym {:.3}, gap {gap:.3} <= 0.15; random R@1/5/10 {:.3}/{:.3}/{:.3}, sym R@10 {:.3}",
            a.mean_of("recall@1"),
            s.mean_of("recall@1"),
            random[&1],
            random[&5],
            random[&10],
            s.mean_of("recall@10")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism_and_formats() -> Outcome {
    let artifacts = || {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("seed".into(), "11".into()),
                ("train.epochs".into(), "3".into()),
                ("train.warmup_epochs".into(), "1".into()),
            ],
        )
        .unwrap();
        let bench = Benchmark::generate(&cfg.datagen, &cfg.teacher).unwrap();
        let mut ckpt = bench.train(&cfg.train).unwrap();
        ckpt.config_echo = cfg.to_toml().unwrap();
        let metrics = bench.evaluate(&ckpt).unwrap();
        let mut doc = MetricsDocument {
            seed: cfg.seed,
            config: Some(cfg.to_value().unwrap()),
            ..MetricsDocument::default()
        };
        doc.insert_all(metrics.entries("model."));
        let dir = tempfile::tempdir().unwrap();
        let (cp, ip, mp) = (
            dir.path().join("checkpoint.json"),
            dir.path().join("gallery.isae"),
            dir.path().join("metrics.toml"),
        );
        ckpt.save(&cp).unwrap();
        bench.index.save(&ip).unwrap();
        std::fs::write(&mp, doc.to_toml().unwrap()).unwrap();
        let read = |p: &std::path::Path| std::fs::read(p).unwrap();
        (read(&cp), read(&ip), read(&mp))
    };
    let a = artifacts();
    let b = artifacts();
    let identical = a == b;
    let back = GalleryIndex::from_bytes(&a.1).unwrap();
    let round_trip = back.to_bytes().unwrap() == a.1;
    outcome(
        identical && round_trip,
        format!(
            "checkpoint/embedding/metrics bit-identical: {identical}; embedding round trip byte-exact: {round_trip} ({} bytes)",
            a.1.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, o: Outcome| {
        println!(
            "criterion {name}: {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name.to_string(), o));
    };

    record("1 gradient correctness", gradient_correctness());
    record("2 normalization invariants", normalization_invariants());
    record("3 exact loss values", exact_loss_values());
    record("4 metric oracles", metric_oracles());

    let both = run_variant(&TrainConfig::toy());
    record("5 end-to-end composition", end_to_end(&both));
    record("5b training loss halves", loss_halves(&both));
    let gcd_only = run_variant(&with_weights(1.0, 0.0));
    let lar_only = run_variant(&with_weights(0.0, 1.0));
    record("6 loss ablation", loss_ablation(&both, &gcd_only, &lar_only));
    record("7 token-length sweep", token_length_sweep(&both));
    let sym = run_variant(&TrainConfig {
        mode: Mode::Symmetric,
        ..TrainConfig::toy()
    });
    record("8 symmetric parity", symmetric_parity(&both, &sym));
    record("9 determinism and formats", determinism_and_formats());

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| n.as_str())
        .collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
