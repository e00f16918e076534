//! Multi-seed trials, loss ablations and the token-length sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_dataset, DatagenParams, Dataset};
use crate::encoders::{TeacherBundle, TeacherConfig};
use crate::error::{Error, Result};
use crate::retrieval::{
    build_index, evaluate_baselines, evaluate_model, Baseline, GalleryIndex, IndexMeta, MetricSet,
};
use crate::trainer::{train, Checkpoint, TrainConfig};

/// A dataset with its frozen teacher and gallery index.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub dataset: Dataset,
    pub teacher: TeacherBundle,
    pub index: GalleryIndex,
}

impl Benchmark {
    pub fn generate(params: &DatagenParams, teacher: &TeacherConfig) -> Result<Self> {
        let dataset = gen_dataset(params)?;
        let teacher = TeacherBundle::new(teacher.clone(), params.n_concepts)?;
        let index = build_index(
            &dataset.gallery,
            &teacher,
            IndexMeta {
                seed: params.seed,
                ..IndexMeta::default()
            },
        )?;
        Ok(Self {
            dataset,
            teacher,
            index,
        })
    }

    pub fn train(&self, config: &TrainConfig) -> Result<Checkpoint> {
        train(
            &self.dataset.train,
            self.dataset.params.n_concepts,
            &self.teacher,
            config,
        )
    }

    pub fn evaluate(&self, ckpt: &Checkpoint) -> Result<MetricSet> {
        ckpt.require_teacher(&self.teacher)?;
        evaluate_model(&self.dataset, &self.index, &ckpt.model(), &self.teacher)
    }

    pub fn baselines(&self) -> Result<BTreeMap<Baseline, MetricSet>> {
        evaluate_baselines(&self.dataset, &self.index, &self.teacher)
    }
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub metrics: MetricSet,
}

/// Trains and evaluates once per seed. Seed `s` drives both the dataset
/// and the training streams.
pub fn run_seeds(
    datagen: &DatagenParams,
    teacher: &TeacherConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<TrialOutcome>> {
    seeds
        .iter()
        .map(|&seed| {
            let bench = Benchmark::generate(&DatagenParams { seed, ..datagen.clone() }, teacher)?;
            let config = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let checkpoint = bench.train(&config)?;
            let metrics = bench.evaluate(&checkpoint)?;
            Ok(TrialOutcome {
                seed,
                checkpoint,
                metrics,
            })
        })
        .collect()
}

/// Per-metric mean and sample standard deviation over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl Summary {
    pub fn of(sets: &[MetricSet]) -> Self {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for set in sets {
            for (k, v) in set.entries("") {
                columns.entry(k).or_default().push(v);
            }
            columns
                .entry("avg_recall".into())
                .or_default()
                .push(set.average_recall());
        }
        let mut out = Self {
            n: sets.len(),
            ..Self::default()
        };
        for (k, xs) in columns {
            let (m, s) = mean_std(&xs);
            out.mean.insert(k.clone(), m);
            out.std.insert(k, s);
        }
        out
    }

    pub fn mean_of(&self, key: &str) -> f64 {
        self.mean.get(key).copied().unwrap_or(f64::NAN)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tokens: usize,
    pub summary: Summary,
}

/// Trains at each token length over all seeds.
pub fn token_length_sweep(
    datagen: &DatagenParams,
    teacher: &TeacherConfig,
    train_config: &TrainConfig,
    lengths: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if lengths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one length and one seed".into()));
    }
    let benches = seeds
        .iter()
        .map(|&seed| Benchmark::generate(&DatagenParams { seed, ..datagen.clone() }, teacher))
        .collect::<Result<Vec<_>>>()?;
    lengths
        .iter()
        .map(|&tokens| {
            let sets = benches
                .iter()
                .zip(seeds)
                .map(|(bench, &seed)| {
                    let config = TrainConfig {
                        seed,
                        tokens,
                        ..train_config.clone()
                    };
                    bench.evaluate(&bench.train(&config)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                tokens,
                summary: Summary::of(&sets),
            })
        })
        .collect()
}

/// Sweep table with one `mean ± std` cell per metric.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let keys: Vec<&String> = first.summary.mean.keys().collect();
    let mut out = String::from("tokens");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.tokens.to_string());
        for k in &keys {
            out.push_str(&format!(
                ",{:.4} ± {:.4}",
                row.summary.mean_of(k),
                row.summary.std.get(*k).copied().unwrap_or(f64::NAN)
            ));
        }
        out.push('\n');
    }
    out
}

pub fn parse_lengths(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&l| l > 0)
                .ok_or_else(|| Error::Config(format!("bad token length `{s}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn lengths_parse() {
        assert_eq!(parse_lengths("1,2, 4").unwrap(), vec![1, 2, 4]);
        assert!(parse_lengths("1,0").is_err());
        assert!(parse_lengths("x").is_err());
    }
}
