//! Dataset files (JSON lines) and the metrics document (TOML).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::{DatagenParams, Dataset, Edit, SyntheticImage, TripletRecord};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Header {
        format_version: u32,
        params: DatagenParams,
        config: String,
    },
    Image {
        split: Split,
        #[serde(flatten)]
        image: SyntheticImage,
    },
    Triplet(TripletRecord),
}

/// One JSON object per line: a header carrying the generator parameters and
/// the config echo, then every image, then every triplet.
pub fn dataset_to_jsonl(dataset: &Dataset, config_echo: &str) -> Result<String> {
    let mut out = String::new();
    let mut push = |r: &Record| -> Result<()> {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
        Ok(())
    };
    push(&Record::Header {
        format_version: DATASET_VERSION,
        params: dataset.params.clone(),
        config: config_echo.to_string(),
    })?;
    for (split, images) in [
        (Split::Train, &dataset.train),
        (Split::Gallery, &dataset.gallery),
        (Split::Query, &dataset.queries),
    ] {
        for image in images {
            push(&Record::Image {
                split,
                image: image.clone(),
            })?;
        }
    }
    for t in &dataset.triplets {
        push(&Record::Triplet(t.clone()))?;
    }
    Ok(out)
}

/// Parses and validates a dataset file. Returns the dataset and the config
/// echo from its header.
pub fn dataset_from_jsonl(text: &str) -> Result<(Dataset, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse = |n: usize, line: &str| -> Result<Record> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
    };
    let (params, echo) = match lines.next() {
        Some((n, line)) => match parse(n, line)? {
            Record::Header {
                format_version,
                params,
                config,
            } => {
                if format_version != DATASET_VERSION {
                    return Err(Error::Format(format!(
                        "dataset version {format_version} is not supported"
                    )));
                }
                (params, config)
            }
            _ => return Err(Error::Format("dataset file must start with a header".into())),
        },
        None => return Err(Error::Format("empty dataset file".into())),
    };
    let mut ds = Dataset {
        params,
        train: Vec::new(),
        gallery: Vec::new(),
        queries: Vec::new(),
        triplets: Vec::new(),
    };
    for (n, line) in lines {
        match parse(n, line)? {
            Record::Header { .. } => {
                return Err(Error::Format(format!("line {}: repeated header", n + 1)))
            }
            Record::Image { split, image } => {
                check_image(&image, &ds.params)?;
                match split {
                    Split::Train => ds.train.push(image),
                    Split::Gallery => ds.gallery.push(image),
                    Split::Query => ds.queries.push(image),
                }
            }
            Record::Triplet(t) => ds.triplets.push(t),
        }
    }
    check_references(&ds)?;
    Ok((ds, echo))
}

fn check_image(image: &SyntheticImage, params: &DatagenParams) -> Result<()> {
    if image.height != params.height || image.width != params.width {
        return Err(Error::Format(format!(
            "image `{}` is {}x{}, expected {}x{}",
            image.id, image.height, image.width, params.height, params.width
        )));
    }
    if image.grid.len() != image.height * image.width {
        return Err(Error::Format(format!("image `{}` grid has wrong length", image.id)));
    }
    if let Some(&c) = image.grid.iter().find(|&&c| usize::from(c) > params.n_concepts) {
        return Err(Error::Format(format!("image `{}` has unknown concept {c}", image.id)));
    }
    Ok(())
}

fn check_references(ds: &Dataset) -> Result<()> {
    let mut seen = HashSet::new();
    for im in ds.train.iter().chain(&ds.gallery).chain(&ds.queries) {
        if !seen.insert(im.id.as_str()) {
            return Err(Error::Format(format!("duplicate image id `{}`", im.id)));
        }
    }
    let gallery: HashSet<&str> = ds.gallery.iter().map(|im| im.id.as_str()).collect();
    let vocab = ds.vocabulary();
    for t in &ds.triplets {
        ds.query(&t.reference_id)
            .map_err(|_| Error::Format(format!("unknown reference `{}`", t.reference_id)))?;
        Edit::parse(&t.modifier, &vocab)?;
        if t.target_ids.is_empty() {
            return Err(Error::Format(format!("triplet on `{}` has no targets", t.reference_id)));
        }
        if let Some(id) = t.target_ids.iter().find(|id| !gallery.contains(id.as_str())) {
            return Err(Error::Format(format!("target `{id}` is not in the gallery")));
        }
    }
    Ok(())
}

pub fn write_dataset(path: &Path, dataset: &Dataset, config_echo: &str) -> Result<()> {
    std::fs::write(path, dataset_to_jsonl(dataset, config_echo)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, String)> {
    dataset_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Metric name → value, with the resolved config echoed underneath.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsDocument {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub config: Option<Value>,
}

impl MetricsDocument {
    pub fn insert_all(&mut self, entries: impl IntoIterator<Item = (String, f64)>) {
        self.metrics.extend(entries);
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut doc = Table::new();
        doc.insert("seed".into(), Value::Integer(self.seed as i64));
        let metrics: Table = self
            .metrics
            .iter()
            .map(|(k, &v)| (k.clone(), Value::Float(v)))
            .collect();
        doc.insert("metrics".into(), Value::Table(metrics));
        if let Some(c) = &self.config {
            doc.insert("config".into(), c.clone());
        }
        toml::to_string(&doc).map_err(|e| Error::Format(format!("metrics document: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut doc: Table = text
            .parse()
            .map_err(|e| Error::Format(format!("metrics document: {e}")))?;
        let seed = doc
            .get("seed")
            .and_then(Value::as_integer)
            .ok_or_else(|| Error::Format("metrics document has no seed".into()))?;
        let metrics = match doc.remove("metrics") {
            Some(Value::Table(t)) => t
                .into_iter()
                .map(|(k, v)| {
                    let x = v
                        .as_float()
                        .or_else(|| v.as_integer().map(|i| i as f64))
                        .ok_or_else(|| Error::Format(format!("metric `{k}` is not a number")))?;
                    Ok((k, x))
                })
                .collect::<Result<_>>()?,
            _ => return Err(Error::Format("metrics document has no [metrics] table".into())),
        };
        Ok(Self {
            seed: seed as u64,
            metrics,
            config: doc.remove("config"),
        })
    }
}

/// Prefixes every line of `text` with `# `, for echoing a config into
/// plain-text artifacts.
pub fn comment_block(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    out
}
