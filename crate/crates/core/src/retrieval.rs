//! Gallery index, composed queries, exhaustive search and ranking metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SyntheticImage, TripletRecord};
use crate::encoders::TeacherBundle;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::numerics::{l2_normalize, Array2};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ISAE";
pub const EMBEDDING_VERSION: u16 = 1;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const MAP_KS: [usize; 4] = [5, 10, 25, 50];

/// Provenance stored alongside the vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub seed: u64,
    pub teacher_fingerprint: String,
    /// Resolved run configuration, verbatim.
    pub config: String,
}

/// Teacher features of the gallery, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    pub meta: IndexMeta,
}

impl GalleryIndex {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>, meta: IndexMeta) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(dim_err(
                "gallery_index",
                format!("{} values for {} ids of width {dim}", vectors.len(), ids.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !id.is_ascii() || id.len() > usize::from(u16::MAX) {
                return Err(Error::Build(format!("id `{id}` is not short ASCII")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Build(format!("duplicate gallery id `{id}`")));
            }
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let count = u32::try_from(self.len())
            .map_err(|_| Error::Format("too many gallery records".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension too large".into()))?;
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in self.vector(i) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;
        w.write_all(b"META")?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::Format("missing ISAE magic".into()));
        }
        let version = cur.u16()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 16));
        let mut vectors = Vec::with_capacity((n * dim).min(1 << 20));
        for _ in 0..n {
            let len = usize::from(cur.u16()?);
            let raw = cur.take(len)?;
            if !raw.is_ascii() {
                return Err(Error::Format("non-ASCII gallery id".into()));
            }
            ids.push(String::from_utf8(raw.to_vec()).expect("ASCII is UTF-8"));
            for _ in 0..dim {
                let b = cur.take(4)?;
                vectors.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
        }
        let meta = if cur.pos == bytes.len() {
            IndexMeta::default()
        } else {
            if cur.take(4)? != b"META" {
                return Err(Error::Format("unexpected trailing bytes".into()));
            }
            let len = cur.u32()? as usize;
            let meta = serde_json::from_slice(cur.take(len)?)?;
            if cur.pos != bytes.len() {
                return Err(Error::Format("unexpected trailing bytes".into()));
            }
            meta
        };
        Self::new(ids, dim, vectors, meta).map_err(|e| match e {
            Error::Build(msg) => Error::Format(msg),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("embedding file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Teacher feature of every gallery image.
pub fn build_index(
    gallery: &[SyntheticImage],
    teacher: &TeacherBundle,
    meta: IndexMeta,
) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(Error::Build("gallery is empty".into()));
    }
    let dim = teacher.feature_dim();
    let mut ids = Vec::with_capacity(gallery.len());
    let mut vectors = Vec::with_capacity(gallery.len() * dim);
    for img in gallery {
        let (v, _) = teacher.teacher_visual(img)?;
        ids.push(img.id.clone());
        vectors.extend(v.data().iter().map(|&x| x as f32));
    }
    let meta = IndexMeta {
        teacher_fingerprint: teacher.fingerprint(),
        ..meta
    };
    GalleryIndex::new(ids, dim, vectors, meta)
}

/// Token rows `prompt ∥ U ∥ "that" ∥ modifier`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedQuery {
    pub rows: Array2,
    pub prompt_len: usize,
    pub token_len: usize,
    pub modifier_len: usize,
}

impl ComposedQuery {
    pub fn new(teacher: &TeacherBundle, tokens: &Array2, modifier: &[String]) -> Result<Self> {
        let prompt = teacher.prompt_rows();
        let modifier_rows = teacher.embed_edit_clause(modifier)?;
        let rows = Array2::vstack(&[&prompt, tokens, &teacher.connective_row(), &modifier_rows])?;
        Ok(Self {
            rows,
            prompt_len: prompt.rows(),
            token_len: tokens.rows(),
            modifier_len: modifier.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `prompt ∥ U`.
    pub fn subject(&self) -> Array2 {
        self.slice(0, self.prompt_len + self.token_len)
    }

    /// `"that" ∥ modifier`.
    pub fn clause(&self) -> Array2 {
        self.slice(self.prompt_len + self.token_len, self.len())
    }

    fn slice(&self, from: usize, to: usize) -> Array2 {
        let width = self.rows.cols();
        Array2::from_vec(
            to - from,
            width,
            self.rows.data()[from * width..to * width].to_vec(),
        )
        .expect("row range within query")
    }

    /// Teacher text feature of the whole query.
    pub fn encode(&self, teacher: &TeacherBundle) -> Result<Array2> {
        teacher.composed_text(&self.subject(), &self.clause())
    }
}

/// A unit query feature tagged with the teacher that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub vector: Vec<f64>,
    pub teacher_fingerprint: String,
}

impl QueryVector {
    pub fn from_feature(feature: &Array2, teacher: &TeacherBundle) -> Self {
        Self {
            vector: feature.data().to_vec(),
            teacher_fingerprint: teacher.fingerprint(),
        }
    }
}

pub fn compose_and_encode(
    reference: &SyntheticImage,
    modifier: &[String],
    model: &Model,
    teacher: &TeacherBundle,
) -> Result<QueryVector> {
    let (tokens, _) = model.encode_image(reference, teacher)?;
    let query = ComposedQuery::new(teacher, &tokens, modifier)?;
    let t = query.encode(teacher)?;
    Ok(QueryVector::from_feature(&t, teacher))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Set when fewer than the requested `K` results exist.
    pub truncated: bool,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Exact top-`k` by inner product; ties go to the smaller id.
pub fn search(index: &GalleryIndex, query: &QueryVector, k: usize) -> Result<RankedList> {
    if query.teacher_fingerprint != index.meta.teacher_fingerprint {
        return Err(Error::Config(format!(
            "query teacher {} does not match index teacher {}",
            query.teacher_fingerprint, index.meta.teacher_fingerprint
        )));
    }
    search_unchecked(index, &query.vector, k)
}

/// [`search`] without the teacher check.
pub fn search_unchecked(index: &GalleryIndex, query: &[f64], k: usize) -> Result<RankedList> {
    if query.len() != index.dim() {
        return Err(dim_err(
            "search",
            format!("query width {}, index width {}", query.len(), index.dim()),
        ));
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| {
            let s = index
                .vector(i)
                .iter()
                .zip(query)
                .map(|(&g, &q)| f64::from(g) * q)
                .sum::<f64>();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| index.ids[a.1].cmp(&index.ids[b.1]))
    });
    let truncated = k > index.len();
    scored.truncate(k.min(index.len()));
    Ok(RankedList {
        ids: scored.iter().map(|&(_, i)| index.ids[i].clone()).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
        truncated,
    })
}

/// 1 if any target is in the first `k` ids.
pub fn hit_at_k(ranked: &[String], targets: &[String], k: usize) -> f64 {
    let hit = ranked.iter().take(k).any(|id| targets.contains(id));
    f64::from(u8::from(hit))
}

/// `(1/min(k, |targets|)) Σ_{i≤k} precision@i · rel(i)`.
pub fn average_precision_at_k(ranked: &[String], targets: &[String], k: usize) -> f64 {
    let distinct: BTreeSet<&String> = targets.iter().collect();
    let norm = k.min(distinct.len());
    if norm == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if distinct.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / norm as f64
}

fn mean_over<F>(results: &[RankedList], triplets: &[TripletRecord], f: F) -> Result<f64>
where
    F: Fn(&[String], &[String]) -> f64,
{
    if results.len() != triplets.len() {
        return Err(dim_err(
            "metric",
            format!("{} result lists for {} triplets", results.len(), triplets.len()),
        ));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = results
        .iter()
        .zip(triplets)
        .map(|(r, t)| f(&r.ids, &t.target_ids))
        .sum();
    Ok(total / results.len() as f64)
}

pub fn recall_at_k(results: &[RankedList], triplets: &[TripletRecord], k: usize) -> Result<f64> {
    mean_over(results, triplets, |r, t| hit_at_k(r, t, k))
}

pub fn map_at_k(results: &[RankedList], triplets: &[TripletRecord], k: usize) -> Result<f64> {
    mean_over(results, triplets, |r, t| average_precision_at_k(r, t, k))
}

/// Recall@{1,5,10,50} and mAP@{5,10,25,50} of one method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub recall: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
}

impl MetricSet {
    pub fn compute(results: &[RankedList], triplets: &[TripletRecord]) -> Result<Self> {
        let mut m = Self::default();
        for k in RECALL_KS {
            m.recall.insert(k, recall_at_k(results, triplets, k)?);
        }
        for k in MAP_KS {
            m.map.insert(k, map_at_k(results, triplets, k)?);
        }
        Ok(m)
    }

    /// Mean of Recall@1, @5 and @10.
    pub fn average_recall(&self) -> f64 {
        [1, 5, 10].iter().map(|k| self.recall.get(k).copied().unwrap_or(0.0)).sum::<f64>() / 3.0
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .recall
            .iter()
            .map(|(k, v)| (format!("{prefix}recall@{k}"), *v))
            .collect();
        out.extend(self.map.iter().map(|(k, v)| (format!("{prefix}map@{k}"), *v)));
        out
    }
}

/// The three naive fusions of the teacher's own features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    ImageOnly,
    TextOnly,
    ImageText,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::ImageOnly, Baseline::TextOnly, Baseline::ImageText];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::ImageOnly => "image_only",
            Baseline::TextOnly => "text_only",
            Baseline::ImageText => "image_text",
        }
    }

    pub fn query(
        self,
        reference: &SyntheticImage,
        modifier: &[String],
        teacher: &TeacherBundle,
    ) -> Result<QueryVector> {
        let image = || teacher.teacher_visual(reference).map(|(v, _)| v);
        let text = || teacher.teacher_text(&teacher.embed_words(modifier)?);
        let feature = match self {
            Baseline::ImageOnly => image()?,
            Baseline::TextOnly => text()?,
            Baseline::ImageText => l2_normalize(&image()?.add(&text()?)?)?,
        };
        Ok(QueryVector::from_feature(&feature, teacher))
    }
}

fn rank_all(
    dataset: &Dataset,
    index: &GalleryIndex,
    k: usize,
    mut encode: impl FnMut(&SyntheticImage, &[String]) -> Result<QueryVector>,
) -> Result<Vec<RankedList>> {
    dataset
        .triplets
        .iter()
        .map(|t| {
            let reference = dataset.query(&t.reference_id)?;
            let q = encode(reference, &t.modifier)?;
            search(index, &q, k)
        })
        .collect()
}

fn depth(index: &GalleryIndex) -> usize {
    RECALL_KS.iter().chain(MAP_KS.iter()).copied().max().unwrap_or(1).min(index.len())
}

/// Metrics of a trained model over every triplet of `dataset`.
pub fn evaluate_model(
    dataset: &Dataset,
    index: &GalleryIndex,
    model: &Model,
    teacher: &TeacherBundle,
) -> Result<MetricSet> {
    let results = rank_all(dataset, index, depth(index), |img, m| {
        compose_and_encode(img, m, model, teacher)
    })?;
    MetricSet::compute(&results, &dataset.triplets)
}

pub fn evaluate_baselines(
    dataset: &Dataset,
    index: &GalleryIndex,
    teacher: &TeacherBundle,
) -> Result<BTreeMap<Baseline, MetricSet>> {
    Baseline::ALL
        .iter()
        .map(|&b| {
            let results = rank_all(dataset, index, depth(index), |img, m| b.query(img, m, teacher))?;
            Ok((b, MetricSet::compute(&results, &dataset.triplets)?))
        })
        .collect()
}
