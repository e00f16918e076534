//! Planted-semantics composed-retrieval benchmark.
//!
//! Images are small grids of concept patches on background. Every image's
//! meaning is its concept set, so the correct answer to "reference + edit"
//! is computable by set algebra over the gallery.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::vocab::{self, Vocabulary};

pub const MAX_CONCEPTS_PER_IMAGE: usize = 4;
const MAX_PATCH_SIDE: usize = 3;

/// A grid of cells, `0` for background and `k + 1` for concept `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub grid: Vec<u8>,
}

impl SyntheticImage {
    pub fn cell(&self, h: usize, w: usize) -> Option<usize> {
        match self.grid[h * self.width + w] {
            0 => None,
            k => Some(usize::from(k) - 1),
        }
    }

    /// Distinct foreground concepts, ascending.
    pub fn concepts(&self) -> Vec<usize> {
        self.concept_set().into_iter().collect()
    }

    pub fn concept_set(&self) -> BTreeSet<usize> {
        self.grid
            .iter()
            .filter(|&&c| c != 0)
            .map(|&c| usize::from(c) - 1)
            .collect()
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut grid = self.grid.clone();
        for row in grid.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            grid,
        }
    }
}

/// One of the three edit templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    Add(usize),
    Remove(usize),
    Replace { from: usize, to: usize },
}

impl Edit {
    pub fn tokens(&self) -> Vec<String> {
        match *self {
            Edit::Add(z) => vec![vocab::ADD.into(), vocab::concept_name(z)],
            Edit::Remove(x) => vec![vocab::REMOVE.into(), vocab::concept_name(x)],
            Edit::Replace { from, to } => vec![
                vocab::REPLACE.into(),
                vocab::concept_name(from),
                vocab::WITH.into(),
                vocab::concept_name(to),
            ],
        }
    }

    pub fn parse(tokens: &[String], vocab: &Vocabulary) -> Result<Self> {
        let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
        match words.as_slice() {
            [vocab::ADD, z] => Ok(Edit::Add(vocab.concept_id(z)?)),
            [vocab::REMOVE, x] => Ok(Edit::Remove(vocab.concept_id(x)?)),
            [vocab::REPLACE, x, vocab::WITH, y] => Ok(Edit::Replace {
                from: vocab.concept_id(x)?,
                to: vocab.concept_id(y)?,
            }),
            _ => Err(Error::Format(format!(
                "modifier `{}` matches no edit template",
                words.join(" ")
            ))),
        }
    }

    /// Applies the edit, rejecting no-ops and edits that leave no concept.
    pub fn apply(&self, set: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
        let mut out = set.clone();
        match *self {
            Edit::Add(z) => {
                if !out.insert(z) {
                    return Err(Error::InvalidEdit(format!("concept {z} already present")));
                }
            }
            Edit::Remove(x) => {
                if !out.remove(&x) {
                    return Err(Error::InvalidEdit(format!("concept {x} not present")));
                }
            }
            Edit::Replace { from, to } => {
                if from == to || !out.remove(&from) || !out.insert(to) {
                    return Err(Error::InvalidEdit(format!(
                        "cannot replace {from} with {to}"
                    )));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidEdit("edit leaves no concept".into()));
        }
        if out.len() > MAX_CONCEPTS_PER_IMAGE {
            return Err(Error::InvalidEdit("edit exceeds the concept cap".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub reference_id: String,
    pub modifier: Vec<String>,
    /// Gallery ids whose concept set equals the edited set, ascending.
    pub target_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenParams {
    pub n_concepts: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_gallery: usize,
    pub n_queries: usize,
    pub max_duplicates: usize,
    pub seed: u64,
}

impl Default for DatagenParams {
    fn default() -> Self {
        Self {
            n_concepts: 6,
            height: 8,
            width: 8,
            n_train: 2000,
            n_gallery: 128,
            n_queries: 500,
            max_duplicates: 3,
            seed: 0,
        }
    }
}

impl DatagenParams {
    /// Named presets: `default` (full desk-scale benchmark), `toy` (the
    /// reference benchmark for quick runs) and `tiny` (unit tests).
    pub fn profile(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "default" => Ok(base),
            "toy" => Ok(Self {
                n_train: 768,
                ..base
            }),
            "tiny" => Ok(Self {
                n_concepts: 4,
                height: 6,
                width: 6,
                n_train: 64,
                n_gallery: 32,
                n_queries: 24,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected default, toy or tiny)"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_concepts < 4 {
            return Err(Error::Config("n_concepts must be at least 4".into()));
        }
        if self.n_concepts > 254 {
            return Err(Error::Config("n_concepts must fit a grid cell".into()));
        }
        let patch_cells = MAX_CONCEPTS_PER_IMAGE * MAX_PATCH_SIDE * MAX_PATCH_SIDE;
        if self.height < MAX_PATCH_SIDE
            || self.width < MAX_PATCH_SIDE
            || self.height * self.width <= patch_cells / 2
        {
            return Err(Error::Config(format!(
                "{}x{} grid is too small for {MAX_CONCEPTS_PER_IMAGE} concept patches",
                self.height, self.width
            )));
        }
        if self.max_duplicates == 0 {
            return Err(Error::Config("max_duplicates must be positive".into()));
        }
        let distinct_sets: usize = (1..=MAX_CONCEPTS_PER_IMAGE)
            .map(|k| binomial(self.n_concepts, k))
            .sum();
        if self.n_gallery > distinct_sets * self.max_duplicates {
            return Err(Error::Config(format!(
                "gallery of {} exceeds {distinct_sets} concept sets x {} duplicates",
                self.n_gallery, self.max_duplicates
            )));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DatagenParams,
    pub train: Vec<SyntheticImage>,
    pub gallery: Vec<SyntheticImage>,
    /// Reference images of the triplets (disjoint from the gallery).
    pub queries: Vec<SyntheticImage>,
    pub triplets: Vec<TripletRecord>,
}

impl Dataset {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.params.n_concepts)
    }

    pub fn find_image(&self, id: &str) -> Result<&SyntheticImage> {
        self.train
            .iter()
            .chain(&self.gallery)
            .chain(&self.queries)
            .find(|im| im.id == id)
            .ok_or_else(|| Error::Lookup(format!("no image with id `{id}`")))
    }

    pub fn query(&self, id: &str) -> Result<&SyntheticImage> {
        self.queries
            .iter()
            .find(|im| im.id == id)
            .ok_or_else(|| Error::Lookup(format!("no reference image `{id}`")))
    }
}

fn random_image(
    id: String,
    params: &DatagenParams,
    n_objects: usize,
    rng: &mut impl Rng,
) -> SyntheticImage {
    let all: Vec<usize> = (0..params.n_concepts).collect();
    let chosen: Vec<usize> = all.choose_multiple(rng, n_objects).copied().collect();
    loop {
        if let Some(grid) = place_patches(&chosen, params.height, params.width, rng) {
            return SyntheticImage {
                id,
                height: params.height,
                width: params.width,
                grid,
            };
        }
    }
}

/// Places one non-overlapping rectangular patch per concept.
fn place_patches(
    concepts: &[usize],
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Option<Vec<u8>> {
    let mut grid = vec![0u8; height * width];
    for &c in concepts {
        let mut placed = false;
        for _ in 0..100 {
            let ph = rng.random_range(1..=MAX_PATCH_SIDE);
            let pw = rng.random_range(1..=MAX_PATCH_SIDE);
            let top = rng.random_range(0..=height - ph);
            let left = rng.random_range(0..=width - pw);
            let free = (top..top + ph)
                .all(|h| (left..left + pw).all(|w| grid[h * width + w] == 0));
            if free {
                for h in top..top + ph {
                    for w in left..left + pw {
                        grid[h * width + w] = (c + 1) as u8;
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    grid.contains(&0).then_some(grid)
}

fn draw_object_count(params: &DatagenParams, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=MAX_CONCEPTS_PER_IMAGE.min(params.n_concepts))
}

/// Gallery ids whose concept set equals `reference` edited by `modifier`.
pub fn oracle_targets(
    reference: &SyntheticImage,
    modifier: &[String],
    gallery: &[SyntheticImage],
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let edit = Edit::parse(modifier, vocab)?;
    let edited = edit.apply(&reference.concept_set())?;
    let mut ids: Vec<String> = gallery
        .iter()
        .filter(|g| g.id != reference.id && g.concept_set() == edited)
        .map(|g| g.id.clone())
        .collect();
    ids.sort();
    Ok(ids)
}

fn feasible_edits(set: &BTreeSet<usize>, n_concepts: usize) -> Vec<Edit> {
    let absent: Vec<usize> = (0..n_concepts).filter(|c| !set.contains(c)).collect();
    let mut edits = Vec::new();
    if set.len() < MAX_CONCEPTS_PER_IMAGE {
        edits.extend(absent.iter().map(|&z| Edit::Add(z)));
    }
    if set.len() >= 2 {
        edits.extend(set.iter().map(|&x| Edit::Remove(x)));
    }
    for &x in set {
        edits.extend(absent.iter().map(|&y| Edit::Replace { from: x, to: y }));
    }
    edits
}

const TRIPLET_RETRIES: usize = 1000;

pub fn gen_dataset(params: &DatagenParams) -> Result<Dataset> {
    params.validate()?;
    let vocab = Vocabulary::new(params.n_concepts);
    let mut rng = stream(params.seed, Stream::Data);

    let train = (0..params.n_train)
        .map(|i| {
            let k = draw_object_count(params, &mut rng);
            random_image(format!("train-{i:06}"), params, k, &mut rng)
        })
        .collect();

    let mut gallery = Vec::with_capacity(params.n_gallery);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut attempts = 0usize;
    while gallery.len() < params.n_gallery {
        attempts += 1;
        if attempts > 10_000 * params.n_gallery.max(1) {
            return Err(Error::Generation("gallery quota could not be filled".into()));
        }
        let k = draw_object_count(params, &mut rng);
        let image = random_image(format!("gallery-{:06}", gallery.len()), params, k, &mut rng);
        let count = counts.entry(image.concepts()).or_default();
        if *count < params.max_duplicates {
            *count += 1;
            gallery.push(image);
        }
    }

    let mut queries = Vec::with_capacity(params.n_queries);
    let mut triplets = Vec::with_capacity(params.n_queries);
    for q in 0..params.n_queries {
        let id = format!("query-{q:06}");
        let mut done = false;
        for _ in 0..TRIPLET_RETRIES {
            let k = draw_object_count(params, &mut rng);
            let reference = random_image(id.clone(), params, k, &mut rng);
            let mut edits = feasible_edits(&reference.concept_set(), params.n_concepts);
            edits.shuffle(&mut rng);
            let Some(edit) = edits.first() else { continue };
            let modifier = edit.tokens();
            let targets = oracle_targets(&reference, &modifier, &gallery, &vocab)?;
            if targets.is_empty() {
                continue;
            }
            triplets.push(TripletRecord {
                reference_id: id.clone(),
                modifier,
                target_ids: targets,
            });
            queries.push(reference);
            done = true;
            break;
        }
        if !done {
            return Err(Error::Generation(format!(
                "no realizable edit for query {q} after {TRIPLET_RETRIES} attempts"
            )));
        }
    }

    Ok(Dataset {
        params: params.clone(),
        train,
        gallery,
        queries,
        triplets,
    })
}
