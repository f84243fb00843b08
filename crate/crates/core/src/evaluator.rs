//! Cross-modality retrieval evaluation: CMC and mAP over query/gallery sets.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Modality, Split};
use crate::error::{Error, Result};
use crate::losses::{pairwise_distances, DistanceMatrix, EmbeddingSet};

/// Gallery indices of every query row, nearest first; ties keep gallery order.
pub fn rank_gallery(dist: &DistanceMatrix) -> Vec<Vec<usize>> {
    (0..dist.rows())
        .map(|q| {
            let row = dist.row(q);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect()
}

fn first_hit(ranked: &[usize], query_label: usize, gallery_labels: &[usize]) -> Option<usize> {
    ranked.iter().position(|&g| gallery_labels[g] == query_label)
}

/// `cmc[k-1]` is the fraction of queries whose first correct match is at rank `<= k`.
pub fn compute_cmc(
    ranked: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<Vec<f64>> {
    if ranked.len() != query_labels.len() {
        return Err(Error::Shape("one ranking per query expected".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Validation("no queries".into()));
    }
    let mut hits = vec![0usize; max_rank];
    for (q, order) in ranked.iter().enumerate() {
        let pos = first_hit(order, query_labels[q], gallery_labels)
            .ok_or_else(|| Error::Validation(format!("query {q} (label {}) has no gallery match", query_labels[q])))?;
        if pos < max_rank {
            hits[pos] += 1;
        }
    }
    let n = ranked.len() as f64;
    let mut acc = 0usize;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Mean over correct positions `r` of `(correct matches within top r) / r`.
pub fn average_precision(ranked: &[usize], query_label: usize, gallery_labels: &[usize]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in ranked.iter().enumerate() {
        if gallery_labels[g] == query_label {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

pub fn compute_map(ranked: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    if ranked.len() != query_labels.len() {
        return Err(Error::Shape("one ranking per query expected".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Validation("no queries".into()));
    }
    let mut total = 0.0;
    for (q, order) in ranked.iter().enumerate() {
        total += average_precision(order, query_labels[q], gallery_labels)
            .ok_or_else(|| Error::Validation(format!("query {q} (label {}) has no gallery match", query_labels[q])))?;
    }
    Ok(total / ranked.len() as f64)
}

/// Which records the protocol draws its query and gallery sets from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    /// Records tagged `query` or `gallery`, partitioned by modality.
    #[default]
    Test,
    /// Train records; measures how well the training set itself is separated.
    Train,
}

/// Feature used as the retrieval descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureView {
    /// Pooled backbone embedding.
    #[default]
    PreBn,
    /// Head embedding after common-space batch normalization.
    PostBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub query_modality: Modality,
    pub gallery_modality: Modality,
    pub source: EvalSource,
    /// Keep only gallery records from these cameras.
    pub gallery_cameras: Option<BTreeSet<u32>>,
    /// Drop gallery entries sharing identity and camera with the query.
    pub exclude_same_camera: bool,
    /// Gallery images kept per identity in each trial; `None` keeps all.
    pub gallery_shots: Option<usize>,
    pub num_trials: usize,
    pub seed: u64,
    pub max_rank: usize,
    pub feature: FeatureView,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self::infrared_to_visible()
    }
}

impl EvalProtocol {
    /// Grayscale-converted visible queries against an infrared gallery.
    pub fn visible_to_infrared() -> Self {
        Self {
            query_modality: Modality::Visible,
            gallery_modality: Modality::Infrared,
            source: EvalSource::Test,
            gallery_cameras: None,
            exclude_same_camera: false,
            gallery_shots: None,
            num_trials: 1,
            seed: 0,
            max_rank: 20,
            feature: FeatureView::PreBn,
        }
    }

    pub fn infrared_to_visible() -> Self {
        Self {
            query_modality: Modality::Infrared,
            gallery_modality: Modality::Visible,
            ..Self::visible_to_infrared()
        }
    }

    pub fn with_source(mut self, source: EvalSource) -> Self {
        self.source = source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_modality == self.gallery_modality {
            return Err(Error::Config("query and gallery modalities must differ".into()));
        }
        if self.num_trials == 0 || self.max_rank == 0 || self.gallery_shots == Some(0) {
            return Err(Error::Config("trials, max rank and shots must be at least 1".into()));
        }
        Ok(())
    }

    pub fn direction_label(&self) -> &'static str {
        match self.query_modality {
            Modality::Visible => "gray2ir",
            Modality::Infrared => "ir2gray",
        }
    }

    /// Record indices of the query and gallery sets before trial sampling.
    pub fn select(&self, manifest: &DatasetManifest) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let in_source = |split: Split| match self.source {
            EvalSource::Train => split == Split::Train,
            EvalSource::Test => split != Split::Train,
        };
        let query = manifest.indices_where(|r| in_source(r.split) && r.modality == self.query_modality);
        let gallery = manifest.indices_where(|r| {
            in_source(r.split)
                && r.modality == self.gallery_modality
                && self.gallery_cameras.as_ref().is_none_or(|c| c.contains(&r.camera))
        });
        if query.is_empty() {
            return Err(Error::Validation("empty query set".into()));
        }
        if gallery.is_empty() {
            return Err(Error::Validation("empty gallery set".into()));
        }
        Ok((query, gallery))
    }
}

/// Anything that maps manifest records to retrieval descriptors.
pub trait FeatureExtractor {
    fn extract(&self, manifest: &DatasetManifest, indices: &[usize], view: FeatureView) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Manifest index of the query record.
    pub query: usize,
    pub identity: usize,
    /// Manifest indices of the top `max_rank` gallery records.
    pub ranked: Vec<usize>,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: String,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries dropped because no gallery record shares their identity.
    pub skipped_queries: usize,
    pub per_query: Vec<QueryResult>,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn write_per_query_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "query,identity,average_precision,top1").map_err(|e| Error::io(path, e))?;
        for q in &self.per_query {
            let top = q.ranked.first().map_or(String::new(), |g| g.to_string());
            writeln!(file, "{},{},{},{}", q.query, q.identity, q.average_precision, top)
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

struct TrialResult {
    cmc: Vec<f64>,
    map: f64,
    per_query: Vec<QueryResult>,
    skipped: usize,
}

fn run_trial(
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
    query: &[usize],
    query_feats: &EmbeddingSet,
    gallery: &[usize],
    gallery_feats: &EmbeddingSet,
) -> Result<TrialResult> {
    let dist = pairwise_distances(query_feats, gallery_feats)?;
    let gallery_labels = gallery_feats.labels();
    let mut rankings = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (q, order) in rank_gallery(&dist).into_iter().enumerate() {
        let qr = manifest.record(query[q]);
        debug_assert_ne!(qr.modality, manifest.record(gallery[order[0]]).modality);
        let order: Vec<usize> = if protocol.exclude_same_camera {
            order
                .into_iter()
                .filter(|&g| {
                    let gr = manifest.record(gallery[g]);
                    !(gr.identity == qr.identity && gr.camera == qr.camera)
                })
                .collect()
        } else {
            order
        };
        if first_hit(&order, qr.identity, gallery_labels).is_none() {
            skipped += 1;
            continue;
        }
        rankings.push(order);
        kept.push(q);
    }
    if rankings.is_empty() {
        return Err(Error::Validation("no query has a matching gallery record".into()));
    }
    let labels: Vec<usize> = kept.iter().map(|&q| query_feats.labels()[q]).collect();
    let cmc = compute_cmc(&rankings, &labels, gallery_labels, protocol.max_rank)?;
    let map = compute_map(&rankings, &labels, gallery_labels)?;
    let per_query = kept
        .iter()
        .zip(&rankings)
        .map(|(&q, order)| QueryResult {
            query: query[q],
            identity: query_feats.labels()[q],
            ranked: order.iter().take(protocol.max_rank).map(|&g| gallery[g]).collect(),
            average_precision: average_precision(order, query_feats.labels()[q], gallery_labels)
                .expect("kept queries have a match"),
        })
        .collect();
    Ok(TrialResult {
        cmc,
        map,
        per_query,
        skipped,
    })
}

fn subsample_gallery(manifest: &DatasetManifest, gallery: &[usize], shots: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let ids: BTreeSet<usize> = gallery.iter().map(|&g| manifest.record(g).identity).collect();
    let mut picked = Vec::new();
    for id in ids {
        let pool: Vec<usize> = gallery
            .iter()
            .copied()
            .filter(|&g| manifest.record(g).identity == id)
            .collect();
        picked.extend(pool.choose_multiple(rng, shots.min(pool.len())).copied());
    }
    picked.sort_unstable();
    picked
}

fn embedding_set(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<EmbeddingSet> {
    EmbeddingSet::from_rows(&features, labels)
}

/// Runs the protocol; metrics are averaged over gallery trials and
/// per-query diagnostics come from the first trial.
pub fn evaluate(
    extractor: &dyn FeatureExtractor,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let (query, gallery_all) = protocol.select(manifest)?;
    let query_feats = extractor.extract(manifest, &query, protocol.feature)?;
    let gallery_feats_all = extractor.extract(manifest, &gallery_all, protocol.feature)?;
    let query_set = embedding_set(
        query_feats,
        query.iter().map(|&i| manifest.record(i).identity).collect(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut cmc_sum = vec![0.0; protocol.max_rank];
    let mut map_sum = 0.0;
    let mut first: Option<TrialResult> = None;
    let mut num_gallery = 0;
    for _ in 0..protocol.num_trials {
        let gallery = match protocol.gallery_shots {
            Some(shots) => subsample_gallery(manifest, &gallery_all, shots, &mut rng),
            None => gallery_all.clone(),
        };
        let feats: Vec<Vec<f64>> = gallery
            .iter()
            .map(|g| {
                let pos = gallery_all.binary_search(g).expect("subsample of gallery");
                gallery_feats_all[pos].clone()
            })
            .collect();
        let gallery_set = embedding_set(feats, gallery.iter().map(|&i| manifest.record(i).identity).collect())?;
        let trial = run_trial(manifest, protocol, &query, &query_set, &gallery, &gallery_set)?;
        for (a, b) in cmc_sum.iter_mut().zip(&trial.cmc) {
            *a += b;
        }
        map_sum += trial.map;
        num_gallery = gallery.len();
        if first.is_none() {
            first = Some(trial);
        }
    }
    let trials = protocol.num_trials as f64;
    let first = first.expect("at least one trial");
    Ok(EvalReport {
        direction: protocol.direction_label().to_string(),
        cmc: cmc_sum.into_iter().map(|c| c / trials).collect(),
        map: map_sum / trials,
        num_queries: query.len() - first.skipped,
        num_gallery,
        skipped_queries: first.skipped,
        per_query: first.per_query,
        protocol: protocol.clone(),
    })
}
