//! Python bindings. Embeddings are passed as lists of rows, images as flat
//! row-major HWC lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

use cmreid::dataset::{generate_synthetic, load_manifest, DatasetManifest, SyntheticSpec};
use cmreid::evaluator::{compute_cmc, compute_map, rank_gallery, EvalProtocol, EvalSource};
use cmreid::losses::{
    pairwise_distances, ranking_objective, ranking_term, DistanceMatrix, EmbeddingSet, LossTerms, MarginConfig,
    RankingTerm,
};
use cmreid::sampler::BatchSampler;
use cmreid::spectral::{self, Image, PixelRange};
use cmreid::trainer::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: cmreid::Error) -> PyErr {
    match e {
        cmreid::Error::Io { .. } | cmreid::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a snake_case enum name such as `"all_triplets"`.
fn parse_name<T: DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(json_err)
}

fn embedding_set(rows: &[Vec<f64>], labels: Vec<usize>) -> PyResult<EmbeddingSet> {
    EmbeddingSet::from_rows(rows, labels).map_err(err)
}

type Rows = Vec<Vec<f64>>;

fn unflatten(flat: &[f64], cols: usize) -> Rows {
    if cols == 0 {
        return Vec::new();
    }
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Grayscale-spectrum conversion of an RGB image given as a flat HWC list.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, three_channel = false))]
fn to_grayscale(pixels: Vec<f64>, height: usize, width: usize, three_channel: bool) -> PyResult<Vec<f64>> {
    let img = Image::new(height, width, 3, PixelRange::Byte, pixels).map_err(err)?;
    let out = if three_channel {
        spectral::grayscale_three_channel(&img)
    } else {
        spectral::to_grayscale(&img)
    };
    Ok(out.map_err(err)?.into_data())
}

#[pyfunction]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    spectral::luma(r, g, b)
}

/// Euclidean distance matrix between two lists of embeddings.
#[pyfunction]
fn distances(a: Rows, b: Rows) -> PyResult<Rows> {
    let a = embedding_set(&a, vec![0; a.len()])?;
    let b = embedding_set(&b, vec![0; b.len()])?;
    let d = pairwise_distances(&a, &b).map_err(err)?;
    Ok(unflatten(d.values(), d.cols()))
}

/// One ranking term (`"cross"`, `"intra"` or `"inter"`) with its gradients.
/// Returns `(value, grad_gray, grad_infrared)`.
#[pyfunction]
#[pyo3(signature = (term, gray, gray_labels, infrared, infrared_labels, margin, variant = "hard", reduction = "sum"))]
#[allow(clippy::too_many_arguments)]
fn ranking_loss(
    term: &str,
    gray: Vec<Vec<f64>>,
    gray_labels: Vec<usize>,
    infrared: Vec<Vec<f64>>,
    infrared_labels: Vec<usize>,
    margin: f64,
    variant: &str,
    reduction: &str,
) -> PyResult<(f64, Rows, Rows)> {
    let term: RankingTerm = parse_name(term)?;
    let g = embedding_set(&gray, gray_labels)?;
    let t = embedding_set(&infrared, infrared_labels)?;
    let out = ranking_term(term, &g, &t, margin, parse_name(variant)?, parse_name(reduction)?).map_err(err)?;
    Ok((
        out.value,
        unflatten(&out.grad_gray, g.dim()),
        unflatten(&out.grad_infrared, t.dim()),
    ))
}

/// Weighted ranking objective. `margins` is a JSON object with any of the
/// margin config fields; `terms` uses the `id+cross+intra+inter` syntax.
/// Returns `(cross, intra, inter, combined)`.
#[pyfunction]
#[pyo3(signature = (gray, gray_labels, infrared, infrared_labels, margins = "{}", terms = "id+cross+intra+inter"))]
fn ranking_losses(
    gray: Vec<Vec<f64>>,
    gray_labels: Vec<usize>,
    infrared: Vec<Vec<f64>>,
    infrared_labels: Vec<usize>,
    margins: &str,
    terms: &str,
) -> PyResult<(f64, f64, f64, f64)> {
    let config: MarginConfig = serde_json::from_str(margins).map_err(json_err)?;
    let g = embedding_set(&gray, gray_labels)?;
    let t = embedding_set(&infrared, infrared_labels)?;
    let out = ranking_objective(&g, &t, &config, LossTerms::parse(terms).map_err(err)?).map_err(err)?;
    Ok((out.cross, out.intra, out.inter, out.combined.value))
}

/// CMC curve (ranks 1..=max_rank) and mAP from a query x gallery distance matrix.
#[pyfunction]
#[pyo3(signature = (distances, query_labels, gallery_labels, max_rank = 20))]
fn retrieval_metrics(
    distances: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    gallery_labels: Vec<usize>,
    max_rank: usize,
) -> PyResult<(Vec<f64>, f64)> {
    let rows = distances.len();
    let cols = distances.first().map_or(0, Vec::len);
    let dm = DistanceMatrix::from_values(distances.concat(), rows, cols).map_err(err)?;
    let ranked = rank_gallery(&dm);
    let cmc = compute_cmc(&ranked, &query_labels, &gallery_labels, max_rank.min(cols)).map_err(err)?;
    let map = compute_map(&ranked, &query_labels, &gallery_labels).map_err(err)?;
    Ok((cmc, map))
}

/// Default small training configuration as JSON.
#[pyfunction]
fn toy_config() -> PyResult<String> {
    serde_json::to_string_pretty(&TrainConfig::toy()).map_err(json_err)
}

#[pyclass(name = "Dataset", module = "cmreid_py")]
struct PyDataset {
    inner: DatasetManifest,
}

#[pymethods]
impl PyDataset {
    /// Procedural two-modality dataset held in memory.
    #[staticmethod]
    #[pyo3(signature = (identities = 8, images_per_modality = 8, test_identities = 0, seed = 7))]
    fn synthetic(identities: usize, images_per_modality: usize, test_identities: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_identities: identities,
            images_per_identity_per_modality: images_per_modality,
            num_test_identities: test_identities,
            seed,
            ..SyntheticSpec::default()
        };
        Ok(Self {
            inner: generate_synthetic(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_manifest(path).map_err(err)?,
        })
    }

    /// Writes PNGs and `manifest.csv` under `dir`.
    fn write(&self, dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.write_to_disk(dir).map_err(err)?,
        })
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.inner.num_identities()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(identity, modality, camera, split)` of one record.
    fn record(&self, index: usize) -> PyResult<(usize, String, u32, String)> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("record {index} out of range")));
        }
        let r = self.inner.record(index);
        Ok((
            r.identity,
            r.modality.as_str().to_string(),
            r.camera,
            r.split.as_str().to_string(),
        ))
    }

    /// One batch of `identities` train identities with `per_identity` images
    /// per modality: `(visible, infrared, labels)` record indices.
    #[pyo3(signature = (identities, per_identity, seed = 0))]
    fn sample_batch(
        &self,
        identities: usize,
        per_identity: usize,
        seed: u64,
    ) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let sampler = BatchSampler::new(identities, per_identity).map_err(err)?;
        let batch = sampler
            .sample(&self.inner, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(err)?;
        Ok((batch.visible, batch.infrared, batch.labels))
    }
}

#[pyclass(name = "Trainer", module = "cmreid_py", unsendable)]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON document; missing fields take their defaults.
    /// Without one the toy configuration is used.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let config = match config {
            Some(text) => serde_json::from_str(text).map_err(json_err)?,
            None => TrainConfig::toy(),
        };
        Ok(Self {
            inner: trainer::Trainer::new(config).map_err(err)?,
        })
    }

    #[staticmethod]
    fn resume(checkpoint: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::Trainer::resume(checkpoint).map_err(err)?,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn config(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(json_err)
    }

    /// Trains one epoch and returns its record as JSON.
    fn run_epoch(&mut self) -> PyResult<String> {
        let record = self.inner.run_epoch().map_err(err)?;
        serde_json::to_string(&record).map_err(json_err)
    }

    fn run(&mut self) -> PyResult<()> {
        self.inner.run().map_err(err)
    }

    /// Per-epoch records as a JSON array.
    fn history(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.history()).map_err(json_err)
    }

    fn save_checkpoint(&self, dir: &str) -> PyResult<()> {
        self.inner.save_checkpoint(dir).map_err(err)
    }

    /// `(direction, rank1, mAP)` for both query directions.
    #[pyo3(signature = (source = "test"))]
    fn evaluate(&self, source: &str) -> PyResult<Vec<(String, f64, f64)>> {
        let source: EvalSource = parse_name(source)?;
        let reports = trainer::evaluate_both(self.inner.model(), self.inner.manifest(), source).map_err(err)?;
        Ok(reports
            .iter()
            .map(|r| (r.direction.clone(), r.rank1(), r.map))
            .collect())
    }

    /// Full report for one protocol given as JSON; returns the report as JSON.
    fn evaluate_protocol(&self, protocol: &str) -> PyResult<String> {
        let protocol: EvalProtocol = serde_json::from_str(protocol).map_err(json_err)?;
        let report = cmreid::evaluator::evaluate(self.inner.model(), self.inner.manifest(), &protocol).map_err(err)?;
        serde_json::to_string(&report).map_err(json_err)
    }
}

#[pymodule]
fn cmreid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(to_grayscale, m)?)?;
    m.add_function(wrap_pyfunction!(luma, m)?)?;
    m.add_function(wrap_pyfunction!(distances, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_losses, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
