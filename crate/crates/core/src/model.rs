//! Full re-identification network: dual-path extractor plus identity head.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{pool, DualPathExtractor, StagedExtractorConfig};
use crate::dataset::{DatasetManifest, Modality};
use crate::error::{Error, Result};
use crate::evaluator::{FeatureExtractor, FeatureView};
use crate::head::{BnMode, DlideHead, HeadConfig, HeadVariant};
use crate::nn::ParamStore;
use crate::spectral::{grayscale_three_channel, normalize_infrared, Image};

/// Per-channel normalization applied to `[0, 1]` intensities before the network.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// What the visible path is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibleInput {
    /// Grayscale-spectrum conversion expanded to three channels.
    #[default]
    Grayscale,
    /// Raw RGB (conventional RGB-infrared learning).
    Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: StagedExtractorConfig,
    pub head: HeadVariant,
    /// Width of the projection layer; defaults to the embedding dimension.
    pub projection_dim: Option<usize>,
    /// Network input `(height, width)`.
    pub input_size: (usize, usize),
    pub visible_input: VisibleInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: StagedExtractorConfig::tiny(),
            head: HeadVariant::DualLinearBn,
            projection_dim: None,
            input_size: (32, 16),
            visible_input: VisibleInput::Grayscale,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            backbone: StagedExtractorConfig::paper_scale(),
            input_size: (288, 144),
            ..Self::default()
        }
    }
}

/// Converts a record's pixels to the three-channel image the given path consumes.
pub fn prepare_input(image: &Image, modality: Modality, visible: VisibleInput) -> Result<Image> {
    match (modality, visible) {
        (Modality::Visible, VisibleInput::Grayscale) => grayscale_three_channel(image),
        (Modality::Visible, VisibleInput::Rgb) => Ok(image.clone()),
        (Modality::Infrared, _) => normalize_infrared(image),
    }
}

/// Stacks HWC images into a normalized `N x 3 x H x W` tensor.
pub fn images_to_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w || img.channels() != 3 {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} with {h}x{w}x3",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        let max = img.range().max_value();
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    let v = img.get(r, col, c) / max;
                    data.push(((v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]) as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

pub struct ReidModel {
    config: ModelConfig,
    num_classes: usize,
    store: ParamStore,
    backbone: DualPathExtractor,
    head: DlideHead,
}

impl std::fmt::Debug for ReidModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReidModel")
            .field("config", &self.config)
            .field("num_classes", &self.num_classes)
            .field("parameters", &self.store.len())
            .finish()
    }
}

/// Forward pass outputs for a paired training batch (gray rows first).
pub struct PairForward {
    pub pre_bn: Tensor,
    pub post_bn: Tensor,
    pub logits: Tensor,
}

impl ReidModel {
    pub fn new(config: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(Device::Cpu);
        let backbone = DualPathExtractor::new(config.backbone, &mut store, seed)?;
        let d = config.backbone.embedding_dim;
        let head = DlideHead::new(
            HeadConfig {
                variant: config.head,
                input_dim: d,
                projection_dim: config.projection_dim.unwrap_or(d),
                num_classes,
            },
            &mut store,
            seed.wrapping_add(1),
        )?;
        Ok(Self {
            config,
            num_classes,
            store,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &DualPathExtractor {
        &self.backbone
    }

    pub fn head(&self) -> &DlideHead {
        &self.head
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Training-mode pass over paired gray/infrared tensors.
    pub fn forward_pair(&self, gray: &Tensor, infrared: &Tensor, mode: BnMode) -> Result<PairForward> {
        let train = mode == BnMode::Train;
        let (g, t) = self.backbone.forward_pair(gray, infrared, train)?;
        let pre_bn = Tensor::cat(&[&pool(&g)?, &pool(&t)?], 0)?;
        let out = self.head.forward(&pre_bn, mode)?;
        Ok(PairForward {
            pre_bn,
            post_bn: out.post_bn,
            logits: out.logits,
        })
    }

    /// Eval-mode descriptors of a single-modality tensor batch.
    pub fn embed(&self, x: &Tensor, modality: Modality, view: FeatureView) -> Result<Tensor> {
        let pre_bn = pool(&self.backbone.forward_single(x, modality, false)?)?;
        match view {
            FeatureView::PreBn => Ok(pre_bn),
            FeatureView::PostBn => Ok(self.head.forward(&pre_bn, BnMode::Eval)?.post_bn),
        }
    }

    pub fn save_params(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_params(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.load(path)
    }
}

const EXTRACT_CHUNK: usize = 64;

impl FeatureExtractor for ReidModel {
    fn extract(&self, manifest: &DatasetManifest, indices: &[usize], view: FeatureView) -> Result<Vec<Vec<f64>>> {
        let (h, w) = self.config.input_size;
        let mut out = Vec::with_capacity(indices.len());
        for modality in Modality::ALL {
            // Gather per modality so each chunk runs through one path.
            let mine: Vec<(usize, usize)> = indices
                .iter()
                .enumerate()
                .filter(|(_, &i)| manifest.record(i).modality == modality)
                .map(|(pos, &i)| (pos, i))
                .collect();
            for chunk in mine.chunks(EXTRACT_CHUNK) {
                let images = chunk
                    .iter()
                    .map(|&(_, i)| {
                        let img = manifest.load_image(i)?.resized(h, w)?;
                        prepare_input(&img, modality, self.config.visible_input)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let x = images_to_tensor(&images, self.device())?;
                let feats = self
                    .embed(&x, modality, view)?
                    .to_dtype(candle_core::DType::F64)?
                    .to_vec2::<f64>()?;
                out.extend(chunk.iter().map(|&(pos, _)| pos).zip(feats));
            }
        }
        out.sort_by_key(|(pos, _)| *pos);
        Ok(out.into_iter().map(|(_, f)| f).collect())
    }
}
