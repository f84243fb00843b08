//! Staged dual-path feature extractor.
//!
//! The first `specific_stage_count` stages exist twice, once per modality;
//! the remaining stages are built once and applied to both paths, so the two
//! paths literally hold the same parameter storage from that depth on.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Five-stage bottleneck residual network with ResNet-50 layout.
    PaperScale,
    /// Four single-convolution stages for CPU-scale experiments.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagedExtractorConfig {
    pub variant: BackboneVariant,
    /// Leading stages kept modality-specific.
    pub specific_stage_count: usize,
    pub embedding_dim: usize,
}

impl Default for StagedExtractorConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

const TINY_WIDTHS: [usize; 3] = [16, 24, 48];
const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const BOTTLENECK_EXPANSION: usize = 4;

impl StagedExtractorConfig {
    pub fn tiny() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            specific_stage_count: 2,
            embedding_dim: 64,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            variant: BackboneVariant::PaperScale,
            specific_stage_count: 2,
            embedding_dim: 2048,
        }
    }

    pub fn stage_count(&self) -> usize {
        match self.variant {
            BackboneVariant::PaperScale => 5,
            BackboneVariant::Tiny => 4,
        }
    }

    /// Product of the stage strides.
    pub fn total_stride(&self) -> usize {
        match self.variant {
            BackboneVariant::PaperScale => 32,
            BackboneVariant::Tiny => 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.specific_stage_count > self.stage_count() {
            return Err(Error::Config(format!(
                "{} specific stages requested but the backbone has {}",
                self.specific_stage_count,
                self.stage_count()
            )));
        }
        if self.embedding_dim < 8 {
            return Err(Error::Config("embedding dimension must be at least 8".into()));
        }
        if self.variant == BackboneVariant::PaperScale
            && self.embedding_dim != RESNET50_WIDTHS[3] * BOTTLENECK_EXPANSION
        {
            return Err(Error::Config("the paper-scale backbone emits 2048-dim features".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let out_ch = width * BOTTLENECK_EXPANSION;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(
                    store,
                    &format!("{name}.downsample.conv"),
                    rng,
                    in_ch,
                    out_ch,
                    1,
                    stride,
                    0,
                )?,
                BatchNorm::new(store, &format!("{name}.downsample.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), rng, in_ch, width, 1, 1, 0)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), rng, width, width, 3, stride, 1)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), rng, width, out_ch, 1, 1, 0)?,
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), out_ch)?,
            downsample,
        })
    }

    fn vars(&self) -> Vec<&Var> {
        let mut out = vec![self.conv1.weight()];
        out.extend(self.bn1.vars());
        out.push(self.conv2.weight());
        out.extend(self.bn2.vars());
        out.push(self.conv3.weight());
        out.extend(self.bn3.vars());
        if let Some((conv, bn)) = &self.downsample {
            out.push(conv.weight());
            out.extend(bn.vars());
        }
        out
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// One macro-block of the extractor; stage 0 is the stem.
#[derive(Debug, Clone)]
enum Stage {
    ConvBnRelu { conv: Conv2d, bn: BatchNorm },
    Stem { conv: Conv2d, bn: BatchNorm },
    Residual(Vec<Bottleneck>),
}

impl Stage {
    fn vars(&self) -> Vec<&Var> {
        match self {
            Stage::ConvBnRelu { conv, bn } | Stage::Stem { conv, bn } => {
                let mut out = vec![conv.weight()];
                out.extend(bn.vars());
                out
            }
            Stage::Residual(blocks) => blocks.iter().flat_map(Bottleneck::vars).collect(),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Stage::ConvBnRelu { conv, bn } => Ok(bn.forward(&conv.forward(x)?, train)?.relu()?),
            Stage::Stem { conv, bn } => {
                let y = bn.forward(&conv.forward(x)?, train)?.relu()?;
                // Post-ReLU activations are non-negative, so zero padding acts as -inf padding.
                let y = y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                Ok(y.max_pool2d_with_stride(3, 2)?)
            }
            Stage::Residual(blocks) => blocks.iter().try_fold(x.clone(), |y, b| b.forward(&y, train)),
        }
    }
}

fn build_stage(
    config: &StagedExtractorConfig,
    store: &mut ParamStore,
    prefix: &str,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Stage> {
    let name = format!("{prefix}.stage{index}");
    match config.variant {
        BackboneVariant::Tiny => {
            let (in_ch, out_ch, stride) = match index {
                0 => (3, TINY_WIDTHS[0], 1),
                3 => (TINY_WIDTHS[2], config.embedding_dim, 2),
                i => (TINY_WIDTHS[i - 1], TINY_WIDTHS[i], 2),
            };
            Ok(Stage::ConvBnRelu {
                conv: Conv2d::new(store, &format!("{name}.conv"), rng, in_ch, out_ch, 3, stride, 1)?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch)?,
            })
        }
        BackboneVariant::PaperScale => {
            if index == 0 {
                return Ok(Stage::Stem {
                    conv: Conv2d::new(store, &format!("{name}.conv"), rng, 3, 64, 7, 2, 3)?,
                    bn: BatchNorm::new(store, &format!("{name}.bn"), 64)?,
                });
            }
            let layer = index - 1;
            let width = RESNET50_WIDTHS[layer];
            let mut in_ch = if layer == 0 {
                64
            } else {
                RESNET50_WIDTHS[layer - 1] * BOTTLENECK_EXPANSION
            };
            let mut blocks = Vec::with_capacity(RESNET50_BLOCKS[layer]);
            for b in 0..RESNET50_BLOCKS[layer] {
                let stride = if b == 0 && layer > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    store,
                    &format!("{name}.block{b}"),
                    rng,
                    in_ch,
                    width,
                    stride,
                )?);
                in_ch = width * BOTTLENECK_EXPANSION;
            }
            Ok(Stage::Residual(blocks))
        }
    }
}

/// Parameter-name prefix of a path's stages.
pub fn stage_prefix(path: Option<Modality>) -> &'static str {
    match path {
        Some(Modality::Visible) => "backbone.gray",
        Some(Modality::Infrared) => "backbone.infrared",
        None => "backbone.shared",
    }
}

#[derive(Debug, Clone)]
pub struct DualPathExtractor {
    config: StagedExtractorConfig,
    gray_specific: Vec<Stage>,
    infrared_specific: Vec<Stage>,
    shared: Vec<Stage>,
}

impl DualPathExtractor {
    /// Builds both paths; the two specific copies start from identical weights.
    pub fn new(config: StagedExtractorConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = config.specific_stage_count;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gray_specific = Vec::with_capacity(s);
        let mut infrared_specific = Vec::with_capacity(s);
        for i in 0..s {
            let state = rng.clone();
            gray_specific.push(build_stage(
                &config,
                store,
                stage_prefix(Some(Modality::Visible)),
                i,
                &mut rng,
            )?);
            let mut replay = state;
            infrared_specific.push(build_stage(
                &config,
                store,
                stage_prefix(Some(Modality::Infrared)),
                i,
                &mut replay,
            )?);
        }
        let shared = (s..config.stage_count())
            .map(|i| build_stage(&config, store, stage_prefix(None), i, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            gray_specific,
            infrared_specific,
            shared,
        })
    }

    pub fn config(&self) -> &StagedExtractorConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.dim(1)? != 3 {
            return Err(Error::Shape(format!(
                "expected N x 3 x H x W input, got {:?}",
                x.dims()
            )));
        }
        let stride = self.config.total_stride();
        let (h, w) = (x.dim(2)?, x.dim(3)?);
        if h < stride || w < stride {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than total stride {stride}"
            )));
        }
        Ok(())
    }

    /// Variables used by one path, grouped by stage in forward order.
    pub fn path_vars(&self, modality: Modality) -> Vec<Vec<&Var>> {
        let specific = match modality {
            Modality::Visible => &self.gray_specific,
            Modality::Infrared => &self.infrared_specific,
        };
        specific.iter().chain(&self.shared).map(Stage::vars).collect()
    }

    fn run(stages: &[Stage], x: Tensor, train: bool) -> Result<Tensor> {
        stages.iter().try_fold(x, |y, s| s.forward(&y, train))
    }

    /// Feature maps of a single-modality batch.
    pub fn forward_single(&self, x: &Tensor, modality: Modality, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let specific = match modality {
            Modality::Visible => &self.gray_specific,
            Modality::Infrared => &self.infrared_specific,
        };
        let y = Self::run(specific, x.clone(), train)?;
        Self::run(&self.shared, y, train)
    }

    /// Feature maps of a paired batch. In training mode the shared stages see
    /// both modalities in one batch, so their normalization statistics are joint.
    pub fn forward_pair(&self, gray: &Tensor, infrared: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        self.check_input(gray)?;
        self.check_input(infrared)?;
        let n_gray = gray.dim(0)?;
        let g = Self::run(&self.gray_specific, gray.clone(), train)?;
        let t = Self::run(&self.infrared_specific, infrared.clone(), train)?;
        let joint = Self::run(&self.shared, Tensor::cat(&[&g, &t], 0)?, train)?;
        let total = joint.dim(0)?;
        Ok((joint.narrow(0, 0, n_gray)?, joint.narrow(0, n_gray, total - n_gray)?))
    }
}

/// Global average pooling of `N x C x H x W` maps to `N x C`.
pub fn pool(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 4 {
        return Err(Error::Shape(format!(
            "pooling expects N x C x H x W, got {:?}",
            map.dims()
        )));
    }
    Ok(map.mean((2, 3))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            crate::nn::normal_values(&mut rng, n * 3 * h * w, 1.0),
            (n, 3, h, w),
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn tiny_output_geometry() {
        let mut store = ParamStore::default();
        let net = DualPathExtractor::new(StagedExtractorConfig::tiny(), &mut store, 0).unwrap();
        let map = net
            .forward_single(&input(2, 32, 16, 1), Modality::Visible, false)
            .unwrap();
        assert_eq!(map.dims(), &[2, 64, 4, 2]);
        assert_eq!(pool(&map).unwrap().dims(), &[2, 64]);
        let params = store.num_trainable_values();
        assert!((40_000..70_000).contains(&params), "{params}");
    }

    #[test]
    fn fully_shared_is_modality_blind() {
        let mut store = ParamStore::default();
        let cfg = StagedExtractorConfig {
            specific_stage_count: 0,
            ..StagedExtractorConfig::tiny()
        };
        let net = DualPathExtractor::new(cfg, &mut store, 3).unwrap();
        let x = input(3, 32, 16, 2);
        let a = net.forward_single(&x, Modality::Visible, false).unwrap();
        let b = net.forward_single(&x, Modality::Infrared, false).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(store.iter().all(|(k, _)| k.starts_with("backbone.shared")));
    }

    #[test]
    fn fully_specific_shares_nothing() {
        let mut store = ParamStore::default();
        let cfg = StagedExtractorConfig {
            specific_stage_count: 4,
            ..StagedExtractorConfig::tiny()
        };
        DualPathExtractor::new(cfg, &mut store, 3).unwrap();
        assert!(store.iter().all(|(k, _)| !k.starts_with("backbone.shared")));
        let gray = store.iter().filter(|(k, _)| k.starts_with("backbone.gray")).count();
        let ir = store.iter().filter(|(k, _)| k.starts_with("backbone.infrared")).count();
        assert_eq!(gray, ir);
    }

    #[test]
    fn specific_copies_start_identical() {
        let mut store = ParamStore::default();
        DualPathExtractor::new(StagedExtractorConfig::tiny(), &mut store, 11).unwrap();
        let g = store.get("backbone.gray.stage1.conv.weight").unwrap();
        let t = store.get("backbone.infrared.stage1.conv.weight").unwrap();
        let gv = g.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let tv = t.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(gv, tv);
    }

    #[test]
    fn invalid_configs() {
        let mut store = ParamStore::default();
        let cfg = StagedExtractorConfig {
            specific_stage_count: 5,
            ..StagedExtractorConfig::tiny()
        };
        assert!(DualPathExtractor::new(cfg, &mut store, 0).is_err());
        let cfg = StagedExtractorConfig {
            embedding_dim: 4,
            ..StagedExtractorConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_input_shape() {
        let mut store = ParamStore::default();
        let net = DualPathExtractor::new(StagedExtractorConfig::tiny(), &mut store, 0).unwrap();
        let x = Tensor::zeros((1, 1, 32, 16), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            net.forward_single(&x, Modality::Visible, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pooling_is_spatial_mean() {
        let c = Tensor::full(2.5f32, (1, 3, 4, 2), &Device::Cpu).unwrap();
        assert_eq!(pool(&c).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.5; 3]]);
        let m = Tensor::from_vec(vec![1.0f32, 3.0], (1, 1, 1, 2), &Device::Cpu).unwrap();
        assert_eq!(pool(&m).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.0]]);
    }

    #[test]
    fn paper_scale_layout() {
        let mut store = ParamStore::default();
        let net = DualPathExtractor::new(StagedExtractorConfig::paper_scale(), &mut store, 0).unwrap();
        // ResNet-50 without the classifier has 23.5M weights; stem and layer1 are duplicated.
        let shared: usize = store
            .trainable()
            .filter(|(k, _)| !k.starts_with("backbone.infrared"))
            .map(|(_, p)| p.var.elem_count())
            .sum();
        assert_eq!(shared, 23_508_032);
        let map = net
            .forward_single(&input(1, 64, 32, 0), Modality::Infrared, false)
            .unwrap();
        assert_eq!(map.dims(), &[1, 2048, 2, 1]);
    }
}
