//! Dual-linear batch-normalized identity embedding (DL-IDE).
//!
//! pooled feature -> projection FC (with bias) -> common-space BN (scale only)
//! -> bias-free classifier FC. One head serves both modalities.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_values, uniform_values, BatchNorm, Linear, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Projection, common-space BN and bias-free classifier.
    DualLinearBn,
    /// Bias-free classifier directly on the pooled feature.
    SingleLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub input_dim: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct DlideHead {
    config: HeadConfig,
    projection: Option<Linear>,
    bn: Option<BatchNorm>,
    classifier: Linear,
}

/// Outputs of one head pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub post_bn: Tensor,
    pub logits: Tensor,
}

impl DlideHead {
    pub fn new(config: HeadConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if config.num_classes == 0 || config.input_dim == 0 || config.projection_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (projection, bn, feature_dim) = match config.variant {
            HeadVariant::DualLinearBn => {
                let (d_in, d_out) = (config.input_dim, config.projection_dim);
                let bound = 1.0 / (d_in as f64).sqrt();
                let w = store.register(
                    "head.projection.weight",
                    uniform_values(&mut rng, d_out * d_in, bound),
                    &[d_out, d_in],
                    ParamKind::Weight,
                )?;
                let b = store.register(
                    "head.projection.bias",
                    uniform_values(&mut rng, d_out, bound),
                    &[d_out],
                    ParamKind::Bias,
                )?;
                let bn = BatchNorm::new(store, "head.bn", d_out)?.without_shift();
                (Some(Linear::from_vars(w, Some(b))), Some(bn), d_out)
            }
            HeadVariant::SingleLinear => (None, None, config.input_dim),
        };
        let c = config.num_classes;
        let w = store.register(
            "head.classifier.weight",
            normal_values(&mut rng, c * feature_dim, 1.0 / (feature_dim as f64).sqrt()),
            &[c, feature_dim],
            ParamKind::Weight,
        )?;
        Ok(Self {
            config,
            projection,
            bn,
            classifier: Linear::from_vars(w, None),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        self.bn.as_ref()
    }

    pub fn projection(&self) -> Option<&Linear> {
        self.projection.as_ref()
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn project(&self, pre_bn: &Tensor) -> Result<Tensor> {
        match &self.projection {
            Some(p) => p.forward(pre_bn),
            None => Ok(pre_bn.clone()),
        }
    }

    /// `scale * (x - mean) / sqrt(var + eps)`; training mode uses batch statistics.
    pub fn batch_normalize(&self, projected: &Tensor, mode: BnMode) -> Result<Tensor> {
        let Some(bn) = &self.bn else {
            return Ok(projected.clone());
        };
        if mode == BnMode::Train && projected.dim(0)? < 2 {
            return Err(Error::Validation(
                "training-mode batch normalization needs a batch of at least 2".into(),
            ));
        }
        bn.forward(projected, mode == BnMode::Train)
    }

    pub fn classify(&self, post_bn: &Tensor) -> Result<Tensor> {
        self.classifier.forward(post_bn)
    }

    pub fn forward(&self, pre_bn: &Tensor, mode: BnMode) -> Result<HeadOutput> {
        let post_bn = self.batch_normalize(&self.project(pre_bn)?, mode)?;
        let logits = self.classify(&post_bn)?;
        Ok(HeadOutput { post_bn, logits })
    }
}

/// Cross-entropy of row-major `logits` (one row of `classes` per sample)
/// summed over all samples and divided by `per_modality` (the count of
/// samples in one modality). Returns the value and d loss / d logits.
pub fn identity_loss(logits: &[f64], classes: usize, labels: &[usize], per_modality: usize) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != classes * labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} samples of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if per_modality == 0 {
        return Err(Error::Config("per-modality sample count must be positive".into()));
    }
    let norm = 1.0 / per_modality as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - peak).exp()).sum();
        let log_z = peak + z.ln();
        loss += log_z - row[label];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = norm * (v - log_z).exp();
        }
        g[label] -= norm;
    }
    Ok((loss * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::Device;

    fn head(d: usize, c: usize) -> (DlideHead, ParamStore) {
        let mut store = ParamStore::default();
        let h = DlideHead::new(
            HeadConfig {
                variant: HeadVariant::DualLinearBn,
                input_dim: d,
                projection_dim: d,
                num_classes: c,
            },
            &mut store,
            1,
        )
        .unwrap();
        (h, store)
    }

    fn t2(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_vec(rows.concat(), (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_projection_passes_through() {
        let (h, _) = head(3, 2);
        let p = h.projection().unwrap();
        p.weight()
            .set(&Tensor::eye(3, candle_core::DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        p.bias()
            .unwrap()
            .set(&Tensor::zeros(3, candle_core::DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let x = t2(&[vec![1.0, -2.0, 3.5]]);
        assert_eq!(
            h.project(&x).unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![1.0, -2.0, 3.5]]
        );
        p.bias()
            .unwrap()
            .set(&Tensor::new(&[0.5f32, 0.25, -1.0], &Device::Cpu).unwrap())
            .unwrap();
        let zero = t2(&[vec![0.0; 3]]);
        assert_eq!(
            h.project(&zero).unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![0.5, 0.25, -1.0]]
        );
    }

    #[test]
    fn projection_dim_mismatch() {
        let (h, _) = head(3, 2);
        assert!(matches!(h.project(&t2(&[vec![1.0; 4]])), Err(Error::Shape(_))));
    }

    #[test]
    fn standardized_batch_is_a_fixed_point() {
        let (h, _) = head(2, 2);
        // Columns have mean 0 and (biased) variance 1.
        let x = t2(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, -1.0]]);
        let y = h.batch_normalize(&x, BnMode::Train).unwrap().to_vec2::<f32>().unwrap();
        for (a, b) in y.concat().iter().zip(x.to_vec2::<f32>().unwrap().concat()) {
            assert!((a - b).abs() < 1e-5);
        }
        h.batch_norm()
            .unwrap()
            .scale()
            .set(&Tensor::new(&[2.0f32, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        let y2 = h.batch_normalize(&x, BnMode::Train).unwrap().to_vec2::<f32>().unwrap();
        for (a, b) in y2.concat().iter().zip(x.to_vec2::<f32>().unwrap().concat()) {
            assert!((a - 2.0 * b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let (h, _) = head(2, 2);
        assert!(h.batch_normalize(&t2(&[vec![1.0, 2.0]]), BnMode::Train).is_err());
        assert!(h.batch_normalize(&t2(&[vec![1.0, 2.0]]), BnMode::Eval).is_ok());
    }

    #[test]
    fn bias_free_classifier_geometry() {
        let (h, _) = head(3, 3);
        h.classifier()
            .weight()
            .set(&Tensor::eye(3, candle_core::DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let logits = h
            .classify(&t2(&[vec![0.0, 1.0, 0.0], vec![0.0; 3]]))
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(logits, vec![vec![0.0, 1.0, 0.0], vec![0.0; 3]]);
        let x = t2(&[vec![0.3, -0.7, 0.2]]);
        let a = h.classify(&x).unwrap().to_vec2::<f32>().unwrap();
        let b = h.classify(&(x * 3.0).unwrap()).unwrap().to_vec2::<f32>().unwrap();
        for (u, v) in a[0].iter().zip(&b[0]) {
            assert!((3.0 * u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_log_c_per_sample() {
        let c = 5;
        let (v, _) = identity_loss(&vec![0.3; 2 * c], c, &[1, 4], 1).unwrap();
        assert_relative_eq!(v, 2.0 * (c as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn identity_loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let (v, _) = identity_loss(&[margin, 0.0, 0.0, 0.0, margin, 0.0], 3, &[0, 1], 1).unwrap();
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn identity_label_out_of_range() {
        assert!(matches!(
            identity_loss(&[0.0; 4], 2, &[0, 2], 1),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn shift_is_stored_but_not_applied() {
        let (h, store) = head(2, 2);
        let shift = store.get("head.bn.shift").unwrap();
        shift
            .var
            .set(&Tensor::new(&[5.0f32, 5.0], &Device::Cpu).unwrap())
            .unwrap();
        let x = t2(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let y = h.batch_normalize(&x, BnMode::Train).unwrap().to_vec2::<f32>().unwrap();
        assert!(y.concat().iter().all(|v| v.abs() < 1.01));
    }
}
