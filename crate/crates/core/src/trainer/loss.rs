use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::image_buf::Image;
use crate::metrics::{ssim, ssim_with_grad};
use crate::raster::{RenderOutput, UpstreamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub gamma_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            gamma_feature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.lambda_ssim) {
            return Err(TrainError::InvalidConfig("lambda_ssim must lie in [0, 1)".into()));
        }
        if !(self.gamma_feature >= 0.0) {
            return Err(TrainError::InvalidConfig("gamma_feature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1_rgb: f64,
    pub dssim: f64,
    pub l1_feature: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(l1_rgb: f64, dssim: f64, l1_feature: f64, w: &LossWeights) -> Self {
        Self {
            l1_rgb,
            dssim,
            l1_feature,
            total: (1.0 - w.lambda_ssim) * l1_rgb + w.lambda_ssim * dssim + w.gamma_feature * l1_feature,
        }
    }

    fn check_finite(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("l1_rgb", self.l1_rgb),
            ("dssim", self.dssim),
            ("l1_feature", self.l1_feature),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss { term: name, value: v });
            }
        }
        Ok(())
    }
}

fn check_shapes(render: &RenderOutput, gt: &Image, target: &Image) -> Result<(), TrainError> {
    if !render.rgb.same_shape(gt) || !render.feature.same_shape(target) {
        return Err(TrainError::ShapeMismatch);
    }
    Ok(())
}

fn mean_abs(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len().max(1) as f64
}

/// Dual-branch loss: `(1-λ)·L1(rgb) + λ·(1-SSIM) + γ·L1(feature)`. The
/// feature target must already match the render's feature resolution.
pub fn compute_loss(
    render: &RenderOutput,
    gt_rgb: &Image,
    target_feature: &Image,
    w: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    check_shapes(render, gt_rgb, target_feature)?;
    let l1 = mean_abs(&render.rgb, gt_rgb);
    let dssim = 1.0 - ssim(&render.rgb, gt_rgb)?;
    let lf = mean_abs(&render.feature, target_feature);
    let loss = LossBreakdown::combine(l1, dssim, lf, w);
    loss.check_finite()?;
    Ok(loss)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss together with its gradient with respect to the rendered images.
pub fn loss_and_grads(
    render: &RenderOutput,
    gt_rgb: &Image,
    target_feature: &Image,
    w: &LossWeights,
) -> Result<(LossBreakdown, UpstreamGrads), TrainError> {
    check_shapes(render, gt_rgb, target_feature)?;
    let l1 = mean_abs(&render.rgb, gt_rgb);
    let (ssim_val, ssim_grad) = ssim_with_grad(&render.rgb, gt_rgb)?;
    let lf = mean_abs(&render.feature, target_feature);
    let loss = LossBreakdown::combine(l1, 1.0 - ssim_val, lf, w);
    loss.check_finite()?;

    let n_rgb = render.rgb.data.len() as f64;
    let mut g_rgb = render.rgb.clone();
    for ((g, x), (y, s)) in g_rgb
        .data
        .iter_mut()
        .zip(&render.rgb.data)
        .zip(gt_rgb.data.iter().zip(&ssim_grad.data))
    {
        *g = (1.0 - w.lambda_ssim) * sign(x - y) / n_rgb - w.lambda_ssim * s;
    }
    let feature = if w.gamma_feature > 0.0 {
        let n_feat = render.feature.data.len() as f64;
        let mut g_feat = render.feature.clone();
        for (g, (x, y)) in g_feat
            .data
            .iter_mut()
            .zip(render.feature.data.iter().zip(&target_feature.data))
        {
            *g = w.gamma_feature * sign(x - y) / n_feat;
        }
        Some(g_feat)
    } else {
        None
    };
    Ok((
        loss,
        UpstreamGrads {
            rgb: Some(g_rgb),
            feature,
            alpha: None,
        },
    ))
}
