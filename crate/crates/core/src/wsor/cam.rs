use serde::{Deserialize, Serialize};

use super::model::{select_objects, FeatureMaps, ObjectClassifier};
use crate::dataio::{CategoryId, SceneImage};
use crate::error::{contract, Result};
use crate::mask::{connected_components, Mask};
use crate::nn::Tensor;

/// Class activation map normalised by its maximum and clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub category: CategoryId,
    pub height: usize,
    pub width: usize,
    pub map: Vec<f64>,
}

impl Cam {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.map[y * self.width + x]
    }

    /// Bilinear upsampling to `height × width`, sampling at pixel centres and clamping at the border.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let axis = |i: usize, out: usize, src: usize| {
            let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            (lo, (lo + 1).min(src - 1), pos - lo as f64)
        };
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, width, self.width);
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }
}

/// `φ_cᵀ f(x, y) / max φ_cᵀ f`, with negatives clamped to zero. All zeros when the maximum is not positive.
pub fn compute_cam(features: &Tensor, phi: &Tensor, category: CategoryId) -> Result<Cam> {
    let (k, c) = (phi.shape()[0], phi.shape()[1]);
    contract!(category < k, "unknown category {category} (classifier has {k})");
    contract!(
        features.shape().len() == 3 && features.shape()[0] == c,
        "feature map has shape {:?}, classifier expects {c} channels",
        features.shape()
    );
    let (h, w) = (features.shape()[1], features.shape()[2]);
    let plane = h * w;
    let weights = &phi.data()[category * c..(category + 1) * c];
    let f = features.data();
    let mut raw = vec![0.0; plane];
    for (ch, &wt) in weights.iter().enumerate() {
        for (r, &v) in raw.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
            *r += wt * v;
        }
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let map = if max > 0.0 {
        raw.iter().map(|&v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; plane]
    };
    Ok(Cam {
        category,
        height: h,
        width: w,
        map,
    })
}

/// One recognised object: category, mask at image resolution, confidence in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: CategoryId,
    pub mask: Mask,
    pub score: f64,
}

pub type InstanceSet = Vec<Instance>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub mask_threshold: f64,
    /// Components smaller than this fraction of the image are dropped.
    pub min_area_fraction: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            mask_threshold: 0.4,
            min_area_fraction: 0.01,
        }
    }
}

/// Threshold each upsampled CAM, split it into 4-connected components and score
/// each component by `class score × mean CAM inside it`.
pub fn extract_instances(
    cams: &[Cam],
    object_scores: &[(CategoryId, f64)],
    height: usize,
    width: usize,
    config: &ExtractionConfig,
) -> InstanceSet {
    let min_area = (config.min_area_fraction * (height * width) as f64).ceil() as usize;
    let mut out: Vec<(Instance, (f64, f64))> = Vec::new();
    for cam in cams {
        let Some(&(_, class_score)) = object_scores.iter().find(|(c, _)| *c == cam.category) else {
            continue;
        };
        let up = cam.upsample(height, width);
        let bin = Mask::from_bits(height, width, up.iter().map(|&v| v >= config.mask_threshold && v > 0.0).collect());
        for comp in connected_components(&bin) {
            let area = comp.area();
            if area < min_area.max(1) {
                continue;
            }
            let mean = comp
                .bits()
                .iter()
                .zip(&up)
                .filter(|(b, _)| **b)
                .map(|(_, v)| v)
                .sum::<f64>()
                / area as f64;
            let (cx, cy) = comp.centroid().expect("non-empty component");
            out.push((
                Instance {
                    category: cam.category,
                    mask: comp,
                    score: class_score * mean,
                },
                (cy, cx),
            ));
        }
    }
    out.sort_by(|(a, ca), (b, cb)| {
        b.score
            .total_cmp(&a.score)
            .then(a.category.cmp(&b.category))
            .then(ca.0.total_cmp(&cb.0))
            .then(ca.1.total_cmp(&cb.1))
    });
    out.into_iter().map(|(i, _)| i).collect()
}

/// Everything stage I produces for one image.
#[derive(Debug, Clone)]
pub struct Recognition {
    pub features: FeatureMaps,
    pub logits: Vec<f64>,
    pub objects: Vec<(CategoryId, f64)>,
    pub instances: InstanceSet,
}

pub fn recognize(
    image: &SceneImage,
    model: &ObjectClassifier,
    logit_threshold: f64,
    config: &ExtractionConfig,
) -> Result<Recognition> {
    let (features, logits) = model.features_and_logits(image)?;
    let objects = select_objects(&logits, logit_threshold);
    let cams = objects
        .iter()
        .map(|&(c, _)| compute_cam(features.coarsest(), model.phi(), c))
        .collect::<Result<Vec<_>>>()?;
    let instances = extract_instances(&cams, &objects, image.height(), image.width(), config);
    Ok(Recognition {
        features,
        logits,
        objects,
        instances,
    })
}
