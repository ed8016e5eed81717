//! Region conditions, masks, and layer-wise regional cross-attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::toyldm::{ModelConfig, PromptSpec};

/// Integer bounding box in latent-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    /// Parses `top,left,height,width`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "bounding box must be top,left,height,width — got {text:?}"
            )));
        }
        let mut nums = [0usize; 4];
        for (i, p) in parts.iter().enumerate() {
            nums[i] = p
                .parse()
                .map_err(|_| Error::Config(format!("bad bounding box component {p:?}")))?;
        }
        Ok(Self { top: nums[0], left: nums[1], height: nums[2], width: nums[3] })
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!("degenerate bounding box {self:?}")));
        }
        if self.top + self.height > grid_h || self.left + self.width > grid_w {
            return Err(Error::Shape(format!(
                "bounding box {self:?} exceeds the {grid_h}x{grid_w} grid"
            )));
        }
        Ok(())
    }

    /// Binary `[h, w]` mask: ones exactly inside the box.
    pub fn mask(&self, grid_h: usize, grid_w: usize) -> Tensor {
        Tensor::from_fn(&[grid_h, grid_w], |flat| {
            let (y, x) = (flat / grid_w, flat % grid_w);
            if y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
            {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Row-major flat pixel indices inside the box.
    pub fn pixels(&self, grid_w: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in self.top..self.top + self.height {
            for x in self.left..self.left + self.width {
                out.push(y * grid_w + x);
            }
        }
        out
    }
}

/// A region prompt and the box it should condition.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCondition {
    pub prompt: PromptSpec,
    pub bbox: BoundingBox,
}

/// Per-layer binary masks for one region (all layers share the latent
/// grid at this scale).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub per_layer: Vec<Tensor>,
}

impl RegionMask {
    pub fn from_box(bbox: &BoundingBox, cfg: &ModelConfig) -> Result<Self> {
        bbox.validate(cfg.grid_h, cfg.grid_w)?;
        let mask = bbox.mask(cfg.grid_h, cfg.grid_w);
        Ok(Self { per_layer: vec![mask; cfg.layers] })
    }

    /// The final layer's mask, used when aggregating noise estimates.
    pub fn final_layer(&self) -> &Tensor {
        self.per_layer.last().expect("at least one layer")
    }
}

/// Normalization applied to regional attention scores. The sigmoid form
/// is the default; softmax is available for ablation and the choice is
/// recorded in run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Sigmoid,
    Softmax,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Sigmoid => write!(f, "sigmoid"),
            AttentionKind::Softmax => write!(f, "softmax"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(AttentionKind::Sigmoid),
            "softmax" => Ok(AttentionKind::Softmax),
            other => Err(Error::Config(format!(
                "attention must be sigmoid or softmax, got {other:?}"
            ))),
        }
    }
}

/// Cross-attention between a region prompt's rows and the box interior of
/// a feature map: queries are the masked, box-restricted projected map,
/// keys/values come from the region text rows, and scores pass through
/// the chosen normalization. Output has the box's shape.
pub fn regional_cross_attention(
    f_map: &Tensor,
    region_rows: &Tensor,
    bbox: &BoundingBox,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    kind: AttentionKind,
) -> Result<Tensor> {
    let shape = f_map.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("feature map must be 3-D, got {shape:?}")));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    bbox.validate(h, w)?;
    if region_rows.cols() != d {
        return Err(Error::Shape(format!(
            "region rows have dim {}, feature map has {d}",
            region_rows.cols()
        )));
    }

    let flat = f_map.reshaped(&[h * w, d])?;
    let projected = flat.matmul(w_q)?;
    // Hadamard with the binary mask, then restriction to the box pixels.
    let mask = bbox.mask(h, w);
    let masked = Tensor::from_fn(&[h * w, d], |i| {
        let row = i / d;
        projected.data()[i] * mask.data()[row]
    });
    let q = masked.gather_rows(&bbox.pixels(w))?;

    let k = region_rows.matmul(w_k)?;
    let v = region_rows.matmul(w_v)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let attn = match kind {
        AttentionKind::Sigmoid => scores.sigmoid(),
        AttentionKind::Softmax => scores.softmax_rows()?,
    };
    attn.matmul(&v)?.reshaped(&[bbox.height, bbox.width, d])
}

/// Replaces each box's interior with its region feature; pixels outside
/// every box keep the original values bitwise. Later regions overwrite
/// earlier ones where boxes overlap.
pub fn apply_regions(f_map: &Tensor, regions: &[(Tensor, BoundingBox)]) -> Result<Tensor> {
    let shape = f_map.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("feature map must be 3-D, got {shape:?}")));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let mut out = f_map.clone();
    for (feature, bbox) in regions {
        bbox.validate(h, w)?;
        if feature.shape() != [bbox.height, bbox.width, d] {
            return Err(Error::Shape(format!(
                "region feature {:?} does not fit box {bbox:?} with dim {d}",
                feature.shape()
            )));
        }
        for by in 0..bbox.height {
            for bx in 0..bbox.width {
                let src = (by * bbox.width + bx) * d;
                let dst = ((bbox.top + by) * w + (bbox.left + bx)) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(&feature.data()[src..src + d]);
            }
        }
    }
    Ok(out)
}
