use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a ViT classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: f32,
}

pub const DEFAULT_LAYER_NORM_EPS: f32 = 1e-6;

fn default_layer_norm_eps() -> f32 {
    DEFAULT_LAYER_NORM_EPS
}

impl ViTConfig {
    /// ViT-B/16 at 224x224 with a 10-way head.
    pub fn vit_b16() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch: 16,
            embed_dim: 768,
            n_blocks: 12,
            n_heads: 12,
            mlp_hidden: 3072,
            n_classes: 10,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    /// A 2x2-patch model small enough to check against hand-written references.
    pub fn tiny() -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 3,
            patch: 4,
            embed_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            mlp_hidden: 16,
            n_classes: 3,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.image_w / self.patch
    }

    /// Number of image patches, N.
    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Sequence length including the CLS token, N + 1.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Flattened length of one patch, P·P·C.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not tiled by {}px patches",
                self.image_h, self.image_w, self.patch
            )));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config(format!(
                "layer_norm_eps must be positive, got {}",
                self.layer_norm_eps
            )));
        }
        Ok(())
    }
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::vit_b16()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b16_derived_extents() {
        let c = ViTConfig::vit_b16();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 196);
        assert_eq!(c.n_tokens(), 197);
        assert_eq!(c.head_dim(), 64);
        assert_eq!((c.grid_rows(), c.grid_cols()), (14, 14));
        assert_eq!(c.patch_len(), 768);
    }

    #[test]
    fn tiny_has_four_patches() {
        let c = ViTConfig::tiny();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 4);
        assert_eq!(c.head_dim(), 4);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ViTConfig::vit_b16();
        c.n_heads = 7;
        assert!(c.validate().is_err());

        let mut c = ViTConfig::vit_b16();
        c.patch = 15;
        assert!(c.validate().is_err());

        let mut c = ViTConfig::vit_b16();
        c.n_classes = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn eps_defaults_when_absent_from_json() {
        let mut v = serde_json::to_value(ViTConfig::tiny()).unwrap();
        v.as_object_mut().unwrap().remove("layer_norm_eps");
        let c: ViTConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.layer_norm_eps, DEFAULT_LAYER_NORM_EPS);
    }
}
