//! Network dimensions shared by every module.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::factors::EXTERNAL_DIM;
use crate::parent::LEVELS;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub resolution: usize,
    pub d_g: usize,
    pub d_v: usize,
    /// Base channel count of the parent encoder/generator.
    pub width: usize,
    /// Base channel count of the image discriminators.
    pub critic_width: usize,
    /// Base channel count of the child generator.
    pub child_width: usize,
    /// Base channel count of the child inverse encoder.
    pub inverse_width: usize,
    /// Hidden width of the mapping function.
    pub mapper_width: usize,
}

impl ArchConfig {
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            d_g: 32,
            d_v: 8,
            width: 8,
            critic_width: 8,
            child_width: 8,
            inverse_width: 8,
            mapper_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::check_resolution(self.resolution)?;
        if self.resolution < 1 << LEVELS {
            return Err(Error::Config(format!(
                "networks need resolution >= {} for {LEVELS} downsampling levels",
                1 << LEVELS
            )));
        }
        for (name, v) in [
            ("d_g", self.d_g),
            ("d_v", self.d_v),
            ("width", self.width),
            ("critic_width", self.critic_width),
            ("child_width", self.child_width),
            ("inverse_width", self.inverse_width),
            ("mapper_width", self.mapper_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_g < 2 {
            return Err(Error::Config("d_g must be at least 2 for normalization".into()));
        }
        Ok(())
    }

    /// Spatial size at the bottleneck of the five-level networks.
    pub fn bottleneck(&self) -> usize {
        self.resolution >> LEVELS
    }

    pub fn parent_channels(&self, level: usize) -> usize {
        (self.width << level).min(self.width * 8)
    }

    pub fn critic_channels(&self, level: usize) -> usize {
        (self.critic_width << level).min(self.critic_width * 8)
    }

    pub fn inverse_channels(&self, level: usize) -> usize {
        (self.inverse_width << level).min(self.inverse_width * 8)
    }

    /// Child generator channels at spatial size `res`.
    pub fn child_channels(&self, res: usize) -> usize {
        match res {
            0..=8 => self.child_width * 4,
            16 => self.child_width * 2,
            32 => self.child_width,
            _ => (self.child_width / 2).max(8),
        }
    }

    pub fn check_images(&self, xs: &Tensor) -> Result<usize> {
        match xs.dims() {
            &[n, 3, h, w] if h == self.resolution && w == self.resolution => Ok(n),
            dims => Err(Error::Shape(format!(
                "images {dims:?}, network expects (N, 3, {r}, {r})",
                r = self.resolution
            ))),
        }
    }

    pub fn check_genetic(&self, g: &Tensor) -> Result<usize> {
        match g.dims() {
            &[n, d] if d == self.d_g => Ok(n),
            dims => Err(Error::Shape(format!("genetic factors {dims:?}, d_g = {}", self.d_g))),
        }
    }

    pub fn check_external(&self, e: &Tensor, n: usize) -> Result<()> {
        match e.dims() {
            &[m, d] if m == n && d == EXTERNAL_DIM => Ok(()),
            dims => Err(Error::Shape(format!("external factors {dims:?}, expected ({n}, {EXTERNAL_DIM})"))),
        }
    }

    pub fn check_variety(&self, v: &Tensor, n: usize) -> Result<()> {
        match v.dims() {
            &[m, d] if m == n && d == self.d_v => Ok(()),
            dims => Err(Error::Shape(format!("variety factors {dims:?}, expected ({n}, {})", self.d_v))),
        }
    }
}
