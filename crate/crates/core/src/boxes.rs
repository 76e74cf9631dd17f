//! Prompt boxes in pixel coordinates. Maxima are inclusive pixel indices
//! for boxes derived from masks; the prompt encoder treats them as corner
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Box2D {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Box2D { x1, y1, x2, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::contract(Module::Inference, format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Clamp into a `width`×`height` image.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        let (w, h) = ((width.max(1) - 1) as f32, (height.max(1) - 1) as f32);
        Box2D {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Box2D { x1: self.x1 * factor, y1: self.y1 * factor, x2: self.x2 * factor, y2: self.y2 * factor }
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Tight box around the nonzero pixels of a row-major `width`-wide mask.
    pub fn from_mask(mask: &[u8], width: usize) -> Option<Self> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, &m) in mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let (x, y) = (i % width, i / width);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
            });
        }
        b.map(|(x1, y1, x2, y2)| Box2D::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32))
    }

    /// Whether every nonzero pixel of the mask lies inside the box.
    pub fn contains_mask(&self, mask: &[u8], width: usize) -> bool {
        mask.iter().enumerate().filter(|(_, &m)| m != 0).all(|(i, _)| {
            let (x, y) = ((i % width) as f32, (i / width) as f32);
            x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x1: f32,
    pub y1: f32,
    pub z1: usize,
    pub x2: f32,
    pub y2: f32,
    pub z2: usize,
}

impl Box3D {
    pub fn new(x1: f32, y1: f32, z1: usize, x2: f32, y2: f32, z2: usize) -> Self {
        Box3D { x1, y1, z1, x2, y2, z2 }
    }

    pub fn from_2d(b: Box2D) -> Self {
        Box3D { x1: b.x1, y1: b.y1, z1: 0, x2: b.x2, y2: b.y2, z2: 0 }
    }

    pub fn planar(&self) -> Box2D {
        Box2D::new(self.x1, self.y1, self.x2, self.y2)
    }

    pub fn depth(&self) -> usize {
        self.z2 - self.z1 + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.planar().validate()?;
        if self.z1 > self.z2 {
            return Err(Error::contract(Module::Inference, format!("inverted z range {self:?}")));
        }
        Ok(())
    }
}
