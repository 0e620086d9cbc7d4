use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::LabelMask;
use crate::error::{Error, Result};
use crate::tissue::luma;

/// Conjunctive inclusive ranges on (luma, R-B, G-B) selecting one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub class_id: u8,
    pub luma: [i16; 2],
    pub r_minus_b: [i16; 2],
    pub g_minus_b: [i16; 2],
}

impl ThresholdRule {
    pub fn validate(&self, classes: u8) -> Result<()> {
        if self.class_id == 0 || self.class_id >= classes {
            return Err(Error::BackendConfig(format!(
                "rule class_id {} outside 1..{classes}",
                self.class_id
            )));
        }
        for (name, [lo, hi]) in [
            ("luma", self.luma),
            ("r_minus_b", self.r_minus_b),
            ("g_minus_b", self.g_minus_b),
        ] {
            if lo > hi {
                return Err(Error::BackendConfig(format!(
                    "{name} range [{lo}, {hi}] is not ordered"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn matches(&self, r: u8, g: u8, b: u8) -> bool {
        let l = luma(r, g, b) as i16;
        let rb = r as i16 - b as i16;
        let gb = g as i16 - b as i16;
        l >= self.luma[0]
            && l <= self.luma[1]
            && rb >= self.r_minus_b[0]
            && rb <= self.r_minus_b[1]
            && gb >= self.g_minus_b[0]
            && gb <= self.g_minus_b[1]
    }
}

/// First matching rule wins; unmatched pixels are background.
pub fn segment_builtin(tile: &RgbImage, rules: &[ThresholdRule], classes: u8) -> LabelMask {
    let labels = tile
        .as_raw()
        .chunks_exact(3)
        .map(|p| {
            rules
                .iter()
                .find(|r| r.matches(p[0], p[1], p[2]))
                .map_or(0, |r| r.class_id)
        })
        .collect();
    LabelMask {
        width: tile.width(),
        height: tile.height(),
        classes,
        labels,
        confidence: None,
    }
}
