//! Spatial context via hierarchical neighbour binning.
//!
//! Each cell's descriptor is extended with the descriptors of its eight
//! neighbours at dilations `base^0, base^1, ...`. The output layout is
//!
//! ```text
//! [own | level 1: (-d,-d) (-d,0) (-d,+d) (0,-d) (0,+d) (+d,-d) (+d,0) (+d,+d) | level 2: ... ]
//! ```
//!
//! Neighbours that fall outside the grid contribute zero slots.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::descriptor_store::DescriptorField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub levels: u32,
    pub dilation_base: u32,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            dilation_base: 2,
        }
    }
}

impl BinningConfig {
    pub fn off() -> Self {
        Self {
            levels: 0,
            dilation_base: 2,
        }
    }

    pub fn output_dim(&self, dim: usize) -> usize {
        dim * (1 + 8 * self.levels as usize)
    }

    fn dilations(&self) -> Result<Vec<i64>> {
        if self.dilation_base == 0 {
            return Err(Error::InvalidArgument("dilation_base must be >= 1".into()));
        }
        (0..self.levels)
            .map(|l| {
                (self.dilation_base as i64)
                    .checked_pow(l)
                    .ok_or_else(|| Error::InvalidArgument("dilation overflow".into()))
            })
            .collect()
    }
}

const OFFSETS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn log_bin(field: &DescriptorField, cfg: &BinningConfig) -> Result<DescriptorField> {
    let dilations = cfg.dilations()?;
    if dilations.is_empty() {
        return Ok(field.clone());
    }
    let (gh, gw, d) = (field.grid_h() as i64, field.grid_w() as i64, field.dim());
    let out_dim = cfg.output_dim(d);
    let mut out = vec![0.0f32; field.num_patches() * out_dim];

    out.par_chunks_mut(out_dim).enumerate().for_each(|(cell, dst)| {
        let (r, c) = ((cell as i64) / gw, (cell as i64) % gw);
        dst[..d].copy_from_slice(field.descriptor_at(cell));
        let mut slot = 1;
        for &dil in &dilations {
            for (dr, dc) in OFFSETS {
                let (nr, nc) = (r + dr * dil, c + dc * dil);
                if (0..gh).contains(&nr) && (0..gw).contains(&nc) {
                    dst[slot * d..(slot + 1) * d]
                        .copy_from_slice(field.descriptor(nr as usize, nc as usize));
                }
                slot += 1;
            }
        }
    });

    let mut meta = field.meta().clone();
    meta.descriptor_dim = out_dim as u32;
    DescriptorField::new(meta, out)
}
