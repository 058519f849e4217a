//! Common-foreground selection by saliency voting, plus a colour-model
//! refinement of the resulting masks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::descriptor_store::{FieldMeta, SaliencyField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Each image whose segment saliency reaches `tau` casts one vote; the
    /// cluster is foreground when votes reach `vote_fraction` of all images.
    PerImage,
    /// Sum segment saliencies over images and compare the total to `tau`.
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VotingConfig {
    pub tau: f64,
    pub vote_fraction: f64,
    pub mode: VoteMode,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            vote_fraction: 0.75,
            mode: VoteMode::PerImage,
        }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.vote_fraction > 0.0 && self.vote_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "vote_fraction {} outside (0, 1]",
                self.vote_fraction
            )));
        }
        Ok(())
    }
}

/// Mean saliency over the patches of `cluster` in one image, or `None` when
/// the cluster does not occur there.
pub fn segment_saliency(
    labels: &LabelMask,
    saliency: &SaliencyField,
    cluster: u32,
) -> Result<Option<f64>> {
    if labels.height() != saliency.grid_h() || labels.width() != saliency.grid_w() {
        return Err(Error::DimMismatch {
            expected: labels.len(),
            actual: saliency.values().len(),
        });
    }
    let (sum, count) = labels
        .labels()
        .iter()
        .zip(saliency.values())
        .filter(|(&l, _)| l == cluster)
        .fold((0.0f64, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
    Ok((count > 0).then(|| sum / count as f64))
}

/// Segment saliencies for every cluster, collected over all images where it
/// occurs. Images are visited in order.
pub fn collect_segment_saliencies(
    labels: &[LabelMask],
    saliencies: &[SaliencyField],
    k: usize,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    if labels.len() != saliencies.len() {
        return Err(Error::DimMismatch {
            expected: labels.len(),
            actual: saliencies.len(),
        });
    }
    let mut out: BTreeMap<u32, Vec<f64>> = (0..k as u32).map(|c| (c, Vec::new())).collect();
    for (mask, sal) in labels.iter().zip(saliencies) {
        for c in 0..k as u32 {
            if let Some(s) = segment_saliency(mask, sal, c)? {
                out.get_mut(&c).expect("all clusters present").push(s);
            }
        }
    }
    Ok(out)
}

/// Clusters voted into the common foreground.
pub fn vote_foreground(
    saliencies: &BTreeMap<u32, Vec<f64>>,
    cfg: &VotingConfig,
    num_images: usize,
) -> BTreeSet<u32> {
    // Absorb rounding in products such as 0.7 * 10.
    const SLACK: f64 = 1e-9;
    saliencies
        .iter()
        .filter(|(_, segs)| match cfg.mode {
            VoteMode::PerImage => {
                let votes = segs.iter().filter(|&&s| s >= cfg.tau).count();
                votes > 0 && votes as f64 >= cfg.vote_fraction * num_images as f64 - SLACK
            }
            VoteMode::Summed => !segs.is_empty() && segs.iter().sum::<f64>() >= cfg.tau,
        })
        .map(|(&c, _)| c)
        .collect()
}

/// Binary masks: 1 where the cell's cluster is foreground.
pub fn build_masks(labels: &[LabelMask], fg: &BTreeSet<u32>) -> Vec<LabelMask> {
    labels
        .iter()
        .map(|m| {
            let bin = m.labels().iter().map(|l| u32::from(fg.contains(l))).collect();
            LabelMask::new(m.image_id.clone(), m.height(), m.width(), bin).expect("same shape")
        })
        .collect()
}

const VARIANCE_FLOOR: f64 = 1.0;

/// Diagonal Gaussian in RGB.
#[derive(Debug, Clone, Copy)]
struct ColorModel {
    mean: [f64; 3],
    var: [f64; 3],
}

impl ColorModel {
    fn fit<'a>(pixels: impl Iterator<Item = &'a [u8; 3]>) -> Option<Self> {
        let mut n = 0.0;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for p in pixels {
            n += 1.0;
            for c in 0..3 {
                let v = p[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        if n == 0.0 {
            return None;
        }
        let mean = sum.map(|s| s / n);
        let mut var = [0.0; 3];
        for c in 0..3 {
            var[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0) + VARIANCE_FLOOR;
        }
        Some(Self { mean, var })
    }

    fn log_likelihood(&self, p: &[u8; 3]) -> f64 {
        (0..3)
            .map(|c| {
                let d = p[c] as f64 - self.mean[c];
                -0.5 * ((2.0 * std::f64::consts::PI * self.var[c]).ln() + d * d / self.var[c])
            })
            .sum()
    }
}

fn check_image(seed: &LabelMask, image: &RgbImage) -> Result<()> {
    if seed.height() != image.height() as usize || seed.width() != image.width() as usize {
        return Err(Error::DimMismatch {
            expected: seed.len(),
            actual: (image.height() * image.width()) as usize,
        });
    }
    Ok(())
}

/// Refines a patch-grid binary mask against the image colours.
///
/// The mask is upsampled to pixels, one colour model is fitted to each side
/// of the seed, pixels are relabelled by likelihood, and only foreground
/// components touching the seed foreground are kept. A seed that is all
/// foreground or all background comes back unchanged.
pub fn refine_mask(mask: &LabelMask, meta: &FieldMeta, image: &RgbImage) -> Result<LabelMask> {
    let seed = mask.upsample_to_pixels(meta)?;
    refine_pixel_mask(&seed, image)
}

pub fn refine_pixel_mask(seed: &LabelMask, image: &RgbImage) -> Result<LabelMask> {
    check_image(seed, image)?;
    let pixels: Vec<&[u8; 3]> = image.pixels().map(|p| &p.0).collect();
    let is_fg = |i: usize| seed.labels()[i] != 0;
    let fg = ColorModel::fit((0..pixels.len()).filter(|&i| is_fg(i)).map(|i| pixels[i]));
    let bg = ColorModel::fit((0..pixels.len()).filter(|&i| !is_fg(i)).map(|i| pixels[i]));
    let (Some(fg), Some(bg)) = (fg, bg) else {
        return Ok(seed.clone());
    };

    let relabeled: Vec<bool> = pixels
        .iter()
        .map(|p| fg.log_likelihood(p) > bg.log_likelihood(p))
        .collect();
    let keep = components_touching(&relabeled, seed.height(), seed.width(), |i| is_fg(i));
    let labels = keep.into_iter().map(u32::from).collect();
    LabelMask::new(seed.image_id.clone(), seed.height(), seed.width(), labels)
}

/// Relabels foreground pixels of a part mask with the most likely part
/// colour model. Background and parts with no pixels are left alone.
pub fn refine_part_mask(seed: &LabelMask, image: &RgbImage) -> Result<LabelMask> {
    check_image(seed, image)?;
    let pixels: Vec<&[u8; 3]> = image.pixels().map(|p| &p.0).collect();
    let max_part = seed.max_label();
    let models: Vec<(u32, ColorModel)> = (1..=max_part)
        .filter_map(|part| {
            ColorModel::fit(
                seed.labels()
                    .iter()
                    .zip(&pixels)
                    .filter(|(&l, _)| l == part)
                    .map(|(_, p)| *p),
            )
            .map(|m| (part, m))
        })
        .collect();
    if models.len() < 2 {
        return Ok(seed.clone());
    }
    let labels = seed
        .labels()
        .iter()
        .zip(&pixels)
        .map(|(&l, p)| {
            if l == 0 {
                return 0;
            }
            let mut best = (l, f64::NEG_INFINITY);
            for (part, m) in &models {
                let ll = m.log_likelihood(p);
                if ll > best.1 {
                    best = (*part, ll);
                }
            }
            best.0
        })
        .collect();
    LabelMask::new(seed.image_id.clone(), seed.height(), seed.width(), labels)
}

/// 4-connected components of `on` that contain at least one `anchor` pixel.
fn components_touching(
    on: &[bool],
    height: usize,
    width: usize,
    anchor: impl Fn(usize) -> bool,
) -> Vec<bool> {
    let mut keep = vec![false; on.len()];
    let mut visited = vec![false; on.len()];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..on.len() {
        if !on[start] || visited[start] {
            continue;
        }
        component.clear();
        let mut anchored = false;
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            anchored |= anchor(i);
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if on[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        if anchored {
            for &i in &component {
                keep[i] = true;
            }
        }
    }
    keep
}
