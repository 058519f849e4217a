//! Mask images, colour overlays and image lookup for the pipeline outputs.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::correspondence::MatchRecord;
use crate::error::{Error, Result};
use crate::mask::LabelMask;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

fn image_err(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

/// Looks for `{dir}/{image_id}.{png,jpg,jpeg}`.
pub fn find_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(image_err)?.to_rgb8())
}

/// Reads an 8-bit label or binary mask; pixel values become labels.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(image_err)?.to_luma8();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabelMask::new(
        id,
        img.height() as usize,
        img.width() as usize,
        img.pixels().map(|p| p.0[0] as u32).collect(),
    )
}

/// Binary mask as a 0/255 greyscale PNG.
pub fn write_binary_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) != 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(image_err)
}

/// Label mask with the label value stored directly in each pixel.
pub fn write_label_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    if mask.max_label() > u8::MAX as u32 {
        return Err(Error::InvalidArgument(format!(
            "label {} does not fit an 8-bit image",
            mask.max_label()
        )));
    }
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) as u8])
    });
    img.save(path).map_err(image_err)
}

const BASE_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// Colour per label; label 0 (background) is black.
pub fn palette(num_labels: usize) -> Vec<[u8; 3]> {
    std::iter::once([0, 0, 0])
        .chain((0..num_labels).map(|i| {
            let base = BASE_PALETTE[i % BASE_PALETTE.len()];
            // Darken on every wrap so repeated hues stay distinguishable.
            let shade = 1.0 / (1 + i / BASE_PALETTE.len()) as f32;
            base.map(|c| (c as f32 * shade) as u8)
        }))
        .collect()
}

fn blend(a: [u8; 3], b: [u8; 3], alpha: f32) -> [u8; 3] {
    [0, 1, 2].map(|i| (a[i] as f32 * (1.0 - alpha) + b[i] as f32 * alpha).round() as u8)
}

/// Image with labelled pixels tinted by their palette colour.
pub fn overlay_labels(image: &RgbImage, mask: &LabelMask) -> Result<RgbImage> {
    if mask.height() != image.height() as usize || mask.width() != image.width() as usize {
        return Err(Error::DimMismatch {
            expected: (image.height() * image.width()) as usize,
            actual: mask.len(),
        });
    }
    let colors = palette(mask.max_label() as usize);
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let px = image.get_pixel(x, y).0;
        let l = mask.get(y as usize, x as usize) as usize;
        Rgb(if l == 0 {
            blend(px, [0, 0, 0], 0.6)
        } else {
            blend(px, colors[l], 0.5)
        })
    }))
}

fn draw_line(img: &mut RgbImage, (y0, x0): (f64, f64), (y1, x1): (f64, f64), color: [u8; 3]) {
    let steps = (y1 - y0).abs().max((x1 - x0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (y, x) = (y0 + (y1 - y0) * t, x0 + (x1 - x0) * t);
        if y >= 0.0 && x >= 0.0 && (y as u32) < img.height() && (x as u32) < img.width() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Source and target side by side with a line per match.
pub fn match_overlay(src: &RgbImage, tgt: &RgbImage, records: &[MatchRecord]) -> RgbImage {
    let (w, h) = (src.width() + tgt.width(), src.height().max(tgt.height()));
    let mut out = RgbImage::new(w, h);
    image::imageops::replace(&mut out, src, 0, 0);
    image::imageops::replace(&mut out, tgt, src.width() as i64, 0);
    let colors = palette(records.len().max(1));
    let offset = src.width() as f64;
    for (i, r) in records.iter().enumerate() {
        draw_line(
            &mut out,
            (r.src[0], r.src[1]),
            (r.tgt[0], r.tgt[1] + offset),
            colors[i + 1],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_roundtrip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMask::new("x", 2, 3, vec![0, 1, 2, 3, 0, 4]).unwrap();
        let p = dir.path().join("x.png");
        write_label_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        write_binary_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap().labels(), &[0, 255, 255, 255, 0, 255]);
        assert!(write_label_mask(&LabelMask::filled("y", 1, 1, 300), &p).is_err());
    }

    #[test]
    fn palette_is_stable_and_background_black() {
        let p = palette(12);
        assert_eq!(p.len(), 13);
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p, palette(12));
        assert_ne!(p[1], p[11]);
    }

    #[test]
    fn overlay_checks_shape() {
        let img = RgbImage::new(4, 2);
        assert!(overlay_labels(&img, &LabelMask::filled("a", 2, 4, 1)).is_ok());
        assert!(overlay_labels(&img, &LabelMask::filled("a", 4, 2, 1)).is_err());
    }
}
