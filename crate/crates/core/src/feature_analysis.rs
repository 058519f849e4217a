//! PCA over descriptor bags and per-image component maps.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::descriptor_store::{DescriptorField, DescriptorMatrix, Facet, FieldMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub dim: usize,
    pub n_components: usize,
    pub mean: Vec<f64>,
    /// `n_components x dim`, orthonormal rows.
    pub components: Vec<f64>,
    /// `N x n_components` projections of the input rows.
    pub projected: Vec<f64>,
    /// Non-increasing variances along each component (N - 1 denominator).
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    /// The input had no variance; components are an arbitrary basis.
    pub degenerate: bool,
}

impl PcaResult {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn projection(&self, row: usize) -> &[f64] {
        &self.projected[row * self.n_components..(row + 1) * self.n_components]
    }

    pub fn project(&self, x: &[f32]) -> Vec<f64> {
        (0..self.n_components)
            .map(|c| {
                self.component(c)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (&v, m))| w * (v as f64 - m))
                    .sum()
            })
            .collect()
    }
}

pub fn pca(matrix: &DescriptorMatrix, n_components: usize) -> Result<PcaResult> {
    let (n, d) = (matrix.rows(), matrix.dim());
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two rows".into()));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "n_components {n_components} outside [1, {}]",
            n.min(d)
        )));
    }

    let x = DMatrix::from_row_iterator(n, d, matrix.data().iter().map(|&v| v as f64));
    let mean = x.row_mean();
    let mut xc = x;
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
    let total_variance = cov.trace();

    let mut components = Vec::with_capacity(n_components * d);
    let mut explained = Vec::with_capacity(n_components);
    let degenerate = !(total_variance > 0.0);
    if degenerate {
        for c in 0..n_components {
            components.extend((0..d).map(|j| if j == c { 1.0 } else { 0.0 }));
            explained.push(0.0);
        }
    } else {
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        for &j in order.iter().take(n_components) {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, x) } else { best });
            if lead.1 < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.extend(v);
            explained.push(eig.eigenvalues[j].max(0.0));
        }
    }

    let comp = DMatrix::from_row_slice(n_components, d, &components);
    let proj = xc * comp.transpose();
    let projected: Vec<f64> = proj.transpose().iter().copied().collect();

    Ok(PcaResult {
        dim: d,
        n_components,
        mean: mean.iter().copied().collect(),
        components,
        projected,
        explained_variance: explained,
        total_variance,
        degenerate,
    })
}

/// Rendered maps for one image: component 1 as grey, components 2-4 as RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMaps {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub gray: Vec<u8>,
    pub rgb: Option<Vec<u8>>,
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn to_byte(v: f64, (lo, hi): (f64, f64)) -> u8 {
    if hi > lo {
        ((v - lo) / (hi - lo) * 255.0).round() as u8
    } else {
        0
    }
}

/// Per-image component maps, min-max normalized over the whole matrix.
pub fn component_maps(matrix: &DescriptorMatrix, result: &PcaResult) -> Result<Vec<ComponentMaps>> {
    if result.projected.len() != matrix.rows() * result.n_components {
        return Err(Error::DimMismatch {
            expected: matrix.rows() * result.n_components,
            actual: result.projected.len(),
        });
    }
    let k = result.n_components;
    let ranges: Vec<(f64, f64)> = (0..k.min(4))
        .map(|c| min_max((0..matrix.rows()).map(|i| result.projected[i * k + c])))
        .collect();
    let with_rgb = k >= 4;

    let mut maps: Vec<ComponentMaps> = matrix
        .sources()
        .iter()
        .map(|s| ComponentMaps {
            image_id: s.image_id.clone(),
            height: s.grid_h,
            width: s.grid_w,
            gray: vec![0; s.grid_h * s.grid_w],
            rgb: with_rgb.then(|| vec![0; s.grid_h * s.grid_w * 3]),
        })
        .collect();
    for (i, p) in matrix.provenance().iter().enumerate() {
        let map = &mut maps[p.source];
        let cell = p.row * map.width + p.col;
        let proj = result.projection(i);
        map.gray[cell] = to_byte(proj[0], ranges[0]);
        if let Some(rgb) = map.rgb.as_mut() {
            for ch in 0..3 {
                rgb[cell * 3 + ch] = to_byte(proj[ch + 1], ranges[ch + 1]);
            }
        }
    }
    Ok(maps)
}

/// Writes `{image_id}_pc1.png` and, with four or more components,
/// `{image_id}_pc234.png` for every source image.
pub fn render_component_maps(
    matrix: &DescriptorMatrix,
    result: &PcaResult,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for map in component_maps(matrix, result)? {
        let (w, h) = (map.width as u32, map.height as u32);
        let gray_path = out_dir.join(format!("{}_pc1.png", map.image_id));
        GrayImage::from_raw(w, h, map.gray)
            .expect("buffer sized to grid")
            .save(&gray_path)
            .map_err(|e| Error::Image(e.to_string()))?;
        written.push(gray_path);
        if let Some(rgb) = map.rgb {
            let rgb_path = out_dir.join(format!("{}_pc234.png", map.image_id));
            RgbImage::from_raw(w, h, rgb)
                .expect("buffer sized to grid")
                .save(&rgb_path)
                .map_err(|e| Error::Image(e.to_string()))?;
            written.push(rgb_path);
        }
    }
    Ok(written)
}

/// Components as an `n_components x 1` descriptor field, for reuse by other
/// tools that read VITD files.
pub fn components_field(result: &PcaResult, layer_index: u32, facet: Facet, model_id: &str) -> Result<DescriptorField> {
    let meta = FieldMeta {
        image_id: "pca_components".into(),
        image_height_px: result.n_components as u32,
        image_width_px: 1,
        patch_size_px: 1,
        stride_px: 1,
        layer_index,
        facet,
        model_id: model_id.into(),
        descriptor_dim: result.dim as u32,
        augmented: false,
    };
    DescriptorField::new(meta, result.components.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor_store::{stack_fields, tests::meta};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(r: &PcaResult) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..r.n_components {
            for b in 0..r.n_components {
                let d: f64 = r.component(a).iter().zip(r.component(b)).map(|(x, y)| x * y).sum();
                worst = worst.max((d - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn rank_one_line() {
        let rows: Vec<f32> = (0..10).flat_map(|t| [t as f32, 2.0 * t as f32]).collect();
        let r = pca(&DescriptorMatrix::from_rows(2, rows).unwrap(), 2).unwrap();
        let c0 = r.component(0);
        let s = 1.0 / 5f64.sqrt();
        assert!((c0[0] - s).abs() < 1e-9 && (c0[1] - 2.0 * s).abs() < 1e-9);
        assert!(r.explained_variance[1].abs() < 1e-9);
    }

    #[test]
    fn symmetric_cross_has_equal_variances() {
        let rows = vec![1.0f32, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let r = pca(&DescriptorMatrix::from_rows(2, rows).unwrap(), 2).unwrap();
        assert!((r.explained_variance[0] - r.explained_variance[1]).abs() < 1e-12);
        assert!(orthonormality_error(&r) < 1e-12);
    }

    #[test]
    fn full_reconstruction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<f32> = (0..400).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let m = DescriptorMatrix::from_rows(8, rows.clone()).unwrap();
        let r = pca(&m, 8).unwrap();
        for i in 0..50 {
            for j in 0..8 {
                let rec: f64 = r.mean[j] + (0..8).map(|c| r.projection(i)[c] * r.component(c)[j]).sum::<f64>();
                assert!((rec - rows[i * 8 + j] as f64).abs() < 1e-5);
            }
        }
        assert!(orthonormality_error(&r) < 1e-5);
        assert!((r.explained_variance.iter().sum::<f64>() - r.total_variance).abs() < 1e-9);
        assert!(r.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn degenerate_input_is_flagged() {
        let m = DescriptorMatrix::from_rows(3, vec![1.0; 12]).unwrap();
        let r = pca(&m, 2).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.explained_variance, vec![0.0, 0.0]);
        assert!(orthonormality_error(&r) == 0.0);
        assert!(pca(&m, 4).is_err());
        assert!(pca(&DescriptorMatrix::from_rows(3, vec![1.0; 3]).unwrap(), 1).is_err());
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let rows: Vec<f32> = (0..10).flat_map(|t| [-(t as f32), 0.1 * t as f32]).collect();
        let r = pca(&DescriptorMatrix::from_rows(2, rows).unwrap(), 1).unwrap();
        assert!(r.component(0)[1] < 0.0 && r.component(0)[0] > 0.0);
    }

    #[test]
    fn maps_have_grid_shape_and_constant_field_is_flat() {
        let f = DescriptorField::new(meta(24, 16, 8, 8, 5), vec![0.7; 30]).unwrap();
        let m = stack_fields(&[f]).unwrap();
        let r = pca(&m, 4).unwrap();
        let maps = component_maps(&m, &r).unwrap();
        assert_eq!((maps[0].height, maps[0].width), (3, 2));
        assert!(maps[0].gray.iter().all(|&v| v == 0));
        assert!(maps[0].rgb.as_ref().unwrap().iter().all(|&v| v == 0));
        let r3 = pca(&m, 3).unwrap();
        assert!(component_maps(&m, &r3).unwrap()[0].rgb.is_none());
    }

    #[test]
    fn two_cluster_field_is_bilevel() {
        let mut data = Vec::new();
        for cell in 0..12 {
            data.extend(if cell % 3 == 0 { [1.0f32, 0.0, 2.0] } else { [0.0, 1.0, -1.0] });
        }
        let f = DescriptorField::new(meta(24, 32, 8, 8, 3), data).unwrap();
        let m = stack_fields(&[f]).unwrap();
        let r = pca(&m, 1).unwrap();
        let mut distinct: Vec<f64> = (0..12).map(|i| r.projection(i)[0]).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        let maps = component_maps(&m, &r).unwrap();
        let mut levels = maps[0].gray.clone();
        levels.sort();
        levels.dedup();
        assert_eq!(levels, vec![0, 255]);
    }

    #[test]
    fn renders_png_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = DescriptorField::new(meta(24, 16, 8, 8, 6), (0..36).map(|_| rng.random::<f32>()).collect()).unwrap();
        let m = stack_fields(&[f]).unwrap();
        let r = pca(&m, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = render_component_maps(&m, &r, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let img = image::open(&paths[1]).unwrap();
        assert_eq!((img.height(), img.width()), (3, 2));
        let cf = components_field(&r, 11, Facet::Key, "m").unwrap();
        assert_eq!((cf.grid_h(), cf.grid_w(), cf.dim()), (4, 1, 6));
    }

    proptest! {
        #[test]
        fn projection_ignores_constant_offset(
            rows in proptest::collection::vec(-5.0f32..5.0, 30),
            offset in proptest::collection::vec(-10.0f32..10.0, 3),
        ) {
            let a = DescriptorMatrix::from_rows(3, rows.clone()).unwrap();
            let shifted: Vec<f32> = rows.iter().enumerate().map(|(i, v)| v + offset[i % 3]).collect();
            let b = DescriptorMatrix::from_rows(3, shifted).unwrap();
            let (ra, rb) = (pca(&a, 2).unwrap(), pca(&b, 2).unwrap());
            prop_assume!(!ra.degenerate);
            // Skip near-degenerate spectra where component order is ill-defined.
            prop_assume!(ra.explained_variance[0] - ra.explained_variance[1] > 1e-2);
            prop_assume!(ra.explained_variance[1] > 1e-2);
            for i in 0..10 {
                prop_assert!((ra.projection(i)[0] - rb.projection(i)[0]).abs() < 1e-3);
            }
            prop_assert!(ra.explained_variance.iter().sum::<f64>() <= ra.total_variance + 1e-9);
        }
    }
}
