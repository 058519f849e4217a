//! Part discovery: k-means restricted to foreground descriptors.

use crate::clustering::{kmeans, ClusterModel, KMeansConfig};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::descriptor_store::{DescriptorField, DescriptorMatrix, Provenance, SourceInfo};

/// Part masks plus the clustering that produced them.
#[derive(Debug, Clone)]
pub struct PartSegmentation {
    pub masks: Vec<LabelMask>,
    pub model: ClusterModel,
    /// `part_of_cluster[j]` is the part id (>= 1) of cluster `j`, or 0 when
    /// the cluster ended up empty.
    pub part_of_cluster: Vec<u32>,
}

/// Foreground descriptors of every field, stacked in input order.
pub fn foreground_matrix(fields: &[DescriptorField], fg_masks: &[LabelMask]) -> Result<DescriptorMatrix> {
    if fields.len() != fg_masks.len() {
        return Err(Error::DimMismatch {
            expected: fields.len(),
            actual: fg_masks.len(),
        });
    }
    let dim = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fields".into()))?
        .dim();
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    let mut sources = Vec::with_capacity(fields.len());
    for (source, (field, mask)) in fields.iter().zip(fg_masks).enumerate() {
        if field.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: field.dim(),
            });
        }
        if mask.height() != field.grid_h() || mask.width() != field.grid_w() {
            return Err(Error::DimMismatch {
                expected: field.num_patches(),
                actual: mask.len(),
            });
        }
        for (cell, &l) in mask.labels().iter().enumerate() {
            if l != 0 {
                data.extend_from_slice(field.descriptor_at(cell));
                provenance.push(Provenance {
                    source,
                    row: cell / field.grid_w(),
                    col: cell % field.grid_w(),
                });
            }
        }
        sources.push(SourceInfo {
            image_id: field.meta().image_id.clone(),
            grid_h: field.grid_h(),
            grid_w: field.grid_w(),
            augmented: field.meta().augmented,
        });
    }
    Ok(DescriptorMatrix::from_raw_parts(dim, data, provenance, sources))
}

/// Part ids for clusters: non-empty clusters by descending size, ties by
/// smaller centroid norm, then by cluster index.
pub fn order_parts(model: &ClusterModel) -> Vec<u32> {
    let sizes = model.cluster_sizes();
    let norm = |j: usize| model.centroid(j).iter().map(|v| v * v).sum::<f64>();
    let mut order: Vec<usize> = (0..model.k).filter(|&j| sizes[j] > 0).collect();
    order.sort_by(|&a, &b| {
        sizes[b]
            .cmp(&sizes[a])
            .then(norm(a).total_cmp(&norm(b)))
            .then(a.cmp(&b))
    });
    let mut part_of = vec![0u32; model.k];
    for (rank, &j) in order.iter().enumerate() {
        part_of[j] = rank as u32 + 1;
    }
    part_of
}

/// Co-segments foreground patches into `num_parts` parts shared across
/// images. Background stays 0, parts are labelled `1..=num_parts`.
pub fn part_segment(
    fields: &[DescriptorField],
    fg_masks: &[LabelMask],
    num_parts: usize,
    cfg: &KMeansConfig,
) -> Result<PartSegmentation> {
    if num_parts == 0 {
        return Err(Error::InvalidArgument("num_parts must be positive".into()));
    }
    let matrix = foreground_matrix(fields, fg_masks)?;
    if matrix.rows() < num_parts {
        return Err(Error::InvalidArgument(format!(
            "{} foreground patches cannot form {num_parts} parts",
            matrix.rows()
        )));
    }
    let model = kmeans(
        &matrix,
        &KMeansConfig {
            k: num_parts,
            ..cfg.clone()
        },
    )?;
    let part_of_cluster = order_parts(&model);

    let mut masks: Vec<LabelMask> = fields
        .iter()
        .map(|f| LabelMask::filled(f.meta().image_id.clone(), f.grid_h(), f.grid_w(), 0))
        .collect();
    for (p, &cluster) in matrix.provenance().iter().zip(&model.labels) {
        let width = masks[p.source].width();
        masks[p.source].labels_mut()[p.row * width + p.col] = part_of_cluster[cluster as usize];
    }
    Ok(PartSegmentation {
        masks,
        model,
        part_of_cluster,
    })
}
