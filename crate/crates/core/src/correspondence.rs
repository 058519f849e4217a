//! Cosine nearest neighbours and best-buddy (mutual nearest neighbour) pairs.
//!
//! Search is exhaustive over unit-normalized rows. Similarities are computed
//! tile by tile; each query scans the bank in index order and keeps the first
//! maximum, so ties always resolve to the lowest index.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{log_bin, BinningConfig};
use crate::descriptor_store::{patch_center_px, pixel_to_patch, DescriptorField, DescriptorMatrix, FieldMeta};
use crate::error::{Error, Result};

const QUERY_TILE: usize = 32;
const BANK_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub src: (usize, usize),
    pub tgt: (usize, usize),
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub src_meta: FieldMeta,
    pub tgt_meta: FieldMeta,
}

/// One line of the JSON-lines match output, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub src: [f64; 2],
    pub tgt: [f64; 2],
    pub sim: f64,
}

impl MatchSet {
    pub fn records(&self) -> Result<Vec<MatchRecord>> {
        self.pairs
            .iter()
            .map(|m| {
                let (sy, sx) = patch_center_px(m.src.0, m.src.1, &self.src_meta)?;
                let (ty, tx) = patch_center_px(m.tgt.0, m.tgt.1, &self.tgt_meta)?;
                Ok(MatchRecord {
                    src: [sy, sx],
                    tgt: [ty, tx],
                    sim: m.similarity,
                })
            })
            .collect()
    }
}

pub fn write_match_records(records: &[MatchRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn unit_rows(data: &[f32], dim: usize) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    for (i, row) in out.chunks_mut(dim).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// For every query row, the bank index of maximal cosine similarity.
fn argmax_rows(queries: &[f64], bank: &[f64], dim: usize) -> Vec<(usize, f64)> {
    let n_bank = bank.len() / dim;
    queries
        .par_chunks(QUERY_TILE * dim)
        .flat_map_iter(|tile| {
            let nq = tile.len() / dim;
            let mut best = vec![(0usize, f64::NEG_INFINITY); nq];
            for b0 in (0..n_bank).step_by(BANK_TILE) {
                let b1 = (b0 + BANK_TILE).min(n_bank);
                for (qi, q) in tile.chunks(dim).enumerate() {
                    for j in b0..b1 {
                        let s = dot(q, &bank[j * dim..(j + 1) * dim]);
                        if s > best[qi].1 {
                            best[qi] = (j, s);
                        }
                    }
                }
            }
            best
        })
        .collect()
}

/// Cosine nearest neighbour of `query` among the rows of `bank`.
pub fn nearest_neighbor(query: &[f32], bank: &DescriptorMatrix) -> Result<(usize, f64)> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty bank".into()));
    }
    if query.len() != bank.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            actual: query.len(),
        });
    }
    let q = unit_rows(query, bank.dim())?;
    let b = unit_rows(bank.data(), bank.dim())?;
    let (idx, sim) = argmax_rows(&q, &b, bank.dim())[0];
    Ok((idx, sim.clamp(-1.0, 1.0)))
}

/// Pairs `(m, q)` that are each other's cosine nearest neighbour.
pub fn best_buddies(m: &DescriptorField, q: &DescriptorField) -> Result<MatchSet> {
    if m.dim() != q.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            actual: q.dim(),
        });
    }
    let dim = m.dim();
    let mu = unit_rows(m.data(), dim)?;
    let qu = unit_rows(q.data(), dim)?;
    let m_to_q = argmax_rows(&mu, &qu, dim);
    let q_to_m = argmax_rows(&qu, &mu, dim);

    let (mw, qw) = (m.grid_w(), q.grid_w());
    let pairs = m_to_q
        .iter()
        .enumerate()
        .filter(|&(i, &(j, _))| q_to_m[j].0 == i)
        .map(|(i, &(j, sim))| Match {
            src: (i / mw, i % mw),
            tgt: (j / qw, j % qw),
            similarity: sim.clamp(-1.0, 1.0),
        })
        .collect();
    Ok(MatchSet {
        pairs,
        src_meta: m.meta().clone(),
        tgt_meta: q.meta().clone(),
    })
}

/// Transfers pixel keypoints from the source image to the target image via
/// nearest neighbours of binned descriptors. Returns target patch centres
/// and their similarities.
pub fn match_keypoints(
    src_kps: &[(f64, f64)],
    src: &DescriptorField,
    tgt: &DescriptorField,
    cfg: &BinningConfig,
) -> Result<Vec<((f64, f64), f64)>> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimMismatch {
            expected: src.dim(),
            actual: tgt.dim(),
        });
    }
    let cells: Vec<(usize, usize)> = src_kps
        .iter()
        .map(|&(y, x)| pixel_to_patch(y, x, src.meta()))
        .collect::<Result<_>>()?;
    let src_b = log_bin(src, cfg)?;
    let tgt_b = log_bin(tgt, cfg)?;
    let dim = src_b.dim();

    let mut queries = Vec::with_capacity(cells.len() * dim);
    for &(r, c) in &cells {
        queries.extend_from_slice(src_b.descriptor(r, c));
    }
    let qu = unit_rows(&queries, dim)?;
    let tu = unit_rows(tgt_b.data(), dim)?;
    let tw = tgt.grid_w();
    argmax_rows(&qu, &tu, dim)
        .into_iter()
        .map(|(j, sim)| Ok((patch_center_px(j / tw, j % tw, tgt.meta())?, sim.clamp(-1.0, 1.0))))
        .collect()
}
