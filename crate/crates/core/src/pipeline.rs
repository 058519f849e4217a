//! File-level drivers: read a directory of VITD fields, run one task, write
//! masks / matches / metrics plus a `report.json`.
//!
//! Reports carry the fully resolved configuration and nothing time- or
//! host-dependent, so a report can be fed back in to reproduce its outputs
//! byte for byte.
//!
//! Input naming: `{image_id}_{layer}_{facet}.vitd` for descriptors,
//! `{image_id}_saliency.vitd` for saliency and, optionally,
//! `{image_id}.png|jpg` for the RGB image used by refinement and overlays.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::binning::{log_bin, BinningConfig};
use crate::clustering::{elbow_select_k, kmeans, ClusterModel, ElbowConfig, ElbowResult, KMeansConfig};
use crate::correspondence::{best_buddies, match_keypoints, write_match_records, MatchRecord};
use crate::cosegmentation::{
    build_masks, collect_segment_saliencies, refine_part_mask, refine_pixel_mask, vote_foreground,
    VotingConfig,
};
use crate::descriptor_store::{
    read_descriptor, read_saliency, stack_fields, write_field, DescriptorField, Facet, Field,
    SaliencyField,
};
use crate::error::{Error, Result};
use crate::feature_analysis::{components_field, pca, render_component_maps};
use crate::mask::LabelMask;
use crate::metrics::{
    jaccard, landmark_regression_error, nmi_ari, pck, precision_px, CellGeometry, ClusterAgreement,
    LandmarkRegression, PartObservation,
};
use crate::part_cosegmentation::part_segment;
use crate::render;

/// Which descriptor files to read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Selection {
    pub layer: u32,
    pub facet: Facet,
    /// Required stride; `None` accepts any stride shared by all files.
    pub stride: Option<u32>,
}

impl Default for Selection {
    fn default() -> Self {
        Self {
            layer: 11,
            facet: Facet::Key,
            stride: None,
        }
    }
}

impl Selection {
    pub fn file_suffix(&self) -> String {
        format!("_{}_{}.vitd", self.layer, self.facet)
    }

    pub fn descriptor_path(&self, dir: &Path, image_id: &str) -> PathBuf {
        dir.join(format!("{image_id}{}", self.file_suffix()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosegConfig {
    pub input_dir: PathBuf,
    /// Where RGB images live; defaults to `input_dir`.
    pub image_dir: Option<PathBuf>,
    pub selection: Selection,
    /// Fixed cluster count; `None` picks k by the elbow rule.
    pub k: Option<usize>,
    pub elbow: ElbowConfig,
    /// `k` inside is ignored; the seed drives every random choice.
    pub kmeans: KMeansConfig,
    pub voting: VotingConfig,
    pub refine: bool,
}

impl Default for CosegConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::new(),
            image_dir: None,
            selection: Selection::default(),
            k: None,
            elbow: ElbowConfig::default(),
            kmeans: KMeansConfig::default(),
            voting: VotingConfig::default(),
            refine: true,
        }
    }
}

impl CosegConfig {
    fn images_dir(&self) -> &Path {
        self.image_dir.as_deref().unwrap_or(&self.input_dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartsConfig {
    pub coseg: CosegConfig,
    pub num_parts: usize,
}

impl Default for PartsConfig {
    fn default() -> Self {
        Self {
            coseg: CosegConfig::default(),
            num_parts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// When set, `source`/`target` are image ids resolved through
    /// `selection`; otherwise they are file paths.
    pub input_dir: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub source: String,
    pub target: String,
    pub selection: Selection,
    /// JSON array of `[y, x]` source pixels; switches to keypoint transfer.
    pub keypoints: Option<PathBuf>,
    pub binning: BinningConfig,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            image_dir: None,
            source: String::new(),
            target: String::new(),
            selection: Selection {
                layer: 9,
                ..Selection::default()
            },
            keypoints: None,
            binning: BinningConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub manifest: PathBuf,
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            pred_dir: PathBuf::new(),
            gt_dir: PathBuf::new(),
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaConfig {
    pub input_dir: PathBuf,
    pub selection: Selection,
    pub n_components: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::new(),
            selection: Selection::default(),
            n_components: 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Descriptor fields (sorted by image id) with their saliency, plus
/// augmented fields that only take part in clustering.
#[derive(Debug, Clone)]
pub struct CosegInputs {
    pub fields: Vec<DescriptorField>,
    pub saliencies: Vec<SaliencyField>,
    pub augmented: Vec<DescriptorField>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            out.push((name.to_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn check_consistent(fields: &[DescriptorField], sel: &Selection) -> Result<()> {
    let Some(first) = fields.first() else {
        return Ok(());
    };
    let m0 = first.meta();
    for f in fields {
        let m = f.meta();
        if m.layer_index != sel.layer || m.facet != sel.facet {
            return Err(Error::Invariant(format!(
                "{}: holds layer {} {} but layer {} {} was requested",
                m.image_id, m.layer_index, m.facet, sel.layer, sel.facet
            )));
        }
        if let Some(s) = sel.stride {
            if m.stride_px != s {
                return Err(Error::Invariant(format!(
                    "{}: stride {} but {s} was requested",
                    m.image_id, m.stride_px
                )));
            }
        }
        if m.descriptor_dim != m0.descriptor_dim
            || m.stride_px != m0.stride_px
            || m.patch_size_px != m0.patch_size_px
            || m.model_id != m0.model_id
        {
            return Err(Error::Invariant(format!(
                "{} and {} were extracted with different settings",
                m0.image_id, m.image_id
            )));
        }
    }
    Ok(())
}

/// Reads every `*_{layer}_{facet}.vitd` field in `dir`; with
/// `with_saliency`, also pairs each non-augmented field with its
/// `*_saliency.vitd`.
pub fn load_inputs(dir: &Path, sel: &Selection, with_saliency: bool) -> Result<CosegInputs> {
    let suffix = sel.file_suffix();
    let mut fields = Vec::new();
    let mut augmented = Vec::new();
    let mut saliency_by_id = BTreeMap::new();
    for (name, path) in sorted_entries(dir)? {
        if name.ends_with(&suffix) {
            let f = read_descriptor(&path)?;
            if f.meta().augmented {
                augmented.push(f);
            } else {
                fields.push(f);
            }
        } else if with_saliency && name.ends_with("_saliency.vitd") {
            let s = read_saliency(&path)?;
            if saliency_by_id.insert(s.meta().image_id.clone(), s).is_some() {
                return Err(Error::Invariant(format!("duplicate saliency in {}", path.display())));
            }
        }
    }
    if fields.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no *{suffix} files in {}",
            dir.display()
        )));
    }
    fields.sort_by(|a, b| a.meta().image_id.cmp(&b.meta().image_id));
    if let Some(w) = fields.windows(2).find(|w| w[0].meta().image_id == w[1].meta().image_id) {
        return Err(Error::Invariant(format!("duplicate image id {}", w[0].meta().image_id)));
    }
    check_consistent(&fields, sel)?;
    check_consistent(&augmented, sel)?;
    if let (Some(a), Some(f)) = (augmented.first(), fields.first()) {
        if a.dim() != f.dim() || a.meta().model_id != f.meta().model_id {
            return Err(Error::Invariant("augmented fields differ from the originals".into()));
        }
    }
    let mut saliencies = Vec::new();
    if with_saliency {
        for f in &fields {
            let id = &f.meta().image_id;
            let s = saliency_by_id
                .remove(id)
                .ok_or_else(|| Error::InvalidArgument(format!("missing {id}_saliency.vitd")))?;
            if s.grid_h() != f.grid_h() || s.grid_w() != f.grid_w() {
                return Err(Error::ShapeMismatch {
                    expected: f.num_patches(),
                    actual: s.values().len(),
                });
            }
            saliencies.push(s);
        }
    }
    Ok(CosegInputs {
        fields,
        saliencies,
        augmented,
    })
}

// ---------------------------------------------------------------------------
// Co-segmentation

#[derive(Debug, Clone)]
pub struct CosegResult {
    pub k: usize,
    pub elbow: Option<ElbowResult>,
    pub model: ClusterModel,
    pub segment_saliency: BTreeMap<u32, Vec<f64>>,
    pub fg_clusters: BTreeSet<u32>,
    /// Cluster id per cell, one mask per original image.
    pub cluster_labels: Vec<LabelMask>,
    /// Binary patch-grid masks for the original images.
    pub masks: Vec<LabelMask>,
    /// Binary masks for the augmented fields, in input order.
    pub augmented_masks: Vec<LabelMask>,
}

/// Clusters all descriptors jointly and votes the foreground clusters.
pub fn cosegment(inputs: &CosegInputs, cfg: &CosegConfig) -> Result<CosegResult> {
    cfg.voting.validate()?;
    let all: Vec<DescriptorField> = inputs
        .fields
        .iter()
        .chain(&inputs.augmented)
        .cloned()
        .collect();
    let matrix = stack_fields(&all)?;
    let (k, elbow) = match cfg.k {
        Some(k) => (k, None),
        None => {
            let mut range = cfg.elbow.clone();
            range.k_max = range.k_max.min(matrix.rows());
            if range.k_min >= range.k_max {
                return Err(Error::InvalidArgument(format!(
                    "{} patches are too few for elbow selection from k = {}",
                    matrix.rows(),
                    range.k_min
                )));
            }
            let e = elbow_select_k(&matrix, &range, &cfg.kmeans)?;
            (e.k, Some(e))
        }
    };
    let model = kmeans(
        &matrix,
        &KMeansConfig {
            k,
            ..cfg.kmeans.clone()
        },
    )?;
    let labels: Vec<LabelMask> = (0..all.len())
        .map(|i| model.training_labels(&matrix, i))
        .collect::<Result<_>>()?;
    let n = inputs.fields.len();
    let segment_saliency = collect_segment_saliencies(&labels[..n], &inputs.saliencies, k)?;
    let fg_clusters = vote_foreground(&segment_saliency, &cfg.voting, n);
    let mut masks = build_masks(&labels, &fg_clusters);
    let augmented_masks = masks.split_off(n);
    let mut cluster_labels = labels;
    cluster_labels.truncate(n);
    Ok(CosegResult {
        k,
        elbow,
        model,
        segment_saliency,
        fg_clusters,
        cluster_labels,
        masks,
        augmented_masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub foreground_cells: usize,
    pub foreground_pixels: usize,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub elbow_inertias: Option<Vec<(usize, f64)>>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cluster_sizes: Vec<usize>,
    pub segment_saliency: BTreeMap<u32, Vec<f64>>,
    pub fg_clusters: Vec<u32>,
}

impl ClusteringSummary {
    fn new(r: &CosegResult) -> Self {
        Self {
            k: r.k,
            elbow_inertias: r.elbow.as_ref().map(|e| e.inertias.clone()),
            inertia: r.model.inertia,
            iterations: r.model.iterations,
            converged: r.model.converged,
            cluster_sizes: r.model.cluster_sizes(),
            segment_saliency: r.segment_saliency.clone(),
            fg_clusters: r.fg_clusters.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosegReport {
    pub command: String,
    pub config: CosegConfig,
    pub num_images: usize,
    pub num_augmented: usize,
    pub clustering: ClusteringSummary,
    pub images: Vec<ImageSummary>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn load_image(dir: &Path, image_id: &str) -> Result<Option<image::RgbImage>> {
    render::find_image(dir, image_id)
        .map(|p| render::read_rgb(&p))
        .transpose()
}

/// Runs co-segmentation and writes `masks/`, `overlays/` and `report.json`
/// under `out_dir`.
pub fn run_coseg(cfg: &CosegConfig, out_dir: &Path) -> Result<CosegReport> {
    let inputs = load_inputs(&cfg.input_dir, &cfg.selection, true)?;
    let result = cosegment(&inputs, cfg)?;
    let mask_dir = out_dir.join("masks");
    let overlay_dir = out_dir.join("overlays");
    create_dir(&mask_dir)?;
    let mut images = Vec::new();
    for (field, grid_mask) in inputs.fields.iter().zip(&result.masks) {
        let id = &field.meta().image_id;
        let mut pixel = grid_mask.upsample_to_pixels(field.meta())?;
        let rgb = load_image(cfg.images_dir(), id)?;
        let refined = cfg.refine && rgb.is_some();
        if let (true, Some(img)) = (cfg.refine, &rgb) {
            pixel = refine_pixel_mask(&pixel, img)?;
        }
        render::write_binary_mask(&pixel, &mask_dir.join(format!("{id}.png")))?;
        if let Some(img) = &rgb {
            create_dir(&overlay_dir)?;
            let overlay = render::overlay_labels(img, &pixel)?;
            overlay
                .save(overlay_dir.join(format!("{id}.png")))
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        images.push(ImageSummary {
            image_id: id.clone(),
            foreground_cells: grid_mask.foreground_count(),
            foreground_pixels: pixel.foreground_count(),
            refined,
        });
    }
    let report = CosegReport {
        command: "coseg".into(),
        config: cfg.clone(),
        num_images: inputs.fields.len(),
        num_augmented: inputs.augmented.len(),
        clustering: ClusteringSummary::new(&result),
        images,
    };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Part co-segmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartsReport {
    pub command: String,
    pub config: PartsConfig,
    pub num_images: usize,
    pub num_augmented: usize,
    pub clustering: ClusteringSummary,
    /// Part id for every part-level cluster.
    pub part_of_cluster: Vec<u32>,
    pub part_inertia: f64,
    pub images: Vec<ImageSummary>,
}

/// Patch-grid part masks for the original images.
pub fn part_cosegment(inputs: &CosegInputs, cfg: &PartsConfig) -> Result<(CosegResult, Vec<LabelMask>, Vec<u32>, f64)> {
    let coseg = cosegment(inputs, &cfg.coseg)?;
    let fields: Vec<DescriptorField> = inputs
        .fields
        .iter()
        .chain(&inputs.augmented)
        .cloned()
        .collect();
    let fg: Vec<LabelMask> = coseg
        .masks
        .iter()
        .chain(&coseg.augmented_masks)
        .cloned()
        .collect();
    let parts = part_segment(&fields, &fg, cfg.num_parts, &cfg.coseg.kmeans)?;
    let mut masks = parts.masks;
    masks.truncate(inputs.fields.len());
    Ok((coseg, masks, parts.part_of_cluster, parts.model.inertia))
}

/// Runs part co-segmentation and writes `parts/`, `parts_colors.json`,
/// `overlays/` and `report.json` under `out_dir`.
pub fn run_parts(cfg: &PartsConfig, out_dir: &Path) -> Result<PartsReport> {
    let inputs = load_inputs(&cfg.coseg.input_dir, &cfg.coseg.selection, true)?;
    let (coseg, masks, part_of_cluster, part_inertia) = part_cosegment(&inputs, cfg)?;
    let part_dir = out_dir.join("parts");
    let overlay_dir = out_dir.join("overlays");
    create_dir(&part_dir)?;
    let mut images = Vec::new();
    for (field, grid_mask) in inputs.fields.iter().zip(&masks) {
        let id = &field.meta().image_id;
        let mut pixel = grid_mask.upsample_to_pixels(field.meta())?;
        let rgb = load_image(cfg.coseg.images_dir(), id)?;
        let refined = cfg.coseg.refine && rgb.is_some();
        if let (true, Some(img)) = (cfg.coseg.refine, &rgb) {
            pixel = refine_part_mask(&pixel, img)?;
        }
        render::write_label_mask(&pixel, &part_dir.join(format!("{id}.png")))?;
        if let Some(img) = &rgb {
            create_dir(&overlay_dir)?;
            render::overlay_labels(img, &pixel)?
                .save(overlay_dir.join(format!("{id}_parts.png")))
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        images.push(ImageSummary {
            image_id: id.clone(),
            foreground_cells: grid_mask.foreground_count(),
            foreground_pixels: pixel.foreground_count(),
            refined,
        });
    }
    let colors: BTreeMap<u32, [u8; 3]> = render::palette(cfg.num_parts)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as u32, c))
        .collect();
    write_json(&colors, &out_dir.join("parts_colors.json"))?;
    let report = PartsReport {
        command: "parts".into(),
        config: cfg.clone(),
        num_images: inputs.fields.len(),
        num_augmented: inputs.augmented.len(),
        clustering: ClusteringSummary::new(&coseg),
        part_of_cluster,
        part_inertia,
        images,
    };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Correspondence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub command: String,
    pub config: MatchConfig,
    pub source_id: String,
    pub target_id: String,
    pub keypoint_transfer: bool,
    pub num_matches: usize,
    pub mean_similarity: Option<f64>,
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let pts: Vec<[f64; 2]> = read_json(path)?;
    Ok(pts.into_iter().map(|[y, x]| (y, x)).collect())
}

fn resolve_field_path(cfg: &MatchConfig, name: &str) -> PathBuf {
    match &cfg.input_dir {
        Some(dir) => cfg.selection.descriptor_path(dir, name),
        None => PathBuf::from(name),
    }
}

/// Best-buddy pairs (or transferred keypoints) between two fields, written
/// to `matches.jsonl` with an optional side-by-side overlay.
pub fn run_match(cfg: &MatchConfig, out_dir: &Path) -> Result<MatchReport> {
    let src_path = resolve_field_path(cfg, &cfg.source);
    let tgt_path = resolve_field_path(cfg, &cfg.target);
    let src = read_descriptor(&src_path)?;
    let tgt = read_descriptor(&tgt_path)?;
    let sel = Selection {
        stride: cfg.selection.stride,
        ..cfg.selection.clone()
    };
    check_consistent(&[src.clone(), tgt.clone()], &sel)?;
    let records: Vec<MatchRecord> = match &cfg.keypoints {
        Some(kp_path) => {
            let kps = read_points(kp_path)?;
            match_keypoints(&kps, &src, &tgt, &cfg.binning)?
                .into_iter()
                .zip(&kps)
                .map(|(((ty, tx), sim), &(sy, sx))| MatchRecord {
                    src: [sy, sx],
                    tgt: [ty, tx],
                    sim,
                })
                .collect()
        }
        None => best_buddies(&log_bin(&src, &cfg.binning)?, &log_bin(&tgt, &cfg.binning)?)?.records()?,
    };
    create_dir(out_dir)?;
    let path = out_dir.join("matches.jsonl");
    let mut buf = Vec::new();
    write_match_records(&records, &mut buf).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;

    let (src_id, tgt_id) = (src.meta().image_id.clone(), tgt.meta().image_id.clone());
    let image_dir = cfg
        .image_dir
        .clone()
        .or_else(|| src_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    if let (Some(a), Some(b)) = (load_image(&image_dir, &src_id)?, load_image(&image_dir, &tgt_id)?) {
        render::match_overlay(&a, &b, &records)
            .save(out_dir.join("matches.png"))
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    let mean_similarity = (!records.is_empty())
        .then(|| records.iter().map(|r| r.sim).sum::<f64>() / records.len() as f64);
    let report = MatchReport {
        command: "match".into(),
        config: cfg.clone(),
        source_id: src_id,
        target_id: tgt_id,
        keypoint_transfer: cfg.keypoints.is_some(),
        num_matches: records.len(),
        mean_similarity,
    };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Lists the prediction / ground-truth pairs to score. Prediction paths are
/// relative to the prediction directory, ground truth to the ground-truth
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub coseg: Vec<MaskEntry>,
    pub parts: Vec<PartEntry>,
    pub keypoints: Vec<KeypointEntry>,
    pub landmarks: Option<LandmarkSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    /// Groups images for per-set averages.
    #[serde(default)]
    pub set: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartEntry {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// `[y, x]` pixels to sample; every pixel when absent.
    #[serde(default)]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    #[serde(default)]
    pub category: String,
    /// `matches.jsonl` (target side is used) or a JSON array of `[y, x]`.
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub num_parts: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub images: Vec<LandmarkImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkImage {
    pub image: String,
    pub part_mask: PathBuf,
    /// JSON array of `[y, x]` pixels.
    pub landmarks: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub images: usize,
    pub jaccard: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosegScores {
    pub per_set: BTreeMap<String, SetScore>,
    /// Means over sets.
    pub jaccard: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartScores {
    pub samples: usize,
    pub all: ClusterAgreement,
    pub foreground: ClusterAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckScores {
    pub alpha: f64,
    pub per_category: BTreeMap<String, f64>,
    /// Mean over categories.
    pub pck: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub config: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coseg: Option<CosegScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parts: Option<PartScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keypoints: Option<PckScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks: Option<LandmarkRegression>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn eval_coseg(entries: &[MaskEntry], cfg: &EvalConfig) -> Result<CosegScores> {
    let mut by_set: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in entries {
        let pred = render::read_mask(&cfg.pred_dir.join(&e.pred))?;
        let gt = render::read_mask(&cfg.gt_dir.join(&e.gt))?;
        by_set
            .entry(e.set.clone())
            .or_default()
            .push((jaccard(&pred, &gt)?, precision_px(&pred, &gt)?));
    }
    let per_set: BTreeMap<String, SetScore> = by_set
        .into_iter()
        .map(|(set, v)| {
            let score = SetScore {
                images: v.len(),
                jaccard: mean(v.iter().map(|s| s.0)),
                precision: mean(v.iter().map(|s| s.1)),
            };
            (set, score)
        })
        .collect();
    Ok(CosegScores {
        jaccard: mean(per_set.values().map(|s| s.jaccard)),
        precision: mean(per_set.values().map(|s| s.precision)),
        per_set,
    })
}

fn sample_at(mask: &LabelMask, points: &[(f64, f64)]) -> Result<Vec<u32>> {
    points
        .iter()
        .map(|&(y, x)| {
            let (r, c) = (y.round(), x.round());
            if r < 0.0 || c < 0.0 || r as usize >= mask.height() || c as usize >= mask.width() {
                Err(Error::OutOfRange(format!("point ({y}, {x}) outside the mask")))
            } else {
                Ok(mask.get(r as usize, c as usize))
            }
        })
        .collect()
}

fn eval_parts(entries: &[PartEntry], cfg: &EvalConfig) -> Result<PartScores> {
    let (mut pred_all, mut gt_all) = (Vec::new(), Vec::new());
    for e in entries {
        let pred = render::read_mask(&cfg.pred_dir.join(&e.pred))?;
        let gt = render::read_mask(&cfg.gt_dir.join(&e.gt))?;
        if !pred.same_shape(&gt) {
            return Err(Error::DimMismatch {
                expected: gt.len(),
                actual: pred.len(),
            });
        }
        match &e.points {
            Some(p) => {
                let pts = read_points(&cfg.gt_dir.join(p))?;
                pred_all.extend(sample_at(&pred, &pts)?);
                gt_all.extend(sample_at(&gt, &pts)?);
            }
            None => {
                pred_all.extend_from_slice(pred.labels());
                gt_all.extend_from_slice(gt.labels());
            }
        }
    }
    Ok(PartScores {
        samples: gt_all.len(),
        all: nmi_ari(&pred_all, &gt_all, false)?,
        foreground: nmi_ari(&pred_all, &gt_all, true)?,
    })
}

fn read_predicted_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<MatchRecord>(l)
                    .map(|r| (r.tgt[0], r.tgt[1]))
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
            })
            .collect()
    } else {
        read_points(path)
    }
}

fn eval_pck(entries: &[KeypointEntry], cfg: &EvalConfig) -> Result<PckScores> {
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in entries {
        let pred = read_predicted_points(&cfg.pred_dir.join(&e.pred))?;
        let gt = read_points(&cfg.gt_dir.join(&e.gt))?;
        by_cat
            .entry(e.category.clone())
            .or_default()
            .push(pck(&pred, &gt, cfg.alpha, e.image_h, e.image_w)?);
    }
    let per_category: BTreeMap<String, f64> = by_cat.into_iter().map(|(c, v)| (c, mean(v))).collect();
    Ok(PckScores {
        alpha: cfg.alpha,
        pck: mean(per_category.values().copied()),
        per_category,
    })
}

fn eval_landmarks(set: &LandmarkSet, cfg: &EvalConfig) -> Result<LandmarkRegression> {
    let mut index = BTreeMap::new();
    let mut obs = Vec::new();
    for img in &set.images {
        let mask = render::read_mask(&cfg.pred_dir.join(&img.part_mask))?;
        let (h, w) = (mask.height() as f64, mask.width() as f64);
        let landmarks = read_points(&cfg.gt_dir.join(&img.landmarks))?
            .into_iter()
            .map(|(y, x)| (y / h, x / w))
            .collect();
        index.insert(img.image.clone(), obs.len());
        obs.push(PartObservation {
            geometry: CellGeometry::pixels(mask.height(), mask.width()),
            mask,
            landmarks,
        });
    }
    let lookup = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown landmark image {id}")))
            })
            .collect()
    };
    landmark_regression_error(&obs, set.num_parts, &lookup(&set.train)?, &lookup(&set.test)?)
}

/// Scores everything listed in the manifest and writes `report.json`.
pub fn run_eval(cfg: &EvalConfig, out_dir: &Path) -> Result<EvalReport> {
    let manifest: Manifest = read_json(&cfg.manifest)?;
    let report = EvalReport {
        command: "eval".into(),
        config: cfg.clone(),
        coseg: (!manifest.coseg.is_empty())
            .then(|| eval_coseg(&manifest.coseg, cfg))
            .transpose()?,
        parts: (!manifest.parts.is_empty())
            .then(|| eval_parts(&manifest.parts, cfg))
            .transpose()?,
        keypoints: (!manifest.keypoints.is_empty())
            .then(|| eval_pck(&manifest.keypoints, cfg))
            .transpose()?,
        landmarks: manifest
            .landmarks
            .as_ref()
            .map(|s| eval_landmarks(s, cfg))
            .transpose()?,
    };
    create_dir(out_dir)?;
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub command: String,
    pub config: PcaConfig,
    pub num_images: usize,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub degenerate: bool,
}

/// Joint PCA over all images; writes `pca/*.png`, `components.vitd` and
/// `report.json`.
pub fn run_pca(cfg: &PcaConfig, out_dir: &Path) -> Result<PcaReport> {
    let inputs = load_inputs(&cfg.input_dir, &cfg.selection, false)?;
    let matrix = stack_fields(&inputs.fields)?;
    let result = pca(&matrix, cfg.n_components)?;
    render_component_maps(&matrix, &result, out_dir.join("pca"))?;
    let meta = inputs.fields[0].meta();
    let field = components_field(&result, meta.layer_index, meta.facet, &meta.model_id)?;
    write_field(&Field::Descriptor(field), out_dir.join("components.vitd"))?;
    let report = PcaReport {
        command: "pca".into(),
        config: cfg.clone(),
        num_images: inputs.fields.len(),
        explained_variance: result.explained_variance.clone(),
        total_variance: result.total_variance,
        degenerate: result.degenerate,
    };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

/// Pulls the resolved `config` back out of a previously written report.
pub fn config_from_report<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
    let value: serde_json::Value = read_json(path)?;
    let found = value.get("command").and_then(|c| c.as_str()).unwrap_or("");
    if found != command {
        return Err(Error::InvalidArgument(format!(
            "{} is a '{found}' report, not '{command}'",
            path.display()
        )));
    }
    let config = value
        .get("config")
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no config", path.display())))?;
    serde_json::from_value(config).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}
