//! Binary container for dense descriptor fields and saliency fields.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VITD" | version: u32 = 1 | header_len: u32 | JSON header | f32 payload
//! ```
//!
//! The payload is stored row-major in `(row, col, channel)` order. The JSON
//! header carries the [`FieldMeta`] plus the grid dimensions, which are
//! cross-checked against the geometry on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VITD";
pub const FORMAT_VERSION: u32 = 1;
const PRELUDE_LEN: usize = 12;

/// Per-patch representation inside a ViT attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Key,
    Query,
    Value,
    Token,
}

impl Facet {
    pub fn as_str(&self) -> &'static str {
        match self {
            Facet::Key => "key",
            Facet::Query => "query",
            Facet::Value => "value",
            Facet::Token => "token",
        }
    }
}

impl std::str::FromStr for Facet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" | "k" => Ok(Facet::Key),
            "query" | "q" => Ok(Facet::Query),
            "value" | "v" => Ok(Facet::Value),
            "token" | "t" => Ok(Facet::Token),
            other => Err(Error::InvalidArgument(format!("unknown facet {other:?}"))),
        }
    }
}

impl std::fmt::Display for Facet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry and provenance of one extracted field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub image_id: String,
    pub image_height_px: u32,
    pub image_width_px: u32,
    pub patch_size_px: u32,
    pub stride_px: u32,
    pub layer_index: u32,
    pub facet: Facet,
    pub model_id: String,
    pub descriptor_dim: u32,
    /// Set by the extractor on crop/flip copies: they join clustering but
    /// never receive a mask of their own.
    #[serde(default)]
    pub augmented: bool,
}

impl FieldMeta {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(msg));
        if self.image_id.is_empty() {
            return fail("empty image_id".into());
        }
        if self.image_height_px == 0 || self.image_width_px == 0 {
            return fail("image dimensions must be positive".into());
        }
        if self.patch_size_px == 0 || self.stride_px == 0 {
            return fail("patch size and stride must be positive".into());
        }
        if self.stride_px > self.patch_size_px {
            return fail(format!(
                "stride {} exceeds patch size {}",
                self.stride_px, self.patch_size_px
            ));
        }
        if self.patch_size_px > self.image_height_px || self.patch_size_px > self.image_width_px {
            return fail(format!(
                "patch size {} larger than image {}x{}",
                self.patch_size_px, self.image_height_px, self.image_width_px
            ));
        }
        if self.descriptor_dim == 0 {
            return fail("descriptor_dim must be positive".into());
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        ((self.image_height_px - self.patch_size_px) / self.stride_px + 1) as usize
    }

    pub fn grid_w(&self) -> usize {
        ((self.image_width_px - self.patch_size_px) / self.stride_px + 1) as usize
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn dim(&self) -> usize {
        self.descriptor_dim as usize
    }

    /// True when two metas describe the same patch grid.
    pub fn same_grid(&self, other: &FieldMeta) -> bool {
        self.image_height_px == other.image_height_px
            && self.image_width_px == other.image_width_px
            && self.patch_size_px == other.patch_size_px
            && self.stride_px == other.stride_px
    }
}

/// Dense per-patch descriptors of one image for one (layer, facet).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    meta: FieldMeta,
    data: Vec<f32>,
}

impl DescriptorField {
    pub fn new(meta: FieldMeta, data: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        let expected = meta.num_patches() * meta.dim();
        if data.len() != expected {
            return Err(Error::Invariant(format!(
                "data length {} != grid {}x{} x dim {}",
                data.len(),
                meta.grid_h(),
                meta.grid_w(),
                meta.dim()
            )));
        }
        check_finite(&data)?;
        Ok(Self { meta, data })
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn grid_h(&self) -> usize {
        self.meta.grid_h()
    }

    pub fn grid_w(&self) -> usize {
        self.meta.grid_w()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim()
    }

    pub fn num_patches(&self) -> usize {
        self.meta.num_patches()
    }

    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let d = self.dim();
        let start = (row * self.grid_w() + col) * d;
        &self.data[start..start + d]
    }

    /// Descriptor at a flat (row-major) cell index.
    pub fn descriptor_at(&self, cell: usize) -> &[f32] {
        let d = self.dim();
        &self.data[cell * d..(cell + 1) * d]
    }

    pub fn into_parts(self) -> (FieldMeta, Vec<f32>) {
        (self.meta, self.data)
    }
}

/// Per-patch saliency in `[0, 1]`, stored as a one-channel field.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyField {
    meta: FieldMeta,
    values: Vec<f32>,
}

impl SaliencyField {
    pub fn new(meta: FieldMeta, values: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if meta.descriptor_dim != 1 {
            return Err(Error::Invariant(format!(
                "saliency field must have descriptor_dim 1, got {}",
                meta.descriptor_dim
            )));
        }
        if values.len() != meta.num_patches() {
            return Err(Error::Invariant(format!(
                "saliency length {} != grid {}x{}",
                values.len(),
                meta.grid_h(),
                meta.grid_w()
            )));
        }
        check_finite(&values)?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant(format!(
                "saliency value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { meta, values })
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn grid_h(&self) -> usize {
        self.meta.grid_h()
    }

    pub fn grid_w(&self) -> usize {
        self.meta.grid_w()
    }
}

/// Either kind of field stored in a VITD container.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Descriptor(DescriptorField),
    Saliency(SaliencyField),
}

impl Field {
    pub fn meta(&self) -> &FieldMeta {
        match self {
            Field::Descriptor(f) => f.meta(),
            Field::Saliency(f) => f.meta(),
        }
    }

    fn payload(&self) -> &[f32] {
        match self {
            Field::Descriptor(f) => f.data(),
            Field::Saliency(f) => f.values(),
        }
    }
}

impl From<DescriptorField> for Field {
    fn from(f: DescriptorField) -> Self {
        Field::Descriptor(f)
    }
}

impl From<SaliencyField> for Field {
    fn from(f: SaliencyField) -> Self {
        Field::Saliency(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FieldKind {
    Descriptor,
    Saliency,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: FieldKind,
    #[serde(flatten)]
    meta: FieldMeta,
    grid_h: u32,
    grid_w: u32,
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Serializes a field into container bytes.
pub fn encode_field(field: &Field) -> Result<Vec<u8>> {
    let meta = field.meta();
    meta.validate()?;
    let payload = field.payload();
    check_finite(payload)?;
    let header = Header {
        kind: match field {
            Field::Descriptor(_) => FieldKind::Descriptor,
            Field::Saliency(_) => FieldKind::Saliency,
        },
        meta: meta.clone(),
        grid_h: meta.grid_h() as u32,
        grid_w: meta.grid_w() as u32,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidHeader(e.to_string()))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidHeader("header exceeds u32 length".into()))?;

    let mut out = Vec::with_capacity(PRELUDE_LEN + json.len() + payload.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses and validates container bytes.
pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let magic_len = bytes.len().min(4);
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(Error::BadMagic {
            found: bytes[..magic_len].to_vec(),
        });
    }
    if bytes.len() < PRELUDE_LEN {
        return Err(Error::Truncated {
            needed: PRELUDE_LEN,
            available: bytes.len(),
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = read_u32(8) as usize;
    let header_end = PRELUDE_LEN
        .checked_add(header_len)
        .ok_or_else(|| Error::InvalidHeader("header length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            needed: header_end,
            available: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PRELUDE_LEN..header_end])
        .map_err(|e| Error::InvalidHeader(e.to_string()))?;
    header
        .meta
        .validate()
        .map_err(|e| Error::InvalidHeader(e.to_string()))?;
    let meta = header.meta;
    if header.grid_h as usize != meta.grid_h() || header.grid_w as usize != meta.grid_w() {
        return Err(Error::InvalidHeader(format!(
            "grid {}x{} inconsistent with geometry (expected {}x{})",
            header.grid_h,
            header.grid_w,
            meta.grid_h(),
            meta.grid_w()
        )));
    }
    if header.kind == FieldKind::Saliency && meta.descriptor_dim != 1 {
        return Err(Error::InvalidHeader(
            "saliency field with descriptor_dim != 1".into(),
        ));
    }

    let expected = meta
        .num_patches()
        .checked_mul(meta.dim())
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidHeader("payload size overflow".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(&values)?;

    match header.kind {
        FieldKind::Descriptor => DescriptorField::new(meta, values).map(Field::Descriptor),
        FieldKind::Saliency => SaliencyField::new(meta, values).map(Field::Saliency),
    }
}

pub fn write_field(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_field(field)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes)
}

pub fn read_descriptor(path: impl AsRef<Path>) -> Result<DescriptorField> {
    match read_field(path.as_ref())? {
        Field::Descriptor(f) => Ok(f),
        Field::Saliency(_) => Err(Error::InvalidHeader(format!(
            "{} holds a saliency field, expected descriptors",
            path.as_ref().display()
        ))),
    }
}

pub fn read_saliency(path: impl AsRef<Path>) -> Result<SaliencyField> {
    match read_field(path.as_ref())? {
        Field::Saliency(f) => Ok(f),
        Field::Descriptor(_) => Err(Error::InvalidHeader(format!(
            "{} holds descriptors, expected a saliency field",
            path.as_ref().display()
        ))),
    }
}

/// Pixel-space center `(y, x)` of the patch at grid cell `(row, col)`.
pub fn patch_center_px(row: usize, col: usize, meta: &FieldMeta) -> Result<(f64, f64)> {
    if row >= meta.grid_h() || col >= meta.grid_w() {
        return Err(Error::OutOfRange(format!(
            "cell ({row}, {col}) outside grid {}x{}",
            meta.grid_h(),
            meta.grid_w()
        )));
    }
    let half = (meta.patch_size_px as f64 - 1.0) / 2.0;
    let s = meta.stride_px as f64;
    Ok((row as f64 * s + half, col as f64 * s + half))
}

/// Grid cell whose patch center is nearest to pixel `(y, x)`.
///
/// Ties go to the lower index on each axis.
pub fn pixel_to_patch(y: f64, x: f64, meta: &FieldMeta) -> Result<(usize, usize)> {
    let h = meta.image_height_px as f64;
    let w = meta.image_width_px as f64;
    if !(y >= 0.0 && y < h && x >= 0.0 && x < w) {
        return Err(Error::OutOfRange(format!(
            "pixel ({y}, {x}) outside image {}x{}",
            meta.image_height_px, meta.image_width_px
        )));
    }
    let half = (meta.patch_size_px as f64 - 1.0) / 2.0;
    let s = meta.stride_px as f64;
    Ok((
        nearest_index(y, half, s, meta.grid_h()),
        nearest_index(x, half, s, meta.grid_w()),
    ))
}

fn nearest_index(p: f64, offset: f64, stride: f64, n: usize) -> usize {
    let t = ((p - offset) / stride).floor();
    let lo = (t.max(0.0) as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let center = |i: usize| i as f64 * stride + offset;
    if (p - center(hi)).abs() < (p - center(lo)).abs() {
        hi
    } else {
        lo
    }
}

/// Origin of one row of a [`DescriptorMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    /// Index into [`DescriptorMatrix::sources`].
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

/// One input field's slot in a stacked matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInfo {
    pub image_id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub augmented: bool,
}

/// Bag of descriptors: `N x D` rows with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    dim: usize,
    data: Vec<f32>,
    provenance: Vec<Provenance>,
    sources: Vec<SourceInfo>,
}

impl DescriptorMatrix {
    /// Matrix from raw rows. Provenance treats the rows as one `N x 1` grid.
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        check_finite(&data)?;
        let n = data.len() / dim;
        Ok(Self {
            dim,
            data,
            provenance: (0..n)
                .map(|row| Provenance {
                    source: 0,
                    row,
                    col: 0,
                })
                .collect(),
            sources: vec![SourceInfo {
                image_id: "rows".into(),
                grid_h: n,
                grid_w: 1,
                augmented: false,
            }],
        })
    }

    pub(crate) fn from_raw_parts(
        dim: usize,
        data: Vec<f32>,
        provenance: Vec<Provenance>,
        sources: Vec<SourceInfo>,
    ) -> Self {
        debug_assert_eq!(data.len(), provenance.len() * dim);
        Self {
            dim,
            data,
            provenance,
            sources,
        }
    }

    pub fn rows(&self) -> usize {
        self.provenance.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn sources(&self) -> &[SourceInfo] {
        &self.sources
    }

    /// `(image_id, row, col)` of matrix row `i`.
    pub fn origin(&self, i: usize) -> (&str, usize, usize) {
        let p = self.provenance[i];
        (&self.sources[p.source].image_id, p.row, p.col)
    }
}

/// Stacks fields into one bag of descriptors, in input order then row-major.
pub fn stack_fields(fields: &[DescriptorField]) -> Result<DescriptorMatrix> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fields to stack".into()))?;
    let dim = first.dim();
    let total: usize = fields.iter().map(|f| f.num_patches()).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut provenance = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(fields.len());
    for (source, field) in fields.iter().enumerate() {
        if field.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: field.dim(),
            });
        }
        data.extend_from_slice(field.data());
        let (gh, gw) = (field.grid_h(), field.grid_w());
        for row in 0..gh {
            for col in 0..gw {
                provenance.push(Provenance { source, row, col });
            }
        }
        sources.push(SourceInfo {
            image_id: field.meta().image_id.clone(),
            grid_h: gh,
            grid_w: gw,
            augmented: field.meta().augmented,
        });
    }
    Ok(DescriptorMatrix::from_raw_parts(dim, data, provenance, sources))
}
