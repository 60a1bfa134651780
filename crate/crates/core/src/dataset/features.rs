//! Per-image feature tensors and the `AMTF` binary feature file.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic    "AMTF"
//! version  u32 = 1
//! layout   u8   (0 = tiled, 1 = whole)
//! count    u32
//! records  count × { id_len u16, id bytes (UTF-8), payload f32[...] }
//! ```
//!
//! A tiled payload is `4 × 16 × 2048` values in (model, sub-image, dim)
//! row-major order; a whole payload is 8064 values.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView1, ArrayView3};

use crate::error::{Error, FormatError, Result};
use crate::{DENSENET_DIM, FEATURE_DIM, N_MODELS, N_SUB_IMAGES, WHOLE_DIM};

pub const FEATURE_MAGIC: [u8; 4] = *b"AMTF";
pub const FEATURE_VERSION: u32 = 1;

pub const TILED_LEN: usize = N_MODELS * N_SUB_IMAGES * FEATURE_DIM;
const DENSENET_ROW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Tiled,
    Whole,
}

impl Layout {
    pub fn tag(self) -> u8 {
        match self {
            Layout::Tiled => 0,
            Layout::Whole => 1,
        }
    }

    pub fn from_tag(tag: u8) -> std::result::Result<Self, FormatError> {
        match tag {
            0 => Ok(Layout::Tiled),
            1 => Ok(Layout::Whole),
            other => Err(FormatError::UnknownLayout(other)),
        }
    }

    pub fn payload_len(self) -> usize {
        match self {
            Layout::Tiled => TILED_LEN,
            Layout::Whole => WHOLE_DIM,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Tiled => "tiled",
            Layout::Whole => "whole",
        })
    }
}

/// Features of one image, stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    image_id: String,
    layout: Layout,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(image_id: impl Into<String>, layout: Layout, data: Vec<f32>) -> Result<Self> {
        let image_id = image_id.into();
        validate_payload(&image_id, layout, &data).map_err(|source| Error::Format {
            path: "<memory>".into(),
            source,
        })?;
        Ok(Self {
            image_id,
            layout,
            data,
        })
    }

    pub fn tiled(image_id: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        Self::new(image_id, Layout::Tiled, data)
    }

    pub fn whole(image_id: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        Self::new(image_id, Layout::Whole, data)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(model, sub_image, dim)` view of a tiled record.
    pub fn tiled_view(&self) -> Option<ArrayView3<'_, f32>> {
        match self.layout {
            Layout::Tiled => Some(
                ArrayView3::from_shape((N_MODELS, N_SUB_IMAGES, FEATURE_DIM), &self.data)
                    .expect("validated shape"),
            ),
            Layout::Whole => None,
        }
    }

    pub fn whole_view(&self) -> Option<ArrayView1<'_, f32>> {
        match self.layout {
            Layout::Whole => Some(ArrayView1::from(&self.data[..])),
            Layout::Tiled => None,
        }
    }

    pub fn tiled_f64(&self) -> Option<Array3<f64>> {
        self.tiled_view().map(|v| v.mapv(f64::from))
    }

    pub fn whole_f64(&self) -> Option<Array1<f64>> {
        self.whole_view().map(|v| v.mapv(f64::from))
    }
}

fn validate_payload(
    image_id: &str,
    layout: Layout,
    data: &[f32],
) -> std::result::Result<(), FormatError> {
    if data.len() != layout.payload_len() {
        return Err(FormatError::InvalidField {
            field: format!("{image_id}.payload"),
            reason: format!(
                "{layout} payload needs {} values, found {}",
                layout.payload_len(),
                data.len()
            ),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            image_id: image_id.to_string(),
            index,
        });
    }
    if layout == Layout::Tiled {
        for sub_image in 0..N_SUB_IMAGES {
            let start = (DENSENET_ROW * N_SUB_IMAGES + sub_image) * FEATURE_DIM;
            let pad = &data[start + DENSENET_DIM..start + FEATURE_DIM];
            if let Some(i) = pad.iter().position(|&v| v != 0.0) {
                return Err(FormatError::NonZeroPad {
                    image_id: image_id.to_string(),
                    sub_image,
                    index: DENSENET_DIM + i,
                    value: pad[i],
                });
            }
        }
    }
    Ok(())
}

/// Whole-image surrogate built from a tiled record by global max pooling over
/// the sixteen sub-images of each backbone, dropping the Densenet pad.
pub fn pool_whole_from_tiled(tensor: &FeatureTensor) -> Result<FeatureTensor> {
    let view = tensor
        .tiled_view()
        .ok_or_else(|| Error::Argument(format!("{} is not tiled", tensor.image_id)))?;
    let mut out = Vec::with_capacity(WHOLE_DIM);
    for model in 0..N_MODELS {
        let width = if model == DENSENET_ROW {
            DENSENET_DIM
        } else {
            FEATURE_DIM
        };
        for d in 0..width {
            let col = view.slice(ndarray::s![model, .., d]);
            out.push(col.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        }
    }
    FeatureTensor::whole(tensor.image_id.clone(), out)
}

/// Encodes `records` into `writer`. All records must share one layout; an
/// empty list is written with the tiled tag.
pub fn encode_features<W: Write>(mut writer: W, records: &[FeatureTensor]) -> Result<()> {
    let layout = records.first().map_or(Layout::Tiled, |r| r.layout);
    if let Some(r) = records.iter().find(|r| r.layout != layout) {
        return Err(Error::Argument(format!(
            "record {:?} has layout {} but file layout is {layout}",
            r.image_id, r.layout
        )));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Argument("too many records".into()))?;
    let io = |e| Error::io("<writer>", e);
    writer.write_all(&FEATURE_MAGIC).map_err(io)?;
    writer.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    writer.write_all(&[layout.tag()]).map_err(io)?;
    writer.write_all(&count.to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(layout.payload_len() * 4);
    for r in records {
        let id = r.image_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Argument(format!("image id too long: {:?}", r.image_id)))?;
        writer.write_all(&id_len.to_le_bytes()).map_err(io)?;
        writer.write_all(id).map_err(io)?;
        buf.clear();
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    context: impl FnOnce() -> String,
) -> std::result::Result<(), FormatError> {
    reader
        .read_exact(buf)
        .map_err(|_| FormatError::Truncated { context: context() })
}

/// Decodes a feature file, validating shapes and the Densenet zero pad.
pub fn decode_features<R: Read>(mut reader: R) -> std::result::Result<Vec<FeatureTensor>, FormatError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut reader, &mut magic, || "magic".into())?;
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut reader, &mut word, || "version".into())?;
    let version = u32::from_le_bytes(word);
    if version != FEATURE_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let mut tag = [0u8; 1];
    read_exact_or(&mut reader, &mut tag, || "layout".into())?;
    let layout = Layout::from_tag(tag[0])?;
    read_exact_or(&mut reader, &mut word, || "record count".into())?;
    let count = u32::from_le_bytes(word) as usize;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut payload = vec![0u8; layout.payload_len() * 4];
    for i in 0..count {
        let mut len = [0u8; 2];
        read_exact_or(&mut reader, &mut len, || format!("record {i} id length"))?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut reader, &mut id, || format!("record {i} id"))?;
        let image_id = String::from_utf8(id).map_err(|_| FormatError::InvalidField {
            field: format!("record {i} id"),
            reason: "not UTF-8".into(),
        })?;
        read_exact_or(&mut reader, &mut payload, || format!("record {i} ({image_id}) payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        validate_payload(&image_id, layout, &data)?;
        records.push(FeatureTensor {
            image_id,
            layout,
            data,
        });
    }
    Ok(records)
}

pub fn write_features(path: impl AsRef<Path>, records: &[FeatureTensor]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    encode_features(&mut writer, records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureTensor>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_features(BufReader::new(file)).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
