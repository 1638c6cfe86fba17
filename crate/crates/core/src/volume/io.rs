//! MetaImage (.mhd header + .raw payload) reading and writing.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Grid, LabelVolume, Volume};
use crate::error::{Error, Result};

/// Element types supported in the raw payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    UShort,
    Float,
    Double,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "MET_UCHAR" => ElementType::UChar,
            "MET_SHORT" => ElementType::Short,
            "MET_USHORT" => ElementType::UShort,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            other => return Err(Error::ElementType(other.to_string())),
        })
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        let n = self.size();
        bytes
            .chunks_exact(n)
            .map(|c| match self {
                ElementType::UChar => c[0] as f64,
                ElementType::Short => i16::from_le_bytes([c[0], c[1]]) as f64,
                ElementType::UShort => u16::from_le_bytes([c[0], c[1]]) as f64,
                ElementType::Float => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
                ElementType::Double => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect()
    }

    /// Integer types round and saturate.
    fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        for &v in values {
            match self {
                ElementType::UChar => out.push(v.round().clamp(0.0, 255.0) as u8),
                ElementType::Short => {
                    out.extend_from_slice(&(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes())
                }
                ElementType::UShort => {
                    out.extend_from_slice(&(v.round().clamp(0.0, u16::MAX as f64) as u16).to_le_bytes())
                }
                ElementType::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ElementType::Double => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }
}

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MhdHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub element_type: ElementType,
    pub data_file: PathBuf,
}

impl MhdHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ndims = None;
        let mut dims = None;
        let mut spacing = [1.0; 3];
        let mut element_type = None;
        let mut data_file = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Header(format!("expected `key = value`, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "NDims" => {
                    ndims = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| Error::Header(format!("NDims: {e}")))?,
                    )
                }
                "DimSize" => dims = Some(parse_triple::<usize>("DimSize", value)?),
                "ElementSpacing" | "ElementSize" => spacing = parse_triple::<f64>("ElementSpacing", value)?,
                "ElementType" => element_type = Some(ElementType::parse(value)?),
                "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                    if value.eq_ignore_ascii_case("true") {
                        return Err(Error::Header("big-endian payloads are not supported".into()));
                    }
                }
                "CompressedData" => {
                    if value.eq_ignore_ascii_case("true") {
                        return Err(Error::Header("compressed payloads are not supported".into()));
                    }
                }
                "ElementDataFile" => data_file = Some(PathBuf::from(value)),
                _ => {}
            }
        }
        if ndims != Some(3) {
            return Err(Error::Header(format!("NDims must be 3, got {ndims:?}")));
        }
        let dims = dims.ok_or_else(|| Error::Header("missing DimSize".into()))?;
        if dims.contains(&0) {
            return Err(Error::Header(format!("zero DimSize {dims:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            element_type: element_type.ok_or_else(|| Error::Header("missing ElementType".into()))?,
            data_file: data_file.ok_or_else(|| Error::Header("missing ElementDataFile".into()))?,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "ObjectType = Image\nNDims = 3\nDimSize = {} {} {}\nElementSpacing = {} {} {}\n\
             ElementType = {}\nElementByteOrderMSB = False\nElementDataFile = {}\n",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            self.element_type.tag(),
            self.data_file.display()
        )
    }
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|e| Error::Header(format!("{key}: {e}"))))
        .collect::<Result<_>>()?;
    let n = parts.len();
    parts
        .try_into()
        .map_err(|_| Error::Header(format!("{key} needs 3 values, got {n}")))
}

/// Reads a header and its payload, returning the declared element type.
pub fn read_mhd(path: impl AsRef<Path>) -> Result<(MhdHeader, Volume)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = MhdHeader::parse(&text)?;
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims.iter().product::<usize>();
    let size = header.element_type.size();
    if bytes.len() != expected * size {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() / size,
        });
    }
    let data = header.element_type.decode(&bytes);
    let v = Grid::new(header.dims, header.spacing, data)?;
    Ok((header, v))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_mhd(path).map(|(_, v)| v)
}

/// Writes `path` (the .mhd header) and a sibling .raw payload.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>, element_type: ElementType) -> Result<()> {
    write_pair(
        path.as_ref(),
        v.dims(),
        v.spacing(),
        element_type,
        element_type.encode(v.data()),
    )
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (_, v) = read_mhd(path)?;
    let labels = v
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x < super::NUM_LABELS as f64 && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::InvalidVolume(format!("label value {x} outside 0..=5")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVolume::new(v.dims(), v.spacing(), labels)
}

pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_pair(
        path.as_ref(),
        l.dims(),
        l.spacing(),
        ElementType::UChar,
        l.data().to_vec(),
    )
}

fn write_pair(path: &Path, dims: [usize; 3], spacing: [f64; 3], et: ElementType, payload: Vec<u8>) -> Result<()> {
    let raw_path = path.with_extension("raw");
    let header = MhdHeader {
        dims,
        spacing,
        element_type: et,
        data_file: PathBuf::from(
            raw_path
                .file_name()
                .ok_or_else(|| Error::Header("empty file name".into()))?,
        ),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header.render()).map_err(|e| Error::io(path, e))
}
