//! `MET1` container: magic, `u32` little-endian header length, JSON header,
//! then the raw little-endian payload of every array in header order.
//! Complex arrays are stored as interleaved `(re, im)` `f32` pairs.

use std::fs;
use std::path::Path;

use megre_autodiff::{ComplexTensor, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, ContainerError, Error, Result};

pub const MAGIC: [u8; 4] = *b"MET1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Echo,
    Coil,
    Ky,
    Kx,
    Y,
    X,
    Channel,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Echo => "echo",
            Axis::Coil => "coil",
            Axis::Ky => "ky",
            Axis::Kx => "kx",
            Axis::Y => "y",
            Axis::X => "x",
            Axis::Channel => "channel",
        }
    }

    fn parse(s: &str) -> std::result::Result<Axis, ContainerError> {
        Ok(match s {
            "echo" => Axis::Echo,
            "coil" => Axis::Coil,
            "ky" => Axis::Ky,
            "kx" => Axis::Kx,
            "y" => Axis::Y,
            "x" => Axis::X,
            "channel" => Axis::Channel,
            other => return Err(ContainerError::UnknownAxis(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Tensor),
    C64(ComplexTensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::C64(_) => "c64",
            ArrayData::U8 { .. } => "u8",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(t) => t.shape(),
            ArrayData::C64(c) => c.shape(),
            ArrayData::U8 { shape, .. } => shape,
        }
    }

    fn element_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" => Some(4),
            "c64" => Some(8),
            "u8" => Some(1),
            _ => None,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            ArrayData::C64(c) => {
                for (re, im) in c.re().data().iter().zip(c.im().data()) {
                    out.extend_from_slice(&re.to_le_bytes());
                    out.extend_from_slice(&im.to_le_bytes());
                }
            }
            ArrayData::U8 { data, .. } => out.extend_from_slice(data),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub axes: Vec<Axis>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    axes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayHeader>,
    #[serde(default)]
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub arrays: Vec<NamedArray>,
    pub meta: Value,
}

impl Default for Container {
    fn default() -> Self {
        Container::new(Value::Null)
    }
}

fn header_err(msg: impl Into<String>) -> Error {
    ContainerError::Header(msg.into()).into()
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container {
            arrays: Vec::new(),
            meta,
        }
    }

    /// Appends an array; one axis label per dimension, names unique.
    pub fn push(&mut self, name: impl Into<String>, axes: &[Axis], data: ArrayData) -> Result<()> {
        let name = name.into();
        if axes.len() != data.shape().len() {
            return Err(header_err(format!(
                "array `{name}` has rank {} but {} axis labels",
                data.shape().len(),
                axes.len()
            )));
        }
        if let ArrayData::U8 { shape, data } = &data {
            if shape.iter().product::<usize>() != data.len() {
                return Err(header_err(format!("array `{name}`: u8 data length does not match shape")));
            }
        }
        if self.get(&name).is_some() {
            return Err(header_err(format!("duplicate array name `{name}`")));
        }
        self.arrays.push(NamedArray {
            name,
            axes: axes.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, axes: &[Axis], t: Tensor) -> Result<()> {
        self.push(name, axes, ArrayData::F32(t))
    }

    pub fn push_c64(&mut self, name: impl Into<String>, axes: &[Axis], c: ComplexTensor) -> Result<()> {
        self.push(name, axes, ArrayData::C64(c))
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()).into())
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor> {
        match &self.require(name)?.data {
            ArrayData::F32(t) => Ok(t),
            other => Err(ContainerError::WrongDtype {
                name: name.to_string(),
                found: other.dtype(),
                expected: "f32",
            }
            .into()),
        }
    }

    pub fn c64(&self, name: &str) -> Result<&ComplexTensor> {
        match &self.require(name)?.data {
            ArrayData::C64(c) => Ok(c),
            other => Err(ContainerError::WrongDtype {
                name: name.to_string(),
                found: other.dtype(),
                expected: "c64",
            }
            .into()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader {
                    name: a.name.clone(),
                    dtype: a.data.dtype().to_string(),
                    shape: a.data.shape().to_vec(),
                    axes: a.axes.iter().map(|ax| ax.as_str().to_string()).collect(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| header_err("header longer than 4 GiB"))?;
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            a.data.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 8 {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(ContainerError::BadMagic(bytes[..4].try_into().unwrap_or_default()).into());
            }
            return Err(ContainerError::TruncatedHeader.into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap_or_default();
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic).into());
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap_or_default()) as usize;
        let body = &bytes[8..];
        if body.len() < len {
            return Err(ContainerError::TruncatedHeader.into());
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| header_err(e.to_string()))?;
        let mut payload = &body[len..];
        let mut out = Container::new(header.meta);
        for ah in header.arrays {
            let size = ArrayData::element_size(&ah.dtype)
                .ok_or_else(|| ContainerError::UnknownDtype(ah.dtype.clone()))?;
            let axes = ah
                .axes
                .iter()
                .map(|s| Axis::parse(s))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = ah.shape.iter().product();
            let needed = count * size;
            if payload.len() < needed {
                return Err(ContainerError::Truncated {
                    array: ah.name,
                    needed,
                    available: payload.len(),
                }
                .into());
            }
            let (chunk, rest) = payload.split_at(needed);
            payload = rest;
            let floats = || -> Vec<f32> {
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()
            };
            let data = match ah.dtype.as_str() {
                "f32" => ArrayData::F32(Tensor::new(ah.shape, floats())?),
                "c64" => {
                    let v = floats();
                    let re = v.iter().step_by(2).copied().collect();
                    let im = v.iter().skip(1).step_by(2).copied().collect();
                    ArrayData::C64(ComplexTensor::new(
                        Tensor::new(ah.shape.clone(), re)?,
                        Tensor::new(ah.shape, im)?,
                    )?)
                }
                _ => ArrayData::U8 {
                    shape: ah.shape,
                    data: chunk.to_vec(),
                },
            };
            out.push(ah.name, &axes, data)?;
        }
        if !payload.is_empty() {
            return Err(ContainerError::TrailingBytes(payload.len()).into());
        }
        Ok(out)
    }

    /// Atomic write: the bytes go to a sibling temporary file that is then
    /// renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Container::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
