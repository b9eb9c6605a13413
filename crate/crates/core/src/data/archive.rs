//! Named-array archive: an uncompressed zip whose members are `.npy` files,
//! the layout numpy's `savez` produces.
//!
//! Arrays of unrecognised dtype are kept as raw bytes so they survive a
//! load/save cycle unchanged.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
    /// Any other numpy type descriptor, e.g. `<i8`.
    Other(String),
}

impl DType {
    fn descr(&self) -> &str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::U8 => "|u1",
            DType::Other(s) => s,
        }
    }

    fn parse(descr: &str) -> Self {
        match descr {
            "<f4" => DType::F32,
            "<f8" => DType::F64,
            "|u1" | "<u1" => DType::U8,
            other => DType::Other(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
            DType::U8 => "uint8",
            DType::Other(s) => s,
        }
    }
}

/// A row-major array with little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Array {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        Self {
            dtype: DType::F32,
            shape,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Self {
            dtype: DType::F64,
            shape,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_u8(shape: Vec<usize>, values: &[u8]) -> Self {
        Self {
            dtype: DType::U8,
            shape,
            bytes: values.to_vec(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32(&self) -> Option<Vec<f32>> {
        (self.dtype == DType::F32).then(|| {
            self.bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }

    pub fn to_f64(&self) -> Option<Vec<f64>> {
        (self.dtype == DType::F64).then(|| {
            self.bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }

    pub fn to_u8(&self) -> Option<Vec<u8>> {
        (self.dtype == DType::U8).then(|| self.bytes.clone())
    }

    fn item_size(dtype: &DType) -> Option<usize> {
        match dtype {
            DType::F32 => Some(4),
            DType::F64 => Some(8),
            DType::U8 => Some(1),
            DType::Other(d) => d.get(2..).and_then(|s| s.parse().ok()),
        }
    }

    fn to_npy(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
            ),
        };
        let mut header = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}", self.dtype.descr());
        // Magic, version and length take 10 bytes; pad the total to 64.
        let total = 10 + header.len() + 1;
        header.push_str(&" ".repeat((64 - total % 64) % 64));
        header.push('\n');
        let mut out = Vec::with_capacity(10 + header.len() + self.bytes.len());
        out.extend_from_slice(NPY_MAGIC);
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    fn from_npy(name: &str, raw: &[u8]) -> std::result::Result<Self, String> {
        if raw.len() < 10 || &raw[..6] != NPY_MAGIC {
            return Err("bad npy magic".into());
        }
        let (header_len, start) = match raw[6] {
            1 => (u16::from_le_bytes([raw[8], raw[9]]) as usize, 10),
            2 | 3 => {
                if raw.len() < 12 {
                    return Err("truncated npy header".into());
                }
                (u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]) as usize, 12)
            }
            v => return Err(format!("unsupported npy version {v}")),
        };
        let header = raw
            .get(start..start + header_len)
            .ok_or("truncated npy header")
            .and_then(|h| std::str::from_utf8(h).map_err(|_| "npy header is not text"))?;
        let descr = dict_value(header, "descr")
            .and_then(|v| v.strip_prefix('\'').and_then(|v| v.split('\'').next()))
            .ok_or("npy header lacks descr")?;
        let fortran = dict_value(header, "fortran_order").ok_or("npy header lacks fortran_order")?;
        if fortran.starts_with("True") {
            return Err("fortran-ordered arrays are not supported".into());
        }
        let shape_text = dict_value(header, "shape")
            .and_then(|v| v.strip_prefix('('))
            .and_then(|v| v.split(')').next())
            .ok_or("npy header lacks shape")?;
        let shape = shape_text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry `{s}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let dtype = DType::parse(descr);
        let bytes = raw[start + header_len..].to_vec();
        if let Some(size) = Self::item_size(&dtype) {
            let want = shape.iter().product::<usize>() * size;
            if bytes.len() != want {
                return Err(format!("`{name}` holds {} bytes, expected {want}", bytes.len()));
            }
        }
        Ok(Self { dtype, shape, bytes })
    }
}

/// Text following `'key':` in a numpy header dict.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let at = header.find(&pat)?;
    Some(header[at + pat.len()..].trim_start())
}

/// Ordered collection of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Array)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping the position of a replaced entry.
    pub fn insert(&mut self, name: &str, array: Array) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = array,
            None => self.entries.push((name.to_string(), array)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644)
            .large_file(false);
        for (name, array) in &self.entries {
            w.start_file(format!("{name}.npy"), opts).expect("in-memory zip write");
            w.write_all(&array.to_npy()).expect("in-memory zip write");
        }
        w.finish().expect("in-memory zip write").into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |field: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            field: field.to_string(),
            message,
        };
        let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(|e| parse("archive", e.to_string()))?;
        let mut entries = Vec::with_capacity(zip.len());
        for i in 0..zip.len() {
            let mut f = zip.by_index(i).map_err(|e| parse("archive", e.to_string()))?;
            let member = f.name().to_string();
            let name = member.strip_suffix(".npy").unwrap_or(&member).to_string();
            let mut raw = Vec::with_capacity(f.size() as usize);
            f.read_to_end(&mut raw).map_err(|e| parse(&name, e.to_string()))?;
            let array = Array::from_npy(&name, &raw).map_err(|m| parse(&name, m))?;
            entries.push((name, array));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_header_is_aligned_and_parses() {
        let a = Array::from_f32(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let raw = a.to_npy();
        let header_len = u16::from_le_bytes([raw[8], raw[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(Array::from_npy("a", &raw).unwrap(), a);
        let v = Array::from_u8(vec![4], &[1, 0, 1, 1]);
        assert_eq!(Array::from_npy("v", &v.to_npy()).unwrap(), v);
    }

    #[test]
    fn archive_round_trip_keeps_unknown_dtypes() {
        let mut ar = Archive::new();
        ar.insert("x", Array::from_f64(vec![2], &[0.5, -1.0]));
        ar.insert(
            "ids",
            Array {
                dtype: DType::Other("<i8".into()),
                shape: vec![1],
                bytes: 7i64.to_le_bytes().to_vec(),
            },
        );
        let bytes = ar.to_bytes();
        assert_eq!(bytes, ar.to_bytes());
        let back = Archive::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ar);
    }

    #[test]
    fn corrupt_payload_names_the_array() {
        let mut raw = Array::from_f32(vec![3], &[1.0, 2.0, 3.0]).to_npy();
        raw.truncate(raw.len() - 2);
        let err = Array::from_npy("pos1", &raw).unwrap_err();
        assert!(err.contains("pos1"));
        assert!(Array::from_npy("a", b"not an npy file").is_err());
    }
}
