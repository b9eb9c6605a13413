//! Source/target frame pairs with ground-truth flow, stored as archives.

use std::path::Path;

use pcflow_autograd::Tensor;

use super::archive::{Archive, Array, DType};
use crate::error::{Error, Result};
use crate::geom::PointSet;
use crate::metrics::Intrinsics;

pub const REQUIRED_FIELDS: [&str; 3] = ["pos1", "pos2", "flow"];

/// Two consecutive frames and the motion of every source point.
///
/// Values are held in single precision, the precision of the file format,
/// so that a save/load cycle is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub pos1: Vec<[f32; 3]>,
    pub pos2: Vec<[f32; 3]>,
    pub flow: Vec<[f32; 3]>,
    /// `true` marks a valid (non-occluded) source point.
    pub mask: Option<Vec<bool>>,
    pub intrinsics: Option<[[f32; 3]; 3]>,
    /// Arrays other than the known fields, carried through unchanged.
    pub extras: Archive,
}

fn to_f32(points: &[[f64; 3]]) -> Vec<[f32; 3]> {
    points.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect()
}

fn to_f64(points: &[[f32; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
}

impl ScenePair {
    pub fn new(pos1: Vec<[f32; 3]>, pos2: Vec<[f32; 3]>, flow: Vec<[f32; 3]>) -> Result<Self> {
        let pair = Self {
            pos1,
            pos2,
            flow,
            mask: None,
            intrinsics: None,
            extras: Archive::new(),
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Rounds double-precision inputs to the stored precision.
    pub fn from_f64(pos1: &[[f64; 3]], pos2: &[[f64; 3]], flow: &[[f64; 3]]) -> Result<Self> {
        Self::new(to_f32(pos1), to_f32(pos2), to_f32(flow))
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos1.is_empty() || self.pos2.is_empty() {
            return Err(Error::invalid("scene pair frames must be non-empty"));
        }
        if self.flow.len() != self.pos1.len() {
            return Err(Error::shape("flow", format!("{}x3", self.pos1.len()), format!("{}x3", self.flow.len())));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.pos1.len() {
                return Err(Error::shape("mask", self.pos1.len(), m.len()));
            }
        }
        for (name, rows) in [("pos1", &self.pos1), ("pos2", &self.pos2), ("flow", &self.flow)] {
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} contains non-finite values")));
            }
        }
        if self.intrinsics.is_some_and(|k| k.iter().flatten().any(|v| !v.is_finite())) {
            return Err(Error::invalid("intrinsics contain non-finite values"));
        }
        Ok(())
    }

    pub fn source_len(&self) -> usize {
        self.pos1.len()
    }

    pub fn target_len(&self) -> usize {
        self.pos2.len()
    }

    pub fn source_points(&self) -> PointSet {
        PointSet::new(to_f64(&self.pos1)).expect("validated scene")
    }

    pub fn target_points(&self) -> PointSet {
        PointSet::new(to_f64(&self.pos2)).expect("validated scene")
    }

    pub fn flow_tensor(&self) -> Tensor {
        Tensor::from_points(&to_f64(&self.flow))
    }

    pub fn camera(&self) -> Option<Intrinsics> {
        self.intrinsics
            .map(|k| Intrinsics::from_matrix(&k.map(|row| row.map(f64::from))))
    }

    /// Mean norm of the GT flow over valid points.
    pub fn mean_flow_magnitude(&self) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, f) in self.flow.iter().enumerate() {
            if self.mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            total += f.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    pub fn to_archive(&self) -> Archive {
        let flat = |rows: &[[f32; 3]]| rows.iter().flatten().copied().collect::<Vec<f32>>();
        let mut ar = Archive::new();
        ar.insert("pos1", Array::from_f32(vec![self.pos1.len(), 3], &flat(&self.pos1)));
        ar.insert("pos2", Array::from_f32(vec![self.pos2.len(), 3], &flat(&self.pos2)));
        ar.insert("flow", Array::from_f32(vec![self.flow.len(), 3], &flat(&self.flow)));
        if let Some(m) = &self.mask {
            let bytes: Vec<u8> = m.iter().map(|&b| u8::from(b)).collect();
            ar.insert("mask", Array::from_u8(vec![m.len()], &bytes));
        }
        if let Some(k) = &self.intrinsics {
            let flat: Vec<f32> = k.iter().flatten().copied().collect();
            ar.insert("intrinsics", Array::from_f32(vec![3, 3], &flat));
        }
        for (name, array) in self.extras.iter() {
            ar.insert(name, array.clone());
        }
        ar
    }

    pub fn from_archive(mut ar: Archive, path: &Path) -> Result<Self> {
        let parse = |field: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            field: field.to_string(),
            message,
        };
        let points = |ar: &mut Archive, field: &str| -> Result<Vec<[f32; 3]>> {
            let a = ar.remove(field).ok_or_else(|| parse(field, "required array is missing".into()))?;
            if a.dtype != DType::F32 {
                return Err(parse(field, format!("expected float32, found {}", a.dtype.name())));
            }
            if a.shape.len() != 2 || a.shape[1] != 3 {
                return Err(parse(field, format!("expected shape (N, 3), found {:?}", a.shape)));
            }
            let v = a.to_f32().unwrap();
            Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        };
        let pos1 = points(&mut ar, "pos1")?;
        let pos2 = points(&mut ar, "pos2")?;
        let flow = points(&mut ar, "flow")?;
        if flow.len() != pos1.len() {
            return Err(Error::shape("flow", format!("{}x3", pos1.len()), format!("{}x3", flow.len())));
        }
        let mask = match ar.remove("mask") {
            None => None,
            Some(a) => {
                if a.dtype != DType::U8 {
                    return Err(parse("mask", format!("expected uint8, found {}", a.dtype.name())));
                }
                if a.shape.len() != 1 {
                    return Err(parse("mask", format!("expected shape (N,), found {:?}", a.shape)));
                }
                if a.shape[0] != pos1.len() {
                    return Err(Error::shape("mask", pos1.len(), a.shape[0]));
                }
                let bytes = a.to_u8().unwrap();
                if bytes.iter().any(|&b| b > 1) {
                    return Err(parse("mask", "values must be 0 or 1".into()));
                }
                Some(bytes.into_iter().map(|b| b == 1).collect())
            }
        };
        let intrinsics = match ar.remove("intrinsics") {
            None => None,
            Some(a) => {
                if a.dtype != DType::F32 || a.shape != [3, 3] {
                    return Err(parse(
                        "intrinsics",
                        format!("expected float32 (3, 3), found {} {:?}", a.dtype.name(), a.shape),
                    ));
                }
                let v = a.to_f32().unwrap();
                Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
            }
        };
        let pair = Self {
            pos1,
            pos2,
            flow,
            mask,
            intrinsics,
            extras: ar,
        };
        pair.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => parse("scene", m),
            other => other,
        })?;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> ScenePair {
        ScenePair::new(
            vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]],
            vec![[0.5, 0.5, 0.5]],
            vec![[0.1, 0.0, 0.0], [0.0, 0.0, -0.1]],
        )
        .unwrap()
    }

    #[test]
    fn missing_flow_is_named() {
        let mut ar = pair().to_archive();
        ar.remove("flow");
        let err = ScenePair::from_archive(ar, Path::new("s.npz")).unwrap_err();
        assert!(matches!(&err, Error::Parse { field, .. } if field == "flow"), "{err}");
    }

    #[test]
    fn wrong_mask_length_is_a_shape_error() {
        let mut ar = pair().to_archive();
        ar.insert("mask", Array::from_u8(vec![3], &[1, 1, 0]));
        let err = ScenePair::from_archive(ar, Path::new("s.npz")).unwrap_err();
        assert!(matches!(err, Error::Shape { context: "mask", .. }));
        assert!(pair().with_mask(vec![true]).is_err());
    }

    #[test]
    fn wrong_dtype_is_named() {
        let mut ar = pair().to_archive();
        ar.insert("pos2", Array::from_f64(vec![1, 3], &[0.0; 3]));
        let err = ScenePair::from_archive(ar, Path::new("s.npz")).unwrap_err();
        assert!(err.to_string().contains("pos2"));
    }

    #[test]
    fn archive_round_trip() {
        let mut p = pair().with_mask(vec![true, false]).unwrap();
        p.intrinsics = Some([[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]]);
        p.extras.insert("note", Array::from_u8(vec![2], b"hi"));
        let back = ScenePair::from_archive(p.to_archive(), Path::new("mem")).unwrap();
        assert_eq!(back, p);
    }
}
