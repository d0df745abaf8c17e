//! Point-cloud frames and their binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "SCKDFRM1"
//! frame_id   u32
//! modality   u8       0 = lidar, 1 = radar
//! has_labels u8       0 or 1
//! N          u32      number of points
//! F          u32      features per point (lidar 4, radar 5)
//! points     N*F f32  row-major
//! if has_labels:
//!   B        u32
//!   B records of 7 f32 (cx, cy, cz, l, w, h, yaw) followed by u8 class_id
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::boxes::{Box3D, ObjectClass};
use crate::error::{ensure, Error, Result};

pub const FRAME_MAGIC: &[u8; 8] = b"SCKDFRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Lidar,
    Radar,
}

impl Modality {
    /// Feature columns per point: lidar `(x, y, z, intensity)`,
    /// radar `(x, y, z, rcs, doppler)`.
    pub fn num_features(self) -> usize {
        match self {
            Modality::Lidar => 4,
            Modality::Radar => 5,
        }
    }

    fn code(self) -> u8 {
        match self {
            Modality::Lidar => 0,
            Modality::Radar => 1,
        }
    }
}

/// One sensor sweep. Points are stored row-major, `num_features()` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub frame_id: u32,
    pub modality: Modality,
    pub points: Vec<f64>,
    pub labels: Option<Vec<Box3D>>,
}

impl PointCloudFrame {
    pub fn new(frame_id: u32, modality: Modality, points: Vec<f64>) -> Result<Self> {
        let f = modality.num_features();
        ensure!(
            points.len().is_multiple_of(f),
            Validation,
            "{} values is not a whole number of {f}-feature points",
            points.len()
        );
        ensure!(
            points.iter().all(|v| v.is_finite()),
            Validation,
            "frame {frame_id} has non-finite point values"
        );
        Ok(Self {
            frame_id,
            modality,
            points,
            labels: None,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.len() / self.modality.num_features()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let f = self.modality.num_features();
        &self.points[i * f..(i + 1) * f]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.modality.num_features())
    }

    /// Copy of the frame with labels removed.
    pub fn stripped(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let f = self.modality.num_features();
        let mut out = Vec::with_capacity(26 + self.points.len() * 4);
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.push(self.modality.code());
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&(self.num_points() as u32).to_le_bytes());
        out.extend_from_slice(&(f as u32).to_le_bytes());
        for &v in &self.points {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
            for b in labels {
                let vals = [
                    b.center[0],
                    b.center[1],
                    b.center[2],
                    b.size[0],
                    b.size[1],
                    b.size[2],
                    b.yaw,
                ];
                for v in vals {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
                out.push(b.class.index() as u8);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != FRAME_MAGIC {
            return Err(r.error(0, "magic", format!("expected SCKDFRM1, found {magic:?}")));
        }
        let frame_id = r.u32("frame_id")?;
        let at = r.pos;
        let modality = match r.u8("modality")? {
            0 => Modality::Lidar,
            1 => Modality::Radar,
            m => return Err(r.error(at, "modality", format!("unknown modality code {m}"))),
        };
        let at = r.pos;
        let has_labels = match r.u8("has_labels")? {
            0 => false,
            1 => true,
            v => return Err(r.error(at, "has_labels", format!("expected 0 or 1, found {v}"))),
        };
        let n = r.u32("N")? as usize;
        let at = r.pos;
        let f = r.u32("F")? as usize;
        if f != modality.num_features() {
            return Err(r.error(
                at,
                "F",
                format!(
                    "{modality:?} frames carry {} features per point, header declares {f}",
                    modality.num_features()
                ),
            ));
        }
        let total = n
            .checked_mul(f)
            .ok_or_else(|| r.error(at, "N", "point count overflow"))?;
        let mut points = Vec::with_capacity(total);
        for _ in 0..total {
            let at = r.pos;
            let v = r.f32("points")? as f64;
            if !v.is_finite() {
                return Err(r.error(at, "points", "non-finite coordinate"));
            }
            points.push(v);
        }
        let labels = if has_labels {
            let b = r.u32("B")? as usize;
            let mut labels = Vec::with_capacity(b.min(1 << 16));
            for _ in 0..b {
                let start = r.pos;
                let mut vals = [0.0f64; 7];
                for v in vals.iter_mut() {
                    *v = r.f32("label")? as f64;
                }
                let at = r.pos;
                let class = ObjectClass::from_index(r.u8("class_id")? as usize)
                    .ok_or_else(|| r.error(at, "class_id", "unknown class id"))?;
                let bx = Box3D {
                    center: [vals[0], vals[1], vals[2]],
                    size: [vals[3], vals[4], vals[5]],
                    yaw: vals[6],
                    class,
                    score: None,
                };
                bx.validate()
                    .map_err(|e| r.error(start, "label", e.to_string()))?;
                labels.push(bx);
            }
            Some(labels)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.error(
                r.pos,
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            frame_id,
            modality,
            points,
            labels,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, field: &'static str, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: offset as u64,
            field,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn write_frame(frame: &PointCloudFrame, path: &Path) -> Result<()> {
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&frame.to_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_frame(path: &Path) -> Result<PointCloudFrame> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    PointCloudFrame::from_bytes(&bytes)
}
