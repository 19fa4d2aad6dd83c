//! Binary model checkpoints.
//!
//! Little-endian layout: header `{magic "SCGS", version u32, primitive count
//! u64, sh degree u32}`, then one record per primitive (kind tag, position or
//! `(ray_index, z_raw)`, log-scale x3, quaternion x4, opacity logit, SH
//! coefficients), then the ray table, the pair table and the active mask.
//! Floats round-trip bit-exactly.

use super::{GaussianPrimitive, HybridModel, PairEntry, PrimitiveKind};
use crate::geometry::Ray;
use nalgebra::{Vector3, Vector4};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SCGS";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.out.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn vec3(&mut self, v: &Vector3<f64>) -> std::io::Result<()> {
        self.f64(v.x)?;
        self.f64(v.y)?;
        self.f64(v.z)
    }
}

struct Reader<R: Read> {
    input: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.input.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut b = [0u8; 8];
        self.input.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn vec3(&mut self) -> Result<Vector3<f64>, CheckpointError> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

pub fn save(path: &Path, model: &HybridModel) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        out: std::io::BufWriter::new(file),
    };
    w.out.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(model.primitives.len() as u64)?;
    w.u32(model.sh_degree)?;
    let coeffs = super::sh_coeff_count(model.sh_degree);
    for prim in &model.primitives {
        debug_assert_eq!(prim.sh.len(), coeffs);
        match prim.kind {
            PrimitiveKind::Free { position } => {
                w.u8(0)?;
                w.vec3(&position)?;
            }
            PrimitiveKind::RayBound { ray_index, z_raw } => {
                w.u8(1)?;
                w.u64(ray_index as u64)?;
                w.f64(z_raw)?;
            }
        }
        w.vec3(&prim.log_scale)?;
        for k in 0..4 {
            w.f64(prim.rotation[k])?;
        }
        w.f64(prim.opacity_logit)?;
        for c in &prim.sh {
            w.vec3(c)?;
        }
    }
    w.u64(model.rays.len() as u64)?;
    for ray in &model.rays {
        w.vec3(&ray.origin)?;
        w.vec3(&ray.direction)?;
    }
    w.u64(model.pair_table.len() as u64)?;
    for entry in &model.pair_table {
        w.u64(entry.prim_i as u64)?;
        w.u64(entry.prim_j as u64)?;
        w.u64(entry.match_index as u64)?;
    }
    w.u64(model.active.len() as u64)?;
    for &a in &model.active {
        w.u8(a as u8)?;
    }
    w.out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HybridModel, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        input: std::io::BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.u64()? as usize;
    let sh_degree = r.u32()?;
    if sh_degree > super::sh::MAX_SH_DEGREE {
        return Err(CheckpointError::Corrupt(format!(
            "sh degree {sh_degree} out of range"
        )));
    }
    let coeffs = super::sh_coeff_count(sh_degree);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => PrimitiveKind::Free { position: r.vec3()? },
            1 => PrimitiveKind::RayBound {
                ray_index: r.u64()? as usize,
                z_raw: r.f64()?,
            },
            tag => return Err(CheckpointError::Corrupt(format!("bad kind tag {tag}"))),
        };
        let log_scale = r.vec3()?;
        let rotation = Vector4::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let opacity_logit = r.f64()?;
        let mut sh = Vec::with_capacity(coeffs);
        for _ in 0..coeffs {
            sh.push(r.vec3()?);
        }
        primitives.push(GaussianPrimitive {
            kind,
            log_scale,
            rotation,
            opacity_logit,
            sh,
        });
    }
    let ray_count = r.u64()? as usize;
    let mut rays = Vec::with_capacity(ray_count);
    for _ in 0..ray_count {
        let origin = r.vec3()?;
        let direction = r.vec3()?;
        // Direction bits are stored as-is; do not re-normalize.
        rays.push(Ray { origin, direction });
    }
    let pair_count = r.u64()? as usize;
    let mut pair_table = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        pair_table.push(PairEntry {
            prim_i: r.u64()? as usize,
            prim_j: r.u64()? as usize,
            match_index: r.u64()? as usize,
        });
    }
    let mask_count = r.u64()? as usize;
    if mask_count != count {
        return Err(CheckpointError::Corrupt("active mask size mismatch".into()));
    }
    let mut active = Vec::with_capacity(mask_count);
    for _ in 0..mask_count {
        active.push(r.u8()? != 0);
    }
    let model = HybridModel {
        primitives,
        rays,
        pair_table,
        active,
        sh_degree,
    };
    model
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(model)
}
