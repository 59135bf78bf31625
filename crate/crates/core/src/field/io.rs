//! Flat-table field serialization.
//!
//! Binary layout, all little-endian f64: an 8-byte magic `GSFIELD1`, a u64
//! Gaussian count, then one 14-column row per Gaussian in the order
//! position(3), quaternion(4, wxyz), scale(3), opacity(1), color(3).
//! f64 columns make save/load/render round trips bit-exact.

use super::{FieldError, Gaussian, GaussianField};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GSFIELD1";

pub fn save_field(field: &GaussianField, path: &Path) -> Result<(), FieldError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(field.len() as u64).to_le_bytes())?;
    for g in field.gaussians() {
        let q = g.rotation.quaternion();
        let row: [f64; 14] = [
            g.position.x, g.position.y, g.position.z,
            q.w, q.i, q.j, q.k,
            g.scale.x, g.scale.y, g.scale.z,
            g.opacity,
            g.color.x, g.color.y, g.color.z,
        ];
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_field(path: &Path) -> Result<GaussianField, FieldError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FieldError::Corrupt("bad magic".into()));
    }
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    let mut gaussians = Vec::with_capacity(n);
    let mut row = [0u8; 14 * 8];
    for i in 0..n {
        r.read_exact(&mut row).map_err(|_| FieldError::Corrupt(format!("truncated at row {i}")))?;
        let mut v = [0.0f64; 14];
        for (k, chunk) in row.chunks_exact(8).enumerate() {
            v[k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(FieldError::Corrupt(format!("non-finite value in row {i}")));
        }
        if v[7] <= 0.0 || v[8] <= 0.0 || v[9] <= 0.0 {
            return Err(FieldError::Corrupt(format!("non-positive scale in row {i}")));
        }
        if !(0.0..=1.0).contains(&v[10]) {
            return Err(FieldError::Corrupt(format!("opacity out of range in row {i}")));
        }
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(FieldError::Corrupt(format!("non-unit quaternion in row {i}")));
        }
        gaussians.push(Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            // keep stored bits: renormalizing would perturb the last ulp
            rotation: UnitQuaternion::new_unchecked(q),
            scale: Vector3::new(v[7], v[8], v[9]),
            opacity: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FieldError::Corrupt("trailing bytes after last row".into()));
    }
    Ok(GaussianField::from_gaussians(gaussians))
}
