//! Timestamped camera trajectories and their on-disk text form:
//! `timestamp tx ty tz qx qy qz qw`, one pose per line, `#` comments.

use super::{GeometryError, SE3Pose};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Poses sorted by strictly increasing timestamp.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    entries: Vec<(f64, SE3Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, timestamp: f64, pose: SE3Pose) -> Result<(), GeometryError> {
        if let Some(&(prev, _)) = self.entries.last() {
            if timestamp <= prev {
                return Err(GeometryError::NonIncreasingTimestamp { prev, t: timestamp });
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, SE3Pose)> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &(f64, SE3Pose) {
        &self.entries[i]
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Pose with timestamp nearest to `t`, if within `tol` seconds.
    pub fn nearest(&self, t: f64, tol: f64) -> Option<&(f64, SE3Pose)> {
        let best = self
            .entries
            .iter()
            .min_by(|a, b| (a.0 - t).abs().partial_cmp(&(b.0 - t).abs()).unwrap())?;
        ((best.0 - t).abs() <= tol).then_some(best)
    }

    /// Greedy nearest-timestamp association within `tol` seconds.
    ///
    /// Candidate pairs are sorted by |dt| and accepted while both sides are
    /// unused, so the result does not depend on which trajectory is `self`.
    pub fn associate<'a>(&'a self, other: &'a Trajectory, tol: f64) -> Vec<(&'a (f64, SE3Pose), &'a (f64, SE3Pose))> {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, a) in self.entries.iter().enumerate() {
            for (j, b) in other.entries.iter().enumerate() {
                let dt = (a.0 - b.0).abs();
                if dt <= tol {
                    cands.push((dt, i, j));
                }
            }
        }
        cands.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut used_a = vec![false; self.entries.len()];
        let mut used_b = vec![false; other.entries.len()];
        let mut out = Vec::new();
        let mut picked = Vec::new();
        for (_, i, j) in cands {
            if !used_a[i] && !used_b[j] {
                used_a[i] = true;
                used_b[j] = true;
                picked.push((i, j));
            }
        }
        picked.sort_unstable();
        for (i, j) in picked {
            out.push((&self.entries[i], &other.entries[j]));
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), GeometryError> {
        writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
        for (t, p) in &self.entries {
            let q = p.rotation.quaternion();
            writeln!(
                w,
                "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self, GeometryError> {
        let mut out = Trajectory::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(GeometryError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let mut v = [0.0f64; 8];
            for (k, f) in fields.iter().enumerate() {
                v[k] = f.parse().map_err(|e| GeometryError::Parse {
                    line: lineno + 1,
                    msg: format!("bad float {f:?}: {e}"),
                })?;
            }
            out.push(v[0], SE3Pose::from_parts(v[1], v[2], v[3], v[4], v[5], v[6], v[7]))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::read(std::fs::File::open(path)?)
    }
}
