//! TUM RGB-D directory layout: `rgb.txt` / `depth.txt` index files with
//! "timestamp filename" lines, 16-bit depth PNGs scaled by 5000, and an
//! optional `groundtruth.txt` trajectory.

use super::{Frame, SeqError};
use crate::geometry::Trajectory;
use crate::grid::{GrayF32, RgbF32};
use std::path::{Path, PathBuf};

const ASSOC_TOLERANCE: f64 = 0.02;
const DEPTH_SCALE: f32 = 5000.0;

fn read_index(path: &Path) -> Result<Vec<(f64, String)>, SeqError> {
    if !path.exists() {
        return Err(SeqError::MissingIndex(path.display().to_string()));
    }
    let mut out = Vec::new();
    for line in std::fs::read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(name)) = (it.next(), it.next()) else { continue };
        let Ok(ts) = ts.parse::<f64>() else { continue };
        out.push((ts, name.to_string()));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

/// Greedy symmetric nearest-timestamp association within the tolerance:
/// candidate pairs ranked by |dt|, each entry used at most once.
fn associate(rgb: &[(f64, String)], depth: &[(f64, String)]) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, r) in rgb.iter().enumerate() {
        for (j, d) in depth.iter().enumerate() {
            let dt = (r.0 - d.0).abs();
            if dt <= ASSOC_TOLERANCE {
                cands.push((dt, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; rgb.len()];
    let mut used_d = vec![false; depth.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_r[i] && !used_d[j] {
            used_r[i] = true;
            used_d[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

fn load_color(path: &Path) -> Result<RgbF32, SeqError> {
    let img = image::open(path)
        .map_err(|e| SeqError::BadImage { path: path.display().to_string(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbF32::new(w, h, [0.0; 3]);
    for (i, px) in img.pixels().enumerate() {
        out.data_mut()[i] = [
            px.0[0] as f32 / 255.0,
            px.0[1] as f32 / 255.0,
            px.0[2] as f32 / 255.0,
        ];
    }
    Ok(out)
}

fn load_depth(path: &Path) -> Result<GrayF32, SeqError> {
    let img = image::open(path)
        .map_err(|e| SeqError::BadImage { path: path.display().to_string(), msg: e.to_string() })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = GrayF32::new(w, h, 0.0);
    for (i, px) in img.pixels().enumerate() {
        out.data_mut()[i] = px.0[0] as f32 / DEPTH_SCALE;
    }
    Ok(out)
}

/// Streaming loader: frames are decoded on demand in timestamp order.
pub struct TumLoader {
    dir: PathBuf,
    pairs: Vec<(f64, String, String)>,
    next: usize,
    /// Index entries that had no partner within the tolerance.
    pub dropped: usize,
    pub groundtruth: Option<Trajectory>,
}

impl TumLoader {
    pub fn open(dir: &Path) -> Result<Self, SeqError> {
        let rgb = read_index(&dir.join("rgb.txt"))?;
        let depth = read_index(&dir.join("depth.txt"))?;
        let pairs = associate(&rgb, &depth);
        let dropped = rgb.len() + depth.len() - 2 * pairs.len();
        let pairs = pairs
            .into_iter()
            .map(|(i, j)| (rgb[i].0, rgb[i].1.clone(), depth[j].1.clone()))
            .collect();
        let gt_path = dir.join("groundtruth.txt");
        let groundtruth = if gt_path.exists() { Some(Trajectory::load(&gt_path)?) } else { None };
        Ok(Self { dir: dir.to_path_buf(), pairs, next: 0, dropped, groundtruth })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn next_frame(&mut self) -> Option<Result<Frame, SeqError>> {
        let (ts, rgb_name, depth_name) = self.pairs.get(self.next)?.clone();
        self.next += 1;
        let color = match load_color(&self.dir.join(&rgb_name)) {
            Ok(c) => c,
            Err(e) => return Some(Err(e)),
        };
        let depth = match load_depth(&self.dir.join(&depth_name)) {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };
        Some(Ok(Frame::new(ts, color, depth)))
    }
}

/// Eager variant of [`TumLoader`]: the whole associated sequence, skipping
/// frames whose images fail to decode.
pub fn load_tum(dir: &Path, max_frames: Option<usize>) -> Result<(Vec<Frame>, Option<Trajectory>), SeqError> {
    let mut loader = TumLoader::open(dir)?;
    let mut frames = Vec::new();
    while let Some(frame) = loader.next_frame() {
        match frame {
            Ok(f) => frames.push(f),
            Err(e) => eprintln!("warning: skipping frame: {e}"),
        }
        if max_frames.is_some_and(|m| frames.len() >= m) {
            break;
        }
    }
    Ok((frames, loader.groundtruth))
}

/// Writes `frames` (and the trajectory, when given) as a TUM-layout
/// directory that [`load_tum`] reads back: `rgb/` and `depth/` PNGs named by
/// timestamp, index files, and `groundtruth.txt`. Color quantizes to 8 bits
/// and depth to 16 bits at the standard scale.
pub fn save_tum(dir: &Path, frames: &[Frame], groundtruth: Option<&Trajectory>) -> Result<(), SeqError> {
    use std::fmt::Write as _;
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let mut rgb_index = String::from("# timestamp filename\n");
    let mut depth_index = rgb_index.clone();
    for frame in frames {
        let name = format!("{:.6}.png", frame.timestamp);
        let (w, h) = (frame.color.width() as u32, frame.color.height() as u32);
        let mut rgb = image::RgbImage::new(w, h);
        for (i, px) in rgb.pixels_mut().enumerate() {
            let c = frame.color.at(i);
            for k in 0..3 {
                px.0[k] = (c[k].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        rgb.save(dir.join("rgb").join(&name))
            .map_err(|e| SeqError::BadImage { path: name.clone(), msg: e.to_string() })?;

        let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
        for (i, px) in depth.pixels_mut().enumerate() {
            let d = (frame.depth.at(i) * DEPTH_SCALE).round();
            px.0[0] = d.clamp(0.0, u16::MAX as f32) as u16;
        }
        depth
            .save(dir.join("depth").join(&name))
            .map_err(|e| SeqError::BadImage { path: name.clone(), msg: e.to_string() })?;

        writeln!(rgb_index, "{:.6} rgb/{name}", frame.timestamp).unwrap();
        writeln!(depth_index, "{:.6} depth/{name}", frame.timestamp).unwrap();
    }
    std::fs::write(dir.join("rgb.txt"), rgb_index)?;
    std::fs::write(dir.join("depth.txt"), depth_index)?;
    if let Some(gt) = groundtruth {
        gt.save(&dir.join("groundtruth.txt"))?;
    }
    Ok(())
}
