//! Keyframe lifecycle, the sample-overlap graph, co-visibility bookkeeping,
//! and the hybrid rendering-frame selection strategy.
//!
//! Overlap between two keyframes is measured by reprojecting one frame's
//! cached depth samples into the other and counting how many land in-bounds
//! with consistent depth. Creation decisions, the diversity-gated selection
//! window, and the timestamp fallback all run on that one scalar.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSet;
use crate::geometry::{Intrinsics, SE3Pose};
use crate::seq::Frame;
use crate::tracking::Landmark;

/// Cached overlap samples per keyframe.
pub const SAMPLE_COUNT: usize = 400;
/// Shared-landmark floor for a co-visibility edge to count as a neighbor.
pub const COVIS_MIN_SHARED: u32 = 15;
/// Relative depth agreement required for a reprojected sample to count.
pub const DEPTH_TOLERANCE: f64 = 0.1;
/// Seed salt for the per-keyframe sample draw.
const SAMPLE_SEED: u64 = 0x9e3779b97f4a7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RFParams {
    /// Most recent keyframes admitted unconditionally.
    pub n_a: usize,
    /// Most recently pose-adjusted keyframes admitted unconditionally.
    pub n_b: usize,
    /// Cap on the timestamp-ordered fallback stage.
    pub n_s: usize,
    /// Random tail size.
    pub n_r: usize,
    /// Diversity gate: a co-visibility candidate joins only while its overlap
    /// with the newest window member stays below this.
    pub beta1: f64,
    /// Relevance gate: a fallback frame joins only if its overlap with the
    /// current keyframe exceeds this.
    pub beta2: f64,
}

impl Default for RFParams {
    fn default() -> RFParams {
        RFParams { n_a: 5, n_b: 5, n_s: 13, n_r: 7, beta1: 0.07, beta2: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    /// Create a keyframe when overlap with the last one drops below this.
    pub tau_kf: f64,
    /// Fewest frames between keyframes for the weak-tracking condition.
    pub min_gap: usize,
    /// Weak-tracking threshold: tracked landmarks as a share of the last
    /// keyframe's landmark count.
    pub tracked_ratio: f64,
    pub rf: RFParams,
}

impl Default for KeyframeConfig {
    fn default() -> KeyframeConfig {
        KeyframeConfig { tau_kf: 0.85, min_gap: 10, tracked_ratio: 0.9, rf: RFParams::default() }
    }
}

/// One keyframe: pose, sensor data, features, observed landmarks, and the
/// cached sample points used for overlap evaluation.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    pub pose: SE3Pose,
    pub frame: Frame,
    pub features: FeatureSet,
    /// Landmark ids observed by this keyframe, ascending.
    pub landmarks: Vec<usize>,
    /// (pixel, depth) pairs with valid sensor depth, drawn once and cached.
    pub samples: Vec<(Vector2<f64>, f64)>,
}

/// Uniformly samples up to `count` valid-depth pixels from `frame`.
pub fn draw_samples(frame: &Frame, seed: u64, count: usize) -> Vec<(Vector2<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (frame.depth.width(), frame.depth.height());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 50 {
        if out.len() == count {
            break;
        }
        let x = rng.gen_range(0..w);
        let y = rng.gen_range(0..h);
        let d = frame.depth.get(x, y) as f64;
        if d > 0.0 {
            out.push((Vector2::new(x as f64, y as f64), d));
        }
    }
    out
}

/// Keyframes, their shared landmarks, and the cached overlap values.
pub struct KeyframeGraph {
    intr: Intrinsics,
    keyframes: Vec<Keyframe>,
    pub landmarks: Vec<Landmark>,
    /// Shared-landmark counts keyed by (low id, high id).
    covis: HashMap<(usize, usize), u32>,
    og_cache: HashMap<(usize, usize), f64>,
    /// Keyframes in order of their last backend pose write, newest last.
    optimized: Vec<usize>,
}

impl KeyframeGraph {
    pub fn new(intr: Intrinsics) -> KeyframeGraph {
        KeyframeGraph {
            intr,
            keyframes: Vec::new(),
            landmarks: Vec::new(),
            covis: HashMap::new(),
            og_cache: HashMap::new(),
            optimized: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, id: usize) -> &Keyframe {
        &self.keyframes[id]
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intr
    }

    /// Adds a landmark, registering any observations it already carries.
    /// Those must reference keyframes that exist in this graph.
    pub fn add_landmark(&mut self, mut landmark: Landmark) -> usize {
        let seeded = std::mem::take(&mut landmark.observations);
        let id = self.landmarks.len();
        self.landmarks.push(landmark);
        for (kf, kp) in seeded {
            self.add_observation(id, kf, kp);
        }
        id
    }

    /// Inserts a keyframe, draws and caches its overlap samples, and registers
    /// its landmark observations. Returns the new keyframe id.
    pub fn insert_keyframe(
        &mut self,
        timestamp: f64,
        pose: SE3Pose,
        frame: Frame,
        features: FeatureSet,
        observations: &[(usize, usize)],
    ) -> usize {
        assert!(
            pose.translation.iter().all(|v| v.is_finite()),
            "keyframe pose must be finite"
        );
        let id = self.keyframes.len();
        let samples = draw_samples(&frame, SAMPLE_SEED ^ id as u64, SAMPLE_COUNT);
        self.keyframes.push(Keyframe {
            id,
            timestamp,
            pose,
            frame,
            features,
            landmarks: Vec::new(),
            samples,
        });
        for &(landmark, keypoint) in observations {
            self.add_observation(landmark, id, keypoint);
        }
        id
    }

    /// Records that keyframe `kf` observes `landmark` at `keypoint`, updating
    /// the landmark's observation list and the co-visibility counts.
    pub fn add_observation(&mut self, landmark: usize, kf: usize, keypoint: usize) {
        let lm = &mut self.landmarks[landmark];
        if lm.observations.iter().any(|&(k, _)| k == kf) {
            return; // one observation per keyframe per landmark
        }
        for &(other, _) in &lm.observations {
            let key = (other.min(kf), other.max(kf));
            *self.covis.entry(key).or_insert(0) += 1;
        }
        lm.observations.push((kf, keypoint));
        let links = &mut self.keyframes[kf].landmarks;
        if let Err(pos) = links.binary_search(&landmark) {
            links.insert(pos, landmark);
        }
    }

    /// Shared-landmark count between two keyframes.
    pub fn shared_landmarks(&self, a: usize, b: usize) -> u32 {
        if a == b {
            return self.keyframes[a].landmarks.len() as u32;
        }
        self.covis.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }

    /// Overwrites a keyframe pose (backend optimization), invalidating every
    /// cached overlap involving it and moving it to the back of the
    /// recently-optimized order.
    pub fn set_pose(&mut self, kf: usize, pose: SE3Pose) {
        self.keyframes[kf].pose = pose;
        self.og_cache.retain(|&(i, j), _| i != kf && j != kf);
        self.optimized.retain(|&k| k != kf);
        self.optimized.push(kf);
    }

    /// The `n` most recently pose-adjusted keyframes, newest first.
    pub fn recently_optimized(&self, n: usize) -> Vec<usize> {
        self.optimized.iter().rev().take(n).copied().collect()
    }

    /// Directional overlap: the fraction of `j`'s cached samples that project
    /// into `i` in-bounds with depth agreeing within 10%. Cached per (i, j).
    pub fn overlap(&mut self, i: usize, j: usize) -> f64 {
        if let Some(&og) = self.og_cache.get(&(i, j)) {
            return og;
        }
        let j_pose = self.keyframes[j].pose;
        // borrow dance: samples are read-only but overlap_against needs &self
        let samples = std::mem::take(&mut self.keyframes[j].samples);
        let og = self.overlap_against(i, &j_pose, &samples);
        self.keyframes[j].samples = samples;
        self.og_cache.insert((i, j), og);
        og
    }

    /// Overlap of an arbitrary sample set (posed by `j_pose`) against
    /// keyframe `i`. This is the uncached core of [`overlap`], also used to
    /// probe a frame that is not (yet) a keyframe.
    pub fn overlap_against(
        &self,
        i: usize,
        j_pose: &SE3Pose,
        samples: &[(Vector2<f64>, f64)],
    ) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let ki = &self.keyframes[i];
        let inv = ki.pose.inverse();
        let mut hits = 0usize;
        for (px, d) in samples {
            let Ok(cam) = self.intr.backproject(px.x, px.y, *d) else { continue };
            let world = j_pose.transform_point(&cam);
            let in_i = inv.transform_point(&world);
            if in_i.z <= 0.0 {
                continue;
            }
            let Ok(uv) = self.intr.project(&in_i) else { continue };
            if !self.intr.contains(uv.x, uv.y) {
                continue;
            }
            let di = ki.frame.depth.get(uv.x as usize, uv.y as usize) as f64;
            if di <= 0.0 {
                continue;
            }
            if (in_i.z - di).abs() / di <= DEPTH_TOLERANCE {
                hits += 1;
            }
        }
        hits as f64 / samples.len() as f64
    }

    /// Keyframes sharing at least [`COVIS_MIN_SHARED`] landmarks with `kf`,
    /// sorted by shared count descending, ties by ascending id.
    pub fn covisibility_neighbors(&self, kf: usize) -> Vec<(usize, u32)> {
        let mut out: Vec<(usize, u32)> = (0..self.keyframes.len())
            .filter(|&other| other != kf)
            .map(|other| (other, self.shared_landmarks(kf, other)))
            .filter(|&(_, n)| n >= COVIS_MIN_SHARED)
            .collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Edge list `(kf_i, kf_j, covis_weight, OG)` for offline inspection, one
    /// co-visibility edge per line with the overlap evaluated i -> j.
    pub fn dump_edges(&mut self) -> String {
        let mut keys: Vec<(usize, usize)> = self.covis.keys().copied().collect();
        keys.sort();
        let mut out = String::from("kf_i kf_j covis_weight og\n");
        for (i, j) in keys {
            let w = self.covis[&(i, j)];
            let og = self.overlap(i, j);
            writeln!(out, "{i} {j} {w} {og:.4}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeReason {
    /// First frame of the sequence.
    Bootstrap,
    /// Overlap with the last keyframe fell below the threshold.
    LowOverlap,
    /// Tracked-landmark ratio collapsed and the frame gap is large enough.
    WeakTracking,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyframeDecision {
    pub create: bool,
    pub reason: Option<KeyframeReason>,
    /// Overlap of the probed frame against the last keyframe, when computed.
    pub overlap: Option<f64>,
}

/// Decides whether `frame` at `pose` should become a keyframe: always for the
/// first frame, on low overlap with the last keyframe, or when tracking holds
/// under `tracked_ratio` of the last keyframe's landmarks with at least
/// `min_gap` frames since it.
pub fn maybe_create_keyframe(
    graph: &KeyframeGraph,
    frame: &Frame,
    pose: &SE3Pose,
    tracked_landmarks: usize,
    frames_since_last: usize,
    cfg: &KeyframeConfig,
) -> KeyframeDecision {
    if graph.is_empty() {
        return KeyframeDecision { create: true, reason: Some(KeyframeReason::Bootstrap), overlap: None };
    }
    let last = graph.len() - 1;
    // probe samples: fixed seed, the draw is only a statistical measure
    let samples = draw_samples(frame, SAMPLE_SEED, SAMPLE_COUNT);
    let og = graph.overlap_against(last, pose, &samples);
    if og < cfg.tau_kf {
        return KeyframeDecision { create: true, reason: Some(KeyframeReason::LowOverlap), overlap: Some(og) };
    }
    let reference = graph.get(last).landmarks.len();
    let weak = (tracked_landmarks as f64) < cfg.tracked_ratio * reference as f64;
    if weak && frames_since_last >= cfg.min_gap {
        return KeyframeDecision {
            create: true,
            reason: Some(KeyframeReason::WeakTracking),
            overlap: Some(og),
        };
    }
    KeyframeDecision { create: false, reason: None, overlap: Some(og) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RFStage {
    Current,
    Recent,
    Optimized,
    Covisibility,
    Timestamp,
    Random,
}

/// One diversity-gate evaluation during stage (b).
#[derive(Debug, Clone, Copy)]
pub struct WindowCheck {
    /// Newest window member at the time of the check.
    pub top: usize,
    pub candidate: usize,
    pub og: f64,
    pub admitted: bool,
}

/// Ordered rendering-frame set with its provenance and the stage-(b) trace.
#[derive(Debug, Clone)]
pub struct RFSelection {
    /// Keyframe ids in first-insertion order; the current keyframe leads.
    pub frames: Vec<usize>,
    /// Stage that first inserted the frame at the same index.
    pub stages: Vec<RFStage>,
    /// Every stage-(b) gate evaluation, replayable for auditing.
    pub window_trace: Vec<WindowCheck>,
}

impl RFSelection {
    pub fn contains(&self, id: usize) -> bool {
        self.frames.contains(&id)
    }
}

/// Hybrid rendering-frame selection around `current`.
///
/// Stages: (a) the most recent and most recently optimized keyframes; (b)
/// co-visibility candidates admitted through the window diversity gate
/// (overlap with the newest window member below beta1); (c) remaining
/// keyframes by descending timestamp whose overlap with current exceeds
/// beta2, at most `n_s`; (d) `n_r` uniformly random from the rest.
/// Duplicates keep their first insertion; `current` always leads.
pub fn select_rendering_frames(
    graph: &mut KeyframeGraph,
    current: usize,
    params: &RFParams,
    rng: &mut ChaCha8Rng,
) -> RFSelection {
    let mut frames = vec![current];
    let mut stages = vec![RFStage::Current];
    let push = |frames: &mut Vec<usize>, stages: &mut Vec<RFStage>, id: usize, st: RFStage| {
        if !frames.contains(&id) {
            frames.push(id);
            stages.push(st);
        }
    };

    // (a) recency and backend-recency
    let n = graph.len();
    for id in (0..n).rev().take(params.n_a) {
        push(&mut frames, &mut stages, id, RFStage::Recent);
    }
    for id in graph.recently_optimized(params.n_b) {
        push(&mut frames, &mut stages, id, RFStage::Optimized);
    }

    // (b) co-visibility candidates through the diversity window
    let mut window_trace = Vec::new();
    let mut window_top = current;
    for (cand, _) in graph.covisibility_neighbors(current) {
        let og = graph.overlap(window_top, cand);
        let admitted = og < params.beta1;
        window_trace.push(WindowCheck { top: window_top, candidate: cand, og, admitted });
        if admitted {
            push(&mut frames, &mut stages, cand, RFStage::Covisibility);
            window_top = cand;
        }
    }

    // (c) timestamp fallback gated by relevance to current
    let mut remaining: Vec<usize> = (0..n).filter(|id| !frames.contains(id)).collect();
    remaining.sort_by(|&a, &b| {
        graph
            .get(b)
            .timestamp
            .partial_cmp(&graph.get(a).timestamp)
            .unwrap()
            .then(b.cmp(&a))
    });
    let mut admitted_c = 0usize;
    for id in remaining {
        if admitted_c == params.n_s {
            break;
        }
        if graph.overlap(current, id) > params.beta2 {
            push(&mut frames, &mut stages, id, RFStage::Timestamp);
            admitted_c += 1;
        }
    }

    // (d) random tail from whatever is left
    let mut rest: Vec<usize> = (0..n).filter(|id| !frames.contains(id)).collect();
    for _ in 0..params.n_r.min(rest.len()) {
        let k = rng.gen_range(0..rest.len());
        let id = rest.swap_remove(k);
        push(&mut frames, &mut stages, id, RFStage::Random);
    }

    RFSelection { frames, stages, window_trace }
}
