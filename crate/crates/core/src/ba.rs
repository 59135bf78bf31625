//! Windowed bundle adjustment: Levenberg-Marquardt over keyframe poses and
//! landmark positions with Huber-robust reprojection error, solved by dense
//! normal equations with the landmark block eliminated via the Schur
//! complement. Corrected poses flow back to the map through
//! [`apply_pose_updates`]; Gaussians are never transformed, later mapping
//! iterations re-fit them under the new poses.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{se3::skew, Intrinsics, SE3Pose};
use crate::keyframes::KeyframeGraph;
use crate::tracking::{huber_weight, level_variance};

/// Observations behind the camera by less than this are skipped outright.
const NEAR_Z: f64 = 1e-6;
/// Initial Levenberg-Marquardt damping.
const LAMBDA_INIT: f64 = 1e-4;
/// Damping growth on a rejected or unsolvable step.
const LAMBDA_UP: f64 = 10.0;
/// Damping decay on an accepted step.
const LAMBDA_DOWN: f64 = 3.0;
/// Solve attempts per iteration before giving up.
const MAX_ATTEMPTS: usize = 10;
/// A robust cost this small counts as converged outright.
const COST_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BAConfig {
    /// Accepted-iteration cap.
    pub iterations: usize,
    /// Stop once the relative cost decrease falls under this.
    pub rel_tol: f64,
    /// Huber kernel threshold on the sigma-normalized residual norm.
    pub huber_delta: f64,
    /// Recent keyframes forming the optimization window.
    pub window: usize,
    /// Run the backend every k-th keyframe.
    pub every: usize,
}

impl Default for BAConfig {
    fn default() -> BAConfig {
        BAConfig { iterations: 10, rel_tol: 1e-6, huber_delta: 2.447, window: 7, every: 3 }
    }
}

/// One pixel measurement of a landmark from a pose, both by local index.
#[derive(Debug, Clone, Copy)]
pub struct BAObservation {
    pub pose: usize,
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    pub level: u8,
}

/// A self-contained adjustment problem over local pose and landmark arrays.
///
/// Landmarks observed fewer than two times are deactivated at construction
/// together with their observations; at least one pose is always held fixed
/// to pin the gauge.
pub struct BAProblem {
    pub intr: Intrinsics,
    pub poses: Vec<SE3Pose>,
    pub fixed: Vec<bool>,
    pub landmarks: Vec<Vector3<f64>>,
    pub active: Vec<bool>,
    pub observations: Vec<BAObservation>,
    pub huber_delta: f64,
}

/// Per-run record: costs holds the initial value plus one entry per accepted
/// step, so it is non-increasing whenever `solved` is true.
#[derive(Debug, Clone)]
pub struct BAReport {
    pub window_size: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub costs: Vec<f64>,
    pub solved: bool,
}

/// Pose and landmark corrections keyed by graph ids.
#[derive(Debug, Clone, Default)]
pub struct BAUpdates {
    pub poses: Vec<(usize, SE3Pose)>,
    pub landmarks: Vec<(usize, Vector3<f64>)>,
}

impl BAProblem {
    pub fn new(
        intr: Intrinsics,
        poses: Vec<SE3Pose>,
        mut fixed: Vec<bool>,
        landmarks: Vec<Vector3<f64>>,
        observations: Vec<BAObservation>,
        huber_delta: f64,
    ) -> BAProblem {
        assert_eq!(poses.len(), fixed.len());
        if !fixed.iter().any(|&f| f) && !poses.is_empty() {
            fixed[0] = true;
        }
        let mut counts = vec![0usize; landmarks.len()];
        for obs in &observations {
            counts[obs.landmark] += 1;
        }
        let active: Vec<bool> = counts.iter().map(|&c| c >= 2).collect();
        let observations =
            observations.into_iter().filter(|o| active[o.landmark]).collect();
        BAProblem { intr, poses, fixed, landmarks, active, observations, huber_delta }
    }

    /// Raw residual (predicted minus observed, in pixels) and its Jacobians
    /// with respect to the pose twist [v; w] and the landmark position.
    /// None when the point sits behind the camera.
    fn linearize(
        &self,
        obs: &BAObservation,
    ) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
        let pose = &self.poses[obs.pose];
        let point = &self.landmarks[obs.landmark];
        let inv = pose.inverse();
        let pc = inv.transform_point(point);
        if pc.z <= NEAR_Z {
            return None;
        }
        let uv = self.intr.project(&pc).ok()?;
        let r = uv - obs.pixel;
        let (fx, fy) = (self.intr.fx, self.intr.fy);
        let zz = pc.z * pc.z;
        let dpi = Matrix2x3::new(
            fx / pc.z, 0.0, -(fx * pc.x) / zz,
            0.0, fy / pc.z, -(fy * pc.y) / zz,
        );
        let r_cw = inv.rotation.to_rotation_matrix().into_inner();
        let mut jp = Matrix2x6::zeros();
        jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * (-r_cw)));
        jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * r_cw * skew(point)));
        let jl = dpi * r_cw;
        Some((r, jp, jl))
    }

    /// Huber-robust total cost at the current state.
    pub fn cost(&self) -> f64 {
        let delta = self.huber_delta;
        self.observations
            .iter()
            .filter_map(|obs| {
                let pose = &self.poses[obs.pose];
                let pc = pose.inverse().transform_point(&self.landmarks[obs.landmark]);
                if pc.z <= NEAR_Z {
                    return None;
                }
                let uv = self.intr.project(&pc).ok()?;
                let e = (uv - obs.pixel).norm() / level_variance(obs.level).sqrt();
                Some(if e <= delta { e * e } else { 2.0 * delta * e - delta * delta })
            })
            .sum()
    }

    /// Runs damped Gauss-Newton with Schur elimination of the landmarks.
    pub fn solve(&mut self, cfg: &BAConfig) -> BAReport {
        let free: Vec<usize> = (0..self.poses.len()).filter(|&k| !self.fixed[k]).collect();
        let free_idx: Vec<Option<usize>> = {
            let mut m = vec![None; self.poses.len()];
            for (i, &k) in free.iter().enumerate() {
                m[k] = Some(i);
            }
            m
        };
        let lms: Vec<usize> = (0..self.landmarks.len()).filter(|&l| self.active[l]).collect();
        let lm_idx: Vec<Option<usize>> = {
            let mut m = vec![None; self.landmarks.len()];
            for (i, &l) in lms.iter().enumerate() {
                m[l] = Some(i);
            }
            m
        };
        let np = 6 * free.len();
        let nl = 3 * lms.len();

        let mut cost = self.cost();
        let mut report = BAReport {
            window_size: self.poses.len(),
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
            costs: vec![cost],
            solved: true,
        };
        if self.observations.is_empty() || (np == 0 && nl == 0) || cost < COST_FLOOR {
            return report;
        }

        let mut lambda = LAMBDA_INIT;
        'outer: for _ in 0..cfg.iterations {
            // assemble the weighted normal equations at the current state
            let mut hpp = DMatrix::<f64>::zeros(np, np);
            let mut hpl = DMatrix::<f64>::zeros(np, nl);
            let mut hll = vec![Matrix3::<f64>::zeros(); lms.len()];
            let mut bp = DVector::<f64>::zeros(np);
            let mut bl = DVector::<f64>::zeros(nl);
            for obs in &self.observations {
                let Some((r, jp, jl)) = self.linearize(obs) else { continue };
                let sigma2 = level_variance(obs.level);
                let w = huber_weight(r.norm() / sigma2.sqrt(), self.huber_delta) / sigma2;
                let li = lm_idx[obs.landmark].unwrap();
                hll[li] += jl.transpose() * jl * w;
                let mut blv = bl.fixed_rows_mut::<3>(3 * li);
                blv += jl.transpose() * r * w;
                if let Some(pi) = free_idx[obs.pose] {
                    let mut hv = hpp.view_mut((6 * pi, 6 * pi), (6, 6));
                    hv += jp.transpose() * jp * w;
                    let mut cv = hpl.view_mut((6 * pi, 3 * li), (6, 3));
                    cv += jp.transpose() * jl * w;
                    let mut bv = bp.rows_mut(6 * pi, 6);
                    bv += jp.transpose() * r * w;
                }
            }

            for _attempt in 0..MAX_ATTEMPTS {
                // damp, eliminate landmarks, solve the reduced pose system
                let Some((dp, dl)) = schur_step(&hpp, &hpl, &hll, &bp, &bl, lambda) else {
                    lambda *= LAMBDA_UP;
                    continue;
                };
                let mut candidate = CandidateState {
                    poses: self.poses.clone(),
                    landmarks: self.landmarks.clone(),
                };
                for (i, &k) in free.iter().enumerate() {
                    let delta = dp.fixed_rows::<6>(6 * i).into_owned();
                    candidate.poses[k] = candidate.poses[k].retract(&delta);
                }
                for (i, &l) in lms.iter().enumerate() {
                    candidate.landmarks[l] += dl.fixed_rows::<3>(3 * i).into_owned();
                }
                std::mem::swap(&mut self.poses, &mut candidate.poses);
                std::mem::swap(&mut self.landmarks, &mut candidate.landmarks);
                let new_cost = self.cost();
                if new_cost <= cost {
                    lambda = (lambda / LAMBDA_DOWN).max(1e-12);
                    let rel = if cost > 0.0 { (cost - new_cost) / cost } else { 0.0 };
                    cost = new_cost;
                    report.iterations += 1;
                    report.costs.push(cost);
                    if rel < cfg.rel_tol || cost < COST_FLOOR {
                        break 'outer;
                    }
                    continue 'outer;
                }
                // rejected: restore and raise damping
                std::mem::swap(&mut self.poses, &mut candidate.poses);
                std::mem::swap(&mut self.landmarks, &mut candidate.landmarks);
                lambda *= LAMBDA_UP;
            }
            // every attempt failed at this linearization point
            report.solved = report.iterations > 0;
            break;
        }
        report.final_cost = cost;
        report
    }
}

struct CandidateState {
    poses: Vec<SE3Pose>,
    landmarks: Vec<Vector3<f64>>,
}

/// One damped Schur-complement solve. None when either a landmark block or
/// the reduced pose system fails to factor at this damping.
fn schur_step(
    hpp: &DMatrix<f64>,
    hpl: &DMatrix<f64>,
    hll: &[Matrix3<f64>],
    bp: &DVector<f64>,
    bl: &DVector<f64>,
    lambda: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = hpp.nrows();
    let nl = 3 * hll.len();

    let mut hll_inv = Vec::with_capacity(hll.len());
    for block in hll {
        let mut d = *block;
        for i in 0..3 {
            d[(i, i)] += lambda * block[(i, i)].max(1e-12);
        }
        hll_inv.push(d.try_inverse()?);
    }

    if np == 0 {
        // no free poses: landmark-only Gauss-Newton
        let mut dl = DVector::zeros(nl);
        for (i, inv) in hll_inv.iter().enumerate() {
            let rhs = -inv * bl.fixed_rows::<3>(3 * i).into_owned();
            dl.fixed_rows_mut::<3>(3 * i).copy_from(&rhs);
        }
        return Some((DVector::zeros(0), dl));
    }

    let mut s = hpp.clone();
    for i in 0..np {
        s[(i, i)] += lambda * hpp[(i, i)].max(1e-12);
    }
    let mut rhs = -bp.clone();
    // s -= hpl * hll^-1 * hpl^T and rhs += hpl * hll^-1 * bl, blockwise
    for (i, inv) in hll_inv.iter().enumerate() {
        let w = hpl.columns(3 * i, 3);
        let y = &w * inv;
        s -= &y * w.transpose();
        rhs += &y * bl.fixed_rows::<3>(3 * i).into_owned();
    }
    let chol = s.cholesky()?;
    let dp = chol.solve(&rhs);

    let mut dl = DVector::zeros(nl);
    for (i, inv) in hll_inv.iter().enumerate() {
        let w = hpl.columns(3 * i, 3);
        let r = bl.fixed_rows::<3>(3 * i).into_owned() + w.transpose() * &dp;
        dl.fixed_rows_mut::<3>(3 * i).copy_from(&(-inv * r));
    }
    Some((dp, dl))
}

/// Builds and solves the local problem around the most recent keyframes.
///
/// The window holds the `cfg.window` newest keyframes; their co-visibility
/// neighbors join as fixed anchors whose observations constrain shared
/// landmarks. The oldest window pose is the gauge. Landmarks need at least
/// two observations among the problem's frames. Returns corrections without
/// touching the graph; a failed or degenerate solve returns empty updates
/// under a report with `solved == false`.
pub fn local_ba(graph: &KeyframeGraph, cfg: &BAConfig) -> (BAUpdates, BAReport) {
    let n = graph.len();
    let noop = |window: usize| BAReport {
        window_size: window,
        initial_cost: 0.0,
        final_cost: 0.0,
        iterations: 0,
        costs: Vec::new(),
        solved: false,
    };
    if n < 2 {
        return (BAUpdates::default(), noop(n));
    }
    let window: Vec<usize> = (n.saturating_sub(cfg.window)..n).collect();
    let mut ids = window.clone();
    for &w in &window {
        for (nb, _) in graph.covisibility_neighbors(w) {
            if !ids.contains(&nb) {
                ids.push(nb);
            }
        }
    }
    let local_of = |kf: usize| ids.iter().position(|&i| i == kf);
    // gauge: oldest window member; anchors: everything outside the window
    let fixed: Vec<bool> =
        ids.iter().map(|&kf| kf == window[0] || !window.contains(&kf)).collect();
    let poses: Vec<SE3Pose> = ids.iter().map(|&kf| graph.get(kf).pose).collect();

    let mut landmarks = Vec::new();
    let mut landmark_ids = Vec::new();
    let mut observations = Vec::new();
    for (lm_id, lm) in graph.landmarks.iter().enumerate() {
        let obs: Vec<(usize, usize)> = lm
            .observations
            .iter()
            .filter_map(|&(kf, kp)| local_of(kf).map(|local| (local, kp)))
            .collect();
        if obs.len() < 2 {
            continue;
        }
        let li = landmarks.len();
        landmarks.push(lm.position);
        landmark_ids.push(lm_id);
        for (local, kp) in obs {
            let key = &graph.get(ids[local]).features.keypoints[kp];
            observations.push(BAObservation {
                pose: local,
                landmark: li,
                pixel: key.position,
                level: key.level,
            });
        }
    }
    if landmarks.len() < 10 {
        return (BAUpdates::default(), noop(ids.len()));
    }

    let mut problem = BAProblem::new(
        *graph.intrinsics(),
        poses,
        fixed.clone(),
        landmarks,
        observations,
        cfg.huber_delta,
    );
    let report = problem.solve(cfg);
    if !report.solved {
        return (BAUpdates::default(), report);
    }
    let mut updates = BAUpdates::default();
    for (local, &kf) in ids.iter().enumerate() {
        if !fixed[local] {
            updates.poses.push((kf, problem.poses[local]));
        }
    }
    for (li, &lm_id) in landmark_ids.iter().enumerate() {
        if problem.active[li] {
            updates.landmarks.push((lm_id, problem.landmarks[li]));
        }
    }
    (updates, report)
}

/// Writes corrections back into the graph. Pose writes go through the
/// graph's recently-optimized bookkeeping; entries whose keyframe or
/// landmark no longer exists are skipped. Returns keyframes changed.
pub fn apply_pose_updates(graph: &mut KeyframeGraph, updates: &BAUpdates) -> usize {
    let mut changed = 0;
    for &(kf, pose) in &updates.poses {
        if kf < graph.len() {
            graph.set_pose(kf, pose);
            changed += 1;
        }
    }
    for &(lm, position) in &updates.landmarks {
        if lm < graph.landmarks.len() {
            graph.landmarks[lm].position = position;
        }
    }
    changed
}
