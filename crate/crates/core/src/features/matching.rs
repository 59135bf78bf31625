//! Mutual nearest-neighbor descriptor matching.
//!
//! A pair survives only if it is the nearest neighbor in both directions,
//! beats the runner-up by the ratio margin, stays under the absolute Hamming
//! gate, and spans at most one pyramid level. Ties go to the lowest index.
//! The runner-up for the ratio test is the best candidate from a *different*
//! image location: one corner often fires at several pyramid levels, and
//! those siblings say nothing about whether the match is ambiguous. A tie
//! for best distance at another location still counts as a runner-up, which
//! the ratio test then rejects.

use super::FeatureSet;

const RATIO: f64 = 0.8;
const MAX_DISTANCE: u32 = 64;
const MAX_LEVEL_GAP: i32 = 1;
/// Candidates within this base-image radius of the best candidate are
/// treated as the same corner when hunting for the ratio runner-up.
const SAME_SPOT_RADIUS: f64 = 6.0;

/// Nearest candidate for `from[i]` among `to` plus the runner-up distance
/// from a different spot, restricted to compatible pyramid levels.
fn nearest(from: &FeatureSet, i: usize, to: &FeatureSet) -> Option<(usize, u32, u32)> {
    let level = from.keypoints[i].level as i32;
    let desc = &from.descriptors[i];
    let mut best: Option<(usize, u32)> = None;
    for (j, other) in to.descriptors.iter().enumerate() {
        if (to.keypoints[j].level as i32 - level).abs() > MAX_LEVEL_GAP {
            continue;
        }
        let d = desc.hamming(other);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    let (jb, db) = best?;
    let at = to.keypoints[jb].position;
    let mut second = u32::MAX;
    for (j, other) in to.descriptors.iter().enumerate() {
        if j == jb || (to.keypoints[j].level as i32 - level).abs() > MAX_LEVEL_GAP {
            continue;
        }
        let offset = to.keypoints[j].position - at;
        if offset.x.abs() < SAME_SPOT_RADIUS && offset.y.abs() < SAME_SPOT_RADIUS {
            continue;
        }
        second = second.min(desc.hamming(other));
    }
    Some((jb, db, second))
}

/// One-to-one matches `(index_a, index_b)` sorted by `index_a`.
///
/// Empty inputs give an empty result.
pub fn match_features(a: &FeatureSet, b: &FeatureSet) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let back: Vec<Option<usize>> = (0..b.len())
        .map(|j| nearest(b, j, a).map(|(i, _, _)| i))
        .collect();

    let mut out = Vec::new();
    for i in 0..a.len() {
        let Some((j, d, second)) = nearest(a, i, b) else {
            continue;
        };
        if d > MAX_DISTANCE {
            continue;
        }
        if (d as f64) >= RATIO * (second as f64) {
            continue;
        }
        if back[j] == Some(i) {
            out.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint};
    use nalgebra::Vector2;

    fn desc(words: [u64; 4]) -> Descriptor {
        Descriptor(words)
    }

    /// Feature set with the given descriptors and levels, keypoints spread
    /// 40 px apart so every candidate counts as its own location.
    fn set(descs: Vec<Descriptor>, levels: Vec<u8>) -> FeatureSet {
        let keypoints = levels
            .into_iter()
            .enumerate()
            .map(|(i, level)| Keypoint {
                position: Vector2::new(32.0 + 40.0 * i as f64, 32.0),
                response: 1.0,
                orientation: 0.0,
                level,
            })
            .collect::<Vec<_>>();
        let depths = vec![0.0; descs.len()];
        FeatureSet { keypoints, descriptors: descs, depths }
    }

    #[test]
    fn empty_inputs_match_to_nothing() {
        let empty = set(vec![], vec![]);
        let one = set(vec![desc([1, 0, 0, 0])], vec![0]);
        assert!(match_features(&empty, &one).is_empty());
        assert!(match_features(&one, &empty).is_empty());
    }

    #[test]
    fn distinct_descriptors_match_one_to_one() {
        let a = set(vec![desc([0xFF, 0, 0, 0]), desc([0, 0xFF00, 0, 0])], vec![0, 0]);
        let b = set(vec![desc([0, 0xFF00, 0, 0]), desc([0xFF, 0, 0, 0])], vec![0, 0]);
        assert_eq!(match_features(&a, &b), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn duplicate_candidates_are_rejected_as_ambiguous() {
        // both b entries are equally near a[0] and sit far apart: the tie
        // registers as the runner-up, so the ratio test drops the match
        let a = set(vec![desc([0b11, 0, 0, 0])], vec![0]);
        let b = set(vec![desc([0b01, 0, 0, 0]), desc([0b10, 0, 0, 0])], vec![0, 0]);
        assert!(match_features(&a, &b).is_empty());
    }

    #[test]
    fn same_spot_siblings_do_not_count_as_ambiguity() {
        // two b entries with the same bits at (almost) the same position:
        // the sibling is ignored as a runner-up and the match survives
        let a = set(vec![desc([0b11, 0, 0, 0])], vec![0]);
        let mut b = set(vec![desc([0b11, 0, 0, 0]), desc([0b10, 0, 0, 0])], vec![0, 1]);
        b.keypoints[1].position = b.keypoints[0].position + Vector2::new(2.0, 1.0);
        assert_eq!(match_features(&a, &b), vec![(0, 0)]);
    }

    #[test]
    fn absolute_gate_rejects_weak_pairs() {
        // distance 128 across the first two words
        let a = set(vec![desc([u64::MAX, u64::MAX, 0, 0])], vec![0]);
        let b = set(vec![desc([0, 0, 0, 0])], vec![0]);
        assert!(match_features(&a, &b).is_empty());
    }

    #[test]
    fn level_gap_gate_blocks_distant_scales() {
        let a = set(vec![desc([7, 0, 0, 0])], vec![0]);
        let near = set(vec![desc([7, 0, 0, 0])], vec![1]);
        let far = set(vec![desc([7, 0, 0, 0])], vec![3]);
        assert_eq!(match_features(&a, &near), vec![(0, 0)]);
        assert!(match_features(&a, &far).is_empty());
    }

    #[test]
    fn cross_check_requires_symmetry() {
        // a[1] is nearer to b[0] than a[0] is, so a[0] loses the back check
        let a = set(vec![desc([0b111, 0, 0, 0]), desc([0b110, 0, 0, 0])], vec![0, 0]);
        let b = set(vec![desc([0b100, 0, 0, 0])], vec![0]);
        assert_eq!(match_features(&a, &b), vec![(1, 0)]);
    }
}
