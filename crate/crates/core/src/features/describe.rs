//! Steered binary descriptors over a seeded point-pair pattern.
//!
//! The pattern is 256 integer offset pairs drawn once from a fixed-seed
//! generator, so descriptors are reproducible across runs and platforms.
//! Each pair is rotated by the keypoint's orientation before sampling, which
//! is what buys rotation tolerance.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::detect::{Pyramid, PATCH_MARGIN};
use super::{Descriptor, Keypoint};

const PATTERN_SEED: u64 = 71;
const PAIRS: usize = 256;
/// Offsets span [-10, 10]^2; the rotated, rounded reach stays within 15 px,
/// inside the detector's 16-px patch margin.
const PATTERN_SPAN: i32 = 10;

fn pattern() -> &'static [([f64; 2], [f64; 2])] {
    static PATTERN: OnceLock<Vec<([f64; 2], [f64; 2])>> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let mut out = Vec::with_capacity(PAIRS);
        while out.len() < PAIRS {
            let p = [
                rng.gen_range(-PATTERN_SPAN..=PATTERN_SPAN) as f64,
                rng.gen_range(-PATTERN_SPAN..=PATTERN_SPAN) as f64,
            ];
            let q = [
                rng.gen_range(-PATTERN_SPAN..=PATTERN_SPAN) as f64,
                rng.gen_range(-PATTERN_SPAN..=PATTERN_SPAN) as f64,
            ];
            if p == q {
                continue; // a zero-length pair would waste its bit
            }
            out.push((p, q));
        }
        out
    })
}

/// Descriptors aligned with `keypoints`; `None` marks a keypoint whose
/// sampling patch would leave its pyramid level.
pub(crate) fn describe_on(pyr: &Pyramid, keypoints: &[Keypoint]) -> Vec<Option<Descriptor>> {
    let pat = pattern();
    keypoints
        .iter()
        .map(|kp| {
            let lvl = kp.level as usize;
            if lvl >= pyr.levels.len() {
                return None;
            }
            let img = &pyr.levels[lvl];
            let x = (kp.position.x / pyr.scales[lvl]).round() as i64;
            let y = (kp.position.y / pyr.scales[lvl]).round() as i64;
            if x < PATCH_MARGIN
                || y < PATCH_MARGIN
                || x > img.width() as i64 - 1 - PATCH_MARGIN
                || y > img.height() as i64 - 1 - PATCH_MARGIN
            {
                return None;
            }
            let (s, c) = kp.orientation.sin_cos();
            let mut words = [0u64; 4];
            for (bit, (p, q)) in pat.iter().enumerate() {
                let sample = |o: &[f64; 2]| {
                    let dx = (c * o[0] - s * o[1]).round() as i64;
                    let dy = (s * o[0] + c * o[1]).round() as i64;
                    img.get((x + dx) as usize, (y + dy) as usize)
                };
                if sample(p) < sample(q) {
                    words[bit / 64] |= 1u64 << (bit % 64);
                }
            }
            Some(Descriptor(words))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GrayF32;
    use nalgebra::Vector2;

    fn textured(seed: u64) -> GrayF32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = GrayF32::new(96, 96, 0.0);
        for y in 0..96 {
            for x in 0..96 {
                img.set(x, y, rng.gen_range(0.0..1.0));
            }
        }
        img
    }

    #[test]
    fn identical_keypoints_get_identical_bits() {
        let img = textured(3);
        let pyr = Pyramid::build(&img);
        let kp = Keypoint {
            position: Vector2::new(48.0, 40.0),
            response: 1.0,
            orientation: 0.7,
            level: 0,
        };
        let descs = describe_on(&pyr, &[kp, kp]);
        let a = descs[0].expect("inside margin");
        let b = descs[1].expect("inside margin");
        assert_eq!(a, b);
        assert_eq!(a.hamming(&b), 0);
    }

    #[test]
    fn keypoints_outside_the_margin_are_skipped() {
        let img = textured(4);
        let pyr = Pyramid::build(&img);
        let mut kp = Keypoint {
            position: Vector2::new(5.0, 48.0),
            response: 1.0,
            orientation: 0.0,
            level: 0,
        };
        assert!(describe_on(&pyr, &[kp])[0].is_none());
        kp.position = Vector2::new(48.0, 48.0);
        kp.level = 200; // level beyond the pyramid
        assert!(describe_on(&pyr, &[kp])[0].is_none());
    }

    #[test]
    fn pattern_is_stable_and_nondegenerate() {
        let pat = pattern();
        assert_eq!(pat.len(), 256);
        assert!(pat.iter().all(|(p, q)| p != q));
        let again = pattern();
        assert_eq!(pat.len(), again.len());
    }
}
