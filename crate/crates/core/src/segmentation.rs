//! Instance-to-pixel plane segmentation and depth assembly.

use serde::{Deserialize, Serialize};

use crate::geometry::{depth_from_plane, is_valid_depth, CameraIntrinsics, PlaneParam};
use crate::model::{PixelOutputs, PlaneInstanceSet};

/// Embedding-distance threshold for assigning a pixel to an instance.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptInstance {
    /// Query slot the instance came from.
    pub slot: usize,
    pub prob: f64,
    pub param: PlaneParam,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    /// `0` is non-plane, `k ≥ 1` refers to `kept[k - 1]`.
    pub mask: Vec<u32>,
    pub kept: Vec<KeptInstance>,
    pub assembled_depth: Vec<f64>,
    /// Plane pixels whose ray missed the assigned plane and kept the
    /// decoder depth instead.
    pub fallback_pixels: usize,
}

impl SegmentationResult {
    pub fn planes(&self) -> Vec<PlaneParam> {
        self.kept.iter().map(|k| k.param).collect()
    }
}

/// Instances with plane probability above 0.5, in slot order.
pub fn kept_instances(set: &PlaneInstanceSet) -> Vec<KeptInstance> {
    set.kept()
        .into_iter()
        .map(|i| KeptInstance {
            slot: i,
            prob: set.probs[i],
            param: set.params[i],
            embedding: set.embeds[i].clone(),
        })
        .collect()
}

/// Assigns every pixel of a channel-major `[ε, N]` embedding map to its
/// nearest instance embedding when that distance is below `threshold`.
pub fn assign_pixels(embed_map: &[f64], pixels: usize, instances: &[Vec<f64>], threshold: f64) -> Vec<u32> {
    let mut mask = vec![0u32; pixels];
    if instances.is_empty() || pixels == 0 {
        return mask;
    }
    let eps = embed_map.len() / pixels;
    assert_eq!(eps * pixels, embed_map.len(), "embedding map size");
    for (p, m) in mask.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (k, e) in instances.iter().enumerate() {
            let d2: f64 = (0..eps).map(|c| (embed_map[c * pixels + p] - e[c]).powi(2)).sum();
            if d2 < best {
                best = d2;
                arg = k;
            }
        }
        if best.sqrt() < threshold {
            *m = arg as u32 + 1;
        }
    }
    mask
}

/// Plane depth on assigned pixels, `depth_map` elsewhere. Returns the
/// assembled map and the number of plane pixels that fell back to
/// `depth_map` because the ray missed the plane.
pub fn assemble_depth(mask: &[u32], planes: &[PlaneParam], depth_map: &[f64], k: &CameraIntrinsics) -> (Vec<f64>, usize) {
    assert_eq!(mask.len(), depth_map.len());
    let w = k.width;
    let mut fallback = 0;
    let out = mask
        .iter()
        .zip(depth_map)
        .enumerate()
        .map(|(p, (&m, &d))| {
            if m == 0 {
                return d;
            }
            let z = depth_from_plane([(p % w) as f64, (p / w) as f64], &planes[m as usize - 1], k);
            if is_valid_depth(z) && z > 0.0 {
                z
            } else {
                fallback += 1;
                d
            }
        })
        .collect();
    (out, fallback)
}

/// Full segmentation of one prediction.
pub fn segment(set: &PlaneInstanceSet, pixels: &PixelOutputs, k: &CameraIntrinsics, threshold: f64) -> SegmentationResult {
    let kept = kept_instances(set);
    let n = pixels.width * pixels.height;
    let embeds: Vec<Vec<f64>> = kept.iter().map(|k| k.embedding.clone()).collect();
    let mask = assign_pixels(pixels.embed.data(), n, &embeds, threshold);
    let planes: Vec<PlaneParam> = kept.iter().map(|k| k.param).collect();
    let (assembled_depth, fallback_pixels) = assemble_depth(&mask, &planes, &pixels.depth, k);
    SegmentationResult {
        width: pixels.width,
        height: pixels.height,
        mask,
        kept,
        assembled_depth,
        fallback_pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embeds(rng: &mut ChaCha8Rng, n: usize, eps: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..eps).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn no_instances_gives_empty_mask() {
        assert_eq!(assign_pixels(&[0.0; 12], 4, &[], 1.0), vec![0; 4]);
    }

    #[test]
    fn exact_embedding_is_assigned() {
        let inst = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]];
        // channel-major map for two pixels: p0 = (3,0), p1 = (10,10)
        let map = [3.0, 10.0, 0.0, 10.0];
        assert_eq!(assign_pixels(&map, 2, &inst, 1.0), vec![2, 0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let inst = vec![vec![1.0], vec![-1.0]];
        assert_eq!(assign_pixels(&[0.0], 1, &inst, 2.0), vec![1]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, eps) = (64, 4);
        for _ in 0..20 {
            let inst = random_embeds(&mut rng, 3, eps);
            let map: Vec<f64> = (0..n * eps).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mask = assign_pixels(&map, n, &inst, 1.0);
            for p in 0..n {
                let e: Vec<f64> = (0..eps).map(|c| map[c * n + p]).collect();
                let dists: Vec<f64> = inst
                    .iter()
                    .map(|i| i.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                    .collect();
                let mut expected = 0;
                let mut best = f64::INFINITY;
                for (k, &d) in dists.iter().enumerate() {
                    if d < best {
                        best = d;
                        expected = k + 1;
                    }
                }
                if best >= 1.0 {
                    expected = 0;
                }
                assert_eq!(mask[p], expected as u32);
            }
        }
    }

    #[test]
    fn depth_passes_through_without_planes() {
        let k = CameraIntrinsics::centered(10.0, 4, 2).unwrap();
        let d = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(assemble_depth(&[0; 8], &[], &d, &k), (d, 0));
    }

    #[test]
    fn frontal_plane_gives_constant_depth() {
        let k = CameraIntrinsics::centered(20.0, 8, 6).unwrap();
        let (out, fb) = assemble_depth(&[1; 48], &[PlaneParam([0.0, 0.0, 0.5])], &[9.0; 48], &k);
        assert_eq!(fb, 0);
        assert!(out.iter().all(|&z| (z - 2.0).abs() < 1e-12));
    }

    #[test]
    fn missed_rays_fall_back() {
        let k = CameraIntrinsics::centered(10.0, 4, 4).unwrap();
        // plane x = 1 is parallel to rays through the center column
        let (out, fb) = assemble_depth(&[1; 16], &[PlaneParam([1.0, 0.0, 0.0])], &[7.0; 16], &k);
        assert!(fb > 0);
        assert!(out.iter().all(|&z| z > 0.0));
    }

    #[test]
    fn gt_instances_reproduce_gt_depth() {
        let cfg = GeneratorConfig::default().with_size(64, 48);
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            let (out, fb) = assemble_depth(&s.mask, &s.planes, &s.depth, &s.intrinsics);
            assert_eq!(fb, 0);
            for (a, b) in out.iter().zip(&s.depth) {
                assert!((a - b).abs() < 1e-5 || (a.is_nan() && b.is_nan()));
            }
        }
    }

    proptest! {
        #[test]
        fn raising_threshold_never_shrinks_planes(seed in 0u64..500, t in 0.1f64..2.0, dt in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_embeds(&mut rng, 3, 3);
            let map: Vec<f64> = (0..30 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lo = assign_pixels(&map, 30, &inst, t);
            let hi = assign_pixels(&map, 30, &inst, t + dt);
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(*a == 0 || a == b);
            }
            prop_assert_eq!(&lo, &assign_pixels(&map, 30, &inst, t));
        }
    }
}
