//! Light training-time augmentation.
//!
//! Photometric changes touch only the image. Geometric changes are applied
//! identically to the image (bilinear) and every target plane (nearest). Pixels
//! exposed by the affine warp become 0 in the image, Background at level 0 and
//! `-1` at child levels. Saturation and hue jitter are accepted for config
//! compatibility but have no effect on single-channel images.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::HierTargetStack;
use crate::hierarchy::ClassTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurConfig {
    pub kernel: usize,
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub probability: f64,
    /// Degrees.
    pub rotation: (f64, f64),
    /// Pixels, applied independently on each axis.
    pub translation: (f64, f64),
    pub scale: (f64, f64),
    /// Degrees, horizontal shear.
    pub shear: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub blur: Option<BlurConfig>,
    pub jitter: Option<JitterConfig>,
    pub hflip_probability: f64,
    pub affine: Option<AffineConfig>,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            blur: None,
            jitter: None,
            hflip_probability: 0.0,
            affine: None,
        }
    }

    /// Radiograph training defaults.
    pub fn standard() -> Self {
        AugmentConfig {
            blur: Some(BlurConfig {
                kernel: 25,
                sigma: (0.001, 0.2),
            }),
            jitter: Some(JitterConfig {
                brightness: 0.4,
                contrast: 0.5,
                saturation: 0.25,
                hue: 0.01,
            }),
            hflip_probability: 0.5,
            affine: Some(AffineConfig {
                probability: 1.0,
                rotation: (-50.0, 50.0),
                translation: (-20.0, 20.0),
                scale: (0.85, 1.15),
                shear: (-5.0, 5.0),
            }),
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::standard()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Array1<f64> {
    let half = (size / 2) as f64;
    let mut k = Array1::from_shape_fn(size, |i| {
        let d = i as f64 - half;
        (-0.5 * (d / sigma).powi(2)).exp()
    });
    let sum = k.sum();
    k /= sum;
    k
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn blur(image: &Array2<f64>, kernel: &Array1<f64>) -> Array2<f64> {
    let half = (kernel.len() / 2) as i64;
    let (h, w) = image.dim();
    let horizontal = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * image[[y, reflect(x as i64 + i as i64 - half, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horizontal[[reflect(y as i64 + i as i64 - half, h), x]])
            .sum()
    })
}

/// Inverse affine map from output pixel to source pixel coordinates.
struct Warp {
    inv: [[f64; 2]; 2],
    center: (f64, f64),
    shift: (f64, f64),
}

impl Warp {
    fn new(h: usize, w: usize, angle_deg: f64, translate: (f64, f64), scale: f64, shear_deg: f64) -> Self {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let shear = shear_deg.to_radians().tan();
        // forward = scale · R(angle) · [[1, shear], [0, 1]]
        let a = scale * cos;
        let b = scale * (cos * shear - sin);
        let c = scale * sin;
        let d = scale * (sin * shear + cos);
        let det = a * d - b * c;
        Warp {
            inv: [[d / det, -b / det], [-c / det, a / det]],
            center: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            shift: translate,
        }
    }

    fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.center.0 - self.shift.0;
        let dy = y - self.center.1 - self.shift.1;
        (
            self.inv[0][0] * dx + self.inv[0][1] * dy + self.center.0,
            self.inv[1][0] * dx + self.inv[1][1] * dy + self.center.1,
        )
    }
}

fn warp_image(image: &Array2<f64>, warp: &Warp) -> Array2<f64> {
    let (h, w) = image.dim();
    let fetch = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = warp.source(x as f64, y as f64);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        fetch(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + fetch(y0, x0 + 1) * fx * (1.0 - fy)
            + fetch(y0 + 1, x0) * (1.0 - fx) * fy
            + fetch(y0 + 1, x0 + 1) * fx * fy
    })
}

fn warp_targets(targets: &mut HierTargetStack, warp: &Warp, background: Option<usize>) {
    let (h, w) = (targets.height(), targets.width());
    let sources: Vec<Option<(usize, usize)>> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (sx, sy) = warp.source(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            (rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64)
                .then_some((ry as usize, rx as usize))
        })
        .collect();
    for (level, plane) in targets.levels_mut().iter_mut().enumerate() {
        let src = plane.clone();
        for (c, mut out) in plane.outer_iter_mut().enumerate() {
            let fill = match (level, background) {
                (0, Some(bg)) if bg == c => 1,
                (0, _) => 0,
                _ => -1,
            };
            for (i, v) in out.iter_mut().enumerate() {
                *v = match sources[i] {
                    Some((sy, sx)) => src[[c, sy, sx]],
                    None => fill,
                };
            }
        }
    }
}

/// Applies one random draw of `config` to an image in `[0, 1]` and its targets.
pub fn augment(
    image: &Array2<f64>,
    targets: &HierTargetStack,
    tree: &ClassTree,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Array2<f64>, HierTargetStack) {
    let mut image = image.clone();
    let mut targets = targets.clone();

    if let Some(b) = config.blur {
        let sigma = uniform(rng, b.sigma);
        if b.kernel > 1 && sigma > 0.0 {
            image = blur(&image, &gaussian_kernel(b.kernel, sigma));
        }
    }

    if let Some(j) = config.jitter {
        let brightness = uniform(rng, ((1.0 - j.brightness).max(0.0), 1.0 + j.brightness));
        let contrast = uniform(rng, ((1.0 - j.contrast).max(0.0), 1.0 + j.contrast));
        image.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
        let mean = image.mean().unwrap_or(0.0);
        image.mapv_inplace(|v| (mean + contrast * (v - mean)).clamp(0.0, 1.0));
    }

    if config.hflip_probability > 0.0 && rng.random::<f64>() < config.hflip_probability {
        image.invert_axis(Axis(1));
        for plane in targets.levels_mut() {
            plane.invert_axis(Axis(2));
        }
        image = image.as_standard_layout().to_owned();
        for plane in targets.levels_mut() {
            *plane = plane.as_standard_layout().to_owned();
        }
    }

    if let Some(a) = config.affine {
        if rng.random::<f64>() < a.probability {
            let angle = uniform(rng, a.rotation);
            let tx = uniform(rng, a.translation);
            let ty = uniform(rng, a.translation);
            let scale = uniform(rng, a.scale);
            let shear = uniform(rng, a.shear);
            let (h, w) = image.dim();
            let warp = Warp::new(h, w, angle, (tx, ty), scale, shear);
            image = warp_image(&image, &warp);
            let background = tree
                .level(0)
                .iter()
                .position(|&i| tree.nodes()[i].stored_value() == Some(0));
            warp_targets(&mut targets, &warp, background);
        }
    }

    (image, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::{mask_to_hier_targets, SemanticMask};
    use crate::hierarchy::tl_pano_tree;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Array2<f64>, HierTargetStack) {
        let tree = tl_pano_tree();
        let mask = SemanticMask::new(Array2::from_shape_fn((24, 32), |(y, x)| {
            if (6..18).contains(&y) && (4..14).contains(&x) {
                if x < 9 { 5 } else { 6 }
            } else if y < 4 {
                1
            } else {
                0
            }
        }));
        let image = Array2::from_shape_fn((24, 32), |(y, x)| ((x * 7 + y * 3) % 17) as f64 / 17.0);
        (image, mask_to_hier_targets(&mask, &tree).unwrap())
    }

    #[test]
    fn identity_config_is_a_no_op() {
        let (image, targets) = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i2, t2) = augment(&image, &targets, &tl_pano_tree(), &AugmentConfig::identity(), &mut rng);
        assert_eq!(i2, image);
        assert_eq!(t2, targets);
    }

    #[test]
    fn flip_moves_image_and_targets_together() {
        let (image, targets) = sample();
        let config = AugmentConfig {
            hflip_probability: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i2, t2) = augment(&image, &targets, &tl_pano_tree(), &config, &mut rng);
        assert_eq!(i2, image.slice(s![.., ..;-1]).to_owned());
        for l in 0..2 {
            assert_eq!(t2.level(l), targets.level(l).slice(s![.., .., ..;-1]));
        }
    }

    #[test]
    fn same_seed_same_output() {
        let (image, targets) = sample();
        let tree = tl_pano_tree();
        let run = |seed| augment(&image, &targets, &tree, &AugmentConfig::standard(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, ta) = run(42);
        let (b, tb) = run(42);
        assert_eq!(a.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ta, tb);
    }

    #[test]
    fn affine_preserves_visibility_invariant() {
        let (image, targets) = sample();
        let tree = tl_pano_tree();
        for seed in 0..20 {
            let (_, t) = augment(&image, &targets, &tree, &AugmentConfig::standard(), &mut ChaCha8Rng::seed_from_u64(seed));
            let l0 = t.level(0);
            let l1 = t.level(1);
            for y in 0..24 {
                for x in 0..32 {
                    assert_eq!(l0.slice(s![.., y, x]).iter().filter(|&&v| v == 1).count(), 1);
                    for c in 0..4 {
                        assert_eq!(l1[[c, y, x]] == -1, l0[[3, y, x]] == 0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let (image, _) = sample();
        let warp = Warp::new(24, 32, 0.0, (0.0, 0.0), 1.0, 0.0);
        assert_eq!(warp_image(&image, &warp), image);
    }

    #[test]
    fn blur_kernel_is_normalized() {
        let k = gaussian_kernel(25, 0.2);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k[12] > 0.99);
    }
}
