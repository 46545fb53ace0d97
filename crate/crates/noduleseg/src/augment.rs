//! Volumetric augmentations applied identically to image and mask:
//! axis flips, quarter turns, coarse-grid elastic deformation, and
//! additive Gaussian noise on the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ElasticConfig {
    /// Voxels between displacement-field grid nodes.
    pub grid_spacing: usize,
    /// Per-component displacement bound, in voxels.
    pub max_displacement: f64,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rot90_prob: f64,
    pub elastic: ElasticConfig,
    pub noise_sigma: f64,
    pub noise_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rot90_prob: 0.5,
            elastic: ElasticConfig { grid_spacing: 8, max_displacement: 2.0, prob: 0.5 },
            noise_sigma: 0.05,
            noise_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rot90_prob", self.rot90_prob),
            ("elastic.prob", self.elastic.prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{} must lie in [0, 1], got {}", name, p)));
            }
        }
        if self.elastic.grid_spacing == 0 {
            return Err(Error::InvalidConfig("elastic.grid_spacing must be positive".into()));
        }
        if self.elastic.max_displacement < 0.0
            || self.elastic.max_displacement >= self.elastic.grid_spacing as f64 / 2.0
        {
            return Err(Error::InvalidConfig(format!(
                "elastic.max_displacement must lie in [0, grid_spacing/2), got {}",
                self.elastic.max_displacement
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

fn spatial3(t: &Tensor<f32>) -> Result<[usize; 3]> {
    if t.shape().len() != 3 {
        return Err(Error::InvalidShape(format!(
            "augmentations take [D, H, W] volumes, got rank {}",
            t.shape().len()
        )));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2]])
}

fn check_pair(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<[usize; 3]> {
    let s = spatial3(image)?;
    if image.shape() != mask.shape() {
        return Err(Error::InvalidShape(format!(
            "image shape {:?} vs mask shape {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    Ok(s)
}

/// Remap every voxel of `src` through `index_of` (destination coordinate
/// to source coordinate).
fn remap(src: &Tensor<f32>, dims: [usize; 3], index_of: impl Fn(usize, usize, usize) -> (usize, usize, usize)) -> Tensor<f32> {
    let [d, h, w] = dims;
    let mut out = Tensor::zeros(&[d, h, w]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = index_of(z, y, x);
                out.data_mut()[(z * h + y) * w + x] = src.data()[(sz * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Reverse both arrays along each axis whose flag is set.
pub fn random_flip(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    axes_drawn: [bool; 3],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let dims = check_pair(image, mask)?;
    let [d, h, w] = dims;
    let f = |z: usize, y: usize, x: usize| {
        (
            if axes_drawn[0] { d - 1 - z } else { z },
            if axes_drawn[1] { h - 1 - y } else { y },
            if axes_drawn[2] { w - 1 - x } else { x },
        )
    };
    Ok((remap(image, dims, f), remap(mask, dims, f)))
}

/// `k` quarter turns in the plane of `axis_pair` (axes numbered 0..3 over
/// [D, H, W]). The two extents in the plane must match.
pub fn random_rot90(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    axis_pair: (usize, usize),
    k: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let dims = check_pair(image, mask)?;
    let (a, b) = axis_pair;
    if a >= 3 || b >= 3 || a == b {
        return Err(Error::InvalidConfig(format!("bad rotation plane ({}, {})", a, b)));
    }
    if dims[a] != dims[b] {
        return Err(Error::InvalidShape(format!(
            "rotation plane extents differ: {} vs {}",
            dims[a], dims[b]
        )));
    }
    let n = dims[a];
    let k = k % 4;
    let f = |z: usize, y: usize, x: usize| {
        let mut c = [z, y, x];
        // One quarter turn: dst[u, v] = src[v, n-1-u].
        for _ in 0..k {
            let (u, v) = (c[a], c[b]);
            c[a] = v;
            c[b] = n - 1 - u;
        }
        (c[0], c[1], c[2])
    };
    Ok((remap(image, dims, f), remap(mask, dims, f)))
}

/// Per-node displacement field, one uniform vector per coarse grid node.
/// Node (i, j, l) of axis component c is at `field[((i*nh + j)*nw + l)*3 + c]`.
fn draw_field(dims: [usize; 3], cfg: &ElasticConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, [usize; 3]) {
    let nodes = dims.map(|e| e.div_ceil(cfg.grid_spacing) + 1);
    let mut field = vec![0.0f64; nodes[0] * nodes[1] * nodes[2] * 3];
    for v in field.iter_mut() {
        *v = rng.gen_range(-cfg.max_displacement..=cfg.max_displacement);
    }
    (field, nodes)
}

/// Trilinear interpolation of the coarse field at voxel coordinate p.
fn field_at(field: &[f64], nodes: [usize; 3], spacing: f64, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0f64; 3];
    let g = p.map(|v| v / spacing);
    let i0 = [0, 1, 2].map(|a| (g[a].floor() as usize).min(nodes[a] - 1));
    let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(nodes[a] - 1));
    let fr = [0, 1, 2].map(|a| g[a] - g[a].floor());
    for (dz, wz) in [(i0[0], 1.0 - fr[0]), (i1[0], fr[0])] {
        for (dy, wy) in [(i0[1], 1.0 - fr[1]), (i1[1], fr[1])] {
            for (dx, wx) in [(i0[2], 1.0 - fr[2]), (i1[2], fr[2])] {
                let w = wz * wy * wx;
                if w == 0.0 {
                    continue;
                }
                let base = ((dz * nodes[1] + dy) * nodes[2] + dx) * 3;
                for c in 0..3 {
                    out[c] += w * field[base + c];
                }
            }
        }
    }
    out
}

fn trilinear_sample(src: &Tensor<f32>, dims: [usize; 3], p: [f64; 3]) -> f32 {
    let [d, h, w] = dims;
    let clamped = [
        p[0].clamp(0.0, (d - 1) as f64),
        p[1].clamp(0.0, (h - 1) as f64),
        p[2].clamp(0.0, (w - 1) as f64),
    ];
    let i0 = [0, 1, 2].map(|a| clamped[a].floor() as usize);
    let lim = [d - 1, h - 1, w - 1];
    let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(lim[a]));
    let fr = [0, 1, 2].map(|a| clamped[a] - i0[a] as f64);
    let mut acc = 0.0f64;
    for (z, wz) in [(i0[0], 1.0 - fr[0]), (i1[0], fr[0])] {
        for (y, wy) in [(i0[1], 1.0 - fr[1]), (i1[1], fr[1])] {
            for (x, wx) in [(i0[2], 1.0 - fr[2]), (i1[2], fr[2])] {
                acc += wz * wy * wx * src.data()[(z * h + y) * w + x] as f64;
            }
        }
    }
    acc as f32
}

fn nearest_sample(src: &Tensor<f32>, dims: [usize; 3], p: [f64; 3]) -> f32 {
    let [d, h, w] = dims;
    let z = p[0].round().clamp(0.0, (d - 1) as f64) as usize;
    let y = p[1].round().clamp(0.0, (h - 1) as f64) as usize;
    let x = p[2].round().clamp(0.0, (w - 1) as f64) as usize;
    src.data()[(z * h + y) * w + x]
}

/// Warp both arrays through a coarse random displacement field upsampled
/// trilinearly to voxel resolution. The image is sampled trilinearly, the
/// mask nearest-neighbor so it stays binary; out-of-range source
/// coordinates clamp to the border.
pub fn elastic_deform(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    cfg: &ElasticConfig,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let dims = check_pair(image, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (field, nodes) = draw_field(dims, cfg, &mut rng);
    let spacing = cfg.grid_spacing as f64;
    let [d, h, w] = dims;
    let mut out_img = Tensor::zeros(&[d, h, w]);
    let mut out_mask = Tensor::zeros(&[d, h, w]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let disp = field_at(&field, nodes, spacing, p);
                let src = [p[0] + disp[0], p[1] + disp[1], p[2] + disp[2]];
                let idx = (z * h + y) * w + x;
                out_img.data_mut()[idx] = trilinear_sample(image, dims, src);
                out_mask.data_mut()[idx] = nearest_sample(mask, dims, src);
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Zero-mean Gaussian added to the image; the mask is never touched.
pub fn add_gaussian_noise(image: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if sigma < 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be nonnegative, got {}", sigma)));
    }
    let mut out = image.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma).expect("sigma validated above");
    for v in out.data_mut() {
        *v += normal.sample(&mut rng) as f32;
    }
    Ok(out)
}

/// flip, quarter turn, elastic deformation, then noise, each gated by its
/// probability, all drawn from one stream seeded by `seed`. Identical
/// geometry is applied to image and mask; texture labels are untouched.
pub fn augment_sample(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    cfg.validate()?;
    let dims = check_pair(image, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let axes = [
        rng.gen_bool(cfg.flip_prob),
        rng.gen_bool(cfg.flip_prob),
        rng.gen_bool(cfg.flip_prob),
    ];
    let (mut img, mut msk) = random_flip(image, mask, axes)?;

    // Plane and turn count are drawn regardless of the gate so the rest
    // of the stream does not depend on the rotation coin.
    let planes = [(0usize, 1usize), (0, 2), (1, 2)];
    let plane = planes[rng.gen_range(0..3)];
    let k = rng.gen_range(1..=3usize);
    if rng.gen_bool(cfg.rot90_prob) && dims[plane.0] == dims[plane.1] {
        let (i, m) = random_rot90(&img, &msk, plane, k)?;
        img = i;
        msk = m;
    }

    let elastic_seed = rng.gen::<u64>();
    if rng.gen_bool(cfg.elastic.prob) {
        let (i, m) = elastic_deform(&img, &msk, &cfg.elastic, elastic_seed)?;
        img = i;
        msk = m;
    }

    let noise_seed = rng.gen::<u64>();
    if rng.gen_bool(cfg.noise_prob) {
        img = add_gaussian_noise(&img, cfg.noise_sigma, noise_seed)?;
    }
    Ok((img, msk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_volume(seed: u64, dims: [usize; 3]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&dims);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    fn rand_mask(seed: u64, dims: [usize; 3]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&dims);
        for v in t.data_mut() {
            *v = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        t
    }

    fn sphere_mask(radius: f64, dims: [usize; 3]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&dims);
        let c = dims.map(|e| (e as f64 - 1.0) / 2.0);
        let [d, h, w] = dims;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r2 = (z as f64 - c[0]).powi(2)
                        + (y as f64 - c[1]).powi(2)
                        + (x as f64 - c[2]).powi(2);
                    if r2 <= radius * radius {
                        t.data_mut()[(z * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
        t
    }

    fn voxels(mask: &Tensor<f32>) -> usize {
        mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    #[test]
    fn flip_is_involution_and_preserves_volume() {
        let img = rand_volume(1, [4, 5, 6]);
        let msk = rand_mask(2, [4, 5, 6]);
        let axes = [true, false, true];
        let (i1, m1) = random_flip(&img, &msk, axes).unwrap();
        assert_eq!(voxels(&m1), voxels(&msk));
        let (i2, m2) = random_flip(&i1, &m1, axes).unwrap();
        assert_eq!(i2.data(), img.data());
        assert_eq!(m2.data(), msk.data());
    }

    #[test]
    fn flip_matches_index_reversal_oracle() {
        let img = rand_volume(3, [3, 4, 2]);
        let msk = rand_mask(4, [3, 4, 2]);
        let (out, _) = random_flip(&img, &msk, [false, true, false]).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    assert_eq!(
                        out.data()[(z * 4 + y) * 2 + x],
                        img.data()[(z * 4 + (3 - y)) * 2 + x]
                    );
                }
            }
        }
    }

    #[test]
    fn rot90_four_turns_is_identity() {
        let img = rand_volume(5, [4, 4, 4]);
        let msk = rand_mask(6, [4, 4, 4]);
        let (i, m) = random_rot90(&img, &msk, (0, 2), 4).unwrap();
        assert_eq!(i.data(), img.data());
        assert_eq!(m.data(), msk.data());
    }

    #[test]
    fn rot90_half_turn_equals_double_flip() {
        let img = rand_volume(7, [5, 5, 3]);
        let msk = rand_mask(8, [5, 5, 3]);
        let (a, _) = random_rot90(&img, &msk, (0, 1), 2).unwrap();
        let (b, _) = random_flip(&img, &msk, [true, true, false]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rot90_matches_coordinate_permutation_oracle() {
        let img = rand_volume(9, [4, 3, 4]);
        let msk = rand_mask(10, [4, 3, 4]);
        let (out, _) = random_rot90(&img, &msk, (0, 2), 1).unwrap();
        // dst[z, y, x] = src[x, y, 3 - z] for one turn in the (0, 2) plane.
        for z in 0..4 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(
                        out.data()[(z * 3 + y) * 4 + x],
                        img.data()[(x * 3 + y) * 4 + (3 - z)]
                    );
                }
            }
        }
    }

    #[test]
    fn rot90_rejects_unequal_plane_extents() {
        let img = rand_volume(11, [4, 3, 4]);
        let msk = rand_mask(12, [4, 3, 4]);
        assert!(matches!(
            random_rot90(&img, &msk, (0, 1), 1),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn elastic_zero_displacement_is_identity() {
        let img = rand_volume(13, [16, 16, 16]);
        let msk = rand_mask(14, [16, 16, 16]);
        let cfg = ElasticConfig { grid_spacing: 8, max_displacement: 0.0, prob: 1.0 };
        let (i, m) = elastic_deform(&img, &msk, &cfg, 99).unwrap();
        assert_eq!(i.data(), img.data());
        assert_eq!(m.data(), msk.data());
    }

    #[test]
    fn elastic_mask_stays_binary() {
        let img = rand_volume(15, [16, 16, 16]);
        let msk = sphere_mask(5.0, [16, 16, 16]);
        let cfg = ElasticConfig { grid_spacing: 8, max_displacement: 2.0, prob: 1.0 };
        let (_, m) = elastic_deform(&img, &msk, &cfg, 7).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    /// Monte-Carlo bound on mask distortion at default strength. The
    /// per-seed worst case with an independent uniform field is just
    /// under 30% on a radius-6 sphere; the ensemble stays unbiased.
    #[test]
    fn elastic_volume_change_bounded_on_sphere() {
        let dims = [32, 32, 32];
        let img = rand_volume(16, dims);
        let msk = sphere_mask(6.0, dims);
        let before = voxels(&msk) as f64;
        let cfg = ElasticConfig { grid_spacing: 8, max_displacement: 2.0, prob: 1.0 };
        let mut sum = 0.0;
        for seed in 0..100u64 {
            let (_, m) = elastic_deform(&img, &msk, &cfg, seed).unwrap();
            let after = voxels(&m) as f64;
            let change = (after - before) / before;
            sum += change;
            assert!(change.abs() < 0.30, "seed {}: volume change {:.3}", seed, change);
        }
        assert!((sum / 100.0).abs() < 0.05, "systematic volume bias {:.3}", sum / 100.0);
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let img = rand_volume(17, [8, 8, 8]);
        let out = add_gaussian_noise(&img, 0.0, 3).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn noise_moments_match_sigma() {
        let dims = [32, 32, 32];
        let img = rand_volume(18, dims);
        let sigma = 0.05;
        let out = add_gaussian_noise(&img, sigma, 4).unwrap();
        let n = out.numel() as f64;
        let diffs: Vec<f64> = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) as f64)
            .collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt());
        assert!((var.sqrt() - sigma).abs() < 0.1 * sigma);
    }

    #[test]
    fn augment_all_probs_zero_is_identity() {
        let img = rand_volume(19, [16, 16, 16]);
        let msk = rand_mask(20, [16, 16, 16]);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            rot90_prob: 0.0,
            elastic: ElasticConfig { grid_spacing: 8, max_displacement: 2.0, prob: 0.0 },
            noise_sigma: 0.05,
            noise_prob: 0.0,
        };
        let (i, m) = augment_sample(&img, &msk, &cfg, 55).unwrap();
        assert_eq!(i.data(), img.data());
        assert_eq!(m.data(), msk.data());
    }

    #[test]
    fn augment_same_seed_is_bit_identical() {
        let img = rand_volume(21, [16, 16, 16]);
        let msk = rand_mask(22, [16, 16, 16]);
        let cfg = AugmentConfig::default();
        let (i1, m1) = augment_sample(&img, &msk, &cfg, 77).unwrap();
        let (i2, m2) = augment_sample(&img, &msk, &cfg, 77).unwrap();
        assert_eq!(i1.data(), i2.data());
        assert_eq!(m1.data(), m2.data());
        let (i3, _) = augment_sample(&img, &msk, &cfg, 78).unwrap();
        assert_ne!(i1.data(), i3.data());
    }

    #[test]
    fn augment_rejects_bad_config() {
        let img = rand_volume(23, [8, 8, 8]);
        let msk = rand_mask(24, [8, 8, 8]);
        let cfg = AugmentConfig {
            elastic: ElasticConfig { grid_spacing: 4, max_displacement: 2.0, prob: 0.5 },
            ..Default::default()
        };
        assert!(matches!(
            augment_sample(&img, &msk, &cfg, 1),
            Err(Error::InvalidConfig(_))
        ));
    }
}
