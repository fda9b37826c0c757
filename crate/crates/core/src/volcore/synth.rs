use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{voxel_count, Dims, Mask, Volume};
use crate::error::{Error, Result};

/// Knobs of the synthetic blob generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Ellipsoids forming the foreground.
    pub n_blobs: usize,
    /// Extra ellipsoids drawn into the intensities only. They look like foreground
    /// but are not labelled, so the image alone does not determine the target.
    pub distractors: usize,
    pub noise_std: f64,
}

impl SynthOptions {
    pub fn blobs(n_blobs: usize) -> Self {
        Self { n_blobs, distractors: 0, noise_std: 0.1 }
    }
}

const MIN_EDGE: usize = 8;
const MAX_ATTEMPTS: usize = 256;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, dims: Dims) -> Self {
        let min_edge = *dims.iter().min().unwrap() as f64;
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.12 * min_edge..0.25 * min_edge));
        let center = std::array::from_fn(|a| {
            let lo = radii[a];
            let hi = (dims[a] as f64 - radii[a]).max(lo + 1e-9);
            rng.random_range(lo..hi)
        });
        Self { center, radii }
    }

    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 + 0.5 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn rasterize(&self, dims: Dims, out: &mut Mask) {
        let lo: [usize; 3] =
            std::array::from_fn(|a| (self.center[a] - self.radii[a] - 1.0).max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((self.center[a] + self.radii[a] + 1.0).ceil() as usize).min(dims[a]));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    if self.contains([z, y, x]) {
                        out.set([z, y, x], true);
                    }
                }
            }
        }
    }
}

/// Union of `n_blobs` random ellipsoids; intensities are the blurred mask plus
/// Gaussian noise. Pure function of its arguments.
pub fn gen_synthetic(seed: u64, dims: Dims, n_blobs: usize) -> Result<(Volume, Mask)> {
    gen_synthetic_with(seed, dims, SynthOptions::blobs(n_blobs))
}

pub fn gen_synthetic_with(seed: u64, dims: Dims, opts: SynthOptions) -> Result<(Volume, Mask)> {
    if opts.n_blobs == 0 {
        return Err(Error::InvalidArgument("n_blobs must be >= 1".into()));
    }
    if dims.iter().any(|&d| d < MIN_EDGE) {
        return Err(Error::InvalidArgument(format!(
            "shape {dims:?} too small to host an ellipsoid (min edge {MIN_EDGE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::empty(dims);
    let mut accepted = false;
    for _ in 0..MAX_ATTEMPTS {
        mask = Mask::empty(dims);
        for _ in 0..opts.n_blobs {
            Ellipsoid::random(&mut rng, dims).rasterize(dims, &mut mask);
        }
        let f = mask.foreground_fraction();
        if (0.01..=0.5).contains(&f) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::InvalidArgument(format!(
            "could not place {} blobs in {dims:?} within the foreground budget",
            opts.n_blobs
        )));
    }
    let mut drawn = mask.clone();
    for _ in 0..opts.distractors {
        Ellipsoid::random(&mut rng, dims).rasterize(dims, &mut drawn);
    }
    let smooth = box_blur(dims, &drawn.data().iter().map(|&b| b as f32).collect::<Vec<_>>());
    let noise = Normal::new(0.0, opts.noise_std.max(0.0)).expect("finite noise std");
    let data = smooth.into_iter().map(|s| s + noise.sample(&mut rng) as f32).collect();
    let volume = Volume::new(dims, data, format!("synth-{seed}"))?;
    Ok((volume, mask))
}

/// Separable 3-tap box filter with clamped borders.
fn box_blur(dims: Dims, data: &[f32]) -> Vec<f32> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0f32; voxel_count(dims)];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = (i / strides[axis]) % dims[axis];
            let mut acc = cur[i];
            let mut n = 1.0;
            if coord > 0 {
                acc += cur[i - strides[axis]];
                n += 1.0;
            }
            if coord + 1 < dims[axis] {
                acc += cur[i + strides[axis]];
                n += 1.0;
            }
            *out = acc / n;
        }
        cur = next;
    }
    cur
}
