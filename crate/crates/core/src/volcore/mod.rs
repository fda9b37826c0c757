//! Volumes, masks, clicks, the Dice metric, patch cropping and synthetic data.

mod synth;
mod vvol;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{gen_synthetic, gen_synthetic_with, SynthOptions};
pub use vvol::{read_vvol, read_vvol_bytes, write_vvol, write_vvol_bytes, VvolHeader, VVOL_MAGIC};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn flat_index(dims: Dims, p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

#[inline]
pub fn unflatten(dims: Dims, i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// 3-D intensity grid, z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
    pub spacing: Option<[f64; 3]>,
    pub id: String,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>, id: impl Into<String>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume of {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self { dims, data, spacing: None, id: id.into() })
    }

    pub fn zeros(dims: Dims, id: impl Into<String>) -> Result<Self> {
        Self::new(dims, vec![0.0; voxel_count(dims)], id)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[flat_index(self.dims, p)]
    }

    /// Min-max rescale to `[0, 1]`; a constant volume maps to zeros.
    pub fn normalize(&self) -> Result<Volume> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("volume {:?}", self.id)));
        }
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Ok(Volume { dims: self.dims, data, spacing: self.spacing, id: self.id.clone() })
    }
}

pub fn normalize(v: &Volume) -> Result<Volume> {
    v.normalize()
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("dimensions must be >= 1, got {dims:?}")));
    }
    Ok(())
}

/// Binary label grid, z-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "mask of {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Self { dims, data: vec![0; voxel_count(dims)] }
    }

    pub fn from_fn(dims: Dims, f: impl Fn([usize; 3]) -> bool) -> Self {
        let data = (0..voxel_count(dims)).map(|i| f(unflatten(dims, i)) as u8).collect();
        Self { dims, data }
    }

    pub fn from_positions(dims: Dims, positions: &[[usize; 3]]) -> Self {
        let mut m = Self::empty(dims);
        for &p in positions {
            m.set(p, true);
        }
        m
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[flat_index(self.dims, p)] != 0
    }

    pub fn set(&mut self, p: [usize; 3], v: bool) {
        let i = flat_index(self.dims, p);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Flat indices of foreground voxels.
    pub fn foreground(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect()
    }

    /// Voxels set here but not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Vec<usize>> {
        same_dims(self.dims, other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .enumerate()
            .filter(|(_, (&a, &b))| a != 0 && b == 0)
            .map(|(i, _)| i)
            .collect())
    }
}

fn same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims(pred.dims, gt.dims)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

/// A signed voxel correction placed during one interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub position: [usize; 3],
    pub polarity: Polarity,
    pub interaction_index: u64,
}

impl Click {
    pub fn new(position: [usize; 3], polarity: Polarity) -> Self {
        Self { position, polarity, interaction_index: 0 }
    }

    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        if self.position.iter().zip(dims).any(|(&p, d)| p >= d) {
            return Err(Error::ClickOutOfBounds { position: self.position, shape: dims });
        }
        Ok(())
    }
}

/// Patch extent and optional centre; a missing centre is drawn from the mask foreground.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: Dims,
    pub center: Option<[usize; 3]>,
}

impl PatchSpec {
    pub fn cube(edge: usize) -> Self {
        Self { size: [edge; 3], center: None }
    }

    pub fn validate(&self, token_size: usize) -> Result<()> {
        for &s in &self.size {
            if s < token_size || s % token_size != 0 {
                return Err(Error::IndivisibleDims { dims: self.size, token_size });
            }
        }
        Ok(())
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::cube(32)
    }
}

/// Uniformly random foreground voxel.
pub fn choose_center<R: Rng + ?Sized>(m: &Mask, rng: &mut R) -> Result<[usize; 3]> {
    let fg = m.foreground();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(unflatten(m.dims, fg[rng.random_range(0..fg.len())]))
}

/// Crops a `spec.size` window starting at `center - size/2`, zero-padding outside.
pub fn crop_patch<R: Rng + ?Sized>(
    v: &Volume,
    m: &Mask,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<(Volume, Mask)> {
    same_dims(v.dims, m.dims)?;
    check_dims(spec.size)?;
    let center = match spec.center {
        Some(c) => c,
        None => choose_center(m, rng)?,
    };
    let size = spec.size;
    let mut out_v = vec![0.0f32; voxel_count(size)];
    let mut out_m = vec![0u8; voxel_count(size)];
    let origin: [isize; 3] = std::array::from_fn(|a| center[a] as isize - (size[a] / 2) as isize);
    for z in 0..size[0] {
        let sz = origin[0] + z as isize;
        if sz < 0 || sz >= v.dims[0] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = origin[1] + y as isize;
            if sy < 0 || sy >= v.dims[1] as isize {
                continue;
            }
            for x in 0..size[2] {
                let sx = origin[2] + x as isize;
                if sx < 0 || sx >= v.dims[2] as isize {
                    continue;
                }
                let src = flat_index(v.dims, [sz as usize, sy as usize, sx as usize]);
                let dst = flat_index(size, [z, y, x]);
                out_v[dst] = v.data[src];
                out_m[dst] = m.data[src];
            }
        }
    }
    let mut pv = Volume::new(size, out_v, format!("{}@{:?}", v.id, center))?;
    pv.spacing = v.spacing;
    Ok((pv, Mask { dims: size, data: out_m }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_examples() {
        let dims = [1, 2, 2];
        let a = Mask::from_positions(dims, &[[0, 0, 0], [0, 0, 1]]);
        let b = Mask::from_positions(dims, &[[0, 0, 1], [0, 1, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = Mask::from_positions(dims, &[[0, 1, 1]]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&Mask::empty(dims), &Mask::empty(dims)).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty([2, 2, 2])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new([1, 1, 3], vec![7.0; 3], "c").unwrap();
        assert_eq!(v.normalize().unwrap().data(), &[0.0, 0.0, 0.0]);
        let v = Volume::new([1, 1, 3], vec![0.0, 5.0, 10.0], "r").unwrap();
        assert_eq!(v.normalize().unwrap().data(), &[0.0, 0.5, 1.0]);
        let v = Volume::new([1, 1, 3], vec![0.0, 0.25, 1.0], "u").unwrap();
        assert_eq!(v.normalize().unwrap().data(), v.data());
        let v = Volume::new([1, 1, 2], vec![0.0, f32::NAN], "n").unwrap();
        assert!(matches!(v.normalize(), Err(Error::NonFinite(_))));
    }

    fn ramp(dims: Dims) -> Volume {
        Volume::new(dims, (0..voxel_count(dims)).map(|i| i as f32).collect(), "ramp").unwrap()
    }

    #[test]
    fn crop_interior_and_padding() {
        let dims = [64, 64, 64];
        let v = ramp(dims);
        let m = Mask::from_fn(dims, |p| p[0] == 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = PatchSpec { size: [32; 3], center: Some([16, 16, 16]) };
        let (pv, pm) = crop_patch(&v, &m, &spec, &mut rng).unwrap();
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(pv.get([z, y, x]), v.get([z, y, x]));
                    assert_eq!(pm.get([z, y, x]), m.get([z, y, x]));
                }
            }
        }
        let spec = PatchSpec { size: [32; 3], center: Some([0, 0, 0]) };
        let (pv, _) = crop_patch(&v, &m, &spec, &mut rng).unwrap();
        assert_eq!(pv.dims(), [32; 3]);
        assert_eq!(pv.get([15, 20, 20]), 0.0);
        assert_eq!(pv.get([16, 16, 16]), v.get([0, 0, 0]));
        assert_eq!(pv.get([20, 17, 31]), v.get([4, 1, 15]));
    }

    #[test]
    fn crop_auto_center_single_voxel() {
        let dims = [20, 20, 20];
        let v = ramp(dims);
        let p = [5, 11, 2];
        let m = Mask::from_positions(dims, &[p]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let auto = crop_patch(&v, &m, &PatchSpec::cube(8), &mut rng).unwrap();
        let fixed =
            crop_patch(&v, &m, &PatchSpec { size: [8; 3], center: Some(p) }, &mut rng).unwrap();
        assert_eq!(auto.1, fixed.1);
        assert_eq!(auto.0.data(), fixed.0.data());
        assert!(auto.1.get([4, 4, 4]));
        let empty = Mask::empty(dims);
        assert!(matches!(
            crop_patch(&v, &empty, &PatchSpec::cube(8), &mut rng),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn patch_spec_validation() {
        assert!(PatchSpec::cube(32).validate(4).is_ok());
        assert!(PatchSpec::cube(30).validate(4).is_err());
        assert!(PatchSpec::cube(2).validate(4).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
        proptest::collection::vec((0u8..2, 0u8..2), 27).prop_map(|v| {
            let (a, b): (Vec<u8>, Vec<u8>) = v.into_iter().unzip();
            (Mask::new([3, 3, 3], a).unwrap(), Mask::new([3, 3, 3], b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded((a, b) in mask_strategy()) {
            let ab = dice(&a, &b).unwrap();
            prop_assert_eq!(ab, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn crop_shape_is_always_requested(cz in 0usize..10, cy in 0usize..10, cx in 0usize..10,
                                          sz in 1usize..12, sy in 1usize..12, sx in 1usize..12) {
            let dims = [10, 10, 10];
            let v = ramp(dims);
            let m = Mask::empty(dims);
            let spec = PatchSpec { size: [sz, sy, sx], center: Some([cz, cy, cx]) };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (pv, pm) = crop_patch(&v, &m, &spec, &mut rng).unwrap();
            prop_assert_eq!(pv.dims(), [sz, sy, sx]);
            prop_assert_eq!(pm.dims(), [sz, sy, sx]);
        }
    }
}
