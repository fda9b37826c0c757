//! Run-length encoding of binary masks: `(start, length)` pairs of foreground runs
//! over the flattened z-major voxel order, sorted and non-adjacent.

use crate::error::{Error, Result};

pub fn rle_encode(data: &[u8]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < data.len() {
        if data[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < data.len() && data[i] != 0 {
            i += 1;
        }
        runs.push((start, i - start));
    }
    runs
}

/// Inverse of [`rle_encode`] for a mask of `len` voxels. Runs must be sorted,
/// non-empty, non-overlapping and in range.
pub fn rle_decode(runs: &[(usize, usize)], len: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; len];
    let mut end = 0;
    for &(start, n) in runs {
        if n == 0 || start < end || start.checked_add(n).is_none_or(|e| e > len) {
            return Err(Error::InvalidArgument(format!("bad run ({start}, {n}) for {len} voxels")));
        }
        out[start..start + n].fill(1);
        end = start + n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(rle_encode(&[0, 0, 0]).is_empty());
        assert_eq!(rle_encode(&[1, 1, 0, 1, 0, 0, 1]), vec![(0, 2), (3, 1), (6, 1)]);
        assert_eq!(rle_decode(&[(1, 2)], 4).unwrap(), vec![0, 1, 1, 0]);
        assert!(rle_decode(&[(3, 2)], 4).is_err());
        assert!(rle_decode(&[(2, 1), (1, 1)], 4).is_err());
        assert!(rle_decode(&[(0, 0)], 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(bits in proptest::collection::vec(0u8..2, 0..300)) {
            let runs = rle_encode(&bits);
            prop_assert_eq!(rle_decode(&runs, bits.len()).unwrap(), bits.clone());
            prop_assert_eq!(runs.iter().map(|r| r.1).sum::<usize>(), bits.iter().filter(|&&b| b == 1).count());
            for w in runs.windows(2) {
                prop_assert!(w[0].0 + w[0].1 < w[1].0);
            }
        }
    }
}
