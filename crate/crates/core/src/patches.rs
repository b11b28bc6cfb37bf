//! 2.5D patch extraction: three orthogonal `s×s` crops through a point,
//! stacked as channels (axial xy, coronal xz, sagittal yz).
//!
//! Points are rounded to the nearest voxel; reads outside the grid are zero.
//! Data is stored HWC (`[row][col][channel]`), the layout the network consumes.

use crate::volumes::Volume;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch side must be odd and positive, got {0}")]
    EvenSide(usize),
    #[error("patch buffer holds {found} values, expected {expected}")]
    Buffer { expected: usize, found: usize },
}

/// Plane order within each 3-channel group.
pub const PLANE_ORDER: &str = "axial-xy,coronal-xz,sagittal-yz";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    side: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PatchStack {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.side + col) * self.channels + channel]
    }
}

fn check_side(s: usize) -> Result<(), PatchError> {
    if s % 2 == 0 {
        Err(PatchError::EvenSide(s))
    } else {
        Ok(())
    }
}

/// Nearest voxel to a continuous coordinate. Saturates for huge values.
pub fn round_point(x: [f64; 3]) -> [i64; 3] {
    x.map(|v| v.round() as i64)
}

/// Fills `out` (`s·s·3k` values) with the patch block for `points`.
pub fn extract_into(volume: &Volume, points: &[[f64; 3]], s: usize, out: &mut [f32]) -> Result<(), PatchError> {
    check_side(s)?;
    let channels = 3 * points.len();
    let expected = s * s * channels;
    if out.len() != expected {
        return Err(PatchError::Buffer { expected, found: out.len() });
    }
    let half = (s / 2) as i64;
    for (j, p) in points.iter().enumerate() {
        let [cx, cy, cz] = round_point(*p);
        for r in 0..s {
            let dr = r as i64 - half;
            for c in 0..s {
                let dc = c as i64 - half;
                let base = (r * s + c) * channels + 3 * j;
                out[base] = volume.get_or_zero(cx.saturating_add(dc), cy.saturating_add(dr), cz);
                out[base + 1] = volume.get_or_zero(cx.saturating_add(dc), cy, cz.saturating_add(dr));
                out[base + 2] = volume.get_or_zero(cx, cy.saturating_add(dc), cz.saturating_add(dr));
            }
        }
    }
    Ok(())
}

/// 3-channel patch `I(V, x, s)` centred on `x`.
pub fn extract_patch(volume: &Volume, x: [f64; 3], s: usize) -> Result<PatchStack, PatchError> {
    extract_patch_block(volume, &[x], s)
}

/// Concatenated patches of all `points`, `3·points.len()` channels, in point order.
pub fn extract_patch_block(volume: &Volume, points: &[[f64; 3]], s: usize) -> Result<PatchStack, PatchError> {
    check_side(s)?;
    let channels = 3 * points.len();
    let mut data = vec![0.0; s * s * channels];
    extract_into(volume, points, s, &mut data)?;
    Ok(PatchStack { side: s, channels, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        let data = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn constant_volume_gives_constant_patch() {
        let v = Volume::new([9, 9, 9], [1.0; 3], vec![0.25; 729]).unwrap();
        let p = extract_patch(&v, [4.0, 4.0, 4.0], 5).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.25));
        assert_eq!(p.channels(), 3);
    }

    #[test]
    fn corner_is_zero_padded() {
        let v = ramp([6, 7, 8]);
        let p = extract_patch(&v, [0.0, 0.0, 0.0], 5).unwrap();
        for ch in 0..3 {
            assert_eq!(p.at(2, 2, ch), v.get(0, 0, 0));
            assert_eq!(p.at(0, 0, ch), 0.0);
            assert_eq!(p.at(1, 2, ch), 0.0);
        }
        assert_eq!(p.at(2, 3, 0), v.get(1, 0, 0));
    }

    #[test]
    fn even_side_is_rejected() {
        let v = ramp([4, 4, 4]);
        assert_eq!(extract_patch(&v, [1.0; 3], 4).unwrap_err(), PatchError::EvenSide(4));
    }

    #[test]
    fn sub_voxel_points_round() {
        let v = ramp([10, 10, 10]);
        let a = extract_patch(&v, [4.4, 5.6, 3.5], 3).unwrap();
        let b = extract_patch(&v, [4.0, 6.0, 4.0], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn far_outside_point_is_all_zero() {
        let v = ramp([4, 4, 4]);
        let p = extract_patch(&v, [1e30, -1e30, 0.0], 3).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn block_of_one_equals_single_patch() {
        let v = ramp([12, 12, 12]);
        let x = [3.0, 7.0, 5.0];
        assert_eq!(extract_patch_block(&v, &[x], 7).unwrap(), extract_patch(&v, x, 7).unwrap());
    }

    #[test]
    fn full_size_block_shape() {
        let v = ramp([8, 8, 8]);
        let pts = vec![[4.0; 3]; 10];
        let p = extract_patch_block(&v, &pts, 101).unwrap();
        assert_eq!((p.side(), p.channels(), p.data().len()), (101, 30, 101 * 101 * 30));
    }

    #[test]
    fn coincident_points_give_identical_groups() {
        let v = ramp([10, 10, 10]);
        let p = extract_patch_block(&v, &[[5.0, 4.0, 3.0], [5.0, 4.0, 3.0]], 5).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                for ch in 0..3 {
                    assert_eq!(p.at(r, c, ch), p.at(r, c, 3 + ch));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn channels_depend_only_on_their_point(
            a in prop::array::uniform3(0.0f64..11.0),
            b in prop::array::uniform3(0.0f64..11.0),
            c in prop::array::uniform3(0.0f64..11.0),
        ) {
            let v = ramp([12, 12, 12]);
            let p1 = extract_patch_block(&v, &[a, b], 5).unwrap();
            let p2 = extract_patch_block(&v, &[a, c], 5).unwrap();
            for r in 0..5 { for col in 0..5 { for ch in 0..3 {
                prop_assert_eq!(p1.at(r, col, ch), p2.at(r, col, ch));
            }}}
        }
    }
}
