//! Exact pixel permutations: quarter turns (counter-clockwise) followed by
//! an optional horizontal flip, and channel colorization.

use crate::error::{GcnError, Result};
use crate::schema::TRANSFORM_NAMES;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Transform {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    /// Horizontal flip, applied after the rotation.
    pub mirror: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        mirror: false,
    };

    /// All eight states, ordered like [`TRANSFORM_NAMES`].
    pub fn all() -> [Transform; 8] {
        std::array::from_fn(|i| Transform::from_index(i).expect("index < 8"))
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < 8).then(|| Transform {
            quarter_turns: (i % 4) as u8,
            mirror: i >= 4,
        })
    }

    pub fn index(self) -> usize {
        self.quarter_turns as usize % 4 + if self.mirror { 4 } else { 0 }
    }

    pub fn name(self) -> &'static str {
        TRANSFORM_NAMES[self.index()]
    }

    pub fn rotation(quarter_turns: u8) -> Self {
        Transform {
            quarter_turns: quarter_turns % 4,
            mirror: false,
        }
    }

    /// The transform that undoes `self`.
    pub fn inverse(self) -> Self {
        if self.mirror {
            // (F R^q)^-1 = R^-q F = F R^q: a reflection is its own inverse.
            self
        } else {
            Transform::rotation((4 - self.quarter_turns % 4) % 4)
        }
    }
}

/// Apply `t` to a `[C, H, W]` image. Quarter turns need a square image.
pub fn apply_transform(image: &Tensor<f32>, t: Transform) -> Result<Tensor<f32>> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(GcnError::shape(format!(
                "transform expects [C, H, W], got {:?}",
                image.shape()
            )))
        }
    };
    let q = t.quarter_turns % 4;
    if q % 2 == 1 && h != w {
        return Err(GcnError::Geometry(format!(
            "quarter-turn rotation needs a square image, got {h}x{w}"
        )));
    }
    let src = image.data();
    let mut out = vec![0f32; src.len()];
    let plane = h * w;
    for ch in 0..c {
        let s = &src[ch * plane..(ch + 1) * plane];
        let o = &mut out[ch * plane..(ch + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                let jj = if t.mirror { w - 1 - j } else { j };
                // Source pixel of a counter-clockwise rotation by q quarter turns.
                let (si, sj) = match q {
                    0 => (i, jj),
                    1 => (jj, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - jj),
                    _ => (h - 1 - jj, i),
                };
                o[i * w + j] = s[si * w + sj];
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Copy a `[1, H, W]` grey image into channel `channel` of a black RGB image.
pub fn colorize(grey: &Tensor<f32>, channel: usize) -> Result<Tensor<f32>> {
    let (h, w) = match *grey.shape() {
        [1, h, w] => (h, w),
        _ => {
            return Err(GcnError::shape(format!(
                "colorize expects [1, H, W], got {:?}",
                grey.shape()
            )))
        }
    };
    if channel >= 3 {
        return Err(GcnError::Label(format!("color channel {channel} out of range 0..3")));
    }
    let plane = h * w;
    let mut out = vec![0f32; 3 * plane];
    out[channel * plane..(channel + 1) * plane].copy_from_slice(grey.data());
    Tensor::new([3, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new([c, h, w], (0..c * h * w).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn hand_rotation() {
        let x = Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let r = apply_transform(&x, Transform::rotation(1)).unwrap();
        assert_eq!(r.data(), &[2., 4., 1., 3.]);
        let m = apply_transform(&x, Transform { quarter_turns: 0, mirror: true }).unwrap();
        assert_eq!(m.data(), &[2., 1., 4., 3.]);
        assert_eq!(apply_transform(&x, Transform::IDENTITY).unwrap(), x);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let x = grid(2, 5, 5);
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply_transform(&y, Transform::rotation(1)).unwrap();
        }
        assert_eq!(y, x);
    }

    #[test]
    fn composite_turns_match_repeated_single_turns() {
        let x = grid(1, 4, 4);
        let once = apply_transform(&x, Transform::rotation(1)).unwrap();
        let twice = apply_transform(&once, Transform::rotation(1)).unwrap();
        assert_eq!(twice, apply_transform(&x, Transform::rotation(2)).unwrap());
        let thrice = apply_transform(&twice, Transform::rotation(1)).unwrap();
        assert_eq!(thrice, apply_transform(&x, Transform::rotation(3)).unwrap());
    }

    #[test]
    fn eight_states_are_distinct_on_a_generic_image() {
        let x = grid(1, 3, 3);
        let outs: Vec<_> = Transform::all()
            .iter()
            .map(|&t| apply_transform(&x, t).unwrap())
            .collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(outs[i], outs[j], "{} vs {}", i, j);
            }
        }
        assert_eq!(Transform::from_index(5).unwrap().name(), "rot90m");
    }

    #[test]
    fn non_square_quarter_turn_rejected() {
        let x = grid(1, 2, 3);
        assert!(matches!(apply_transform(&x, Transform::rotation(1)), Err(GcnError::Geometry(_))));
        apply_transform(&x, Transform::rotation(2)).unwrap();
    }

    #[test]
    fn colorize_partitions_grey() {
        let g = Tensor::new([1, 1, 3], vec![0.0, 1.0, 0.25]).unwrap();
        let red = colorize(&g, 0).unwrap();
        assert_eq!(red.data(), &[0.0, 1.0, 0.25, 0., 0., 0., 0., 0., 0.]);
        let mut sum = Tensor::zeros([3, 1, 3]).unwrap();
        for c in 0..3 {
            sum.add_assign(&colorize(&g, c).unwrap()).unwrap();
        }
        for c in 0..3 {
            assert_eq!(&sum.data()[c * 3..c * 3 + 3], g.data());
        }
        assert!(colorize(&Tensor::zeros([1, 2, 2]).unwrap(), 0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(colorize(&g, 3).is_err());
    }

    proptest! {
        #[test]
        fn inverse_restores_bit_exactly(idx in 0usize..8, n in 1usize..7, c in 1usize..4) {
            let x = Tensor::new([c, n, n], (0..c * n * n).map(|v| (v as f32).sin()).collect()).unwrap();
            let t = Transform::from_index(idx).unwrap();
            let y = apply_transform(&x, t).unwrap();
            prop_assert_eq!(apply_transform(&y, t.inverse()).unwrap(), x);
        }
    }
}
