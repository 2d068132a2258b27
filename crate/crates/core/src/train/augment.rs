//! The dihedral group of the square, applied jointly to images and masks.

use rand::Rng;

use super::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A symmetry of the square: `flip` (mirror columns) followed by `rot`
/// counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct D4 {
    pub rot: u8,
    pub flip: bool,
}

impl D4 {
    pub const IDENTITY: D4 = D4 { rot: 0, flip: false };

    pub fn all() -> [D4; 8] {
        std::array::from_fn(Self::from_index)
    }

    pub fn from_index(i: usize) -> D4 {
        D4 {
            rot: (i % 4) as u8,
            flip: i >= 4,
        }
    }

    pub fn index(self) -> usize {
        self.rot as usize + if self.flip { 4 } else { 0 }
    }

    /// Integer matrix acting on centred coordinates `(row, col)`.
    fn matrix(self) -> [[i32; 2]; 2] {
        let f = if self.flip { [[1, 0], [0, -1]] } else { [[1, 0], [0, 1]] };
        // one counter-clockwise quarter turn: (r, c) -> (-c, r)
        let q = [[0, -1], [1, 0]];
        let mut m = f;
        for _ in 0..self.rot {
            m = mat_mul(q, m);
        }
        m
    }

    fn from_matrix(m: [[i32; 2]; 2]) -> D4 {
        Self::all().into_iter().find(|e| e.matrix() == m).expect("D4 is closed")
    }

    /// `self` applied after `first`.
    pub fn compose(self, first: D4) -> D4 {
        Self::from_matrix(mat_mul(self.matrix(), first.matrix()))
    }

    pub fn inverse(self) -> D4 {
        let m = self.matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn sample(rng: &mut impl Rng) -> D4 {
        Self::from_index(rng.random_range(0..8))
    }

    /// Where pixel `(i, j)` of an `n x n` grid lands.
    pub fn map(self, n: usize, i: usize, j: usize) -> (usize, usize) {
        let m = self.matrix();
        let (r, c) = (2 * i as i32 - (n as i32 - 1), 2 * j as i32 - (n as i32 - 1));
        let (r2, c2) = (m[0][0] * r + m[0][1] * c, m[1][0] * r + m[1][1] * c);
        (((r2 + n as i32 - 1) / 2) as usize, ((c2 + n as i32 - 1) / 2) as usize)
    }

    /// Permutes the trailing two (square) axes of `[..., n, n]` data.
    fn apply_plane<V: Copy>(self, data: &[V], n: usize) -> Vec<V> {
        let mut out = data.to_vec();
        for (plane_in, plane_out) in data.chunks_exact(n * n).zip(out.chunks_exact_mut(n * n)) {
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = self.map(n, i, j);
                    plane_out[a * n + b] = plane_in[i * n + j];
                }
            }
        }
        out
    }

    pub fn apply_tensor<T: Element>(self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let s = t.shape();
        let n = square_side(s)?;
        Tensor::new(s.to_vec(), self.apply_plane(t.data(), n))
    }

    pub fn apply_mask(self, mask: &[usize], n: usize) -> Vec<usize> {
        self.apply_plane(mask, n)
    }

    pub fn apply(self, s: &Sample) -> Result<Sample> {
        if s.height != s.width {
            return Err(Error::invalid(
                "augment",
                format!("rotation needs a square sample, got {}x{}", s.height, s.width),
            ));
        }
        Ok(Sample {
            image: self.apply_tensor(&s.image)?,
            mask: self.apply_mask(&s.mask, s.height),
            height: s.height,
            width: s.width,
        })
    }
}

fn square_side(s: &[usize]) -> Result<usize> {
    match s {
        [.., h, w] if h == w => Ok(*h),
        _ => Err(Error::invalid(
            "augment",
            format!("expected square trailing axes, got {s:?}"),
        )),
    }
}

fn mat_mul(a: [[i32; 2]; 2], b: [[i32; 2]; 2]) -> [[i32; 2]; 2] {
    let mut m = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

/// Draws one element and applies it.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    D4::sample(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng;

    fn sample(n: usize, seed: u64) -> Sample {
        let mut r = rng::stream(seed, "t");
        let img: Vec<f32> = (0..3 * n * n).map(|_| r.random()).collect();
        Sample {
            image: Tensor::new(vec![3, n, n], img).unwrap(),
            mask: (0..n * n).map(|_| r.random_range(0..3)).collect(),
            height: n,
            width: n,
        }
    }

    #[test]
    fn quarter_turn_and_flip_layout() {
        // 2x2: [[a, b], [c, d]]
        let m = [0usize, 1, 2, 3];
        assert_eq!(D4 { rot: 1, flip: false }.apply_mask(&m, 2), vec![1, 3, 0, 2]);
        assert_eq!(D4 { rot: 0, flip: true }.apply_mask(&m, 2), vec![1, 0, 3, 2]);
        assert_eq!(D4 { rot: 2, flip: false }.apply_mask(&m, 2), vec![3, 2, 1, 0]);
    }

    #[test]
    fn elements_are_distinct_and_closed() {
        let all = D4::all();
        let grid: Vec<usize> = (0..9).collect();
        let images: std::collections::HashSet<Vec<usize>> = all.iter().map(|e| e.apply_mask(&grid, 3)).collect();
        assert_eq!(images.len(), 8);
        for a in all {
            assert_eq!(a.compose(a.inverse()), D4::IDENTITY);
            for b in all {
                let c = a.compose(b);
                assert_eq!(c.apply_mask(&grid, 3), a.apply_mask(&b.apply_mask(&grid, 3), 3));
            }
        }
    }

    #[test]
    fn identity_and_inverse_restore() {
        let s = sample(5, 1);
        let id = D4::IDENTITY.apply(&s).unwrap();
        assert_eq!(id.image, s.image);
        assert_eq!(id.mask, s.mask);
        for e in D4::all() {
            let back = e.inverse().apply(&e.apply(&s).unwrap()).unwrap();
            assert_eq!(back.image, s.image);
            assert_eq!(back.mask, s.mask);
        }
    }

    #[test]
    fn rejects_non_square() {
        let s = Sample {
            image: Tensor::zeros(vec![3, 2, 3]),
            mask: vec![0; 6],
            height: 2,
            width: 3,
        };
        assert!(D4::IDENTITY.apply(&s).is_err());
    }

    #[test]
    fn draws_are_uniform() {
        let mut r = rng::stream(11, rng::AUGMENT);
        let mut counts = [0usize; 8];
        for _ in 0..8000 {
            counts[D4::sample(&mut r).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 8000.0 - 0.125).abs() < 0.02, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn composition_matches_sequential_application(a in 0usize..8, b in 0usize..8, n in 1usize..7) {
            let (a, b) = (D4::from_index(a), D4::from_index(b));
            let grid: Vec<usize> = (0..n * n).collect();
            prop_assert_eq!(a.compose(b).apply_mask(&grid, n), a.apply_mask(&b.apply_mask(&grid, n), n));
        }
    }
}
