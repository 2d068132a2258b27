//! Index maps for data-movement ops. Each function returns, for every output
//! element in row-major order, the linear index of the input element it reads.

use crate::tensor::{numel, strides};

fn odometer(shape: &[usize], mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; shape.len()];
    let n = numel(shape);
    for _ in 0..n {
        visit(&idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Output shape and source indices of `x.permute(perm)`.
pub fn permute(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(numel(&out_shape));
    odometer(&out_shape, |ix| {
        out.push(ix.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
    });
    (out_shape, out)
}

/// Source indices of a toroidal roll: `out[i] = in[(i + shift) mod extent]`
/// along each listed axis.
pub fn roll(shape: &[usize], shifts: &[(usize, isize)]) -> Vec<usize> {
    let st = strides(shape);
    let mut per_axis = vec![0isize; shape.len()];
    for &(axis, s) in shifts {
        per_axis[axis] += s;
    }
    let mut out = Vec::with_capacity(numel(shape));
    odometer(shape, |ix| {
        let mut off = 0;
        for d in 0..shape.len() {
            let e = shape[d] as isize;
            let src = (ix[d] as isize + per_axis[d]).rem_euclid(e) as usize;
            off += src * st[d];
        }
        out.push(off);
    });
    out
}

/// Source indices of `x[.., start..start+len, ..]` along `axis`.
pub fn slice(shape: &[usize], axis: usize, start: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let st = strides(shape);
    let mut out = Vec::with_capacity(numel(&out_shape));
    odometer(&out_shape, |ix| {
        let off: usize = ix
            .iter()
            .enumerate()
            .map(|(d, &i)| if d == axis { (i + start) * st[d] } else { i * st[d] })
            .sum();
        out.push(off);
    });
    (out_shape, out)
}

/// Source indices broadcasting size-1 axes of `shape` up to `target`.
pub fn expand(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let mut out = Vec::with_capacity(numel(target));
    odometer(target, |ix| {
        let off: usize = ix
            .iter()
            .enumerate()
            .map(|(d, &i)| if shape[d] == 1 { 0 } else { i * st[d] })
            .sum();
        out.push(off);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transpose() {
        let (shape, idx) = permute(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn roll_one_axis() {
        assert_eq!(roll(&[4], &[(0, 1)]), vec![1, 2, 3, 0]);
        assert_eq!(roll(&[4], &[(0, -1)]), vec![3, 0, 1, 2]);
    }

    #[test]
    fn expand_middle_axis() {
        assert_eq!(expand(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }
}
