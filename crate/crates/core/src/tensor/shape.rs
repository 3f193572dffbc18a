//! Shape arithmetic shared by the tensor ops: row-major strides, trailing
//! broadcast resolution, and an odometer that walks an output buffer while
//! tracking the matching flat offsets into one or two (possibly broadcast)
//! inputs.

use crate::error::{TensorError, TensorResult};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Trailing broadcast: align shapes at the right edge, each pair of dims must
/// be equal or one of them 1.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let db = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        out[d] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through `out_shape`: left-padded with broadcast
/// dims, and 0 wherever the input dim is 1 but the output dim is not.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = row_major_strides(shape);
    let mut strides = vec![0; nd];
    for d in 0..nd {
        if d < nd - shape.len() {
            continue;
        }
        let sd = d - (nd - shape.len());
        strides[d] = if shape[sd] == 1 && out_shape[d] != 1 { 0 } else { own[sd] };
    }
    strides
}

/// Walks every flat index of `out_shape` in row-major order, handing the
/// callback the flat offsets into two broadcast inputs.
pub fn zip_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let total = numel(out_shape);
    if nd == 0 {
        if total == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for o in 0..total {
        f(o, ao, bo);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= a_strides[d] * out_shape[d];
            bo -= b_strides[d] * out_shape[d];
        }
    }
}

/// Same walk for a single input (used by permute-style gathers).
pub fn map_indices(out_shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    zip_broadcast(out_shape, in_strides, &vec![0; out_shape.len()], |o, i, _| f(o, i));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_alignment() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shapes("t", &[4, 1, 5], &[2, 5]).unwrap(),
            vec![4, 2, 5]
        );
        assert_eq!(
            broadcast_shapes("t", &[2, 8, 4, 4], &[8, 1, 1]).unwrap(),
            vec![2, 8, 4, 4]
        );
    }

    #[test]
    fn broadcast_rejects_disagreement() {
        let err = broadcast_shapes("t", &[2, 3], &[4]).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn odometer_covers_broadcast_offsets() {
        // [2,3] + [3]: the second input cycles 0,1,2 twice.
        let out = vec![2usize, 3];
        let astr = broadcast_strides(&[2, 3], &out);
        let bstr = broadcast_strides(&[3], &out);
        let mut seen = Vec::new();
        zip_broadcast(&out, &astr, &bstr, |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 1, 1),
                (2, 2, 2),
                (3, 3, 0),
                (4, 4, 1),
                (5, 5, 2)
            ]
        );
    }
}
