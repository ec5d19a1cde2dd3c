//! Strided traversal helpers shared by broadcasting and reductions.

/// Right-aligned broadcast of two shapes, `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of a contiguous `src` array viewed through broadcasting as `out`.
/// Broadcast (size-1 or missing) axes get stride 0.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let o = i + offset;
        strides[o] = if src[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Merges adjacent axes that are contiguous for every operand and drops
/// unit axes, which shortens the traversal odometer.
pub(crate) fn coalesce<const K: usize>(
    dims: &[usize],
    strides: [&[usize]; K],
) -> (Vec<usize>, [Vec<usize>; K]) {
    let mut out_dims: Vec<usize> = Vec::with_capacity(dims.len());
    let mut out_strides: [Vec<usize>; K] = std::array::from_fn(|_| Vec::with_capacity(dims.len()));
    for (i, &d) in dims.iter().enumerate() {
        if d == 1 {
            continue;
        }
        if let Some(&last) = out_dims.last() {
            let mergeable = (0..K).all(|k| {
                let prev = *out_strides[k].last().unwrap();
                prev == strides[k][i] * d
            });
            if mergeable {
                *out_dims.last_mut().unwrap() = last * d;
                for k in 0..K {
                    *out_strides[k].last_mut().unwrap() = strides[k][i];
                }
                continue;
            }
        }
        out_dims.push(d);
        for k in 0..K {
            out_strides[k].push(strides[k][i]);
        }
    }
    if out_dims.is_empty() {
        out_dims.push(1);
        for s in out_strides.iter_mut() {
            s.push(0);
        }
    }
    (out_dims, out_strides)
}

/// Visits every index of `dims` in row-major order, passing the linear
/// offsets of each operand.
pub(crate) fn walk<const K: usize>(
    dims: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    walk_rows(dims, strides, |base, n, step| {
        let mut off = base;
        for _ in 0..n {
            f(off);
            for k in 0..K {
                off[k] += step[k];
            }
        }
    });
}

/// Like [`walk`] but hands over whole innermost rows as
/// `(start offsets, length, per-operand step)`, so callers can run tight
/// loops over contiguous or stride-0 operands.
pub(crate) fn walk_rows<const K: usize>(
    dims: &[usize],
    strides: [&[usize]; K],
    mut row: impl FnMut([usize; K], usize, [usize; K]),
) {
    let (dims, strides) = coalesce(dims, strides);
    let nd = dims.len();
    let inner = dims[nd - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = [0usize; K];
    loop {
        row(base, inner, inner_strides);
        // advance the outer odometer
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for k in 0..K {
                base[k] += strides[k][axis];
            }
            if idx[axis] < dims[axis] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][axis] * dims[axis];
            }
            idx[axis] = 0;
        }
    }
}
