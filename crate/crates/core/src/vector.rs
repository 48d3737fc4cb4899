//! Small dense-vector helpers shared by every module. Vectors are plain
//! `f32` slices; matrices are row-major slices of `rows * cols` entries.

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit length. Returns `false` (leaving `v` untouched) when the
/// norm is zero or not finite.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out).then_some(out)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let denom = norm(a) * norm(b);
    if denom > 0.0 {
        dot(a, b) / denom
    } else {
        0.0
    }
}

/// `out = m · x` for a `rows × x.len()` row-major matrix.
pub fn matvec(m: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    debug_assert_eq!(m.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out += mᵀ · y` for a `y.len() × out.len()` row-major matrix.
pub fn matvec_t_acc(m: &[f32], y: &[f32], out: &mut [f32]) {
    let cols = out.len();
    debug_assert_eq!(m.len(), y.len() * cols);
    for (&yi, row) in y.iter().zip(m.chunks_exact(cols)) {
        if yi != 0.0 {
            axpy(yi, row, out);
        }
    }
}

/// `m += a ⊗ b` (outer product) for a row-major `a.len() × b.len()` matrix.
pub fn outer_acc(a: &[f32], b: &[f32], m: &mut [f32]) {
    for (&ai, row) in a.iter().zip(m.chunks_exact_mut(b.len())) {
        if ai != 0.0 {
            axpy(ai, b, row);
        }
    }
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f32], x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
