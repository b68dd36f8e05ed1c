use super::{gemm, MatRef, Real};

/// `y = x W^T + b` for `x: (rows, in)`, `W: (out, in)`.
pub fn forward<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], b: &[T]) -> Vec<T> {
    let out = b.len();
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(T::one(), MatRef::new(x, rows, inp), MatRef::new(w, out, inp).t(), T::one(), &mut y);
    y
}

/// Returns `(dx, dW, db)`.
pub fn backward<T: Real>(
    x: &[T],
    rows: usize,
    inp: usize,
    w: &[T],
    out: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * inp];
    gemm(T::one(), MatRef::new(dy, rows, out), MatRef::new(w, out, inp), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); out * inp];
    gemm(T::one(), MatRef::new(dy, rows, out).t(), MatRef::new(x, rows, inp), T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for r in dy.chunks(out) {
        for (a, &g) in db.iter_mut().zip(r) {
            *a += g;
        }
    }
    (dx, dw, db)
}
