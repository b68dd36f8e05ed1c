//! Single-layer unidirectional LSTM over many independent sequences.
//!
//! Sequences are rows of a time-major buffer `(T, R, C)`. Rows are processed in
//! groups of `group_size`; groups are independent, so grouping bounds working
//! memory and feeds the parallel helpers without changing any result.
//! Gate order inside the `4h` axis is `[input, forget, cell, output]`.

use super::{gemm, sigmoid, MatRef, Real};
use crate::par;

#[derive(Clone, Copy)]
pub struct LstmWeights<'a, T> {
    /// `(4h, input)`
    pub w_ih: &'a [T],
    /// `(4h, h)`
    pub w_hh: &'a [T],
    /// `(4h)`
    pub bias: &'a [T],
    pub input: usize,
    pub hidden: usize,
}

pub struct GroupCache<T> {
    rows: usize,
    x: Vec<T>,
    /// activated gates, `(T, rows, 4h)`
    gates: Vec<T>,
    /// `(T + 1, rows, h)`, index 0 is the initial state
    cs: Vec<T>,
    hs: Vec<T>,
}

pub struct LstmCache<T> {
    steps: usize,
    groups: Vec<GroupCache<T>>,
}

pub struct LstmOutput<T> {
    /// `(T, R, h)`
    pub hs: Vec<T>,
    pub h_last: Vec<T>,
    pub c_last: Vec<T>,
}

fn gather_rows<T: Real>(src: &[T], steps: usize, rows: usize, width: usize, r0: usize, r1: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(steps * (r1 - r0) * width);
    for t in 0..steps {
        out.extend_from_slice(&src[(t * rows + r0) * width..(t * rows + r1) * width]);
    }
    out
}

fn scatter_rows<T: Real>(dst: &mut [T], src: &[T], steps: usize, rows: usize, width: usize, r0: usize, r1: usize) {
    let g = r1 - r0;
    for t in 0..steps {
        dst[(t * rows + r0) * width..(t * rows + r1) * width]
            .copy_from_slice(&src[t * g * width..(t + 1) * g * width]);
    }
}

fn group_forward<T: Real>(
    wts: LstmWeights<'_, T>,
    x: Vec<T>,
    steps: usize,
    rows: usize,
    h0: &[T],
    c0: &[T],
) -> GroupCache<T> {
    let h = wts.hidden;
    let g4 = 4 * h;
    let mut gates = Vec::with_capacity(steps * rows * g4);
    for _ in 0..steps * rows {
        gates.extend_from_slice(wts.bias);
    }
    gemm(
        T::one(),
        MatRef::new(&x, steps * rows, wts.input),
        MatRef::new(wts.w_ih, g4, wts.input).t(),
        T::one(),
        &mut gates,
    );
    let mut cs = vec![T::zero(); (steps + 1) * rows * h];
    let mut hs = vec![T::zero(); (steps + 1) * rows * h];
    cs[..rows * h].copy_from_slice(c0);
    hs[..rows * h].copy_from_slice(h0);
    for t in 0..steps {
        let (hprev, hnext) = hs.split_at_mut((t + 1) * rows * h);
        let hprev = &hprev[t * rows * h..];
        let gt = &mut gates[t * rows * g4..(t + 1) * rows * g4];
        gemm(
            T::one(),
            MatRef::new(hprev, rows, h),
            MatRef::new(wts.w_hh, g4, h).t(),
            T::one(),
            gt,
        );
        let (cprev, cnext) = cs.split_at_mut((t + 1) * rows * h);
        let cprev = &cprev[t * rows * h..];
        let cnext = &mut cnext[..rows * h];
        let hnext = &mut hnext[..rows * h];
        for r in 0..rows {
            let g = &mut gt[r * g4..(r + 1) * g4];
            for k in 0..h {
                let i = sigmoid(g[k]);
                let f = sigmoid(g[h + k]);
                let cc = g[2 * h + k].tanh();
                let o = sigmoid(g[3 * h + k]);
                g[k] = i;
                g[h + k] = f;
                g[2 * h + k] = cc;
                g[3 * h + k] = o;
                let c = f * cprev[r * h + k] + i * cc;
                cnext[r * h + k] = c;
                hnext[r * h + k] = o * c.tanh();
            }
        }
    }
    GroupCache {
        rows,
        x,
        gates,
        cs,
        hs,
    }
}

/// `x: (T, R, input)`, `h0`/`c0`: `(R, h)`.
pub fn forward<T: Real>(
    wts: LstmWeights<'_, T>,
    x: &[T],
    steps: usize,
    rows: usize,
    h0: &[T],
    c0: &[T],
    group_size: usize,
) -> (LstmOutput<T>, LstmCache<T>) {
    let h = wts.hidden;
    assert_eq!(x.len(), steps * rows * wts.input, "lstm input size");
    assert_eq!(h0.len(), rows * h);
    assert_eq!(c0.len(), rows * h);
    let gsz = group_size.max(1);
    let ngroups = rows.div_ceil(gsz);
    let groups = par::map(ngroups, |g| {
        let (r0, r1) = (g * gsz, ((g + 1) * gsz).min(rows));
        let xg = gather_rows(x, steps, rows, wts.input, r0, r1);
        group_forward(wts, xg, steps, r1 - r0, &h0[r0 * h..r1 * h], &c0[r0 * h..r1 * h])
    });
    let mut hs = vec![T::zero(); steps * rows * h];
    let mut h_last = vec![T::zero(); rows * h];
    let mut c_last = vec![T::zero(); rows * h];
    for (g, gc) in groups.iter().enumerate() {
        let (r0, r1) = (g * gsz, g * gsz + gc.rows);
        scatter_rows(&mut hs, &gc.hs[gc.rows * h..], steps, rows, h, r0, r1);
        h_last[r0 * h..r1 * h].copy_from_slice(&gc.hs[steps * gc.rows * h..]);
        c_last[r0 * h..r1 * h].copy_from_slice(&gc.cs[steps * gc.rows * h..]);
    }
    (
        LstmOutput { hs, h_last, c_last },
        LstmCache { steps, groups },
    )
}

pub struct LstmGrads<T> {
    pub dx: Vec<T>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    pub dbias: Vec<T>,
}

fn group_backward<T: Real>(wts: LstmWeights<'_, T>, gc: &GroupCache<T>, steps: usize, dhs: &[T]) -> LstmGrads<T> {
    let h = wts.hidden;
    let g4 = 4 * h;
    let rows = gc.rows;
    let mut da = vec![T::zero(); steps * rows * g4];
    let mut dh_next = vec![T::zero(); rows * h];
    let mut dc_next = vec![T::zero(); rows * h];
    let one = T::one();
    for t in (0..steps).rev() {
        let gates = &gc.gates[t * rows * g4..(t + 1) * rows * g4];
        let cprev = &gc.cs[t * rows * h..(t + 1) * rows * h];
        let ccur = &gc.cs[(t + 1) * rows * h..(t + 2) * rows * h];
        let dat = &mut da[t * rows * g4..(t + 1) * rows * g4];
        for r in 0..rows {
            let g = &gates[r * g4..(r + 1) * g4];
            let d = &mut dat[r * g4..(r + 1) * g4];
            for k in 0..h {
                let idx = r * h + k;
                let (i, f, cc, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let dh = dhs[(t * rows) * h + idx] + dh_next[idx];
                let tc = ccur[idx].tanh();
                let d_o = dh * tc;
                let dc = dh * o * (one - tc * tc) + dc_next[idx];
                d[k] = dc * cc * i * (one - i);
                d[h + k] = dc * cprev[idx] * f * (one - f);
                d[2 * h + k] = dc * i * (one - cc * cc);
                d[3 * h + k] = d_o * o * (one - o);
                dc_next[idx] = dc * f;
            }
        }
        gemm(
            one,
            MatRef::new(dat, rows, g4),
            MatRef::new(wts.w_hh, g4, h),
            T::zero(),
            &mut dh_next,
        );
    }
    let m = steps * rows;
    let mut dw_hh = vec![T::zero(); g4 * h];
    gemm(
        one,
        MatRef::new(&da, m, g4).t(),
        MatRef::new(&gc.hs[..m * h], m, h),
        T::zero(),
        &mut dw_hh,
    );
    let mut dw_ih = vec![T::zero(); g4 * wts.input];
    gemm(
        one,
        MatRef::new(&da, m, g4).t(),
        MatRef::new(&gc.x, m, wts.input),
        T::zero(),
        &mut dw_ih,
    );
    let mut dbias = vec![T::zero(); g4];
    for row in da.chunks(g4) {
        for (a, &b) in dbias.iter_mut().zip(row) {
            *a += b;
        }
    }
    let mut dx = vec![T::zero(); m * wts.input];
    gemm(
        one,
        MatRef::new(&da, m, g4),
        MatRef::new(wts.w_ih, g4, wts.input),
        T::zero(),
        &mut dx,
    );
    LstmGrads {
        dx,
        dw_ih,
        dw_hh,
        dbias,
    }
}

/// `dhs: (T, R, h)` is the loss gradient w.r.t. every emitted hidden state.
pub fn backward<T: Real>(wts: LstmWeights<'_, T>, cache: &LstmCache<T>, dhs: &[T]) -> LstmGrads<T> {
    let h = wts.hidden;
    let steps = cache.steps;
    let rows: usize = cache.groups.iter().map(|g| g.rows).sum();
    assert_eq!(dhs.len(), steps * rows * h);
    let mut starts = Vec::with_capacity(cache.groups.len());
    let mut acc = 0;
    for g in &cache.groups {
        starts.push(acc);
        acc += g.rows;
    }
    let parts = par::map(cache.groups.len(), |gi| {
        let gc = &cache.groups[gi];
        let r0 = starts[gi];
        let dg = gather_rows(dhs, steps, rows, h, r0, r0 + gc.rows);
        group_backward(wts, gc, steps, &dg)
    });
    let mut out = LstmGrads {
        dx: vec![T::zero(); steps * rows * wts.input],
        dw_ih: vec![T::zero(); 4 * h * wts.input],
        dw_hh: vec![T::zero(); 4 * h * h],
        dbias: vec![T::zero(); 4 * h],
    };
    for (gi, p) in parts.into_iter().enumerate() {
        let r0 = starts[gi];
        let gr = cache.groups[gi].rows;
        scatter_rows(&mut out.dx, &p.dx, steps, rows, wts.input, r0, r0 + gr);
        for (a, b) in out.dw_ih.iter_mut().zip(p.dw_ih) {
            *a += b;
        }
        for (a, b) in out.dw_hh.iter_mut().zip(p.dw_hh) {
            *a += b;
        }
        for (a, b) in out.dbias.iter_mut().zip(p.dbias) {
            *a += b;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    struct Fixture {
        w_ih: Vec<f64>,
        w_hh: Vec<f64>,
        b: Vec<f64>,
        x: Vec<f64>,
    }

    const T: usize = 4;
    const R: usize = 5;
    const C: usize = 3;
    const H: usize = 2;

    fn fixture() -> Fixture {
        Fixture {
            w_ih: vals(4 * H * C, 1),
            w_hh: vals(4 * H * H, 2),
            b: vals(4 * H, 3),
            x: vals(T * R * C, 4),
        }
    }

    fn weights(f: &Fixture) -> LstmWeights<'_, f64> {
        LstmWeights { w_ih: &f.w_ih, w_hh: &f.w_hh, bias: &f.b, input: C, hidden: H }
    }

    #[test]
    fn grouping_does_not_change_results() {
        let f = fixture();
        let z = vec![0.0; R * H];
        let (a, _) = forward(weights(&f), &f.x, T, R, &z, &z, R);
        for g in [1, 2, 3] {
            let (b, _) = forward(weights(&f), &f.x, T, R, &z, &z, g);
            let d = a.hs.iter().zip(&b.hs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn split_sequence_equals_full() {
        let f = fixture();
        let z = vec![0.0; R * H];
        let (full, _) = forward(weights(&f), &f.x, T, R, &z, &z, 2);
        let (first, _) = forward(weights(&f), &f.x[..2 * R * C], 2, R, &z, &z, 2);
        let (second, _) = forward(weights(&f), &f.x[2 * R * C..], 2, R, &first.h_last, &first.c_last, 2);
        let joined: Vec<f64> = first.hs.iter().chain(&second.hs).copied().collect();
        let d = full.hs.iter().zip(&joined).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = fixture();
        let z = vec![0.0; R * H];
        let proj = vals(T * R * H, 9);
        let loss = |f: &Fixture| -> f64 {
            let (o, _) = forward(weights(f), &f.x, T, R, &z, &z, 2);
            o.hs.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward(weights(&f), &f.x, T, R, &z, &z, 2);
        let g = backward(weights(&f), &cache, &proj);
        let eps = 1e-6;
        let check = |get: &dyn Fn(&mut Fixture) -> &mut Vec<f64>, idx: usize, analytic: f64| {
            let mut p = fixture();
            get(&mut p)[idx] += eps;
            let mut m = fixture();
            get(&mut m)[idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-7, "{fd} vs {analytic}");
        };
        for i in [0, 5, 17] {
            check(&|f| &mut f.w_ih, i, g.dw_ih[i]);
        }
        for i in [0, 9, 15] {
            check(&|f| &mut f.w_hh, i, g.dw_hh[i]);
        }
        for i in [1, 6] {
            check(&|f| &mut f.b, i, g.dbias[i]);
        }
        for i in [0, 22, 59] {
            check(&|f| &mut f.x, i, g.dx[i]);
        }
    }
}
