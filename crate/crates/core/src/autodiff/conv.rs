//! 3×3 cross-correlation with one pixel of zero padding, lowered to GEMM.
//!
//! Forward: `y[k] = b[k] + Σ_l w[k, l] ⋆ x[l]` (no kernel flip).
//! The input gradient is the full correlation of `dy` with the flipped
//! kernel, realised here as `Wᵀ · dy` followed by col2im.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::Scalar;

pub(crate) const K: usize = 3;
const TAPS: usize = K * K;

/// Unfolds one `[c, h, w]` image into `[c·9, h·w]` patch rows.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for l in 0..c {
        let plane = &x[l * hw..(l + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(l * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto `dx` (accumulating).
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for l in 0..c {
        let plane = &mut dx[l * hw..(l + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(l * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    [b, cin, h, w]: [usize; 4],
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); b * cout * hw];
    let mut cols = vec![T::zero(); cin * TAPS * hw];
    let wmat = ArrayView2::from_shape((cout, cin * TAPS), weight).expect("weight layout");
    for n in 0..b {
        im2col(&x[n * cin * hw..(n + 1) * cin * hw], cin, h, w, &mut cols);
        let out_n = &mut out[n * cout * hw..(n + 1) * cout * hw];
        for (k, plane) in out_n.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[k]);
        }
        let cols_v = ArrayView2::from_shape((cin * TAPS, hw), &cols[..]).expect("cols layout");
        let mut out_v = ArrayViewMut2::from_shape((cout, hw), out_n).expect("out layout");
        general_mat_mul(T::one(), &wmat, &cols_v, T::one(), &mut out_v);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    [b, cin, h, w]: [usize; 4],
    weight: &[T],
    cout: usize,
    dy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let hw = h * w;
    let [need_x, need_w, need_b] = need;
    let mut dx = need_x.then(|| vec![T::zero(); b * cin * hw]);
    let mut dw = need_w.then(|| vec![T::zero(); cout * cin * TAPS]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); cout];
        for n in 0..b {
            for (k, plane) in dy[n * cout * hw..(n + 1) * cout * hw]
                .chunks_exact(hw)
                .enumerate()
            {
                db[k] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    if !(need_x || need_w) {
        return ConvGrads {
            input: dx,
            weight: dw,
            bias: db,
        };
    }
    let wmat = ArrayView2::from_shape((cout, cin * TAPS), weight).expect("weight layout");
    let mut cols = vec![T::zero(); cin * TAPS * hw];
    for n in 0..b {
        let dy_v = ArrayView2::from_shape((cout, hw), &dy[n * cout * hw..(n + 1) * cout * hw])
            .expect("dy layout");
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * cin * hw..(n + 1) * cin * hw], cin, h, w, &mut cols);
            let cols_v = ArrayView2::from_shape((cin * TAPS, hw), &cols[..]).expect("cols layout");
            let mut dw_v =
                ArrayViewMut2::from_shape((cout, cin * TAPS), &mut dw[..]).expect("dw layout");
            general_mat_mul(T::one(), &dy_v, &cols_v.t(), T::one(), &mut dw_v);
        }
        if let Some(dx) = dx.as_mut() {
            let mut cols_v =
                ArrayViewMut2::from_shape((cin * TAPS, hw), &mut cols[..]).expect("cols layout");
            general_mat_mul(T::one(), &wmat.t(), &dy_v, T::zero(), &mut cols_v);
            col2im(&cols, cin, h, w, &mut dx[n * cin * hw..(n + 1) * cin * hw]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
