//! Raw compute kernels shared by forward ops and their backward rules.
//!
//! Everything is plain row-major slice arithmetic; the ikj matmul loop is the
//! single hot path and is written so LLVM vectorizes the inner j-loop.

use super::scalar::Scalar;

/// c[m x p] += a[m x k] * b[k x p]
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, p: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * p];
    matmul_acc(a, b, &mut c, m, k, p);
    c
}

/// c[m x p] = a[m x k] * b[p x k]^T  (rows of b are dotted with rows of a)
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, p: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    let mut c = vec![S::zero(); m * p];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc = acc + a_row[kk] * b_row[kk];
            }
            c[i * p + j] = acc;
        }
    }
    c
}

/// c[m x p] += a[k x m]^T * b[k x p]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], k: usize, m: usize, p: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a_row[i];
            if av == S::zero() {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for j in 0..p {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// Numerically stable softmax of one lane, written into `out`.
pub fn softmax_lane<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut m = x[0];
    for &v in &x[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = S::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// dx_j = y_j * (g_j - sum_k y_k g_k) for one softmax lane.
pub fn softmax_lane_backward<S: Scalar>(y: &[S], g: &[S], dx: &mut [S]) {
    let mut dot = S::zero();
    for (yv, gv) in y.iter().zip(g.iter()) {
        dot += *yv * *gv;
    }
    for ((d, &yv), &gv) in dx.iter_mut().zip(y.iter()).zip(g.iter()) {
        *d = *d + yv * (gv - dot);
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus<S: Scalar>(x: S) -> S {
    let z = if x > S::zero() { x } else { S::zero() };
    z + (-(x.abs())).exp().ln_1p()
}

/// tanh-form GELU and its derivative.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654); // sqrt(2/pi)
    let k = S::of(0.044715);
    let inner = c * (x + k * x * x * x);
    S::half() * x * (S::one() + inner.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(0.7978845608028654);
    let k = S::of(0.044715);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let dinner = c * (S::one() + S::of(3.0) * k * x * x);
    S::half() * (S::one() + t) + S::half() * x * sech2 * dinner
}

// ---------------------------------------------------------------------------
// Convolutions (3x3 / 3x3x3, padding 1) via im2col + matmul.
// Grid layout is [d0, d1, c] resp. [d0, d1, d2, c], row-major.
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(d: usize, stride: usize) -> usize {
    // kernel 3, pad 1
    (d + 2 - 3) / stride + 1
}

/// im2col for a 3x3 kernel with padding 1: result is [(ow*oh) x (9*cin)].
pub fn im2col_2d<S: Scalar>(x: &[S], w: usize, h: usize, cin: usize, stride: usize) -> Vec<S> {
    let (ow, oh) = (conv2d_out_dim(w, stride), conv2d_out_dim(h, stride));
    let mut col = vec![S::zero(); ow * oh * 9 * cin];
    for ox in 0..ow {
        for oy in 0..oh {
            let row = (ox * oh + oy) * 9 * cin;
            for kx in 0..3usize {
                for ky in 0..3usize {
                    let ix = (ox * stride + kx) as isize - 1;
                    let iy = (oy * stride + ky) as isize - 1;
                    if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                        continue;
                    }
                    let src = ((ix as usize) * h + iy as usize) * cin;
                    let dst = row + (kx * 3 + ky) * cin;
                    col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_2d`]: scatter column gradients back onto the input grid.
pub fn col2im_2d<S: Scalar>(
    dcol: &[S],
    w: usize,
    h: usize,
    cin: usize,
    stride: usize,
) -> Vec<S> {
    let (ow, oh) = (conv2d_out_dim(w, stride), conv2d_out_dim(h, stride));
    let mut dx = vec![S::zero(); w * h * cin];
    for ox in 0..ow {
        for oy in 0..oh {
            let row = (ox * oh + oy) * 9 * cin;
            for kx in 0..3usize {
                for ky in 0..3usize {
                    let ix = (ox * stride + kx) as isize - 1;
                    let iy = (oy * stride + ky) as isize - 1;
                    if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                        continue;
                    }
                    let dst = ((ix as usize) * h + iy as usize) * cin;
                    let src = row + (kx * 3 + ky) * cin;
                    for c in 0..cin {
                        dx[dst + c] = dx[dst + c] + dcol[src + c];
                    }
                }
            }
        }
    }
    dx
}

/// im2col for a 3x3x3 kernel with padding 1, stride 1: [(w*h*z) x (27*cin)].
pub fn im2col_3d<S: Scalar>(x: &[S], w: usize, h: usize, z: usize, cin: usize) -> Vec<S> {
    let mut col = vec![S::zero(); w * h * z * 27 * cin];
    for ox in 0..w {
        for oy in 0..h {
            for oz in 0..z {
                let row = ((ox * h + oy) * z + oz) * 27 * cin;
                for kx in 0..3usize {
                    let ix = (ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kz in 0..3usize {
                            let iz = (oz + kz) as isize - 1;
                            if iz < 0 || iz >= z as isize {
                                continue;
                            }
                            let src = (((ix as usize) * h + iy as usize) * z + iz as usize) * cin;
                            let dst = row + ((kx * 3 + ky) * 3 + kz) * cin;
                            col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
    col
}

pub fn col2im_3d<S: Scalar>(dcol: &[S], w: usize, h: usize, z: usize, cin: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); w * h * z * cin];
    for ox in 0..w {
        for oy in 0..h {
            for oz in 0..z {
                let row = ((ox * h + oy) * z + oz) * 27 * cin;
                for kx in 0..3usize {
                    let ix = (ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = (oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kz in 0..3usize {
                            let iz = (oz + kz) as isize - 1;
                            if iz < 0 || iz >= z as isize {
                                continue;
                            }
                            let dst = (((ix as usize) * h + iy as usize) * z + iz as usize) * cin;
                            let src = row + ((kx * 3 + ky) * 3 + kz) * cin;
                            for c in 0..cin {
                                dx[dst + c] = dx[dst + c] + dcol[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Trilinear sampling on a [w, h, z, c] volume, positions in continuous voxel
// coordinates. Out-of-range coordinates clamp to the boundary.
// ---------------------------------------------------------------------------

pub struct TrilinearCorner {
    pub index: usize, // voxel flat index (without channel)
    pub weight_idx: usize,
}

/// Per-axis clamp + split into (lower index, fraction).
#[inline]
fn axis_split<S: Scalar>(p: S, dim: usize) -> (usize, S) {
    let max = S::of((dim - 1) as f64);
    let c = if p < S::zero() {
        S::zero()
    } else if p > max {
        max
    } else {
        p
    };
    let mut i0 = c.floor();
    // keep i0+1 in range so the corner pair is always valid
    if i0 > max - S::one() {
        i0 = max - S::one();
    }
    if dim == 1 {
        return (0, S::zero());
    }
    let i = i0.max(S::zero());
    (i.as_f64() as usize, c - i)
}

/// Sample `vol` [w,h,z,c] at `pos` [n,3]; returns [n,c].
/// Also used by the backward pass to re-derive corner weights.
pub fn trilinear_forward<S: Scalar>(
    vol: &[S],
    dims: (usize, usize, usize, usize),
    pos: &[S],
    out: &mut [S],
) {
    let (w, h, z, c) = dims;
    let n = pos.len() / 3;
    debug_assert_eq!(out.len(), n * c);
    for q in 0..n {
        let (ix, fx) = axis_split(pos[q * 3], w);
        let (iy, fy) = axis_split(pos[q * 3 + 1], h);
        let (iz, fz) = axis_split(pos[q * 3 + 2], z);
        let o = &mut out[q * c..(q + 1) * c];
        for v in o.iter_mut() {
            *v = S::zero();
        }
        for (dx, wx) in [(0usize, S::one() - fx), (1, fx)] {
            if w == 1 && dx == 1 {
                continue;
            }
            for (dy, wy) in [(0usize, S::one() - fy), (1, fy)] {
                if h == 1 && dy == 1 {
                    continue;
                }
                for (dz, wz) in [(0usize, S::one() - fz), (1, fz)] {
                    if z == 1 && dz == 1 {
                        continue;
                    }
                    let wgt = wx * wy * wz;
                    if wgt == S::zero() {
                        continue;
                    }
                    let src = (((ix + dx) * h + (iy + dy)) * z + (iz + dz)) * c;
                    for ch in 0..c {
                        o[ch] = o[ch] + wgt * vol[src + ch];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // independent scalar triple-loop oracle
        fn oracle(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
            let mut c = vec![0.0; m * p];
            for i in 0..m {
                for j in 0..p {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += a[i * k + kk] * b[kk * p + j];
                    }
                    c[i * p + j] = s;
                }
            }
            c
        }
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0];
        assert_eq!(matmul(&a, &b, 2, 2, 1), oracle(&a, &b, 2, 2, 1));
        assert_eq!(matmul(&a, &b, 2, 2, 1), vec![17.0, 39.0]);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, p) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(&a, &b, m, k, p);
        let want = oracle(&a, &b, m, k, p);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv2d_out_dim(32, 2), 16);
        assert_eq!(conv2d_out_dim(16, 2), 8);
        assert_eq!(conv2d_out_dim(200, 2), 100);
        assert_eq!(conv2d_out_dim(32, 1), 32);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (w, h, cin, stride) = (6, 4, 3, 2);
        let x: Vec<f64> = (0..w * h * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let col = im2col_2d(&x, w, h, cin, stride);
        let y: Vec<f64> = (0..col.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = col.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im_2d(&y, w, h, cin, stride);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn trilinear_identity_on_grid_nodes() {
        let (w, h, z, c) = (3, 3, 2, 2);
        let vol: Vec<f64> = (0..w * h * z * c).map(|i| i as f64).collect();
        let pos = vec![2.0, 1.0, 1.0];
        let mut out = vec![0.0; c];
        trilinear_forward(&vol, (w, h, z, c), &pos, &mut out);
        let base = ((2 * h + 1) * z + 1) * c;
        assert_eq!(out, vec![vol[base], vol[base + 1]]);
    }

    #[test]
    fn trilinear_midpoint_is_mean() {
        let (w, h, z, c) = (2, 1, 1, 1);
        let vol: Vec<f64> = vec![3.0, 7.0];
        let pos = vec![0.5, 0.0, 0.0];
        let mut out = vec![0.0; 1];
        trilinear_forward(&vol, (w, h, z, c), &pos, &mut out);
        assert!((out[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn trilinear_clamps_to_boundary() {
        let (w, h, z, c) = (2, 2, 2, 1);
        let vol: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut far = vec![0.0];
        trilinear_forward(&vol, (w, h, z, c), &[100.0, -50.0, 100.0], &mut far);
        let mut corner = vec![0.0];
        trilinear_forward(&vol, (w, h, z, c), &[1.0, 0.0, 1.0], &mut corner);
        assert_eq!(far, corner);
    }

    #[test]
    fn stable_activations() {
        assert!((softplus(800.0_f64) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0_f64) >= 0.0);
        assert!((sigmoid(1.0_f64) - 0.7310585786300049).abs() < 1e-12);
        assert!(sigmoid(-800.0_f64) >= 0.0);
    }
}
