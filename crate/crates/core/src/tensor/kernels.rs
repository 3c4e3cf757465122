//! Raw loops behind the convolution, pooling and resampling nodes.

use super::Float;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0 && self.stride == 1
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Float>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut col[row..row + p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                let src = &col[row..row + p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for (o, row) in ob.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        T::gemm(g.cout, k, p, weight, (k, 1), cols, (p, 1), T::one(), ob, (p, 1));
    }
}

/// Accumulates into whichever of `dx`, `dw`, `db` are requested.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcol = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (o, row) in dyb.chunks_exact(p).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dW[o, kk] += Σ_p dy[o, p] · col[kk, p]
            T::gemm(g.cout, p, k, dyb, (p, 1), cols, (1, p), T::one(), dw, (k, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, weight, (1, k), dyb, (p, 1), T::one(), dxb, (p, 1));
            } else {
                T::gemm(k, g.cout, p, weight, (1, k), dyb, (p, 1), T::zero(), &mut dcol, (p, 1));
                col2im(g, &dcol, dxb);
            }
        }
    }
}

/// Windowed maximum over each `(batch, channel)` plane. Returns the flat
/// input index chosen for every output; ties keep the first row-major hit.
pub(crate) fn max_pool_forward<T: Float>(
    x: &[T],
    [b, c, h, w]: [usize; 4],
    k: usize,
    stride: usize,
    out: &mut [T],
) -> Vec<usize> {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut arg = vec![0usize; b * c * ho * wo];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    arg
}

pub(crate) fn upsample_nearest<T: Float>(x: &[T], [b, c, h, w]: [usize; 4], f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / f) * w..(oy / f + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = srow[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Float>(
    dy: &[T],
    [b, c, h, w]: [usize; 4],
    f: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h * f, w * f);
    for plane in 0..b * c {
        let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let drow = &mut dst[(oy / f) * w..(oy / f + 1) * w];
            for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                drow[ox / f] += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry(cin: usize, h: usize, w: usize, cout: usize, k: usize, pad: usize, stride: usize) -> ConvGeometry {
        ConvGeometry {
            batch: 2,
            cin,
            h,
            w,
            cout,
            kh: k,
            kw: k,
            pad,
            stride,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn input(g: &ConvGeometry, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < g.h)?;
        let ix = (ox * g.stride + kx).checked_sub(g.pad).filter(|&v| v < g.w)?;
        Some((iy, ix))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(cin, h, w, cout, k, pad, stride) in &[
            (2, 7, 5, 3, 3, 1, 1),
            (3, 8, 9, 2, 3, 1, 2),
            (1, 6, 6, 2, 7, 3, 1),
            (2, 9, 7, 2, 5, 0, 2),
            (2, 5, 5, 3, 1, 0, 1),
            (1, 4, 11, 1, 3, 2, 3),
        ] {
            let g = geometry(cin, h, w, cout, k, pad, stride);
            let (in_len, out_len) = (cin * h * w, cout * g.ho * g.wo);
            let x: Vec<f64> = (0..2 * in_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..2 * out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut out = vec![0.0; 2 * out_len];
            conv2d_forward(&g, &x, &wt, &bias, &mut out);
            let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; wt.len()], vec![0.0; cout]);
            conv2d_backward(&g, &x, &wt, &dy, Some(&mut dx), Some(&mut dw), Some(&mut db));

            let mut want = vec![0.0; 2 * out_len];
            let (mut wdx, mut wdw, mut wdb) = (vec![0.0; x.len()], vec![0.0; wt.len()], vec![0.0; cout]);
            for b in 0..2 {
                for o in 0..cout {
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            let oi = b * out_len + (o * g.ho + oy) * g.wo + ox;
                            let mut acc = bias[o];
                            wdb[o] += dy[oi];
                            for c in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        if let Some((iy, ix)) = input(&g, oy, ky, ox, kx) {
                                            let xi = b * in_len + (c * h + iy) * w + ix;
                                            let wi = ((o * cin + c) * k + ky) * k + kx;
                                            acc += wt[wi] * x[xi];
                                            wdw[wi] += dy[oi] * x[xi];
                                            wdx[xi] += dy[oi] * wt[wi];
                                        }
                                    }
                                }
                            }
                            want[oi] = acc;
                        }
                    }
                }
            }
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&out, &want), "forward {g:?}");
            assert!(close(&dx, &wdx), "dx {g:?}");
            assert!(close(&dw, &wdw), "dw {g:?}");
            assert!(close(&db, &wdb), "db {g:?}");
        }
    }
}
