//! Number-crunching kernels behind the tape ops.
//!
//! Everything is written against flat row-major buffers so the inner loops
//! stay branch-free and vectorizable. All iteration orders are fixed, so
//! results are bit-reproducible.

use crate::tensor::{Real, Tensor};

/// Padding applied by same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Symmetric reflection including the edge pixel (`pad[-1] = v[0]`).
    Mirror,
}

/// Mirror index for symmetric padding. Requires `|i| <= n`.
#[inline]
fn mirror_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&m));
    m as usize
}

/// Copies one `h x w` plane into a `(h+2ph) x (w+2pw)` buffer with padding.
fn pad_plane(src: &[Real], h: usize, w: usize, ph: usize, pw: usize, mode: PadMode, dst: &mut [Real]) {
    let pw_total = w + 2 * pw;
    debug_assert_eq!(dst.len(), (h + 2 * ph) * pw_total);
    for py in 0..h + 2 * ph {
        let row = &mut dst[py * pw_total..(py + 1) * pw_total];
        let sy = py as isize - ph as isize;
        let in_range = sy >= 0 && (sy as usize) < h;
        if !in_range && mode == PadMode::Zero {
            row.fill(0.0);
            continue;
        }
        let sy = match mode {
            PadMode::Zero => sy as usize,
            PadMode::Mirror => mirror_idx(sy, h),
        };
        let src_row = &src[sy * w..(sy + 1) * w];
        row[pw..pw + w].copy_from_slice(src_row);
        match mode {
            PadMode::Zero => {
                row[..pw].fill(0.0);
                row[pw + w..].fill(0.0);
            }
            PadMode::Mirror => {
                for px in 0..pw {
                    row[px] = src_row[mirror_idx(px as isize - pw as isize, w)];
                }
                for px in 0..pw {
                    row[pw + w + px] = src_row[mirror_idx((w + px) as isize, w)];
                }
            }
        }
    }
}

/// Folds a padded-gradient plane back onto the source plane. Each padded
/// cell adds into the source cell it was read from during `pad_plane`.
fn unpad_accumulate(padded: &[Real], h: usize, w: usize, ph: usize, pw: usize, mode: PadMode, dst: &mut [Real]) {
    let pw_total = w + 2 * pw;
    for py in 0..h + 2 * ph {
        let row = &padded[py * pw_total..(py + 1) * pw_total];
        let sy = py as isize - ph as isize;
        let sy = match mode {
            PadMode::Zero => {
                if sy < 0 || sy as usize >= h {
                    continue;
                }
                sy as usize
            }
            PadMode::Mirror => mirror_idx(sy, h),
        };
        let dst_row = &mut dst[sy * w..(sy + 1) * w];
        match mode {
            PadMode::Zero => {
                for x in 0..w {
                    dst_row[x] += row[pw + x];
                }
            }
            PadMode::Mirror => {
                for px in 0..pw_total {
                    let sx = mirror_idx(px as isize - pw as isize, w);
                    dst_row[sx] += row[px];
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> (usize, usize, usize, usize, usize, usize, usize) {
    let (bs, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got {kh}x{kw}");
    assert!(kh / 2 <= h && kw / 2 <= wd, "conv2d: kernel {kh}x{kw} too large for {h}x{wd} input");
    if let Some(b) = b {
        assert_eq!(b.shape(), &[cout], "conv2d: bias shape {:?} != [{cout}]", b.shape());
    }
    (bs, cin, h, wd, cout, kh, kw)
}

/// Same-padding cross-correlation: `x [B,Cin,H,W] * w [Cout,Cin,kh,kw] (+ b)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: PadMode) -> Tensor {
    let (bs, cin, h, wd, cout, kh, kw) = conv_dims(x, w, b);
    let (ph, pw) = (kh / 2, kw / 2);
    let pstride = wd + 2 * pw;
    let plane = h * wd;
    let mut out = Tensor::zeros(&[bs, cout, h, wd]);

    let mut padded = vec![0.0; cin * (h + 2 * ph) * pstride];
    for bi in 0..bs {
        for ci in 0..cin {
            let src = &x.data()[(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
            let dst = &mut padded[ci * (h + 2 * ph) * pstride..(ci + 1) * (h + 2 * ph) * pstride];
            pad_plane(src, h, wd, ph, pw, pad, dst);
        }
        for co in 0..cout {
            let o0 = (bi * cout + co) * plane;
            if let Some(b) = b {
                out.data_mut()[o0..o0 + plane].fill(b.data()[co]);
            }
            for ci in 0..cin {
                let pp = &padded[ci * (h + 2 * ph) * pstride..(ci + 1) * (h + 2 * ph) * pstride];
                let wbase = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let src_row = &pp[(y + ky) * pstride + kx..(y + ky) * pstride + kx + wd];
                            let out_row = &mut out.data_mut()[o0 + y * wd..o0 + (y + 1) * wd];
                            for (o, s) in out_row.iter_mut().zip(src_row) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_forward` with respect to input, kernel and bias.
/// `None` entries are skipped (e.g. no input gradient for the first layer).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[Real],
    pad: PadMode,
    needs_dx: bool,
    needs_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Vec<Real>) {
    let (bs, cin, h, wd, cout, kh, kw) = conv_dims(x, w, None);
    let (ph, pw) = (kh / 2, kw / 2);
    let pstride = wd + 2 * pw;
    let pplane = (h + 2 * ph) * pstride;
    let plane = h * wd;

    let mut db = vec![0.0; cout];
    for bi in 0..bs {
        for co in 0..cout {
            let o0 = (bi * cout + co) * plane;
            db[co] += dy[o0..o0 + plane].iter().sum::<Real>();
        }
    }

    let mut dx = needs_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = needs_dw.then(|| Tensor::zeros(w.shape()));

    let mut padded = vec![0.0; cin * pplane];
    let mut padded_dx = vec![0.0; pplane];
    for bi in 0..bs {
        if needs_dw {
            for ci in 0..cin {
                let src = &x.data()[(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
                pad_plane(src, h, wd, ph, pw, pad, &mut padded[ci * pplane..(ci + 1) * pplane]);
            }
        }
        for ci in 0..cin {
            if needs_dx {
                padded_dx.fill(0.0);
            }
            for co in 0..cout {
                let dy_plane = &dy[(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
                let wbase = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        if let Some(dw) = dw.as_mut() {
                            let pp = &padded[ci * pplane..(ci + 1) * pplane];
                            let mut acc = 0.0;
                            for y in 0..h {
                                let src_row = &pp[(y + ky) * pstride + kx..(y + ky) * pstride + kx + wd];
                                let dy_row = &dy_plane[y * wd..(y + 1) * wd];
                                for (d, s) in dy_row.iter().zip(src_row) {
                                    acc += d * s;
                                }
                            }
                            dw.data_mut()[wbase + ky * kw + kx] += acc;
                        }
                        if needs_dx {
                            let wv = w.data()[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in 0..h {
                                let dy_row = &dy_plane[y * wd..(y + 1) * wd];
                                let dst = &mut padded_dx[(y + ky) * pstride + kx..(y + ky) * pstride + kx + wd];
                                for (d, g) in dst.iter_mut().zip(dy_row) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let d0 = (bi * cin + ci) * plane;
                unpad_accumulate(&padded_dx, h, wd, ph, pw, pad, &mut dx.data_mut()[d0..d0 + plane]);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index of each window maximum (first index wins ties).
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (bs, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2d: spatial extents must be even, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[bs, c, oh, ow]);
    let mut argmax = vec![0u32; out.len()];
    let xd = x.data();
    for p in 0..bs * c {
        let i0 = p * h * w;
        let o0 = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = i0 + (2 * oy) * w + 2 * ox;
                let mut best = xd[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = i0 + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                out.data_mut()[o0 + oy * ow + ox] = best;
                argmax[o0 + oy * ow + ox] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(argmax: &[u32], dy: &[Real], input_len: usize) -> Vec<Real> {
    let mut dx = vec![0.0; input_len];
    for (i, &src) in argmax.iter().enumerate() {
        dx[src as usize] += dy[i];
    }
    dx
}

/// Nearest-neighbor 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (bs, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[bs, c, 2 * h, 2 * w]);
    let xd = x.data();
    for p in 0..bs * c {
        let i0 = p * h * w;
        let o0 = p * 4 * h * w;
        for y in 0..2 * h {
            let src_row = &xd[i0 + (y / 2) * w..i0 + (y / 2 + 1) * w];
            let out_row = &mut out.data_mut()[o0 + y * 2 * w..o0 + (y + 1) * 2 * w];
            for x in 0..2 * w {
                out_row[x] = src_row[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[Real], bs: usize, c: usize, h: usize, w: usize) -> Vec<Real> {
    let mut dx = vec![0.0; bs * c * h * w];
    for p in 0..bs * c {
        let i0 = p * h * w;
        let o0 = p * 4 * h * w;
        for y in 0..2 * h {
            let dy_row = &dy[o0 + y * 2 * w..o0 + (y + 1) * 2 * w];
            let dx_row = &mut dx[i0 + (y / 2) * w..i0 + (y / 2 + 1) * w];
            for x in 0..2 * w {
                dx_row[x / 2] += dy_row[x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_vec(n: usize, seed: u64) -> Vec<Real> {
        // Small xorshift; plenty for kernel oracles.
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) as Real * 2.0
            })
            .collect()
    }

    /// Direct six-nested-loop convolution used as an oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: PadMode) -> Tensor {
        let (bs, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = Tensor::zeros(&[bs, cout, h, wd]);
        for bi in 0..bs {
            for co in 0..cout {
                for y in 0..h {
                    for x_ in 0..wd {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y as isize + ky as isize - ph;
                                    let sx = x_ as isize + kx as isize - pw;
                                    let v = match pad {
                                        PadMode::Zero => {
                                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                                0.0
                                            } else {
                                                x.at4(bi, ci, sy as usize, sx as usize)
                                            }
                                        }
                                        PadMode::Mirror => {
                                            x.at4(bi, ci, mirror_idx(sy, h), mirror_idx(sx, wd))
                                        }
                                    };
                                    acc += v * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                        out.set4(bi, co, y, x_, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.set4(0, 0, 1, 1, 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), PadMode::Zero);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_field() {
        let v = 2.5;
        let x = Tensor::full(&[1, 1, 5, 5], v);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, PadMode::Zero);
        // Center pixel sees the full window.
        assert!((y.at4(0, 0, 2, 2) - 9.0 * v).abs() < 1e-12);
        // Corner pixel sees 4 of 9 taps under zero padding.
        assert!((y.at4(0, 0, 0, 0) - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        for (seed, pad) in [(1, PadMode::Zero), (2, PadMode::Mirror), (3, PadMode::Zero)] {
            let x = Tensor::from_vec(&[1, 2, 5, 5], rng_vec(50, seed));
            let w = Tensor::from_vec(&[3, 2, 3, 3], rng_vec(54, seed + 10));
            let b = Tensor::from_vec(&[3], rng_vec(3, seed + 20));
            let got = conv2d_forward(&x, &w, Some(&b), pad);
            let want = conv_oracle(&x, &w, Some(&b), pad);
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() <= 1e-10 * w_.abs().max(1.0), "{g} vs {w_}");
            }
        }
    }

    #[test]
    fn conv_5x5_kernel_matches_oracle() {
        let x = Tensor::from_vec(&[2, 1, 6, 6], rng_vec(72, 9));
        let w = Tensor::from_vec(&[2, 1, 5, 5], rng_vec(50, 11));
        let got = conv2d_forward(&x, &w, None, PadMode::Zero);
        let want = conv_oracle(&x, &w, None, PadMode::Zero);
        for (g, w_) in got.data().iter().zip(want.data()) {
            assert!((g - w_).abs() <= 1e-10 * w_.abs().max(1.0));
        }
    }

    #[test]
    #[should_panic(expected = "channels")]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let _ = conv2d_forward(&x, &w, None, PadMode::Zero);
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_constant_keeps_value_and_first_index() {
        let x = Tensor::full(&[1, 1, 4, 4], 7.0);
        let (y, arg) = maxpool2_forward(&x);
        assert!(y.data().iter().all(|&v| v == 7.0));
        // First index in row-major window order wins ties.
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let x = Tensor::from_vec(&[1, 2, 8, 8], rng_vec(128, 5));
        let (y, _) = maxpool2_forward(&x);
        for c in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = Real::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at4(0, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    assert_eq!(y.at4(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "even")]
    fn maxpool_rejects_odd_extent() {
        let _ = maxpool2_forward(&Tensor::zeros(&[1, 1, 3, 4]));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]);
        let y = upsample2_forward(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_of_pooled_constant_is_identity() {
        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        let (p, _) = maxpool2_forward(&x);
        let y = upsample2_forward(&p);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pad_roundtrip_mirror() {
        let src: Vec<Real> = (0..12).map(|v| v as Real).collect();
        let mut padded = vec![0.0; (3 + 2) * (4 + 2)];
        pad_plane(&src, 3, 4, 1, 1, PadMode::Mirror, &mut padded);
        // pad[-1] duplicates the edge.
        assert_eq!(padded[0], src[0]);
        assert_eq!(padded[6], src[0]);
        let mut back = vec![0.0; 12];
        unpad_accumulate(&padded, 3, 4, 1, 1, PadMode::Mirror, &mut back);
        // Interior cells receive themselves once plus their reflections.
        assert!(back[0] > src[0] - 1e-9);
    }
}
