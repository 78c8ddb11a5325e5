//! Low-level dense kernels shared by the graph ops.

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[c, h, w]` image into `[c·k·k, h·w]` patch columns (zero padding `pad`).
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    for xx in x0..x1 {
                        out[xx] = src[(xx as isize + dx) as usize];
                    }
                    out[x1..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back into an image, accumulating.
pub fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        dst[(xx as isize + dx) as usize] += s[xx];
                    }
                }
            }
        }
    }
}

/// 2× bilinear upsampling of one line with edge clamping, weights (0.75, 0.25).
fn up_line(src: &[f32], dst: &mut [f32], stride_src: usize, stride_dst: usize, n: usize) {
    for i in 0..n {
        let c = src[i * stride_src];
        let l = src[i.saturating_sub(1) * stride_src];
        let r = src[(i + 1).min(n - 1) * stride_src];
        dst[2 * i * stride_dst] = 0.75 * c + 0.25 * l;
        dst[(2 * i + 1) * stride_dst] = 0.75 * c + 0.25 * r;
    }
}

/// Adjoint of [`up_line`], accumulating into `dst`.
fn up_line_t(g: &[f32], dst: &mut [f32], stride_g: usize, stride_dst: usize, n: usize) {
    for i in 0..n {
        let g0 = g[2 * i * stride_g];
        let g1 = g[(2 * i + 1) * stride_g];
        dst[i * stride_dst] += 0.75 * (g0 + g1);
        dst[i.saturating_sub(1) * stride_dst] += 0.25 * g0;
        dst[(i + 1).min(n - 1) * stride_dst] += 0.25 * g1;
    }
}

/// Bilinear 2× upsampling of a `[h, w]` plane into `[2h, 2w]`.
pub fn upsample_plane(src: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let w2 = 2 * w;
    let mut tmp = vec![0.0f32; h * w2];
    for y in 0..h {
        up_line(&src[y * w..], &mut tmp[y * w2..], 1, 1, w);
    }
    for x in 0..w2 {
        up_line(&tmp[x..], &mut dst[x..], w2, w2, h);
    }
}

/// Adjoint of [`upsample_plane`], accumulating into `dst: [h, w]`.
pub fn upsample_plane_t(g: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let w2 = 2 * w;
    let mut tmp = vec![0.0f32; h * w2];
    for x in 0..w2 {
        up_line_t(&g[x..], &mut tmp[x..], w2, w2, h);
    }
    for y in 0..h {
        up_line_t(&tmp[y * w2..], &mut dst[y * w..], 1, 1, w);
    }
}

/// 2×2 average pooling of a `[h, w]` plane (h, w even).
pub fn avgpool_plane(src: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for y in 0..ho {
        for x in 0..wo {
            let a = src[2 * y * w + 2 * x];
            let b = src[2 * y * w + 2 * x + 1];
            let c = src[(2 * y + 1) * w + 2 * x];
            let d = src[(2 * y + 1) * w + 2 * x + 1];
            dst[y * wo + x] = 0.25 * (a + b + c + d);
        }
    }
}

pub fn avgpool_plane_t(g: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for y in 0..ho {
        for x in 0..wo {
            let v = 0.25 * g[y * wo + x];
            dst[2 * y * w + 2 * x] += v;
            dst[2 * y * w + 2 * x + 1] += v;
            dst[(2 * y + 1) * w + 2 * x] += v;
            dst[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
}

/// Pairwise summation; exact for power-of-two counts of equal values.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n.next_power_of_two() / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], c: usize, h: usize, w: usize, wt: &[f32], co: usize, k: usize) -> Vec<f32> {
        let pad = k / 2;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += x[ci * h * w + sy as usize * w + sx as usize]
                                    * wt[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[o * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, h, w, co, k) = (3, 5, 6, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let wt: Vec<f32> = (0..co * c * k * k).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let mut col = vec![0.0; c * k * k * h * w];
        im2col(&x, c, h, w, k, 1, &mut col);
        let mut out = vec![0.0; co * h * w];
        gemm(co, c * k * k, h * w, &wt, false, &col, false, 0.0, &mut out);
        let want = naive_conv(&x, c, h, w, &wt, co, k);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 3, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..c * k * k * h * w).map(|i| (i as f32 * 0.71).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, 1, &mut col);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, 1, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let (h, w) = (3, 4);
        let x: Vec<f32> = (0..h * w).map(|i| (i as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..4 * h * w).map(|i| (i as f32 * 0.9).cos()).collect();
        let mut up = vec![0.0; 4 * h * w];
        upsample_plane(&x, h, w, &mut up);
        let lhs: f32 = up.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; h * w];
        upsample_plane_t(&y, h, w, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);

        let mut pooled = vec![0.0; h * w];
        avgpool_plane(&y, 2 * h, 2 * w, &mut pooled);
        let lhs: f32 = pooled.iter().zip(&x).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 4 * h * w];
        avgpool_plane_t(&x, 2 * h, 2 * w, &mut back);
        let rhs: f32 = back.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = vec![2.5f32; 12];
        let mut up = vec![0.0; 48];
        upsample_plane(&x, 3, 4, &mut up);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn pairwise_sum_exact_for_power_of_two_copies() {
        let v = 0.1234567891234_f64;
        for n in [1usize, 2, 4, 8, 16] {
            let s = pairwise_sum(&vec![v; n]);
            assert_eq!(s / n as f64, v);
        }
    }
}
