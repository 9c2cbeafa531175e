//! Single-image layer kernels with explicit backward passes.
//!
//! Feature maps are `channels x height x width`, row-major, `f32`.

/// `channels x height x width` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major inputs
/// with optional transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe buffers whose lengths were checked above.
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

/// 3x3 zero-padded patches: `(c * 9) x (h * w)`.
fn im2col(x: &Feat) -> Vec<f32> {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let mut cols = vec![0.0f32; c * 9 * hw];
    for ci in 0..c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = src[sy * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize) -> Feat {
    let hw = h * w;
    let mut out = Feat::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sy * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1, no bias. `weight` is
/// `out x in x 3 x 3`.
pub fn conv3x3(x: &Feat, weight: &[f32], out_c: usize) -> Feat {
    let cols = im2col(x);
    let mut out = Feat::zeros(out_c, x.h, x.w);
    gemm(out_c, x.c * 9, x.h * x.w, weight, false, &cols, false, &mut out.data, false);
    out
}

/// Accumulates the weight gradient into `dweight`; returns the input
/// gradient when `need_input` is set.
pub fn conv3x3_backward(
    x: &Feat,
    weight: &[f32],
    dout: &Feat,
    dweight: &mut [f32],
    need_input: bool,
) -> Option<Feat> {
    let cols = im2col(x);
    let k = x.c * 9;
    let hw = x.h * x.w;
    gemm(dout.c, hw, k, &dout.data, false, &cols, true, dweight, true);
    if !need_input {
        return None;
    }
    let mut dcols = vec![0.0f32; k * hw];
    gemm(k, dout.c, hw, weight, true, &dout.data, false, &mut dcols, false);
    Some(col2im(&dcols, x.c, x.h, x.w))
}

/// 1x1 convolution with bias.
pub fn conv1x1(x: &Feat, weight: &[f32], bias: &[f32]) -> Feat {
    let out_c = bias.len();
    let hw = x.plane_len();
    let mut out = Feat::zeros(out_c, x.h, x.w);
    gemm(out_c, x.c, hw, weight, false, &x.data, false, &mut out.data, false);
    for (o, b) in out.data.chunks_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v += b);
    }
    out
}

pub fn conv1x1_backward(
    x: &Feat,
    weight: &[f32],
    dout: &Feat,
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Feat {
    let hw = x.plane_len();
    gemm(dout.c, hw, x.c, &dout.data, false, &x.data, true, dweight, true);
    for (db, g) in dbias.iter_mut().zip(dout.data.chunks(hw)) {
        *db += g.iter().sum::<f32>();
    }
    let mut dx = Feat::zeros(x.c, x.h, x.w);
    gemm(x.c, dout.c, hw, weight, true, &dout.data, false, &mut dx.data, false);
    dx
}

pub const NORM_EPS: f32 = 1e-5;

/// Saved normalized activations and per-channel inverse std.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Per-channel instance normalization with affine parameters. Statistics
/// come from the sample itself, so train and inference behave identically.
pub fn instance_norm(x: &Feat, gamma: &[f32], beta: &[f32]) -> (Feat, NormCache) {
    let hw = x.plane_len();
    let mut out = Feat::zeros(x.c, x.h, x.w);
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; x.c];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + NORM_EPS as f64).sqrt();
        inv_std[ci] = is as f32;
        for i in 0..hw {
            let xh = ((src[i] as f64 - mean) * is) as f32;
            xhat[ci * hw + i] = xh;
            out.data[ci * hw + i] = gamma[ci] * xh + beta[ci];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    dout: &Feat,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Feat {
    let hw = dout.plane_len();
    let mut dx = Feat::zeros(dout.c, dout.h, dout.w);
    let n = hw as f32;
    for ci in 0..dout.c {
        let g = &dout.data[ci * hw..(ci + 1) * hw];
        let xh = &cache.xhat[ci * hw..(ci + 1) * hw];
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for (gv, xv) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * xv;
        }
        dgamma[ci] += sum_gx;
        dbeta[ci] += sum_g;
        let scale = gamma[ci] * cache.inv_std[ci] / n;
        let dst = &mut dx.data[ci * hw..(ci + 1) * hw];
        for i in 0..hw {
            dst[i] = scale * (n * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Feat) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dout` by the positive part of the forward output.
pub fn relu_backward(out: &Feat, dout: &mut Feat) {
    for (g, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the flat argmax index per output cell.
pub fn maxpool2(x: &Feat) -> (Feat, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, oh, ow);
    let mut idx = vec![0u32; x.c * oh * ow];
    for ci in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ci * x.h + 2 * y + dy) * x.w + 2 * xx + dx;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ci * oh + y) * ow + xx;
                out.data[o] = best;
                idx[o] = best_i as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(idx: &[u32], dout: &Feat, c: usize, h: usize, w: usize) -> Feat {
    let mut dx = Feat::zeros(c, h, w);
    for (g, &i) in dout.data.iter().zip(idx) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Feat) -> Feat {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, oh, ow);
    for ci in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                out.data[(ci * oh + y) * ow + xx] = x.data[(ci * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Feat) -> Feat {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Feat::zeros(dout.c, h, w);
    for ci in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[(ci * h + y / 2) * w + xx / 2] += dout.data[(ci * dout.h + y) * dout.w + xx];
            }
        }
    }
    dx
}

pub fn concat(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split(x: &Feat, first_c: usize) -> (Feat, Feat) {
    let cut = first_c * x.plane_len();
    (
        Feat {
            c: first_c,
            h: x.h,
            w: x.w,
            data: x.data[..cut].to_vec(),
        },
        Feat {
            c: x.c - first_c,
            h: x.h,
            w: x.w,
            data: x.data[cut..].to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Feat, wt: &[f32], out_c: usize) -> Feat {
        let mut out = Feat::zeros(out_c, x.h, x.w);
        for o in 0..out_c {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = 0.0f32;
                    for ci in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < x.h as isize && sx < x.w as isize {
                                    acc += wt[((o * x.c + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                                }
                            }
                        }
                    }
                    out.data[(o * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize, f: f32) -> Feat {
        Feat {
            c,
            h,
            w,
            data: (0..c * h * w).map(|i| ((i as f32) * f).sin()).collect(),
        }
    }

    #[test]
    fn conv_matches_naive() {
        let x = ramp(3, 5, 6, 0.37);
        let wt: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i as f32) * 0.11).cos()).collect();
        let a = conv3x3(&x, &wt, 4);
        let b = naive_conv(&x, &wt, 4);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW>
        let x = ramp(2, 4, 5, 0.29);
        let wt: Vec<f32> = (0..3 * 2 * 9).map(|i| ((i as f32) * 0.23).cos()).collect();
        let g = ramp(3, 4, 5, 0.41);
        let y = conv3x3(&x, &wt, 3);
        let lhs: f32 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0f32; wt.len()];
        let dx = conv3x3_backward(&x, &wt, &g, &mut dw, true).unwrap();
        let via_x: f32 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_w: f32 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let x = ramp(2, 4, 6, 0.7);
        let (p, idx) = maxpool2(&x);
        let g = ramp(2, 2, 3, 0.3);
        let dx = maxpool2_backward(&idx, &g, 2, 4, 6);
        let lhs: f32 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);

        let u = upsample2(&g);
        let gu = ramp(2, 4, 6, 0.9);
        let lhs: f32 = u.data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = g.data.iter().zip(&upsample2_backward(&gu).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let x = ramp(2, 3, 4, 0.53);
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let g = ramp(2, 3, 4, 0.17);
        let obj = |xv: &Feat| -> f64 {
            let (y, _) = instance_norm(xv, &gamma, &beta);
            y.data.iter().zip(&g.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = instance_norm(&x, &gamma, &beta);
        let mut dg = [0.0f32; 2];
        let mut db = [0.0f32; 2];
        let dx = instance_norm_backward(&cache, &gamma, &g, &mut dg, &mut db);
        let h = 1e-2f32;
        for i in 0..x.data.len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up.data[i] += h;
            dn.data[i] -= h;
            let num = (obj(&up) - obj(&dn)) / (2.0 * h as f64);
            assert!((num - dx.data[i] as f64).abs() < 2e-3, "{i}: {num} vs {}", dx.data[i]);
        }
    }
}
