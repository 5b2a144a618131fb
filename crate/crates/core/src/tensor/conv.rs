// Direct-loop 2-D convolution kernels on `[channels, rows, cols]` buffers.
// Padding is `k / 2` on every side, so stride 1 preserves the spatial size and
// stride 2 halves even sizes.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    /// Output index range `[lo, hi)` along one axis for which
    /// `o * stride + tap - pad` falls inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let pad = self.pad();
        let s = self.stride;
        // o * s + tap >= pad
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(s) };
        // o * s + tap - pad <= len - 1
        let top = len - 1 + pad;
        let hi = if tap > top { 0 } else { ((top - tap) / s + 1).min(out_len) };
        (lo, hi.max(lo))
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.k;
    let pad = g.pad();
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_c.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w_base = (co * g.c_in + ci) * k * k;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, oh);
                for kx in 0..k {
                    let wv = w[w_base + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - pad;
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        let o_row = &mut out_c[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            for (o, xi) in o_row[ox_lo..ox_hi].iter_mut().zip(&x_row[ix0..ix0 + n]) {
                                *o += wv * xi;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                o_row[ox] += wv * x_row[ox * g.stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.k;
    let pad = g.pad();
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += gout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    for co in 0..g.c_out {
        let go_c = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let x_off = ci * g.h * g.w;
            let w_base = (co * g.c_in + ci) * k * k;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, ow);
                    let wv = w[w_base + ky * k + kx];
                    let mut acc_w = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - pad;
                        let row_off = x_off + iy * g.w;
                        let go_row = &go_c[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let x_row = &x[row_off + ix0..row_off + ix0 + n];
                            let go = &go_row[ox_lo..ox_hi];
                            if gw.is_some() {
                                acc_w += go.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                for (gxi, goi) in gx[row_off + ix0..row_off + ix0 + n].iter_mut().zip(go) {
                                    *gxi += wv * goi;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = row_off + ox * g.stride + kx - pad;
                                let gov = go_row[ox];
                                acc_w += gov * x[ix];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[ix] += wv * gov;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[w_base + ky * k + kx] += acc_w;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let pad = g.pad() as isize;
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - pad;
                                let ix = (ox * g.stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for stride in [1, 2] {
            let g = ConvGeom { c_in: 2, c_out: 3, h: 6, w: 4, k: 3, stride };
            let x: Vec<f64> = (0..g.c_in * g.h * g.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
            let b = vec![0.5, -0.25, 1.0];
            let fast = forward(&g, &x, &w, &b);
            let slow = naive(&g, &x, &w, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom { c_in: 1, c_out: 1, h: 64, w: 64, k: 3, stride: 2 };
        assert_eq!((g.out_h(), g.out_w()), (32, 32));
        let g = ConvGeom { stride: 1, ..g };
        assert_eq!((g.out_h(), g.out_w()), (64, 64));
    }
}
