//! Direct 3D convolution kernels (2D convolution is the depth-1 case).
//!
//! Stride-1 convolutions run on a zero-padded copy of the input: every
//! kernel tap then becomes a single contiguous `axpy` over the flattened
//! padded volume, with the positions that fall outside the output discarded
//! afterwards. Strided convolutions use a plain loop nest.

use super::tensor::{axpy, dot, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 5 {
            return Err(Error::Contract(format!(
                "conv expects input [C,D,H,W] and weight [O,C,kd,kh,kw], got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[0] != w_shape[1] {
            return Err(Error::Contract(format!(
                "conv input channels {x_shape:?} do not match weight {w_shape:?}"
            )));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let (n, k, s, p) = (x_shape[a + 1], w_shape[a + 2], stride[a], pad[a]);
            if s == 0 || n + 2 * p < k {
                return Err(Error::Contract(format!(
                    "conv kernel {w_shape:?} with stride {stride:?}, pad {pad:?} does not fit input {x_shape:?}"
                )));
            }
            output[a] = (n + 2 * p - k) / s + 1;
        }
        Ok(Self {
            cin: x_shape[0],
            cout: w_shape[0],
            input: [x_shape[1], x_shape[2], x_shape[3]],
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.output[0], self.output[1], self.output[2]]
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn unit_stride(&self) -> bool {
        self.stride == [1, 1, 1]
    }
}

/// Output index range `[lo, hi)` along one axis for which
/// `o * stride + k - pad` lands inside `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if n_in + pad <= k {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

fn pad_input<T: Real>(g: &ConvGeom, x: &[T]) -> (Vec<T>, [usize; 3]) {
    let [d, h, w] = g.input;
    let dims = [d + 2 * g.pad[0], h + 2 * g.pad[1], w + 2 * g.pad[2]];
    let plane = dims[0] * dims[1] * dims[2];
    let mut out = vec![T::zero(); g.cin * plane];
    for c in 0..g.cin {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = c * plane + ((z + g.pad[0]) * dims[1] + y + g.pad[1]) * dims[2] + g.pad[2];
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    (out, dims)
}

/// Length of the flattened "wide" output span for the padded layout.
fn wide_len(g: &ConvGeom, dims: [usize; 3]) -> usize {
    let [od, oh, ow] = g.output;
    (od - 1) * dims[1] * dims[2] + (oh - 1) * dims[2] + ow
}

fn tap_offsets(g: &ConvGeom, dims: [usize; 3]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(g.taps());
    for kd in 0..g.kernel[0] {
        for ky in 0..g.kernel[1] {
            for kx in 0..g.kernel[2] {
                offs.push((kd * dims[1] + ky) * dims[2] + kx);
            }
        }
    }
    offs
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); g.cout * out_len];
    if g.unit_stride() {
        let (xp, dims) = pad_input(g, x);
        let plane = dims[0] * dims[1] * dims[2];
        let span = wide_len(g, dims);
        let offs = tap_offsets(g, dims);
        let taps = offs.len();
        let mut wide = vec![T::zero(); span];
        for oc in 0..g.cout {
            wide.iter_mut().for_each(|v| *v = T::zero());
            for ic in 0..g.cin {
                let xin = &xp[ic * plane..(ic + 1) * plane];
                let wk = &w[(oc * g.cin + ic) * taps..(oc * g.cin + ic + 1) * taps];
                for (t, &off) in offs.iter().enumerate() {
                    axpy(wk[t], &xin[off..off + span], &mut wide);
                }
            }
            let bias = b.map_or(T::zero(), |b| b[oc]);
            let dst = &mut out[oc * out_len..(oc + 1) * out_len];
            let [od, oh, ow] = g.output;
            for z in 0..od {
                for y in 0..oh {
                    let src = (z * dims[1] + y) * dims[2];
                    let row = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for (o, &v) in row.iter_mut().zip(&wide[src..src + ow]) {
                        *o = v + bias;
                    }
                }
            }
        }
        return out;
    }

    let in_len = g.in_len();
    let taps = g.taps();
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    for oc in 0..g.cout {
        let dst = &mut out[oc * out_len..(oc + 1) * out_len];
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b[oc]);
        }
        for ic in 0..g.cin {
            let xin = &x[ic * in_len..(ic + 1) * in_len];
            let wk = &w[(oc * g.cin + ic) * taps..];
            let mut t = 0;
            for kd in 0..g.kernel[0] {
                let (zlo, zhi) = valid_range(od, id, sd, kd, g.pad[0]);
                for ky in 0..g.kernel[1] {
                    let (ylo, yhi) = valid_range(oh, ih, sh, ky, g.pad[1]);
                    for kx in 0..g.kernel[2] {
                        let (xlo, xhi) = valid_range(ow, iw, sw, kx, g.pad[2]);
                        let wv = wk[t];
                        t += 1;
                        for z in zlo..zhi {
                            let iz = z * sd + kd - g.pad[0];
                            for y in ylo..yhi {
                                let iy = y * sh + ky - g.pad[1];
                                let orow = (z * oh + y) * ow;
                                let irow = (iz * ih + iy) * iw;
                                for xo in xlo..xhi {
                                    dst[orow + xo] += wv * xin[irow + xo * sw + kx - g.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients into `gx`, `gw`, `gb` (each optional).
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let out_len = g.out_len();
    if let Some(gb) = gb {
        for oc in 0..g.cout {
            gb[oc] += gout[oc * out_len..(oc + 1) * out_len]
                .iter()
                .fold(T::zero(), |a, &v| a + v);
        }
    }
    let taps = g.taps();
    if g.unit_stride() {
        let (xp, dims) = pad_input(g, x);
        let plane = dims[0] * dims[1] * dims[2];
        let span = wide_len(g, dims);
        let offs = tap_offsets(g, dims);
        let [od, oh, ow] = g.output;
        // scatter the output gradient into the wide layout; gaps stay zero
        let mut gwide = vec![T::zero(); g.cout * span];
        for oc in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    let dst = oc * span + (z * dims[1] + y) * dims[2];
                    let src = oc * out_len + (z * oh + y) * ow;
                    gwide[dst..dst + ow].copy_from_slice(&gout[src..src + ow]);
                }
            }
        }
        if let Some(gw) = gw {
            for oc in 0..g.cout {
                let go = &gwide[oc * span..(oc + 1) * span];
                for ic in 0..g.cin {
                    let xin = &xp[ic * plane..(ic + 1) * plane];
                    let base = (oc * g.cin + ic) * taps;
                    for (t, &off) in offs.iter().enumerate() {
                        gw[base + t] += dot(go, &xin[off..off + span]);
                    }
                }
            }
        }
        if let Some(gx) = gx {
            let mut gxp = vec![T::zero(); plane];
            let [id, ih, iw] = g.input;
            for ic in 0..g.cin {
                gxp.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..g.cout {
                    let go = &gwide[oc * span..(oc + 1) * span];
                    let wk = &w[(oc * g.cin + ic) * taps..(oc * g.cin + ic + 1) * taps];
                    for (t, &off) in offs.iter().enumerate() {
                        axpy(wk[t], go, &mut gxp[off..off + span]);
                    }
                }
                for z in 0..id {
                    for y in 0..ih {
                        let src = ((z + g.pad[0]) * dims[1] + y + g.pad[1]) * dims[2] + g.pad[2];
                        let dst = ((ic * id + z) * ih + y) * iw;
                        for (o, &v) in gx[dst..dst + iw].iter_mut().zip(&gxp[src..src + iw]) {
                            *o += v;
                        }
                    }
                }
            }
        }
        return;
    }

    let in_len = g.in_len();
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let mut gx = gx;
    let mut gw = gw;
    for oc in 0..g.cout {
        let go = &gout[oc * out_len..(oc + 1) * out_len];
        for ic in 0..g.cin {
            let xin = &x[ic * in_len..(ic + 1) * in_len];
            let base = (oc * g.cin + ic) * taps;
            let mut t = 0;
            for kd in 0..g.kernel[0] {
                let (zlo, zhi) = valid_range(od, id, sd, kd, g.pad[0]);
                for ky in 0..g.kernel[1] {
                    let (ylo, yhi) = valid_range(oh, ih, sh, ky, g.pad[1]);
                    for kx in 0..g.kernel[2] {
                        let (xlo, xhi) = valid_range(ow, iw, sw, kx, g.pad[2]);
                        let wv = w[base + t];
                        let mut acc = T::zero();
                        for z in zlo..zhi {
                            let iz = z * sd + kd - g.pad[0];
                            for y in ylo..yhi {
                                let iy = y * sh + ky - g.pad[1];
                                let orow = (z * oh + y) * ow;
                                let irow = ic * in_len + (iz * ih + iy) * iw;
                                for xo in xlo..xhi {
                                    let xi = irow + xo * sw + kx - g.pad[2];
                                    let gv = go[orow + xo];
                                    acc += gv * xin[xi - ic * in_len];
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[xi] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[base + t] += acc;
                        }
                        t += 1;
                    }
                }
            }
        }
    }
}
