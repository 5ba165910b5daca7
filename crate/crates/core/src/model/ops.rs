//! Per-sample convolution, activation and pooling kernels (forward and
//! backward). Weight layout is `[out][in][ky][kx]`.

use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output positions `o` in `0..out` whose input index `o*stride + k - pad`
    /// falls inside `0..len`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = ((p - k).max(0) + s - 1) / s;
        // largest o with o*s + k - p <= len - 1
        let hi_num = len as isize - 1 + p - k;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv_forward<F: Real>(
    g: &ConvGeom,
    input: &Tensor3<F>,
    weights: &[F],
    bias: &[F],
) -> Tensor3<F> {
    let mut out = Tensor3::zeros(g.out_c, g.out_h, g.out_w);
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for co in 0..g.out_c {
        let o = &mut out.data[co * out_plane..(co + 1) * out_plane];
        o.fill(bias[co]);
        for ci in 0..g.in_c {
            let inp = &input.data[ci * in_plane..(ci + 1) * in_plane];
            let wbase = (co * g.in_c + ci) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let w = weights[wbase + ky * k + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &inp[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            let n = ox1 - ox0;
                            for (ov, &iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                *ov += w * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += w * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `dw`/`db` and returns the
/// gradient with respect to the input (when `need_input_grad`).
pub(crate) fn conv_backward<F: Real>(
    g: &ConvGeom,
    input: &Tensor3<F>,
    weights: &[F],
    dout: &Tensor3<F>,
    dw: &mut [F],
    db: &mut [F],
    need_input_grad: bool,
) -> Option<Tensor3<F>> {
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut din = need_input_grad.then(|| Tensor3::zeros(g.in_c, g.in_h, g.in_w));
    for co in 0..g.out_c {
        let d = &dout.data[co * out_plane..(co + 1) * out_plane];
        db[co] += d.iter().copied().sum::<F>();
        for ci in 0..g.in_c {
            let inp = &input.data[ci * in_plane..(ci + 1) * in_plane];
            let wbase = (co * g.in_c + ci) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let w = weights[wbase + ky * k + kx];
                    let mut acc = F::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let drow = &d[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &inp[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            let n = ox1 - ox0;
                            for (&dv, &iv) in drow[ox0..ox1].iter().zip(&irow[ix0..ix0 + n]) {
                                acc += dv * iv;
                            }
                            if let Some(din) = din.as_mut() {
                                let dplane = &mut din.data[ci * in_plane..(ci + 1) * in_plane];
                                let drow_in = &mut dplane[iy * g.in_w..(iy + 1) * g.in_w];
                                for (dv_in, &dv) in drow_in[ix0..ix0 + n].iter_mut().zip(&drow[ox0..ox1]) {
                                    *dv_in += w * dv;
                                }
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                acc += drow[ox] * irow[ix];
                                if let Some(din) = din.as_mut() {
                                    din.data[ci * in_plane + iy * g.in_w + ix] += w * drow[ox];
                                }
                            }
                        }
                    }
                    dw[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
    din
}

pub(crate) fn relu_inplace<F: Real>(t: &mut Tensor3<F>) {
    for v in &mut t.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Gradient through ReLU given its output: passes where the output is positive.
pub(crate) fn relu_backward_inplace<F: Real>(grad: &mut Tensor3<F>, activated: &Tensor3<F>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// 2×2/stride-2 max pooling. Returns the pooled map and, per output cell, the
/// flat input index of its maximum (first maximum on ties).
pub(crate) fn maxpool2_forward<F: Real>(input: &Tensor3<F>) -> (Tensor3<F>, Vec<u32>) {
    let (c, h, w) = (input.channels, input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(c, h, w);
    let mut idx = vec![0u32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut best = (ch * input.height + 2 * y) * input.width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (ch * input.height + 2 * y + dy) * input.width + 2 * x + dx;
                    if input.data[j] > input.data[best] {
                        best = j;
                    }
                }
                let o = (ch * h + y) * w + x;
                out.data[o] = input.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool2_backward<F: Real>(
    dout: &Tensor3<F>,
    idx: &[u32],
    input_shape: [usize; 3],
) -> Tensor3<F> {
    let mut din = Tensor3::zeros(input_shape[0], input_shape[1], input_shape[2]);
    for (&g, &i) in dout.data.iter().zip(idx) {
        din.data[i as usize] += g;
    }
    din
}
