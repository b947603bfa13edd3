//! Dense primitives over flat `f64` slices. Weights are row-major
//! `[out, in]`; convolution weights are `[out, in, K, K]`; images are CHW.

pub(crate) const KERNEL: usize = 3;
pub(crate) const STRIDE: usize = 2;
pub(crate) const PAD: usize = 1;

pub(crate) fn conv_out_side(side: usize) -> usize {
    (side + 2 * PAD - KERNEL) / STRIDE + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub side: usize,
}

impl ConvShape {
    pub fn out_side(&self) -> usize {
        conv_out_side(self.side)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * KERNEL * KERNEL
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_side() * self.out_side()
    }
}

/// Input coordinate for output coordinate `o` and kernel tap `k`, if inside.
#[inline]
fn tap(o: usize, k: usize, side: usize) -> Option<usize> {
    let i = (o * STRIDE + k).checked_sub(PAD)?;
    (i < side).then_some(i)
}

pub(crate) fn conv_forward(w: &[f64], b: &[f64], x: &[f64], s: &ConvShape, y: &mut [f64]) {
    let (n, o) = (s.side, s.out_side());
    for oc in 0..s.cout {
        let out = &mut y[oc * o * o..(oc + 1) * o * o];
        out.fill(b[oc]);
        for ic in 0..s.cin {
            let xin = &x[ic * n * n..(ic + 1) * n * n];
            let wk = &w[(oc * s.cin + ic) * KERNEL * KERNEL..][..KERNEL * KERNEL];
            for oy in 0..o {
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, n) else { continue };
                    let row = &xin[iy * n..(iy + 1) * n];
                    for ox in 0..o {
                        let mut acc = 0.0;
                        for kx in 0..KERNEL {
                            if let Some(ix) = tap(ox, kx, n) {
                                acc += wk[ky * KERNEL + kx] * row[ix];
                            }
                        }
                        out[oy * o + ox] += acc;
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient into `dx`
/// when given.
pub(crate) fn conv_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    s: &ConvShape,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (n, o) = (s.side, s.out_side());
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for oc in 0..s.cout {
        let g = &dy[oc * o * o..(oc + 1) * o * o];
        db[oc] += g.iter().sum::<f64>();
        for ic in 0..s.cin {
            let base = (oc * s.cin + ic) * KERNEL * KERNEL;
            let xin = &x[ic * n * n..(ic + 1) * n * n];
            for oy in 0..o {
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, n) else { continue };
                    for ox in 0..o {
                        let go = g[oy * o + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            if let Some(ix) = tap(ox, kx, n) {
                                let k = base + ky * KERNEL + kx;
                                dw[k] += go * xin[iy * n + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[ic * n * n + iy * n + ix] += go * w[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = W x + b`
pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        *yo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dW += dy xᵀ`, `db += dy`, and `dx (+)= Wᵀ dy` when requested.
pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        for (d, xi) in dw[o * n..(o + 1) * n].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *d += g * wi;
            }
        }
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward output was clipped.
pub(crate) fn relu_mask(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Average pooling by an integer factor over each channel.
pub(crate) fn avg_pool(x: &[f64], channels: usize, side: usize, factor: usize, y: &mut [f64]) {
    let o = side / factor;
    let scale = 1.0 / (factor * factor) as f64;
    for c in 0..channels {
        for oy in 0..o {
            for ox in 0..o {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (c * side + oy * factor + dy) * side + ox * factor;
                    acc += x[row..row + factor].iter().sum::<f64>();
                }
                y[(c * o + oy) * o + ox] = acc * scale;
            }
        }
    }
}
