//! Per-sample kernels. Weights are row-major: dense `[out, in]`, conv `[out, in, k, k]`.

/// `y = W x (+ b)`, overwriting `y`.
pub(super) fn dense_forward(w: &[f32], b: Option<&[f32]>, x: &[f32], y: &mut [f32]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        *yo = dot + b.map_or(0.0, |b| b[o]);
    }
}

/// `gx += W^T gy`.
pub(super) fn dense_backward_input(w: &[f32], gy: &[f32], gx: &mut [f32]) {
    let n_in = gx.len();
    for (o, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        for (gxi, wi) in gx.iter_mut().zip(row) {
            *gxi += wi * g;
        }
    }
}

/// `gw += gy x^T`, `gb += gy`.
pub(super) fn dense_backward_params(x: &[f32], gy: &[f32], gw: &mut [f32], gb: &mut [f32]) {
    let n_in = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        if g == 0.0 {
            continue;
        }
        for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *gwi += g * xi;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }
}

pub(super) fn conv_forward(d: ConvDims, w: &[f32], b: Option<&[f32]>, x: &[f32], y: &mut [f32]) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.k);
    for o in 0..d.cout {
        let bias = b.map_or(0.0, |b| b[o]);
        let yo = &mut y[o * oh * ow..(o + 1) * oh * ow];
        yo.fill(bias);
        for c in 0..d.cin {
            let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            let wk = &w[(o * d.cin + c) * k * k..(o * d.cin + c + 1) * k * k];
            for p in 0..k {
                for q in 0..k {
                    let wv = wk[p * k + q];
                    for i in 0..oh {
                        let xrow = &xc[(i + p) * d.w + q..(i + p) * d.w + q + ow];
                        for (yv, xv) in yo[i * ow..(i + 1) * ow].iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// `gx += conv^T(gy; W)`.
pub(super) fn conv_backward_input(d: ConvDims, w: &[f32], gy: &[f32], gx: &mut [f32]) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.k);
    for o in 0..d.cout {
        let go = &gy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..d.cin {
            let gxc = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
            let wk = &w[(o * d.cin + c) * k * k..(o * d.cin + c + 1) * k * k];
            for p in 0..k {
                for q in 0..k {
                    let wv = wk[p * k + q];
                    for i in 0..oh {
                        let grow = &mut gxc[(i + p) * d.w + q..(i + p) * d.w + q + ow];
                        for (gv, g) in grow.iter_mut().zip(&go[i * ow..(i + 1) * ow]) {
                            *gv += wv * g;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_backward_params(d: ConvDims, x: &[f32], gy: &[f32], gw: &mut [f32], gb: &mut [f32]) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.k);
    for o in 0..d.cout {
        let go = &gy[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += go.iter().sum::<f32>();
        for c in 0..d.cin {
            let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
            let gwk = &mut gw[(o * d.cin + c) * k * k..(o * d.cin + c + 1) * k * k];
            for p in 0..k {
                for q in 0..k {
                    let mut acc = 0.0f32;
                    for i in 0..oh {
                        let xrow = &xc[(i + p) * d.w + q..(i + p) * d.w + q + ow];
                        acc += xrow.iter().zip(&go[i * ow..(i + 1) * ow]).map(|(a, b)| a * b).sum::<f32>();
                    }
                    gwk[p * k + q] += acc;
                }
            }
        }
    }
}

/// 2x2/stride-2 max pooling. Writes the winning input index for each output.
pub(super) fn maxpool_forward(c: usize, h: usize, w: usize, x: &[f32], y: &mut [f32], idx: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = ch * h * w;
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = ch * oh * ow + i * ow + j;
                y[o] = x[best];
                idx[o] = best;
            }
        }
    }
}
