//! Raw numeric kernels behind the tape primitives. Layouts are NCHW for
//! feature maps and OCkk for convolution weights; convolutions are stride 1
//! with "same" zero padding of `k / 2`.

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposes.
/// `a` is `m×k` after transposition, `b` is `k×n`, `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above), and the strides describe row-major or transposed views that stay
    // inside those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    k: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.height * self.width
    }
    fn ckk(&self) -> usize {
        self.in_ch * self.k * self.k
    }
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w, k, pad) = (d.height, d.width, d.k, d.pad());
    for c in 0..d.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * h * w..(row + 1) * h * w];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    let dst = &mut out[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, v) in dst.iter_mut().enumerate() {
                        let sj = j as isize + dj;
                        *v = if sj < 0 || sj >= w as isize {
                            0.0
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let (h, w, k, pad) = (d.height, d.width, d.k, d.pad());
    for c in 0..d.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * h * w..(row + 1) * h * w];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let s = &src[i * w..(i + 1) * w];
                    for (j, v) in s.iter().enumerate() {
                        let sj = j as isize + dj;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, c, h, w]`, `weight: [o, c, k, k]` → `[n, o, h, w]`.
pub fn conv2d(x: &[f64], x_shape: &[usize], weight: &[f64], w_shape: &[usize]) -> Vec<f64> {
    let d = ConvDims {
        batch: x_shape[0],
        in_ch: x_shape[1],
        out_ch: w_shape[0],
        height: x_shape[2],
        width: x_shape[3],
        k: w_shape[2],
    };
    let (hw, ckk) = (d.hw(), d.ckk());
    let mut out = vec![0.0; d.batch * d.out_ch * hw];
    let mut cols = vec![0.0; ckk * hw];
    for n in 0..d.batch {
        im2col(&x[n * d.in_ch * hw..(n + 1) * d.in_ch * hw], &d, &mut cols);
        let y = &mut out[n * d.out_ch * hw..(n + 1) * d.out_ch * hw];
        gemm(d.out_ch, ckk, hw, weight, false, &cols, false, y, false);
    }
    out
}

/// Adjoint of [`conv2d`] in its input: `g: [n, o, h, w]`, `weight: [o, c, k, k]`
/// → `[n, c, h, w]`.
pub fn conv2d_back_input(g: &[f64], g_shape: &[usize], weight: &[f64], w_shape: &[usize]) -> Vec<f64> {
    let d = ConvDims {
        batch: g_shape[0],
        in_ch: w_shape[1],
        out_ch: w_shape[0],
        height: g_shape[2],
        width: g_shape[3],
        k: w_shape[2],
    };
    let (hw, ckk) = (d.hw(), d.ckk());
    let mut out = vec![0.0; d.batch * d.in_ch * hw];
    let mut cols = vec![0.0; ckk * hw];
    for n in 0..d.batch {
        let gn = &g[n * d.out_ch * hw..(n + 1) * d.out_ch * hw];
        gemm(ckk, d.out_ch, hw, weight, true, gn, false, &mut cols, false);
        col2im_add(&cols, &d, &mut out[n * d.in_ch * hw..(n + 1) * d.in_ch * hw]);
    }
    out
}

/// Adjoint of [`conv2d`] in its weight: `x: [n, c, h, w]`, `g: [n, o, h, w]`
/// → `[o, c, k, k]`.
pub fn conv2d_back_weight(x: &[f64], x_shape: &[usize], g: &[f64], g_shape: &[usize], k: usize) -> Vec<f64> {
    let d = ConvDims {
        batch: x_shape[0],
        in_ch: x_shape[1],
        out_ch: g_shape[1],
        height: x_shape[2],
        width: x_shape[3],
        k,
    };
    let (hw, ckk) = (d.hw(), d.ckk());
    let mut out = vec![0.0; d.out_ch * ckk];
    let mut cols = vec![0.0; ckk * hw];
    for n in 0..d.batch {
        im2col(&x[n * d.in_ch * hw..(n + 1) * d.in_ch * hw], &d, &mut cols);
        let gn = &g[n * d.out_ch * hw..(n + 1) * d.out_ch * hw];
        gemm(d.out_ch, hw, ckk, gn, false, &cols, true, &mut out, true);
    }
    out
}

/// 2×2 stride-2 average pooling over the trailing two axes.
pub fn avg_pool2(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[(2 * i) * w + 2 * j];
                let b = src[(2 * i) * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let e = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b + c + e);
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling over the trailing two axes.
pub fn upsample2(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
