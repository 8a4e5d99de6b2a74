use rand::Rng;

use crate::error::{Error, Result};

/// Dense `N×C×H×W` activations in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub(crate) fn check_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric { layer: layer.to_string() })
        }
    }
}

/// 2-D convolution with zero padding, stride, and channel groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// `out × (in/groups) × k × k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(groups > 0 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let fan_in = (in_channels / groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            groups,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Valid output range along one axis for kernel offset `k`.
    #[inline]
    fn valid_range(&self, k: usize, in_size: usize, out_size: usize) -> (usize, usize) {
        // in = out*stride + k - pad must lie in [0, in_size)
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi_excl = if in_size + self.pad > k {
            ((in_size + self.pad - k - 1) / self.stride + 1).min(out_size)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let mut out = Tensor4::zeros(x.n, self.out_channels, oh, ow);
        let icg = self.in_channels / self.groups;
        let ocg = self.out_channels / self.groups;
        let k = self.kernel;
        let s = self.stride;
        for n in 0..x.n {
            for oc in 0..self.out_channels {
                let g = oc / ocg;
                let out_start = out.idx(n, oc, 0, 0);
                let out_plane = &mut out.data[out_start..out_start + oh * ow];
                out_plane.iter_mut().for_each(|v| *v = self.bias[oc]);
                for ic_local in 0..icg {
                    let ic = g * icg + ic_local;
                    let in_plane = x.plane(n, ic);
                    for ky in 0..k {
                        let (y0, y1) = self.valid_range(ky, x.h, oh);
                        for kx in 0..k {
                            let (x0, x1) = self.valid_range(kx, x.w, ow);
                            let wv = self.weight[((oc * icg + ic_local) * k + ky) * k + kx];
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.pad;
                                let in_row = &in_plane[iy * x.w..(iy + 1) * x.w];
                                let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                                for ox in x0..x1 {
                                    out_row[ox] += wv * in_row[ox * s + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(&self, x: &Tensor4, grad_out: &Tensor4, grads: &mut Conv2d, need_input_grad: bool) -> Option<Tensor4> {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let icg = self.in_channels / self.groups;
        let ocg = self.out_channels / self.groups;
        let k = self.kernel;
        let s = self.stride;
        let mut grad_in = need_input_grad.then(|| x.zeros_like());
        for n in 0..x.n {
            for oc in 0..self.out_channels {
                let g = oc / ocg;
                let go = grad_out.plane(n, oc);
                grads.bias[oc] += go.iter().sum::<f64>();
                for ic_local in 0..icg {
                    let ic = g * icg + ic_local;
                    let in_plane = x.plane(n, ic);
                    let gin_start = x.idx(n, ic, 0, 0);
                    for ky in 0..k {
                        let (y0, y1) = self.valid_range(ky, x.h, oh);
                        for kx in 0..k {
                            let (x0, x1) = self.valid_range(kx, x.w, ow);
                            let widx = ((oc * icg + ic_local) * k + ky) * k + kx;
                            let wv = self.weight[widx];
                            let mut gw = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.pad;
                                let go_row = &go[oy * ow..(oy + 1) * ow];
                                let in_row = &in_plane[iy * x.w..(iy + 1) * x.w];
                                for ox in x0..x1 {
                                    gw += go_row[ox] * in_row[ox * s + kx - self.pad];
                                }
                                if let Some(gi) = grad_in.as_mut() {
                                    let row = &mut gi.data[gin_start + iy * x.w..gin_start + (iy + 1) * x.w];
                                    for ox in x0..x1 {
                                        row[ox * s + kx - self.pad] += wv * go_row[ox];
                                    }
                                }
                            }
                            grads.weight[widx] += gw;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    Tensor4::from_vec(x.n, x.c, x.h, x.w, x.data.iter().map(|v| v.max(0.0)).collect())
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor4, grad: &mut Tensor4) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let start = out.idx(n, c, 0, 0);
            for y in 0..oh {
                for xx in 0..ow {
                    out.data[start + y * ow + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor4) -> Tensor4 {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = Tensor4::zeros(grad.n, grad.c, h, w);
    for n in 0..grad.n {
        for c in 0..grad.c {
            let src = grad.plane(n, c);
            let start = out.idx(n, c, 0, 0);
            for y in 0..grad.h {
                for xx in 0..grad.w {
                    out.data[start + (y / 2) * w + xx / 2] += src[y * grad.w + xx];
                }
            }
        }
    }
    out
}

/// Spatial mean per `(n, c)`, returned as `N×C` rows.
pub fn global_avg_pool(x: &Tensor4) -> Vec<f64> {
    let area = (x.h * x.w) as f64;
    (0..x.n * x.c)
        .map(|i| x.data[i * x.h * x.w..(i + 1) * x.h * x.w].iter().sum::<f64>() / area)
        .collect()
}

pub fn global_avg_pool_backward(grad_pooled: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let area = (h * w) as f64;
    let mut out = Tensor4::zeros(n, c, h, w);
    for (i, g) in grad_pooled.iter().enumerate() {
        out.data[i * h * w..(i + 1) * h * w].iter_mut().for_each(|v| *v = g / area);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Tensor4) -> Tensor4 {
        let (oh, ow) = (conv.out_size(x.h), conv.out_size(x.w));
        let icg = conv.in_channels / conv.groups;
        let ocg = conv.out_channels / conv.groups;
        let mut out = Tensor4::zeros(x.n, conv.out_channels, oh, ow);
        for n in 0..x.n {
            for oc in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[oc];
                        for icl in 0..icg {
                            let ic = (oc / ocg) * icg + icl;
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight[((oc * icg + icl) * conv.kernel + ky) * conv.kernel + kx];
                                    acc += wv * x.data[x.idx(n, ic, iy as usize, ix as usize)];
                                }
                            }
                        }
                        let i = out.idx(n, oc, oy, ox);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(ic, oc, k, s, g, h) in &[(1, 4, 3, 2, 1, 8), (4, 4, 3, 2, 2, 7), (3, 6, 3, 1, 3, 5), (4, 2, 1, 1, 1, 4)] {
            let mut conv = Conv2d::new(ic, oc, k, s, g, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_tensor(&mut rng, 2, ic, h, h + 1);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w: compare against finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(4, 4, 3, 2, 2, &mut rng);
        let x = random_tensor(&mut rng, 1, 4, 6, 6);
        let out = conv.forward(&x);
        let g = random_tensor(&mut rng, out.n, out.c, out.h, out.w);
        let mut grads = conv.zeros_like();
        let gx = conv.backward(&x, &g, &mut grads, true).unwrap();
        let f = |c: &Conv2d, x: &Tensor4| -> f64 { c.forward(x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&conv, &xp) - f(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-8);
        }
        for i in [0, 3, 20, 71] {
            let mut cp = conv.clone();
            cp.weight[i] += h;
            let mut cm = conv.clone();
            cm.weight[i] -= h;
            let fd = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!((fd - grads.weight[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_roundtrip_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 1, 2, 3, 3);
        let up = upsample2(&x);
        assert_eq!(up.shape(), [1, 2, 6, 6]);
        let back = upsample2_backward(&up);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }
}
