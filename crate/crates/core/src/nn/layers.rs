//! Layers with hand-written backward passes. Parameters live in a flat buffer
//! owned by the network; layers only hold offsets into it.

use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// 2-D convolution, weights laid out `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, stride: usize, pad: usize, cin: usize, cout: usize) -> Self {
        let w = store.alloc(&format!("{name}.weight"), &[kernel, kernel, cin, cout]);
        let b = store.alloc(&format!("{name}.bias"), &[cout]);
        Conv2d { kernel, stride, pad, cin, cout, w, b }
    }

    /// Fully connected layer, applied to `1 x 1 x cin` tensors.
    pub fn dense(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Conv2d::new(store, name, 1, 1, 0, cin, cout)
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut ChaCha8Rng) {
        store.init_uniform(self.w, self.weight_len(), self.kernel * self.kernel * self.cin, gain, rng);
        store.fill(self.b, self.cout, 0.0);
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.b..self.b + self.cout
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }

    pub fn forward(&self, p: &[f64], x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.c, self.cin);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let (k, cin, cout) = (self.kernel, self.cin, self.cout);
        let bias = &p[self.b..self.b + cout];
        let mut y = Tensor3::zeros(oh, ow, cout);
        for oy in 0..oh {
            for ox in 0..ow {
                let out = &mut y.data[(oy * ow + ox) * cout..][..cout];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, x.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, x.w) else { continue };
                        let xin = x.pixel(iy, ix);
                        let wbase = self.w + (ky * k + kx) * cin * cout;
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = &p[wbase + ci * cout..][..cout];
                            for (o, &wv) in out.iter_mut().zip(wrow) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient
    /// when `need_dx` is set.
    pub fn backward(&self, p: &[f64], x: &Tensor3, dy: &Tensor3, g: &mut [f64], need_dx: bool) -> Option<Tensor3> {
        let (oh, ow) = (dy.h, dy.w);
        let (k, cin, cout) = (self.kernel, self.cin, self.cout);
        let mut dx = need_dx.then(|| Tensor3::zeros(x.h, x.w, x.c));
        for oy in 0..oh {
            for ox in 0..ow {
                let dyrow = &dy.data[(oy * ow + ox) * cout..][..cout];
                for (gb, &d) in g[self.b..self.b + cout].iter_mut().zip(dyrow) {
                    *gb += d;
                }
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, x.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, x.w) else { continue };
                        let wbase = self.w + (ky * k + kx) * cin * cout;
                        let xin = x.pixel(iy, ix);
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let gw = &mut g[wbase + ci * cout..][..cout];
                            for (gv, &d) in gw.iter_mut().zip(dyrow) {
                                *gv += v * d;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxin = dx.pixel_mut(iy, ix);
                            for (ci, dv) in dxin.iter_mut().enumerate() {
                                let wrow = &p[wbase + ci * cout..][..cout];
                                *dv += wrow.iter().zip(dyrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output `a`.
pub fn relu_backward(a: &Tensor3, mut da: Tensor3) -> Tensor3 {
    for (d, &v) in da.data.iter_mut().zip(&a.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    da
}

/// 2x2 max pool with stride 2.
pub fn max_pool2(x: &Tensor3) -> Tensor3 {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor3::zeros(oh, ow, x.c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let m = x
                    .at(2 * oy, 2 * ox, ch)
                    .max(x.at(2 * oy, 2 * ox + 1, ch))
                    .max(x.at(2 * oy + 1, 2 * ox, ch))
                    .max(x.at(2 * oy + 1, 2 * ox + 1, ch));
                let i = y.idx(oy, ox, ch);
                y.data[i] = m;
            }
        }
    }
    y
}

/// Routes each pooled gradient to the first maximal input of its window.
pub fn max_pool2_backward(x: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let mut dx = Tensor3::zeros(x.h, x.w, x.c);
    for oy in 0..dy.h {
        for ox in 0..dy.w {
            for ch in 0..x.c {
                let cand = [(2 * oy, 2 * ox), (2 * oy, 2 * ox + 1), (2 * oy + 1, 2 * ox), (2 * oy + 1, 2 * ox + 1)];
                let mut best = cand[0];
                for &(yy, xx) in &cand[1..] {
                    if x.at(yy, xx, ch) > x.at(best.0, best.1, ch) {
                        best = (yy, xx);
                    }
                }
                let i = dx.idx(best.0, best.1, ch);
                dx.data[i] += dy.at(oy, ox, ch);
            }
        }
    }
    dx
}

/// Mean over the spatial axes, giving a `1 x 1 x c` tensor.
pub fn global_avg_pool(x: &Tensor3) -> Tensor3 {
    let mut y = Tensor3::zeros(1, 1, x.c);
    for px in x.data.chunks_exact(x.c) {
        for (o, v) in y.data.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (x.h * x.w) as f64;
    y.data.iter_mut().for_each(|v| *v /= n);
    y
}

pub fn global_avg_pool_backward(h: usize, w: usize, dy: &Tensor3) -> Tensor3 {
    let n = (h * w) as f64;
    let row: Vec<f64> = dy.data.iter().map(|d| d / n).collect();
    let mut dx = Tensor3::zeros(h, w, dy.c);
    for px in dx.data.chunks_exact_mut(dy.c) {
        px.copy_from_slice(&row);
    }
    dx
}

/// Grid reduction that halves the spatial size by concatenating a stride-2 3x3
/// convolution (first `conv_channels` outputs) with a stride-2 2x2 max pool of
/// the input (remaining channels).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridReduce {
    pub conv: Conv2d,
}

impl HybridReduce {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, conv_channels: usize) -> Self {
        HybridReduce { conv: Conv2d::new(store, name, 3, 2, 1, cin, conv_channels) }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.cout + self.conv.cin
    }

    pub fn forward(&self, p: &[f64], x: &Tensor3) -> Result<Tensor3> {
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(Error::Shape(format!("grid reduction needs even spatial dims, got {}x{}", x.h, x.w)));
        }
        let conv = self.conv.forward(p, x);
        let pool = max_pool2(x);
        Ok(Tensor3::concat_channels(&[&conv, &pool]))
    }

    pub fn backward(&self, p: &[f64], x: &Tensor3, dy: &Tensor3, g: &mut [f64], need_dx: bool) -> Option<Tensor3> {
        let d = self.conv.cout;
        let dconv = dy.slice_channels(0, d);
        let dpool = dy.slice_channels(d, x.c);
        let dx_conv = self.conv.backward(p, x, &dconv, g, need_dx)?;
        let mut dx = max_pool2_backward(x, &dpool);
        dx.add_assign(&dx_conv);
        Some(dx)
    }
}
