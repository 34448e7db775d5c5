use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Dense `height x width x channels` tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!("{} values for a {h}x{w}x{c} tensor", data.len())));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor3]) -> Tensor3 {
        let (h, w) = (parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor3::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let mut off = 0;
                let dst = out.pixel_mut(y, x);
                for p in parts {
                    dst[off..off + p.c].copy_from_slice(p.pixel(y, x));
                    off += p.c;
                }
            }
        }
        out
    }

    /// Channels `[from, from + count)` as a new tensor.
    pub fn slice_channels(&self, from: usize, count: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.h, self.w, count);
        for y in 0..self.h {
            for x in 0..self.w {
                out.pixel_mut(y, x).copy_from_slice(&self.pixel(y, x)[from..from + count]);
            }
        }
        out
    }

    /// Bilinear resample of the normalized `window` to an `oh x ow` tensor.
    /// Pixel centers sit at half-integer positions; samples outside clamp to the edge.
    pub fn crop_resize(&self, window: &BBox, oh: usize, ow: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(oh, ow, self.c);
        let xs: Vec<(usize, usize, f64)> = (0..ow)
            .map(|u| sample_axis(window.xmin + (u as f64 + 0.5) / ow as f64 * window.width(), self.w))
            .collect();
        let ys: Vec<(usize, usize, f64)> = (0..oh)
            .map(|v| sample_axis(window.ymin + (v as f64 + 0.5) / oh as f64 * window.height(), self.h))
            .collect();
        for (v, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (u, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                let dst = out.pixel_mut(v, u);
                for ch in 0..dst.len() {
                    let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                    let bot = p10[ch] + (p11[ch] - p10[ch]) * fx;
                    dst[ch] = top + (bot - top) * fy;
                }
            }
        }
        out
    }
}

fn sample_axis(norm: f64, size: usize) -> (usize, usize, f64) {
    let pos = (norm * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, pos - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_round_trips() {
        let a = Tensor3::from_vec(2, 2, 1, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor3::from_vec(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let c = Tensor3::concat_channels(&[&a, &b]);
        assert_eq!(c.dims(), (2, 2, 3));
        assert_eq!(c.slice_channels(0, 1), a);
        assert_eq!(c.slice_channels(1, 2), b);
    }

    #[test]
    fn full_window_resize_to_same_size_is_identity() {
        let t = Tensor3::from_vec(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(t.crop_resize(&BBox::unit(), 4, 4), t);
    }

    #[test]
    fn half_window_upsamples_quadrant() {
        let t = Tensor3::from_vec(2, 2, 1, vec![1., 2., 3., 4.]).unwrap();
        let q = t.crop_resize(&BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 2, 2);
        // samples at pixel positions -0.25 and 0.25, clamped to pixel 0 on the low side
        assert_eq!(q.at(0, 0, 0), 1.0);
        assert!((q.at(0, 1, 0) - 1.25).abs() < 1e-12);
        assert!(Tensor3::from_vec(1, 1, 1, vec![]).is_err());
    }
}
