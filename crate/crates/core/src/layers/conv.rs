//! Patch expansion and pooling kernels over `[batch, channels, height, width]` data.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn fits(&self) -> bool {
        self.stride > 0
            && self.kernel_h > 0
            && self.kernel_w > 0
            && self.height >= self.kernel_h
            && self.width >= self.kernel_w
    }
}

/// Expands `batch` images into a `[batch·out_h·out_w, channels·kh·kw]` patch matrix
/// (valid padding).
pub fn im2col<T: Copy>(input: &[T], batch: usize, g: &Geometry, out: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    out.clear();
    out.reserve(batch * oh * ow * g.patch_len());
    for b in 0..batch {
        let img = &input[b * g.image_len()..(b + 1) * g.image_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..g.channels {
                    let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for ky in 0..g.kernel_h {
                        let row = (oy * g.stride + ky) * g.width + ox * g.stride;
                        out.extend_from_slice(&plane[row..row + g.kernel_w]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto image positions.
pub fn col2im<T: Copy + std::ops::Add<Output = T>>(
    patches: &[T],
    batch: usize,
    g: &Geometry,
    out: &mut [T],
) {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    for b in 0..batch {
        let img = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                let p = &patches[((b * oh + oy) * ow + ox) * plen..][..plen];
                let mut idx = 0;
                for c in 0..g.channels {
                    for ky in 0..g.kernel_h {
                        let row = c * g.height * g.width + (oy * g.stride + ky) * g.width;
                        for kx in 0..g.kernel_w {
                            let pos = row + ox * g.stride + kx;
                            img[pos] = img[pos] + p[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, channels, h, w]` (flat) → rows `(b, y, x)`, columns `c`.
pub fn channels_last<T: Copy>(data: &[T], batch: usize, channels: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        for p in 0..hw {
            for c in 0..channels {
                out.push(data[(b * channels + c) * hw + p]);
            }
        }
    }
    out
}

/// Inverse of [`channels_last`].
pub fn channels_first<T: Copy>(data: &[T], batch: usize, channels: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        for c in 0..channels {
            for p in 0..hw {
                out.push(data[(b * hw + p) * channels + c]);
            }
        }
    }
    out
}

/// Max pooling. Returns pooled values and the flat input index of each
/// maximum; ties go to the first position in row-major window order.
pub fn max_pool<T: Copy + PartialOrd>(
    input: &[T],
    planes: usize,
    g: &Geometry,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_len = g.height * g.width;
    let mut vals = Vec::with_capacity(planes * oh * ow);
    let mut idxs = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * g.stride * g.width + ox * g.stride;
                let mut best = input[best_i];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let i = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                vals.push(best);
                idxs.push(best_i as u32);
            }
        }
    }
    (vals, idxs)
}

pub fn avg_pool<T>(input: &[T], planes: usize, g: &Geometry, scale: T) -> Vec<T>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<Output = T> + Default,
{
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_len = g.height * g.width;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::default();
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        s = s + input[base + (oy * g.stride + ky) * g.width + ox * g.stride + kx];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]: spreads each output gradient uniformly over its window.
pub fn avg_pool_backward<T>(delta: &[T], planes: usize, g: &Geometry, scale: T, out: &mut [T])
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_len = g.height * g.width;
    for p in 0..planes {
        let base = p * plane_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let d = delta[(p * oh + oy) * ow + ox] * scale;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let i = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        out[i] = out[i] + d;
                    }
                }
            }
        }
    }
}
