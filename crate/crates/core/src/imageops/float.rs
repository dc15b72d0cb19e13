use image::GrayImage;

/// Single-channel f64 raster used by the correlation kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// 2x2 box reduction; odd trailing rows/columns average what they have.
    pub fn halve(&self) -> Self {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = Vec::with_capacity(w * h);
        for oy in 0..h {
            for ox in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in 2 * oy..(2 * oy + 2).min(self.height) {
                    for x in 2 * ox..(2 * ox + 2).min(self.width) {
                        sum += self.at(x, y);
                        n += 1.0;
                    }
                }
                data.push(sum / n);
            }
        }
        Self { width: w, height: h, data }
    }

    /// Bilinear sample; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        const SLACK: f64 = 1e-9;
        if !(x >= -SLACK && y >= -SLACK && x <= (self.width - 1) as f64 + SLACK && y <= (self.height - 1) as f64 + SLACK) {
            return None;
        }
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }
}

/// Normalized cross-correlation of `b` placed at offset `(dx, dy)` in `a`'s
/// frame, over the pixels both images cover. `None` when the overlap is
/// smaller than `min_pixels` or either side is flat.
pub fn ncc_at(a: &FloatImage, b: &FloatImage, dx: i64, dy: i64, min_pixels: usize) -> Option<f64> {
    let x0 = dx.max(0);
    let y0 = dy.max(0);
    let x1 = (a.width as i64).min(dx + b.width as i64);
    let y1 = (a.height as i64).min(dy + b.height as i64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let n = ((x1 - x0) * (y1 - y0)) as usize;
    if n < min_pixels {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        let ra = &a.data[y as usize * a.width..];
        let rb = &b.data[(y - dy) as usize * b.width..];
        for x in x0..x1 {
            let va = ra[x as usize];
            let vb = rb[(x - dx) as usize];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    correlation(n as f64, sa, sb, saa, sbb, sab)
}

pub(crate) fn correlation(n: f64, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> Option<f64> {
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    let floor = 1e-9 * n;
    if va <= floor || vb <= floor {
        return None;
    }
    Some(((sab - sa * sb / n) / (va * vb).sqrt()).clamp(-1.0, 1.0))
}
