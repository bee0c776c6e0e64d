//! Per-pixel class label grids. Class indices are 0..K-1; 255 marks
//! ambiguous pixels that are excluded from losses and metrics.

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, v: u8) -> LabelMap {
        LabelMap {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        assert_eq!(data.len(), h * w, "label data length mismatch");
        LabelMap { h, w, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Nearest-neighbor resample to (nh, nw); each target pixel takes the
    /// label of the source pixel closest to its center.
    pub fn resample_nearest(&self, nh: usize, nw: usize) -> LabelMap {
        let mut out = LabelMap::filled(nh, nw, 0);
        for y in 0..nh {
            let sy = ((2 * y + 1) * self.h / (2 * nh)).min(self.h - 1);
            for x in 0..nw {
                let sx = ((2 * x + 1) * self.w / (2 * nw)).min(self.w - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    pub fn hflip(&self) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, self.w - 1 - x));
            }
        }
        out
    }

    /// Histogram over class ids (including the ignore value at index 255).
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}
