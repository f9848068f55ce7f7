//! Dense image buffers used throughout the pipeline.
//!
//! Pixels are stored row-major with `(x, y)` indexing `data[y * width + x]`.
//! Pixel centers sit at integer coordinates: pixel `(ix, iy)` samples the
//! continuous image plane at exactly `(ix, iy)`.

/// H x W x 3 image of f64 values (HDR or LDR depending on context).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_dims(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-pixel arithmetic mean of several images. Panics on empty input
    /// or mismatched dimensions.
    pub fn mean_of(images: &[&ColorImage]) -> ColorImage {
        assert!(!images.is_empty());
        let (w, h) = (images[0].width, images[0].height);
        let mut out = ColorImage::new(w, h);
        let inv = 1.0 / images.len() as f64;
        for img in images {
            assert!(img.width == w && img.height == h);
            for (dst, src) in out.data.iter_mut().zip(img.data.iter()) {
                dst[0] += src[0];
                dst[1] += src[1];
                dst[2] += src[2];
            }
        }
        for px in out.data.iter_mut() {
            px[0] *= inv;
            px[1] *= inv;
            px[2] *= inv;
        }
        out
    }

    pub fn scale(&self, factor: f64) -> ColorImage {
        let mut out = self.clone();
        for px in out.data.iter_mut() {
            px[0] *= factor;
            px[1] *= factor;
            px[2] *= factor;
        }
        out
    }
}

/// H x W scalar map (depth, alpha, event maps rendered as reals).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = y * self.width + x;
        self.data[i] = v;
    }

    pub fn same_dims(&self, other: &ScalarImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}
