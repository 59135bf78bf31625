//! Row-major 2D buffers for images, depth maps and masks.
//!
//! Pixel `(0, 0)` is the top-left corner and pixel centers sit at integer
//! coordinates. Supervision targets (sensor color/depth) are stored as `f32`;
//! everything on a differentiated path uses `f64`.

/// Row-major grid of `T` with `width * height` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn at(&self, idx: usize) -> T {
        self.data[idx]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_shape<U: Copy>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub type GrayF32 = Grid<f32>;
pub type GrayF64 = Grid<f64>;
pub type RgbF32 = Grid<[f32; 3]>;
pub type RgbF64 = Grid<[f64; 3]>;
pub type Mask = Grid<bool>;

impl Mask {
    pub fn count(&self) -> usize {
        self.data().iter().filter(|&&b| b).count()
    }
}

impl GrayF64 {
    /// Mean over pixels where `mask` is set; 0 if the mask is empty.
    pub fn masked_mean(&self, mask: &Mask) -> f64 {
        assert!(self.same_shape(mask));
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, m) in self.data().iter().zip(mask.data()) {
            if *m {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl RgbF64 {
    /// Rec. 601 luma in the source value range.
    pub fn luma(&self) -> GrayF64 {
        self.map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
    }

    pub fn to_f32(&self) -> RgbF32 {
        self.map(|[r, g, b]| [r as f32, g as f32, b as f32])
    }
}

impl RgbF32 {
    pub fn to_f64(&self) -> RgbF64 {
        self.map(|[r, g, b]| [r as f64, g as f64, b as f64])
    }

    /// Rec. 601 luma in the source value range.
    pub fn luma(&self) -> GrayF32 {
        self.map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
    }
}

impl GrayF32 {
    pub fn to_f64(&self) -> GrayF64 {
        self.map(|v| v as f64)
    }
}
