//! Raster containers.

use crate::camera::CameraModel;
use crate::error::{Error, Result};

/// Variance carried by pixels without a depth measurement.
pub const MISS_VAR: f64 = 1e10;

/// Row-major H×W raster of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value at column `col`, row `row`.
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }
}

pub type Image = Grid<f64>;
pub type RgbImage = Grid<[f64; 3]>;

pub(crate) fn check_dims<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Paired z-depth (meters) and variance (meters²) rasters for one camera.
///
/// Depth 0 marks a miss; miss pixels carry variance [`MISS_VAR`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthVarImage {
    pub depth: Image,
    pub variance: Image,
    pub camera: CameraModel,
}

impl DepthVarImage {
    pub fn all_miss(camera: CameraModel) -> Self {
        let (w, h) = (camera.width, camera.height);
        Self {
            depth: Grid::filled(w, h, 0.0),
            variance: Grid::filled(w, h, MISS_VAR),
            camera,
        }
    }

    pub fn is_hit(&self, col: usize, row: usize) -> bool {
        *self.depth.get(col, row) > 0.0
    }

    pub fn hit_count(&self) -> usize {
        self.depth.as_slice().iter().filter(|&&d| d > 0.0).count()
    }
}
