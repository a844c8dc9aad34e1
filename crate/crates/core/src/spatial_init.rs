//! Coarse placement from bounding boxes and monocular depth.

use std::path::Path;

use image::RgbaImage;
use ndarray::Array2;

use crate::backend::{with_retries, RetryPolicy};
use crate::error::{BackendError, Error, Result};
use crate::raster::{Mask, Plane};
use crate::scalar::{lit, to_f64, Scalar};
use crate::scene::{ObjectSpec, PlacementParams};
use crate::tensor_io::{self, DType};

/// Dense relative depth, one value per image pixel, indexed `[y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    values: Plane<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(values: Plane<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("depth map is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= T::zero()) {
            return Err(Error::validation(format!(
                "depth values must be finite and positive, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Plane<T> {
        &self.values
    }

    pub fn width(&self) -> u32 {
        self.values.ncols() as u32
    }

    pub fn height(&self) -> u32 {
        self.values.nrows() as u32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_io::write(path, &self.values.clone().into_dyn(), DType::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = tensor_io::read::<T>(path)?;
        let a = a
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::validation(format!("{}: depth raster must be 2-D", path.display())))?;
        Self::new(a)
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            values: self.values.mapv(|v| lit(to_f64(v))),
        }
    }
}

/// Monocular depth backend.
pub trait DepthClient: Send + Sync {
    fn predict(&self, image: &RgbaImage) -> std::result::Result<Array2<f64>, BackendError>;
}

/// Depth falling linearly from `top` at the first row to `bottom` at the last,
/// the usual layout of a ground plane seen from the front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampDepth {
    pub top: f64,
    pub bottom: f64,
}

impl Default for RampDepth {
    fn default() -> Self {
        Self { top: 3.0, bottom: 1.0 }
    }
}

impl DepthClient for RampDepth {
    fn predict(&self, image: &RgbaImage) -> std::result::Result<Array2<f64>, BackendError> {
        let (w, h) = image.dimensions();
        let denom = (h.max(2) - 1) as f64;
        Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, _)| {
            self.top + (self.bottom - self.top) * y as f64 / denom
        }))
    }
}

/// Same depth everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantDepth(pub f64);

impl DepthClient for ConstantDepth {
    fn predict(&self, image: &RgbaImage) -> std::result::Result<Array2<f64>, BackendError> {
        let (w, h) = image.dimensions();
        Ok(Array2::from_elem((h as usize, w as usize), self.0))
    }
}

/// Calls the depth backend and validates its output against the image.
pub fn estimate_depth<T: Scalar>(
    client: &dyn DepthClient,
    image: &RgbaImage,
    retry: &RetryPolicy,
) -> Result<DepthMap<T>> {
    let raw = with_retries(retry, "depth", None, || client.predict(image))?;
    let (w, h) = image.dimensions();
    if raw.dim() != (h as usize, w as usize) {
        return Err(Error::Backend {
            stage: "depth",
            object: None,
            message: format!("returned {:?} raster for a {w}x{h} image", raw.dim()),
        });
    }
    DepthMap::new(raw.mapv(lit)).map_err(|e| Error::Backend {
        stage: "depth",
        object: None,
        message: e.to_string(),
    })
}

// Boxes may extend past the image (the scale then exceeds 1), so only
// degeneracy is rejected here.
fn check_inputs(bbox: &ObjectSpec, image_size: (u32, u32)) -> Result<()> {
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::validation("image size must be positive"));
    }
    if bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max {
        return Err(Error::validation(format!("degenerate bbox {:?}", bbox.to_array())));
    }
    Ok(())
}

/// `s = max(W_b / W_I, H_b / H_I)`.
pub fn init_scale<T: Scalar>(bbox: &ObjectSpec, image_size: (u32, u32)) -> Result<T> {
    check_inputs(bbox, image_size)?;
    let sx = lit::<T>(bbox.width() as f64) / lit(image_size.0 as f64);
    let sy = lit::<T>(bbox.height() as f64) / lit(image_size.1 as f64);
    Ok(sx.max(sy))
}

/// Mean depth over the mask's foreground pixels.
pub fn average_object_depth<T: Scalar>(depth: &DepthMap<T>, mask: &Mask) -> Result<T> {
    if (depth.width(), depth.height()) != mask.dimensions() {
        return Err(Error::validation(format!(
            "depth map is {}x{} but mask is {}x{}",
            depth.width(),
            depth.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for ((y, x), &v) in depth.values.indexed_iter() {
        if mask.get(x as u32, y as u32) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateSegmentation { object: None });
    }
    Ok(sum / lit(n as f64))
}

/// `t = ((X_b - W_I/2) k, -(Y_b - H_I/2) k, d)` with `k = pixel_to_scene`.
pub fn init_translation<T: Scalar>(
    bbox: &ObjectSpec,
    image_size: (u32, u32),
    depth: T,
    pixel_to_scene: T,
) -> Result<[T; 3]> {
    check_inputs(bbox, image_size)?;
    if !(pixel_to_scene > T::zero()) || !pixel_to_scene.is_finite() {
        return Err(Error::validation("pixel_to_scene must be positive"));
    }
    if !depth.is_finite() {
        return Err(Error::validation("object depth must be finite"));
    }
    let (cx, cy) = bbox.center::<T>();
    let half_w = lit::<T>(image_size.0 as f64 / 2.0);
    let half_h = lit::<T>(image_size.1 as f64 / 2.0);
    Ok([(cx - half_w) * pixel_to_scene, -(cy - half_h) * pixel_to_scene, depth])
}

pub fn init_rotation<T: Scalar>() -> [T; 3] {
    [T::zero(); 3]
}

/// Full initialization for one object.
pub fn initialize_placement<T: Scalar>(
    bbox: &ObjectSpec,
    image_size: (u32, u32),
    depth: &DepthMap<T>,
    mask: &Mask,
    pixel_to_scene: T,
) -> Result<PlacementParams<T>> {
    let d = average_object_depth(depth, mask)?;
    Ok(PlacementParams {
        scale: init_scale(bbox, image_size)?,
        rotation: init_rotation(),
        translation: init_translation(bbox, image_size, d, pixel_to_scene)?,
    })
}

/// Default `pixel_to_scene` of `1 / W_I`.
pub fn default_pixel_to_scene<T: Scalar>(image_width: u32) -> T {
    T::one() / lit(image_width as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> ObjectSpec {
        ObjectSpec::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(init_scale::<f64>(&bb(0, 0, 400, 400), (400, 400)).unwrap(), 1.0);
        assert_eq!(init_scale::<f64>(&bb(0, 0, 200, 100), (400, 400)).unwrap(), 0.5);
        let b = bb(0, 0, 30, 90);
        assert_eq!(init_scale::<f64>(&b, (120, 60)).unwrap(), 1.5);
        let shifted = bb(50, 3, 80, 93);
        assert_eq!(init_scale::<f64>(&shifted, (120, 60)).unwrap(), 1.5);
    }

    #[test]
    fn translation_examples() {
        let t = init_translation::<f64>(&bb(100, 100, 300, 300), (400, 400), 2.0, 1.0).unwrap();
        assert_eq!(t, [0.0, 0.0, 2.0]);
        let t = init_translation::<f64>(&bb(250, 50, 350, 150), (400, 400), 1.5, 1.0).unwrap();
        assert_eq!(t, [100.0, 100.0, 1.5]);
        let t = init_translation::<f64>(&bb(350, 0, 400, 10), (400, 400), 1.0, 1.0 / 400.0).unwrap();
        assert!(t[0] <= 0.5 && t[0] >= -0.5);
        assert!(init_translation::<f64>(&bb(0, 0, 1, 1), (4, 4), 1.0, 0.0).is_err());
    }

    #[test]
    fn depth_examples() {
        let d = DepthMap::new(Array2::from_elem((4, 4), 2.0)).unwrap();
        let m = Mask::from_fn(4, 4, |x, _| x < 2);
        assert_eq!(average_object_depth(&d, &m).unwrap(), 2.0);
        let d = DepthMap::new(Array2::from_shape_fn((2, 2), |(y, x)| 1.0 + (y * 2 + x) as f64)).unwrap();
        let m = Mask::from_fn(2, 2, |x, y| (x, y) == (0, 0) || (x, y) == (0, 1));
        assert_eq!(average_object_depth(&d, &m).unwrap(), 2.0);
        assert!(matches!(
            average_object_depth(&d, &Mask::new(2, 2)),
            Err(Error::DegenerateSegmentation { .. })
        ));
        assert!(DepthMap::new(Array2::from_elem((1, 1), 0.0)).is_err());
    }

    #[test]
    fn ramp_mock_and_roundtrip() {
        let img = RgbaImage::new(3, 5);
        let d: DepthMap<f64> = estimate_depth(&RampDepth::default(), &img, &RetryPolicy::immediate(0)).unwrap();
        assert_eq!(d.values()[[0, 1]], 3.0);
        assert_eq!(d.values()[[4, 1]], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("depth.bin");
        d.save(&p).unwrap();
        assert_eq!(DepthMap::<f64>::load(&p).unwrap(), d);
    }

    #[test]
    fn rotation_is_zero() {
        assert_eq!(init_rotation::<f64>(), [0.0; 3]);
    }
}
