//! Raster containers and conversions between 8-bit images and float planes.
//!
//! Float rasters are `ndarray` arrays laid out channel-major:
//! `(channels, height, width)`; single planes are `(height, width)`.
//! Pixel `(x, y)` has its origin at the top-left, x rightward, y downward.

use std::path::Path;

use image::{imageops, GrayImage, Luma, RgbImage, RgbaImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub type Raster<T> = Array3<T>;
pub type Plane<T> = Array2<T>;

/// Binary raster with values strictly in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * (self.width as usize) + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[(y as usize) * w + x as usize] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Raw values, row-major, each 0 or 1.
    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        check_dims("mask union", self.dimensions(), other.dimensions())?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// Interprets a grayscale image: any nonzero pixel is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(w, h, |x, y| img.get_pixel(x, y).0[0] > 127)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        Ok(Self::from_gray(&img))
    }

    /// Float coverage plane resampled to `width × height` (bilinear on 0/255).
    pub fn to_plane<T: Scalar>(&self, width: u32, height: u32) -> Plane<T> {
        let gray = self.to_gray();
        let resized = if (width, height) == self.dimensions() {
            gray
        } else {
            imageops::resize(&gray, width, height, imageops::FilterType::Triangle)
        };
        Array2::from_shape_fn((height as usize, width as usize), |(y, x)| {
            lit::<T>(resized.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
        })
    }
}

pub fn check_dims(what: &str, a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Splits an RGBA image into a `(3, H, W)` color raster and an `(H, W)` alpha plane in [0, 1].
pub fn rgba_to_planes<T: Scalar>(img: &RgbaImage) -> (Raster<T>, Plane<T>) {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut rgb = Array3::zeros((3, h, w));
    let mut alpha = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            rgb[[c, y, x]] = lit::<T>(p.0[c] as f64 / 255.0);
        }
        alpha[[y, x]] = lit::<T>(p.0[3] as f64 / 255.0);
    }
    (rgb, alpha)
}

pub fn rgb_to_raster<T: Scalar>(img: &RgbImage) -> Raster<T> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        lit::<T>(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    })
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Packs a color raster and an alpha plane into an 8-bit RGBA image.
pub fn planes_to_rgba<T: Scalar>(rgb: &Raster<T>, alpha: &Plane<T>) -> RgbaImage {
    let (_, h, w) = rgb.dim();
    RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgba([
            quantize(rgb[[0, y, x]]),
            quantize(rgb[[1, y, x]]),
            quantize(rgb[[2, y, x]]),
            quantize(alpha[[y, x]]),
        ])
    })
}

/// Reference-view target: image color premultiplied by the foreground mask,
/// alpha equal to the mask, both resampled to `width × height`.
pub fn foreground_target<T: Scalar>(
    image: &RgbaImage,
    foreground: &Mask,
    width: u32,
    height: u32,
) -> Result<(Raster<T>, Plane<T>)> {
    check_dims("foreground target", image.dimensions(), foreground.dimensions())?;
    let masked = RgbaImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y).0;
        if foreground.get(x, y) {
            image::Rgba([p[0], p[1], p[2], 255])
        } else {
            image::Rgba([0, 0, 0, 0])
        }
    });
    let resized = if (width, height) == masked.dimensions() {
        masked
    } else {
        imageops::resize(&masked, width, height, imageops::FilterType::Triangle)
    };
    Ok(rgba_to_planes(&resized))
}

pub fn load_rgba(path: &Path) -> Result<RgbaImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgba8())
}

pub fn save_image<I>(img: &I, path: &Path) -> Result<()>
where
    I: ImageSave,
{
    img.save_to(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Internal bridge so one helper saves the different buffer types.
pub trait ImageSave {
    fn save_to(&self, path: &Path) -> image::ImageResult<()>;
}

impl ImageSave for RgbaImage {
    fn save_to(&self, path: &Path) -> image::ImageResult<()> {
        self.save(path)
    }
}

impl ImageSave for RgbImage {
    fn save_to(&self, path: &Path) -> image::ImageResult<()> {
        self.save(path)
    }
}
