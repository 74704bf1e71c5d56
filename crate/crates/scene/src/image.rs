//! Linear RGB float images and semantic/instance label maps, with PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::SceneError;

/// Row-major `height x width x 3` image of `f64` samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cropped(&self, x0: usize, y0: usize, width: usize, height: usize) -> ColorImage {
        let mut out = ColorImage::new(width, height);
        for y in 0..height {
            let src = 3 * ((y0 + y) * self.width + x0);
            out.data[3 * y * width..3 * (y + 1) * width]
                .copy_from_slice(&self.data[src..src + 3 * width]);
        }
        out
    }

    /// Mirror image about the vertical center line.
    pub fn flipped_horizontal(&self) -> ColorImage {
        let mut out = ColorImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Rounds every sample to the nearest 8-bit level, matching what a PNG round trip yields.
    pub fn quantized(&self) -> ColorImage {
        ColorImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| from_u8(to_u8(v))).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .expect("png encoding into memory");
        out.into_inner()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| SceneError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<ColorImage, SceneError> {
        let img = image::open(path).map_err(|e| SceneError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(ColorImage {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data: rgb.into_raw().into_iter().map(from_u8).collect(),
        })
    }
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Semantic class per pixel plus an instance overlay for foreground objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub width: usize,
    pub height: usize,
    /// 0 = other, 1 = road, 2 = sky.
    pub labels: Vec<u8>,
    /// 0 = no object, k = foreground object k.
    pub instance: Vec<u16>,
}

pub const LABEL_OTHER: u8 = 0;
pub const LABEL_ROAD: u8 = 1;
pub const LABEL_SKY: u8 = 2;

impl SemanticMask {
    pub fn new(width: usize, height: usize) -> Self {
        SemanticMask {
            width,
            height,
            labels: vec![LABEL_OTHER; width * height],
            instance: vec![0; width * height],
        }
    }

    /// Pixels that supervise background training: every pixel not covered by an object.
    pub fn background_pixels(&self) -> Vec<bool> {
        self.instance.iter().map(|&k| k == 0).collect()
    }

    pub fn region_pixels(&self, label: u8) -> Vec<bool> {
        self.labels
            .iter()
            .zip(&self.instance)
            .map(|(&l, &k)| l == label && k == 0)
            .collect()
    }

    pub fn instance_pixels(&self, object_id: u16) -> Vec<bool> {
        self.instance.iter().map(|&k| k == object_id).collect()
    }

    pub fn save(&self, labels_path: &Path, instance_path: &Path) -> Result<(), SceneError> {
        let labels: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.labels.clone())
                .expect("label buffer length");
        labels.save(labels_path).map_err(|e| SceneError::Image {
            path: labels_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let inst: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.instance.clone())
                .expect("instance buffer length");
        inst.save(instance_path).map_err(|e| SceneError::Image {
            path: instance_path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(labels_path: &Path, instance_path: &Path) -> Result<SemanticMask, SceneError> {
        let open = |p: &Path| {
            image::open(p).map_err(|e| SceneError::Image {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        };
        let labels = open(labels_path)?.to_luma8();
        let inst = open(instance_path)?.to_luma16();
        if labels.dimensions() != inst.dimensions() {
            return Err(SceneError::Image {
                path: instance_path.to_path_buf(),
                message: format!(
                    "instance map is {:?} but label map is {:?}",
                    inst.dimensions(),
                    labels.dimensions()
                ),
            });
        }
        let (w, h) = labels.dimensions();
        let labels = labels.into_raw();
        if let Some(bad) = labels.iter().find(|&&l| l > LABEL_SKY) {
            return Err(SceneError::Image {
                path: labels_path.to_path_buf(),
                message: format!("label value {bad} outside {{0=other, 1=road, 2=sky}}"),
            });
        }
        Ok(SemanticMask {
            width: w as usize,
            height: h as usize,
            labels,
            instance: inst.into_raw(),
        })
    }
}
