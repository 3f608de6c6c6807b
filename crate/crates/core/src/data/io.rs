//! PNG loading/saving and tensor conversion.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use s2i_tensor::Tensor;

use super::ImagePair;
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an image resized (stretched) to `size × size` as a `[C, H, W]`
/// tensor in `[0, 1]`; `channels` is 1 (luma) or 3 (RGB).
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Tensor> {
    let img = open(path)?;
    let s = size as u32;
    match channels {
        1 => {
            let g = image::imageops::resize(&img.to_luma8(), s, s, FilterType::Triangle);
            Ok(Tensor::from_vec(
                &[1, size, size],
                g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            ))
        }
        3 => {
            let rgb = image::imageops::resize(&img.to_rgb8(), s, s, FilterType::Triangle);
            let plane = size * size;
            let mut data = vec![0.0; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f64 / 255.0;
                }
            }
            Ok(Tensor::from_vec(&[3, size, size], data))
        }
        c => Err(Error::Validation(format!("unsupported channel count {c}"))),
    }
}

pub fn load_pair(
    sketch_path: &Path,
    photo_path: &Path,
    target_size: usize,
    identity_id: &str,
) -> Result<ImagePair> {
    let sketch = load_image(sketch_path, target_size, 1)?;
    let photo = load_image(photo_path, target_size, 3)?;
    ImagePair::new(sketch, photo, identity_id)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1|3, H, W]` tensor as PNG.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let plane = h * w;
    let d = img.data();
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer sized from tensor"),
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    buf.push(to_u8(d[ch * plane + i]));
                }
            }
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from tensor"),
            )
        }
        other => return Err(Error::Validation(format!("cannot save {other} channels"))),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynimg.save(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Broadcasts a 1-channel image to 3 channels (others pass through).
pub fn to_rgb(img: &Tensor) -> Tensor {
    if img.dim(0) == 3 {
        return img.clone();
    }
    let mut d = Vec::with_capacity(3 * img.numel());
    for _ in 0..3 {
        d.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[3, img.dim(1), img.dim(2)], d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let photo = Tensor::from_vec(
            &[3, 128, 128],
            (0..3 * 128 * 128).map(|i| (i % 255) as f64 / 255.0).collect(),
        );
        let sketch = Tensor::full(&[1, 128, 96], 1.0);
        let (pp, sp) = (dir.path().join("p.png"), dir.path().join("s.png"));
        save_png(&photo, &pp).unwrap();
        save_png(&sketch, &sp).unwrap();
        let pair = load_pair(&sp, &pp, 64, "a").unwrap();
        assert_eq!(pair.photo.shape(), &[3, 64, 64]);
        assert_eq!(pair.sketch.shape(), &[1, 64, 64]);
        assert!(pair.sketch.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_photo_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.png");
        save_png(&Tensor::full(&[1, 8, 8], 0.5), &sp).unwrap();
        let missing = dir.path().join("nope.png");
        let err = load_pair(&sp, &missing, 8, "a").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("nope.png"));
    }
}
