//! PNG/PNM images and TSR1 tensors on disk.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

fn is_tensor_file(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("tsr"))
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

fn unit(v: u8) -> f32 {
    v as f32 / 255.0
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an RGB image as `[3,H,W]` in `[0,1]`. Grayscale inputs are
/// replicated; `.tsr` files are taken as-is and must have rank 3.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    if is_tensor_file(path) {
        let t = read_tensor(path)?;
        t.dims3("image")?;
        return Ok(t);
    }
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        unit(raw[p * 3 + c])
    }))
}

/// Reads a single-channel map as `[H,W]`: 8-bit grayscale scaled to `[0,1]`,
/// or a `.tsr` tensor of shape `[H,W]` or `[1,H,W]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    if is_tensor_file(path) {
        let t = read_tensor(path)?;
        return match t.shape() {
            [_, _] => Ok(t),
            [1, h, w] => {
                let (h, w) = (*h, *w);
                t.reshape(&[h, w])
            }
            s => Err(Error::shape(format!(
                "{}: expected [H,W] or [1,H,W], got {s:?}",
                path.display()
            ))),
        };
    }
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(&[h, w], img.as_raw().iter().map(|&v| unit(v)).collect())
}

/// Writes a `[3,H,W]` image in `[0,1]` as 8-bit RGB, format from the extension.
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3("image")?;
    if c != 3 {
        return Err(Error::shape(format!("write_rgb needs 3 channels, got {c}")));
    }
    let d = image.data();
    let buf = (0..h * w)
        .flat_map(|p| (0..3).map(move |c| byte(d[c * h * w + p])))
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    save(path, DynamicImage::ImageRgb8(img))
}

/// Writes a `[H,W]` map in `[0,1]` as 8-bit grayscale, or as TSR1 for `.tsr`.
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    if is_tensor_file(path) {
        return write_tensor(path, map);
    }
    let (h, w) = map.dims2("map")?;
    let img = GrayImage::from_raw(
        w as u32,
        h as u32,
        map.data().iter().map(|&v| byte(v)).collect(),
    )
    .expect("buffer size");
    save(path, DynamicImage::ImageLuma8(img))
}

/// Writes a binary `[H,W]` mask as 8-bit `{0,255}`; nonzero is foreground.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_gray(path, &mask.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}
