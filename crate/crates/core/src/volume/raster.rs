use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, IoContext, Result};

/// Loads an 8-bit grayscale PNG. Other pixel formats are converted to luma.
pub fn load_gray_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "tile file not found"),
        });
    }
    let img = image::open(path).at(path)?;
    Ok(img.into_luma8())
}

pub fn save_gray_png(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    image.save_with_format(path, ImageFormat::Png).at(path)
}

pub fn encode_png(image: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .at("<memory>")?;
    Ok(out.into_inner())
}
