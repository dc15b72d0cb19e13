use image::{DynamicImage, GrayImage, RgbImage};

use super::grid::{Dtype, VoxelGrid};
use super::raster::encode_png;
use super::store::{reduce_blocks, ChunkedVolume, DownsampleMethod};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum PreviewImage {
    Gray(GrayImage),
    Color(RgbImage),
}

/// A downsampled 2D rendering of one section of an intermediate volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Preview {
    pub stage: String,
    pub section_index: usize,
    pub scale: u32,
    pub image: PreviewImage,
}

impl Preview {
    pub fn dimensions(&self) -> (u32, u32) {
        match &self.image {
            PreviewImage::Gray(g) => g.dimensions(),
            PreviewImage::Color(c) => c.dimensions(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let dynamic = match &self.image {
            PreviewImage::Gray(g) => DynamicImage::ImageLuma8(g.clone()),
            PreviewImage::Color(c) => DynamicImage::ImageRgb8(c.clone()),
        };
        encode_png(&dynamic)
    }
}

/// Deterministic pseudo-random color for a label; background is black.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    // splitmix64 finalizer
    let mut z = (label as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    // keep colors away from black so small objects stay visible
    [
        64 + (z & 0xBF) as u8,
        64 + ((z >> 8) & 0xBF) as u8,
        64 + ((z >> 16) & 0xBF) as u8,
    ]
}

/// Renders z-slice `section_index` of `volume` halved `log2(scale)` times.
pub fn make_preview(volume: &ChunkedVolume, stage: &str, section_index: usize, scale: u32) -> Result<Preview> {
    if scale == 0 || !scale.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("scale {scale} is not a power of two")));
    }
    let m = volume.manifest();
    let max_factor = 1u32 << (m.num_levels - 1).min(31);
    if scale > max_factor {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} exceeds the pyramid factor {max_factor}"
        )));
    }
    let dims = m.level_dims(0)?;
    if section_index >= dims[2] {
        return Err(Error::OutOfBounds {
            axis: 'z',
            start: section_index as u64,
            len: 1,
            limit: dims[2] as u64,
        });
    }
    let mut slice = volume.read_cutout([0, 0, section_index], [dims[0], dims[1], 1], 0)?;
    let method = match m.dtype {
        Dtype::Gray8 => DownsampleMethod::Mean,
        Dtype::Label32 => DownsampleMethod::Mode,
    };
    for _ in 0..scale.trailing_zeros() {
        slice = reduce_blocks(&slice, [2, 2, 1], method)?;
    }
    Ok(Preview {
        stage: stage.to_string(),
        section_index,
        scale,
        image: render_slice(&slice)?,
    })
}

fn render_slice(slice: &VoxelGrid) -> Result<PreviewImage> {
    let [w, h, _] = slice.dims();
    Ok(match slice.dtype() {
        Dtype::Gray8 => PreviewImage::Gray(slice.slice_image(0)?),
        Dtype::Label32 => {
            let labels = slice.labels()?;
            let mut img = RgbImage::new(w as u32, h as u32);
            for (i, px) in img.pixels_mut().enumerate() {
                *px = image::Rgb(label_color(labels[i]));
            }
            PreviewImage::Color(img)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::store::ChunkedVolumeManifest;

    fn volume(dtype: Dtype, dir: &std::path::Path) -> ChunkedVolume {
        let m = ChunkedVolumeManifest::new("p", dtype, [37, 21, 3], [1.0; 3], [16, 16, 2], 3, false).unwrap();
        ChunkedVolume::create(m, dir).unwrap()
    }

    #[test]
    fn scale_one_is_raw_slice() {
        let dir = tempfile::tempdir().unwrap();
        let vol = volume(Dtype::Gray8, dir.path());
        let data: Vec<u8> = (0..37 * 21 * 3).map(|i| (i % 256) as u8).collect();
        let grid = VoxelGrid::from_gray([37, 21, 3], [1.0; 3], data).unwrap();
        vol.write_cutout([0; 3], &grid).unwrap();
        let p = make_preview(&vol, "aligned", 1, 1).unwrap();
        assert_eq!(p.image, PreviewImage::Gray(grid.slice_image(1).unwrap()));
    }

    #[test]
    fn scale_four_dims_are_ceil_quarter() {
        let dir = tempfile::tempdir().unwrap();
        let vol = volume(Dtype::Gray8, dir.path());
        let p = make_preview(&vol, "aligned", 0, 4).unwrap();
        assert_eq!(p.dimensions(), (10, 6));
        assert!(make_preview(&vol, "aligned", 0, 8).is_err());
        assert!(make_preview(&vol, "aligned", 0, 3).is_err());
        assert!(make_preview(&vol, "aligned", 3, 1).is_err());
    }

    #[test]
    fn label_colors_are_stable_across_previews() {
        let dir = tempfile::tempdir().unwrap();
        let vol = volume(Dtype::Label32, dir.path());
        let mut labels = vec![0u32; 37 * 21 * 3];
        labels[0] = 42;
        labels[37 * 21 + 5] = 42;
        vol.write_cutout([0; 3], &VoxelGrid::from_labels([37, 21, 3], [1.0; 3], labels).unwrap())
            .unwrap();
        let a = make_preview(&vol, "seg", 0, 1).unwrap();
        let b = make_preview(&vol, "seg", 1, 1).unwrap();
        let (PreviewImage::Color(a), PreviewImage::Color(b)) = (&a.image, &b.image) else {
            panic!("label previews are colored");
        };
        assert_eq!(a.get_pixel(0, 0), b.get_pixel(5, 0));
        assert_eq!(a.get_pixel(1, 0).0, [0, 0, 0]);
        assert_eq!(make_preview(&vol, "seg", 0, 2).unwrap().to_png().unwrap(),
                   make_preview(&vol, "seg", 0, 2).unwrap().to_png().unwrap());
    }
}
