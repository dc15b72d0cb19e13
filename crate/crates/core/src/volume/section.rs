use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::raster::load_gray_png;
use crate::error::{Error, IoContext, Result};

/// The raster tiles making up one physical section, in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionManifest {
    pub section_index: u32,
    pub tile_paths: Vec<PathBuf>,
    /// (rows, cols)
    pub layout: (usize, usize),
    pub nominal_overlap_frac: f64,
}

impl SectionManifest {
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.layout;
        if rows == 0 || cols == 0 || rows * cols != self.tile_paths.len() {
            return Err(Error::InvalidArgument(format!(
                "section {}: layout {rows}x{cols} does not match {} tiles",
                self.section_index,
                self.tile_paths.len()
            )));
        }
        if !(0.0..1.0).contains(&self.nominal_overlap_frac) {
            return Err(Error::InvalidArgument(format!(
                "nominal overlap {} outside [0,1)",
                self.nominal_overlap_frac
            )));
        }
        Ok(())
    }

    /// Reads a manifest; relative tile paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        let mut m: SectionManifest = serde_json::from_str(&text).at(path)?;
        if let Some(dir) = path.parent() {
            for p in &mut m.tile_paths {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).at(path)?;
        std::fs::write(path, text).at(path)
    }

    /// Loads all tiles, checking that they share dimensions.
    pub fn load_tiles(&self) -> Result<Vec<GrayImage>> {
        self.validate()?;
        let tiles = self
            .tile_paths
            .iter()
            .map(load_gray_png)
            .collect::<Result<Vec<_>>>()?;
        let dims = tiles[0].dimensions();
        if let Some((i, t)) = tiles.iter().enumerate().find(|(_, t)| t.dimensions() != dims) {
            return Err(Error::InvalidArgument(format!(
                "tile {} is {:?}, expected {:?}",
                self.tile_paths[i].display(),
                t.dimensions(),
                dims
            )));
        }
        Ok(tiles)
    }
}

/// Places tiles at integer offsets on a canvas sized to their bounding box.
/// Where tiles overlap, each contributes with a weight that grows linearly
/// with its distance from its own border.
pub fn compose_canvas(tiles: &[GrayImage], offsets: &[(i64, i64)]) -> Result<GrayImage> {
    if tiles.is_empty() || tiles.len() != offsets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tiles but {} offsets",
            tiles.len(),
            offsets.len()
        )));
    }
    let min_x = offsets.iter().map(|o| o.0).min().unwrap();
    let min_y = offsets.iter().map(|o| o.1).min().unwrap();
    let max_x = tiles.iter().zip(offsets).map(|(t, o)| o.0 + t.width() as i64).max().unwrap();
    let max_y = tiles.iter().zip(offsets).map(|(t, o)| o.1 + t.height() as i64).max().unwrap();
    let (w, h) = ((max_x - min_x) as usize, (max_y - min_y) as usize);
    let mut acc = vec![0f64; w * h];
    let mut wsum = vec![0f64; w * h];
    for (tile, &(ox, oy)) in tiles.iter().zip(offsets) {
        let (tw, th) = (tile.width() as i64, tile.height() as i64);
        let (bx, by) = (ox - min_x, oy - min_y);
        for y in 0..th {
            let wy = (y + 1).min(th - y) as f64;
            for x in 0..tw {
                let wx = (x + 1).min(tw - x) as f64;
                let weight = wx.min(wy);
                let i = ((by + y) as usize) * w + (bx + x) as usize;
                acc[i] += weight * tile.get_pixel(x as u32, y as u32)[0] as f64;
                wsum[i] += weight;
            }
        }
    }
    let data = acc
        .iter()
        .zip(&wsum)
        .map(|(&a, &s)| if s > 0.0 { (a / s + 0.5).floor().min(255.0) as u8 } else { 0 })
        .collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, data).expect("canvas size"))
}

/// Loads a section's tiles and renders them at the given per-tile offsets.
pub fn import_section(manifest: &SectionManifest, offsets: &[(i64, i64)]) -> Result<GrayImage> {
    let tiles = manifest.load_tiles()?;
    compose_canvas(&tiles, offsets)
}
