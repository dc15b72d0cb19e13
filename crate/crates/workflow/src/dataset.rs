use std::path::{Path, PathBuf};

use emflow_core::imageops::expected_canvas_dims;
use emflow_core::segment::{generate_grid, SubvolumeSpec};
use emflow_core::synth;
use emflow_core::volume::{atomic_write, save_gray_png, SectionManifest};
use image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

pub const DATASET_FILE: &str = "dataset.json";

/// Acquisition geometry and processing layout of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub num_sections: usize,
    /// (rows, cols)
    pub layout: (usize, usize),
    pub tile_dims: (u32, u32),
    pub nominal_overlap_frac: f64,
    pub voxel_size: [f64; 3],
    pub cube: [usize; 3],
    pub cube_overlap: [usize; 3],
}

/// A dataset directory:
///
/// ```text
/// dataset.json
/// raw/section_0000/{manifest.json, tile_R_C.png}
/// montage/section_0000.{png,json}
/// align/pair_0000.json, align/relax.json
/// volumes/{aligned,mask,seg}/
/// seg/I-J-K/
/// merge_graph.json  seeds.json
/// meshes/ID.obj  skeletons/ID.json
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
}

impl Dataset {
    /// Writes `dataset.json`, or opens the dataset if the same info is
    /// already there.
    pub fn create(root: impl AsRef<Path>, info: DatasetInfo) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let file = root.join(DATASET_FILE);
        if file.exists() {
            let existing = Self::open(&root)?;
            if existing.info != info {
                return Err(Error::Config(format!("{} exists with different settings", file.display())));
            }
            return Ok(existing);
        }
        std::fs::create_dir_all(&root).map_err(io_at(&root))?;
        atomic_write(&file, serde_json::to_string_pretty(&info)?.as_bytes())?;
        Ok(Self { root, info })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let file = root.join(DATASET_FILE);
        let text = std::fs::read_to_string(&file).map_err(io_at(&file))?;
        Ok(Self { root, info: serde_json::from_str(&text)? })
    }

    pub fn name(&self) -> &str {
        &self.info.name
    }

    /// Canvas size every montaged section is fitted to.
    pub fn section_dims(&self) -> (u32, u32) {
        let (w, h) = expected_canvas_dims(self.info.layout, self.info.tile_dims, self.info.nominal_overlap_frac);
        (w as u32, h as u32)
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        let (w, h) = self.section_dims();
        [w as usize, h as usize, self.info.num_sections]
    }

    pub fn grid(&self) -> Result<Vec<SubvolumeSpec>> {
        Ok(generate_grid(self.volume_dims(), self.info.cube, self.info.cube_overlap)?)
    }

    pub fn raw_dir(&self, section: u32) -> PathBuf {
        self.root.join("raw").join(format!("section_{section:04}"))
    }

    pub fn raw_manifest(&self, section: u32) -> PathBuf {
        self.raw_dir(section).join("manifest.json")
    }

    pub fn montage_png(&self, section: u32) -> PathBuf {
        self.root.join("montage").join(format!("section_{section:04}.png"))
    }

    pub fn montage_report(&self, section: u32) -> PathBuf {
        self.root.join("montage").join(format!("section_{section:04}.json"))
    }

    pub fn pair_field(&self, pair: u32) -> PathBuf {
        self.root.join("align").join(format!("pair_{pair:04}.json"))
    }

    pub fn relax_report(&self) -> PathBuf {
        self.root.join("align").join("relax.json")
    }

    pub fn aligned_volume(&self) -> PathBuf {
        self.root.join("volumes").join("aligned")
    }

    pub fn mask_volume(&self) -> PathBuf {
        self.root.join("volumes").join("mask")
    }

    pub fn seg_volume(&self) -> PathBuf {
        self.root.join("volumes").join("seg")
    }

    pub fn subvolume(&self, name: &str) -> PathBuf {
        self.root.join("seg").join(name)
    }

    pub fn merge_graph(&self) -> PathBuf {
        self.root.join("merge_graph.json")
    }

    pub fn seeds(&self) -> PathBuf {
        self.root.join("seeds.json")
    }

    pub fn mesh_dir(&self) -> PathBuf {
        self.root.join("meshes")
    }

    pub fn mesh_path(&self, id: u32) -> PathBuf {
        self.mesh_dir().join(format!("{id}.obj"))
    }

    pub fn skeleton_dir(&self) -> PathBuf {
        self.root.join("skeletons")
    }

    pub fn skeleton_path(&self, id: u32) -> PathBuf {
        self.skeleton_dir().join(format!("{id}.json"))
    }

    /// Section indices whose raw manifest exists.
    pub fn raw_sections(&self) -> Vec<u32> {
        let mut out: Vec<u32> = std::fs::read_dir(self.root.join("raw"))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("section_")?.parse().ok())
            .filter(|s| self.raw_manifest(*s).exists())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Simulated microscope: a textured field crossed by bright tubes running
/// through the stack, imaged tile by tile with stage jitter and a per-section
/// drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub sections: usize,
    pub layout: (usize, usize),
    pub tile: (u32, u32),
    pub overlap_frac: f64,
    /// Max per-tile stage jitter in pixels.
    pub jitter_px: i64,
    /// Max per-section drift in pixels.
    pub drift_px: i64,
    pub tubes: usize,
    pub tube_radius: (f64, f64),
    pub voxel_size: [f64; 3],
    pub cube: [usize; 3],
    pub cube_overlap: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            sections: 4,
            layout: (1, 2),
            tile: (192, 192),
            overlap_frac: 0.1,
            jitter_px: 3,
            drift_px: 2,
            tubes: 5,
            tube_radius: (9.0, 14.0),
            voxel_size: [4.0, 4.0, 40.0],
            cube: [192, 192, 4],
            cube_overlap: [32, 32, 0],
            seed: 1,
        }
    }
}

/// Intensity of tube interiors; the background texture stays below 130.
pub const TUBE_LEVEL: u8 = 215;
const MARGIN: u32 = 16;

impl SyntheticSpec {
    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            name: self.name.clone(),
            num_sections: self.sections,
            layout: self.layout,
            tile_dims: self.tile,
            nominal_overlap_frac: self.overlap_frac,
            voxel_size: self.voxel_size,
            cube: self.cube,
            cube_overlap: self.cube_overlap,
        }
    }

    fn world_dims(&self) -> (u32, u32) {
        let (w, h) = expected_canvas_dims(self.layout, self.tile, self.overlap_frac);
        (w as u32 + 2 * MARGIN, h as u32 + 2 * MARGIN)
    }

    /// Tube centerlines as (x0, y0, dx per section, dy per section, radius).
    fn tubes(&self) -> Vec<(f64, f64, f64, f64, f64)> {
        let mut r = synth::rng(self.seed ^ 0x7475_6265);
        let (w, h) = self.world_dims();
        let mut out: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
        let mut tries = 0;
        while out.len() < self.tubes && tries < 1000 {
            tries += 1;
            let rad = r.gen_range(self.tube_radius.0..=self.tube_radius.1);
            let pad = (MARGIN as f64 + rad + 4.0).min(w as f64 / 2.0 - 1.0).min(h as f64 / 2.0 - 1.0);
            let x = r.gen_range(pad..w as f64 - pad);
            let y = r.gen_range(pad..h as f64 - pad);
            let (vx, vy) = (r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
            let end = |x: f64, v: f64| x + v * self.sections as f64;
            let clear = out.iter().all(|t| {
                ((t.0 - x).powi(2) + (t.1 - y).powi(2)).sqrt() > t.4 + rad + 8.0
                    && ((end(t.0, t.2) - end(x, vx)).powi(2) + (end(t.1, t.3) - end(y, vy)).powi(2)).sqrt()
                        > t.4 + rad + 8.0
            });
            if clear {
                out.push((x, y, vx, vy, rad));
            }
        }
        out
    }

    /// Ground-truth image of section `z` in world coordinates.
    pub fn world_section(&self, z: u32) -> GrayImage {
        let (w, h) = self.world_dims();
        let base = synth::textured_image(w, h, 3.0, self.seed);
        let tubes = self.tubes();
        let mut img = GrayImage::new(w, h);
        let mut noise = synth::rng(self.seed.wrapping_add(1000 + z as u64));
        for (x, y, px) in img.enumerate_pixels_mut() {
            let inside = tubes.iter().any(|t| {
                let (cx, cy) = (t.0 + t.2 * z as f64, t.1 + t.3 * z as f64);
                (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= t.4 * t.4
            });
            px.0[0] = if inside {
                TUBE_LEVEL - noise.gen_range(0..12u8)
            } else {
                20 + (base.get_pixel(x, y).0[0] as u32 * 100 / 255) as u8
            };
        }
        img
    }

    /// Images section `z` into tiles under the dataset's raw directory.
    pub fn acquire_section(&self, ds: &Dataset, z: u32) -> Result<SectionManifest> {
        let world = self.world_section(z);
        let mut r = synth::rng(self.seed.wrapping_mul(31).wrapping_add(z as u64));
        let (tw, th) = self.tile;
        let ovx = (self.overlap_frac * tw as f64 + 0.5).floor() as i64;
        let ovy = (self.overlap_frac * th as f64 + 0.5).floor() as i64;
        let drift = (r.gen_range(-self.drift_px..=self.drift_px), r.gen_range(-self.drift_px..=self.drift_px));
        let dir = ds.raw_dir(z);
        std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let (rows, cols) = self.layout;
        let mut tile_paths = Vec::new();
        for row in 0..rows {
            for col in 0..cols {
                let j = if row + col == 0 {
                    (0, 0)
                } else {
                    (r.gen_range(-self.jitter_px..=self.jitter_px), r.gen_range(-self.jitter_px..=self.jitter_px))
                };
                let x = MARGIN as i64 + col as i64 * (tw as i64 - ovx) + j.0 + drift.0;
                let y = MARGIN as i64 + row as i64 * (th as i64 - ovy) + j.1 + drift.1;
                let tile = synth::crop(&world, x.max(0) as u32, y.max(0) as u32, tw, th);
                let name = format!("tile_{row}_{col}.png");
                save_gray_png(&tile, dir.join(&name))?;
                tile_paths.push(PathBuf::from(name));
            }
        }
        let manifest = SectionManifest {
            section_index: z,
            tile_paths,
            layout: self.layout,
            nominal_overlap_frac: self.overlap_frac,
        };
        manifest.save(ds.raw_manifest(z))?;
        Ok(manifest)
    }

    /// Creates the dataset and acquires every section.
    pub fn create(&self, root: impl AsRef<Path>) -> Result<Dataset> {
        let ds = Dataset::create(root, self.info())?;
        for z in 0..self.sections as u32 {
            self.acquire_section(&ds, z)?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { sections: 2, ..SyntheticSpec::default() };
        let ds = spec.create(dir.path()).unwrap();
        assert_eq!(ds.raw_sections(), vec![0, 1]);
        let m = SectionManifest::load(ds.raw_manifest(1)).unwrap();
        assert_eq!(m.tile_paths.len(), 2);
        assert_eq!(ds.section_dims(), (192 * 2 - 19, 192));
        let again = Dataset::open(dir.path()).unwrap();
        assert_eq!(again, ds);
        let other = DatasetInfo { num_sections: 9, ..spec.info() };
        assert!(Dataset::create(dir.path(), other).is_err());
    }

    #[test]
    fn tubes_are_bright_and_background_dark() {
        let spec = SyntheticSpec::default();
        let img = spec.world_section(0);
        let bright = img.pixels().filter(|p| p.0[0] >= 160).count();
        assert!(bright > 0);
        assert!(img.pixels().all(|p| p.0[0] < 130 || p.0[0] > 200));
    }
}
