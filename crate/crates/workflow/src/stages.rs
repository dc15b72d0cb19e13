//! Pipeline stages over a dataset directory. Jobs and the standalone CLI
//! subcommands call the same functions, so both produce identical files.

use std::path::Path;

use emflow_core::geometry::{export_mesh, export_skeleton, mesh_all, teasar_skeletonize, TeasarParams};
use emflow_core::imageops::{
    align_stack, match_pair, mean_residual, montage_section, render_aligned, AlignParams, DisplacementField,
    MontageParams, MontageReport, DEFAULT_FAILURE_TOLERANCE,
};
use emflow_core::segment::{
    apply_mask, flood_fill_segment, intensity_proxy_probability, reconcile, watershed3d, LabelVolume, MaskIds,
    Provenance, ReconcileParams, SeedKind, SeedList, SeedPolicy,
};
use emflow_core::volume::{
    atomic_write, load_gray_png, save_gray_png, ChunkedVolume, ChunkedVolumeManifest, SectionManifest, DEFAULT_CHUNK,
    VoxelGrid,
};
use image::GrayImage;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::apps::JobContext;
use crate::dataset::Dataset;
use crate::error::{io_at, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MontageStage {
    #[serde(flatten)]
    pub params: MontageParams,
    pub tolerance_frac: f64,
}

impl Default for MontageStage {
    fn default() -> Self {
        Self { params: MontageParams::default(), tolerance_frac: DEFAULT_FAILURE_TOLERANCE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskStage {
    pub blur_radius: usize,
    pub invert: bool,
    /// Watershed floor on the 0..=255 scale.
    pub floor: u8,
}

impl Default for MaskStage {
    fn default() -> Self {
        Self { blur_radius: 1, invert: false, floor: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentStage {
    pub t_low: u8,
    pub seed_spacing: usize,
}

impl Default for SegmentStage {
    fn default() -> Self {
        Self { t_low: 160, seed_spacing: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonStage {
    #[serde(flatten)]
    pub teasar: TeasarParams,
}

/// Parameters of every stage, as read from a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageParams {
    pub montage: MontageStage,
    pub align: AlignParams,
    pub mask: MaskStage,
    pub segment: SegmentStage,
    pub reconcile: ReconcileParams,
    pub skeletonize: SkeletonStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub pair: u32,
    pub mean_residual_px: f64,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxReport {
    pub sections: usize,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub objects: usize,
    pub labeled_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub objects: usize,
    pub merge_edges: usize,
    pub labeled_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub objects: Vec<u32>,
    pub files: Vec<String>,
}

fn stage_err(msg: impl Into<String>) -> Error {
    Error::Stage(msg.into())
}

/// Crops or zero-pads to `dims`, anchored at the top-left corner.
fn fit(img: &GrayImage, dims: (u32, u32)) -> GrayImage {
    let mut out = GrayImage::new(dims.0, dims.1);
    for y in 0..dims.1.min(img.height()) {
        for x in 0..dims.0.min(img.width()) {
            out.put_pixel(x, y, *img.get_pixel(x, y));
        }
    }
    out
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `grid` as a chunked volume at `root`, replacing an older volume of
/// different shape, and builds its preview pyramid.
/// Coarsest pyramid level of stage volumes is at most this wide.
const PREVIEW_EXTENT: usize = 64;

fn write_volume(root: &Path, name: &str, grid: &VoxelGrid, pyramid: bool) -> Result<()> {
    let dims = grid.dims();
    let mut levels = 1;
    if pyramid {
        // xy halving down to preview size
        let mut largest = dims[0].max(dims[1]);
        while largest > PREVIEW_EXTENT {
            largest = largest.div_ceil(2);
            levels += 1;
        }
    }
    let manifest = ChunkedVolumeManifest::new(name, grid.dtype(), dims, grid.voxel_size(), DEFAULT_CHUNK, levels, false)?;
    if ChunkedVolume::exists(root) && ChunkedVolume::open(root)?.manifest() != &manifest {
        std::fs::remove_dir_all(root).map_err(io_at(root))?;
    }
    let vol = ChunkedVolume::create(manifest, root)?;
    vol.write_cutout([0, 0, 0], grid)?;
    if pyramid {
        vol.build_pyramid()?;
    }
    Ok(())
}

fn read_volume(root: &Path) -> Result<VoxelGrid> {
    Ok(ChunkedVolume::open(root)?.read_level(0)?)
}

pub fn montage_stage(ds: &Dataset, section: u32, p: &MontageStage) -> Result<MontageReport> {
    let manifest = SectionManifest::load(ds.raw_manifest(section))?;
    let out = montage_section(&manifest, &p.params, p.tolerance_frac)?;
    save_gray_png(&out.canvas, ds.montage_png(section))?;
    write_json(&ds.montage_report(section), &serde_json::json!({ "report": out.report, "offsets": out.offsets }))?;
    Ok(out.report)
}

fn montaged(ds: &Dataset, section: u32) -> Result<GrayImage> {
    Ok(fit(&load_gray_png(ds.montage_png(section))?, ds.section_dims()))
}

/// Block-matches section `pair + 1` against section `pair`.
pub fn align_stage(ds: &Dataset, pair: u32, p: &AlignParams) -> Result<AlignReport> {
    if pair as usize + 1 >= ds.info.num_sections {
        return Err(stage_err(format!("pair {pair} needs sections {pair} and {}", pair + 1)));
    }
    let field = match_pair(&montaged(ds, pair)?, &montaged(ds, pair + 1)?, p)?;
    write_json(&ds.pair_field(pair), &field)?;
    Ok(AlignReport { pair, mean_residual_px: mean_residual(&field, p.min_confidence), nodes: field.vectors.len() })
}

/// Relaxes the stack against the pair fields and renders the aligned volume.
pub fn relax_stage(ds: &Dataset, p: &AlignParams) -> Result<RelaxReport> {
    let n = ds.info.num_sections;
    let dims = ds.section_dims();
    let fields = (0..n.saturating_sub(1) as u32)
        .map(|pair| read_json::<DisplacementField>(&ds.pair_field(pair)))
        .collect::<Result<Vec<_>>>()?;
    let stack = align_stack(dims, &fields, p)?;
    let rendered = (0..n as u32)
        .into_par_iter()
        .map(|s| Ok(render_aligned(&montaged(ds, s)?, &stack.meshes[s as usize])))
        .collect::<Result<Vec<GrayImage>>>()?;
    let mut data = Vec::with_capacity(dims.0 as usize * dims.1 as usize * n);
    for img in &rendered {
        data.extend_from_slice(img.as_raw());
    }
    let vdims = [dims.0 as usize, dims.1 as usize, n];
    let grid = VoxelGrid::from_gray(vdims, ds.info.voxel_size, data)?;
    write_volume(&ds.aligned_volume(), "aligned", &grid, true)?;
    let report = RelaxReport {
        sections: n,
        iterations: stack.relax.iter().map(|r| r.iterations).collect(),
        converged: stack.relax.iter().map(|r| r.converged).collect(),
        dims: vdims,
    };
    write_json(&ds.relax_report(), &report)?;
    Ok(report)
}

pub fn load_seeds(ds: &Dataset) -> Result<SeedList> {
    let path = ds.seeds();
    if !path.exists() {
        return Ok(SeedList::new(Vec::new()));
    }
    Ok(SeedList::load(&path)?)
}

/// Watershed from cell-body and vessel seeds; without such seeds the mask
/// is empty.
pub fn mask_stage(ds: &Dataset, p: &MaskStage) -> Result<LabelReport> {
    let gray = read_volume(&ds.aligned_volume())?;
    let seeds: Vec<_> = load_seeds(ds)?
        .seeds
        .into_iter()
        .filter(|s| !matches!(s.kind, Some(SeedKind::Neurite)))
        .collect();
    let mask = if seeds.is_empty() {
        VoxelGrid::from_labels(gray.dims(), gray.voxel_size(), vec![0; gray.len()])?
    } else {
        let prob = intensity_proxy_probability(&gray, p.blur_radius, p.invert)?;
        watershed3d(&prob, &SeedList::new(seeds), p.floor)?.grid
    };
    write_volume(&ds.mask_volume(), "mask", &mask, true)?;
    label_report(&mask)
}

fn label_report(grid: &VoxelGrid) -> Result<LabelReport> {
    let labels = grid.labels()?;
    let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
    let labeled_voxels = ids.len();
    ids.sort_unstable();
    ids.dedup();
    Ok(LabelReport { objects: ids.len(), labeled_voxels })
}

pub fn segment_stage(ds: &Dataset, subvolume: &str, p: &SegmentStage) -> Result<LabelReport> {
    let spec = ds
        .grid()?
        .into_iter()
        .find(|s| s.name() == subvolume)
        .ok_or_else(|| stage_err(format!("no subvolume {subvolume}")))?;
    let gray = ChunkedVolume::open(ds.aligned_volume())?.read_cutout(spec.offset, spec.dims, 0)?;
    let mask = ChunkedVolume::open(ds.mask_volume())?.read_cutout(spec.offset, spec.dims, 0)?;
    let labels = flood_fill_segment(&gray, Some(&mask), &SeedPolicy::Grid { spacing: p.seed_spacing }, p.t_low)?;
    write_volume(&ds.subvolume(subvolume), subvolume, &labels.grid, false)?;
    label_report(&labels.grid)
}

pub fn reconcile_stage(ds: &Dataset, p: &ReconcileParams) -> Result<ReconcileReport> {
    let parts = ds
        .grid()?
        .into_iter()
        .map(|spec| {
            let grid = read_volume(&ds.subvolume(&spec.name()))?;
            let lv = LabelVolume::new(grid, Provenance::Subvolume(spec.index))?;
            Ok((spec, lv))
        })
        .collect::<Result<Vec<_>>>()?;
    let (global, graph) = reconcile(&parts, p)?;
    let mask = read_volume(&ds.mask_volume())?;
    let merged = apply_mask(&global.grid, &mask, &MaskIds::AboveSegments)?;
    write_volume(&ds.seg_volume(), "seg", &merged, true)?;
    graph.save(ds.merge_graph())?;
    let r = label_report(&merged)?;
    Ok(ReconcileReport { objects: r.objects, merge_edges: graph.edges.len(), labeled_voxels: r.labeled_voxels })
}

fn reset_dir(dir: &Path, ext: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    for e in std::fs::read_dir(dir).map_err(io_at(dir))?.flatten() {
        if e.path().extension().and_then(|x| x.to_str()) == Some(ext) {
            std::fs::remove_file(e.path()).map_err(io_at(e.path()))?;
        }
    }
    Ok(())
}

pub fn mesh_stage(ds: &Dataset) -> Result<GeometryReport> {
    let seg = read_volume(&ds.seg_volume())?;
    let meshes = mesh_all(&seg, ds.info.voxel_size)?;
    reset_dir(&ds.mesh_dir(), "obj")?;
    let mut report = GeometryReport { objects: Vec::new(), files: Vec::new() };
    for (id, mesh) in &meshes {
        let path = ds.mesh_path(*id);
        export_mesh(mesh, &path)?;
        report.objects.push(*id);
        report.files.push(path.to_string_lossy().into_owned());
    }
    Ok(report)
}

pub fn skeletonize_stage(ds: &Dataset, p: &SkeletonStage) -> Result<GeometryReport> {
    let seg = read_volume(&ds.seg_volume())?;
    let mut ids: Vec<u32> = seg.labels()?.iter().copied().filter(|&l| l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    reset_dir(&ds.skeleton_dir(), "json")?;
    let paths = ids
        .par_iter()
        .map(|&id| {
            let sk = teasar_skeletonize(&seg, id, &p.teasar, ds.info.voxel_size)?;
            let path = ds.skeleton_path(id);
            export_skeleton(&sk, &path)?;
            Ok(path.to_string_lossy().into_owned())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeometryReport { objects: ids, files: paths })
}

fn params_arg<T: DeserializeOwned + Default>(ctx: &JobContext<'_>) -> Result<T> {
    match ctx.job.args.get("params") {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| stage_err(format!("bad params: {e}"))),
    }
}

fn u32_arg(ctx: &JobContext<'_>, key: &str) -> Result<u32> {
    ctx.job
        .arg_u64(key)
        .map(|v| v as u32)
        .ok_or_else(|| stage_err(format!("argument {key} must be a non-negative integer")))
}

/// Entry point of the stage apps in the built-in registry.
pub(crate) fn run_stage_job(stage: &str, ctx: &JobContext<'_>) -> Result<Value> {
    let root = ctx.job.arg_str("dataset").ok_or_else(|| stage_err("argument dataset must be a path"))?;
    let ds = Dataset::open(root)?;
    let out = match stage {
        "montage" => {
            let section = u32_arg(ctx, "section")?;
            let report = montage_stage(&ds, section, &params_arg(ctx)?)?;
            let status = serde_json::to_value(report.status)?;
            ctx.store.set_section_status(ds.name(), section, status.as_str().unwrap_or("OK"))?;
            serde_json::to_value(report)?
        }
        "align" => serde_json::to_value(align_stage(&ds, u32_arg(ctx, "pair")?, &params_arg(ctx)?)?)?,
        "relax" => serde_json::to_value(relax_stage(&ds, &params_arg(ctx)?)?)?,
        "mask" => serde_json::to_value(mask_stage(&ds, &params_arg(ctx)?)?)?,
        "segment" => {
            let name = ctx.job.arg_str("subvolume").ok_or_else(|| stage_err("argument subvolume must be i-j-k"))?;
            serde_json::to_value(segment_stage(&ds, name, &params_arg(ctx)?)?)?
        }
        "reconcile" => serde_json::to_value(reconcile_stage(&ds, &params_arg(ctx)?)?)?,
        "mesh" => serde_json::to_value(mesh_stage(&ds)?)?,
        "skeletonize" => serde_json::to_value(skeletonize_stage(&ds, &params_arg(ctx)?)?)?,
        other => return Err(stage_err(format!("unknown stage {other}"))),
    };
    ctx.log(&out.to_string());
    Ok(out)
}
