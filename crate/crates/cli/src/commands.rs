use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use emflow_core::imageops::AlignParams;
use emflow_core::segment::ReconcileParams;
use emflow_core::volume::{
    encode_png, label_color, load_gray_png, make_preview, save_gray_png, ChunkedVolume, ChunkedVolumeManifest, Dtype, VoxelGrid,
};
use emflow_workflow::api::render_preview;
use emflow_workflow::ingest::{IngestConfig, Ingestor};
use emflow_workflow::pipeline::STAGES;
use emflow_workflow::stages::{self, MaskStage, MontageStage, SegmentStage, SkeletonStage};
use emflow_workflow::store::{ts, JobFilter, JobSpec, JobStore};
use emflow_workflow::sweep::{run_sweep, sweep_base, DetectorConfig, SweepCorpus, SweepSpec};
use emflow_workflow::{
    define_pipeline, run_launcher_until, Dataset, LauncherOptions, PipelineConfig, PoolPolicy, StageConfig,
    SyntheticSpec,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{kv_map, typed_params, Config, DEFAULT_BIND, DEFAULT_STORE};
use crate::{
    Cli, Command, ConvertArgs, DbCommand, Global, IngestCommand, IngestJobArgs, LauncherCommand, ParamArgs,
    PipelineCommand, PreviewArgs, SweepCommand, SynthArgs, UsageError,
};

/// Synthetic generator settings kept next to a synthetic dataset so later
/// arrivals can be imaged the same way.
const SYNTH_FILE: &str = "synthetic.json";

struct Ctx {
    global: Global,
    cfg: Config,
}

impl Ctx {
    fn store_path(&self) -> PathBuf {
        self.global.store.clone().or_else(|| self.cfg.store.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
    }

    fn store(&self) -> Result<JobStore> {
        let path = self.store_path();
        JobStore::open(&path).with_context(|| format!("opening job store {}", path.display()))
    }

    fn dataset(&self) -> Result<Dataset> {
        let root = self
            .cfg
            .dataset_root(self.global.dataset.as_deref())
            .ok_or_else(|| UsageError("no dataset: pass --dataset or set `dataset` in the config".into()))?;
        Dataset::open(&root).with_context(|| format!("opening dataset {}", root.display()))
    }

    fn params<T: serde::de::DeserializeOwned + Serialize>(&self, stage: &str, overrides: &Map<String, Value>) -> Result<T> {
        typed_params(stage, &self.cfg.stage_params(stage, overrides))
    }

    /// JSON under `--json`, otherwise the human text.
    fn emit(&self, value: &impl Serialize, human: impl FnOnce() -> String) -> Result<()> {
        if self.global.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            let text = human();
            if !text.is_empty() {
                println!("{}", text.trim_end());
            }
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let ctx = Ctx { global: cli.global, cfg };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Montage { section, all, min_octave, max_octave, params } => {
            let mut ov = kv_map(&params.params);
            if let Some(v) = min_octave {
                ov.insert("min_octave_px".into(), v.into());
            }
            if let Some(v) = max_octave {
                ov.insert("max_octave_px".into(), v.into());
            }
            montage(&ctx, section, all, &ov)
        }
        Command::Align { pair, relax_only, params } => align(&ctx, pair, relax_only, &params),
        Command::Mask(p) => {
            let r = stages::mask_stage(&ctx.dataset()?, &ctx.params::<MaskStage>("mask", &kv_map(&p.params))?)?;
            ctx.emit(&r, || format!("mask: {} objects, {} voxels", r.objects, r.labeled_voxels))
        }
        Command::Segment { subvolume, params } => segment(&ctx, subvolume, &params),
        Command::Reconcile(p) => {
            let ds = ctx.dataset()?;
            let r = stages::reconcile_stage(&ds, &ctx.params::<ReconcileParams>("reconcile", &kv_map(&p.params))?)?;
            ctx.emit(&r, || format!("reconcile: {} objects, {} merge edges", r.objects, r.merge_edges))
        }
        Command::Mesh => {
            let r = stages::mesh_stage(&ctx.dataset()?)?;
            ctx.emit(&r, || format!("mesh: wrote {} OBJ files", r.files.len()))
        }
        Command::Skeletonize(p) => {
            let ds = ctx.dataset()?;
            let r = stages::skeletonize_stage(&ds, &ctx.params::<SkeletonStage>("skeletonize", &kv_map(&p.params))?)?;
            ctx.emit(&r, || format!("skeletonize: wrote {} skeletons", r.files.len()))
        }
        Command::Convert(a) => convert(&ctx, a),
        Command::Preview(a) => preview(&ctx, a),
        Command::Db(c) => db(&ctx, c),
        Command::Launcher(LauncherCommand::Run {
            min_workers,
            max_workers,
            scale_up_backlog,
            scale_down_idle_s,
            wall_limit_s,
            exit_when_idle_s,
        }) => {
            let mut policy = ctx.cfg.pool.unwrap_or_default();
            policy.min_workers = min_workers.unwrap_or(policy.min_workers);
            policy.max_workers = max_workers.unwrap_or(policy.max_workers);
            policy.scale_up_backlog = scale_up_backlog.unwrap_or(policy.scale_up_backlog);
            policy.scale_down_idle_s = scale_down_idle_s.unwrap_or(policy.scale_down_idle_s);
            policy.validate().map_err(|e| UsageError(e.to_string()))?;
            let opts = LauncherOptions { wall_limit_s, exit_when_idle_s, ..LauncherOptions::default() };
            launcher(&ctx, policy, &opts)
        }
        Command::Pipeline(PipelineCommand::Define { disable, max_attempts }) => pipeline(&ctx, &disable, max_attempts),
        Command::Sweep(SweepCommand::Run { spec, save }) => sweep(&ctx, spec.as_deref(), save),
        Command::Ingest(c) => ingest(&ctx, c),
        Command::Serve { bind } => serve(&ctx, bind),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec { sections: a.sections, seed: a.seed, ..SyntheticSpec::default() };
    spec.name = a.name.unwrap_or_else(|| {
        a.root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| spec.name.clone())
    });
    let ds = if a.empty { Dataset::create(&a.root, spec.info())? } else { spec.create(&a.root)? };
    emflow_core::volume::atomic_write(&ds.root.join(SYNTH_FILE), serde_json::to_string_pretty(&spec)?.as_bytes())?;
    ctx.emit(&ds.info, || {
        format!(
            "created {} at {} ({} sections, canvas {:?})",
            ds.name(),
            ds.root.display(),
            if a.empty { 0 } else { ds.info.num_sections },
            ds.section_dims()
        )
    })
}

fn montage(ctx: &Ctx, section: Option<u32>, all: bool, ov: &Map<String, Value>) -> Result<()> {
    let ds = ctx.dataset()?;
    let p: MontageStage = ctx.params("montage", ov)?;
    let sections = match (section, all) {
        (Some(s), _) => vec![s],
        (None, true) => ds.raw_sections(),
        (None, false) => return Err(UsageError("montage needs --section N or --all".into()).into()),
    };
    let mut reports = Vec::new();
    for s in sections {
        reports.push(stages::montage_stage(&ds, s, &p)?);
    }
    let out = if reports.len() == 1 { serde_json::to_value(&reports[0])? } else { serde_json::to_value(&reports)? };
    ctx.emit(&out, || {
        reports
            .iter()
            .map(|r| format!("section {}: {:?} canvas {}x{}\n", r.section, r.status, r.canvas_dims[0], r.canvas_dims[1]))
            .collect()
    })
}

fn align(ctx: &Ctx, pair: Option<u32>, relax_only: bool, params: &ParamArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let p: AlignParams = ctx.params("align", &kv_map(&params.params))?;
    let n = ds.info.num_sections as u32;
    let pairs: Vec<u32> = match (pair, relax_only) {
        (Some(k), _) => vec![k],
        (None, true) => vec![],
        (None, false) => (0..n.saturating_sub(1)).collect(),
    };
    let mut out = json!({});
    let mut text = String::new();
    let mut reports = Vec::new();
    for k in pairs {
        let r = stages::align_stage(&ds, k, &p)?;
        text.push_str(&format!("pair {k}: mean residual {:.3} px over {} nodes\n", r.mean_residual_px, r.nodes));
        reports.push(r);
    }
    out["pairs"] = serde_json::to_value(&reports)?;
    if pair.is_none() {
        let r = stages::relax_stage(&ds, &p)?;
        text.push_str(&format!("relaxed {} sections into volume {:?}\n", r.sections, r.dims));
        out["relax"] = serde_json::to_value(&r)?;
    }
    ctx.emit(&out, || text)
}

fn segment(ctx: &Ctx, subvolume: Option<String>, params: &ParamArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let p: SegmentStage = ctx.params("segment", &kv_map(&params.params))?;
    let names: Vec<String> = match subvolume {
        Some(s) => vec![s],
        None => ds.grid()?.iter().map(|s| s.name()).collect(),
    };
    let mut out = Map::new();
    for name in &names {
        out.insert(name.clone(), serde_json::to_value(stages::segment_stage(&ds, name, &p)?)?);
    }
    ctx.emit(&out, || {
        out.iter().map(|(k, v)| format!("{k}: {} objects, {} voxels\n", v["objects"], v["labeled_voxels"])).collect()
    })
}

fn is_volume(p: &Path) -> bool {
    ChunkedVolume::exists(p)
}

fn convert(ctx: &Ctx, a: ConvertArgs) -> Result<()> {
    if is_volume(&a.input) {
        let vol = ChunkedVolume::open(&a.input)?;
        let grid = vol.read_level(0)?;
        std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
        let [w, h, d] = grid.dims();
        for z in 0..d {
            let path = a.output.join(format!("slice_{z:04}.png"));
            match grid.dtype() {
                Dtype::Gray8 => save_gray_png(&grid.slice_image(z)?, &path)?,
                Dtype::Label32 => {
                    let png = encode_png(&image::DynamicImage::ImageRgb8(label_slice(&grid, z)?))?;
                    emflow_core::volume::atomic_write(&path, &png)?;
                }
            }
        }
        let out = json!({ "slices": d, "dims": [w, h, d], "output": a.output });
        return ctx.emit(&out, || format!("wrote {d} slices of {w}x{h} to {}", a.output.display()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} is neither a chunked volume nor a directory of PNG slices", a.input.display());
    }
    let first = load_gray_png(&files[0])?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize * files.len());
    for f in &files {
        let img = load_gray_png(f)?;
        if img.dimensions() != (w, h) {
            bail!("{} is {:?}, expected {:?}", f.display(), img.dimensions(), (w, h));
        }
        data.extend_from_slice(img.as_raw());
    }
    let vs = [a.voxel_size[0], a.voxel_size[1], a.voxel_size[2]];
    let dims = [w as usize, h as usize, files.len()];
    let grid = VoxelGrid::from_gray(dims, vs, data)?;
    let name = a.output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into());
    let m = ChunkedVolumeManifest::with_default_pyramid(name, Dtype::Gray8, dims, vs, false)?;
    let vol = ChunkedVolume::create(m, &a.output)?;
    vol.write_cutout([0, 0, 0], &grid)?;
    vol.build_pyramid()?;
    let out = json!({ "dims": dims, "levels": vol.manifest().num_levels, "output": a.output });
    ctx.emit(&out, || format!("wrote volume {:?} with {} levels to {}", dims, vol.manifest().num_levels, a.output.display()))
}

/// Label slice `z` in the preview colors.
fn label_slice(grid: &VoxelGrid, z: usize) -> Result<image::RgbImage> {
    let [w, h, _] = grid.dims();
    let labels = grid.labels()?;
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(label_color(labels[grid.index(x as usize, y as usize, z)]))
    }))
}

fn preview(ctx: &Ctx, a: PreviewArgs) -> Result<()> {
    let png = match &a.volume {
        Some(v) => make_preview(&ChunkedVolume::open(v)?, &a.stage, a.section as usize, a.scale)?.to_png()?,
        None => render_preview(&ctx.dataset()?, &a.stage, a.section, a.scale)?,
    };
    emflow_core::volume::atomic_write(&a.out, &png)?;
    let (w, h) = image::load_from_memory(&png)?.to_luma8().dimensions();
    let out = json!({ "output": a.out, "width": w, "height": h, "scale": a.scale });
    ctx.emit(&out, || format!("wrote {}x{} preview to {}", w, h, a.out.display()))
}

fn db(ctx: &Ctx, c: DbCommand) -> Result<()> {
    let store = ctx.store()?;
    match c {
        DbCommand::Submit { app, args, deps, tags, max_attempts } => {
            let mut spec = JobSpec::new(app).deps(deps).max_attempts(max_attempts);
            spec.args = kv_map(&args);
            for (k, v) in tags {
                spec = spec.tag(&k, v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()));
            }
            let job = store.submit(spec)?;
            ctx.emit(&job, || format!("{} {} {}", job.id, job.app, job.state))
        }
        DbCommand::Ls { state, tag, app } => {
            let filter = JobFilter { state, tag: tag.as_deref().map(JobFilter::parse_tag).transpose()?, app };
            let jobs = store.list(&filter)?;
            ctx.emit(&jobs, || {
                let mut s = format!("{:<9} {:<12} {:<8} {:>8}  {}\n", "id", "app", "state", "attempts", "tags");
                for j in &jobs {
                    let tags: Vec<String> = j.tags.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    s.push_str(&format!(
                        "{:<9} {:<12} {:<8} {:>8}  {}\n",
                        j.id,
                        j.app,
                        j.state.as_str(),
                        format!("{}/{}", j.attempts, j.max_attempts),
                        tags.join(",")
                    ));
                }
                s
            })
        }
        DbCommand::Show { id } => {
            let job = store.get(&id)?;
            let transitions = store.transitions(&id)?;
            let out = json!({ "job": job, "transitions": transitions });
            ctx.emit(&out, || {
                let mut s = serde_json::to_string_pretty(&job).unwrap_or_default();
                s.push('\n');
                for t in &transitions {
                    let from = t.from.map(|f| f.as_str()).unwrap_or("-");
                    s.push_str(&format!("{} {} -> {}", ts(t.at), from, t.to));
                    if let Some(w) = &t.worker_id {
                        s.push_str(&format!(" [{w}]"));
                    }
                    if let Some(d) = &t.detail {
                        s.push_str(&format!(" {d}"));
                    }
                    s.push('\n');
                }
                s
            })
        }
        DbCommand::Rerun { id, overrides, token } => {
            let job = store.rerun(&id, &kv_map(&overrides), token.as_deref())?;
            ctx.emit(&job, || format!("{} rerun of {} ({})", job.id, id, job.state))
        }
        DbCommand::Kill { id } => {
            let job = store.kill(&id)?;
            ctx.emit(&job, || format!("{} {}", job.id, job.state))
        }
    }
}

fn launcher(ctx: &Ctx, policy: PoolPolicy, opts: &LauncherOptions) -> Result<()> {
    let store = ctx.store()?;
    let stop = Arc::new(AtomicBool::new(false));
    let summary = run_launcher_until(&store, policy, opts, stop)?;
    let counts = store.counts()?;
    let out = json!({
        "stop": summary.stop,
        "wall_s": summary.wall_s,
        "peak_workers": summary.peak_workers(),
        "jobs": summary.jobs,
        "recovered": summary.recovered,
        "counts": counts,
        "timeline": summary.timeline,
    });
    ctx.emit(&out, || {
        let mut s = format!(
            "launcher stopped ({:?}) after {:.1} s, {} job runs, peak {} workers\n",
            summary.stop,
            summary.wall_s,
            summary.jobs.len(),
            summary.peak_workers()
        );
        for (state, n) in &counts {
            s.push_str(&format!("  {state}: {n}\n"));
        }
        s
    })
}

fn pipeline(ctx: &Ctx, disable: &[String], max_attempts: Option<u32>) -> Result<()> {
    let ds = ctx.dataset()?;
    let store = ctx.store()?;
    let mut cfg = PipelineConfig::default();
    for stage in STAGES {
        let params = ctx.cfg.stage_params(stage, &Map::new());
        // validate now rather than inside every job
        match stage {
            "montage" => drop(typed_params::<MontageStage>(stage, &params)?),
            "align" | "relax" => drop(typed_params::<AlignParams>(stage, &params)?),
            "mask" => drop(typed_params::<MaskStage>(stage, &params)?),
            "segment" => drop(typed_params::<SegmentStage>(stage, &params)?),
            "reconcile" => drop(typed_params::<ReconcileParams>(stage, &params)?),
            "skeletonize" => drop(typed_params::<SkeletonStage>(stage, &params)?),
            _ => {}
        }
        let enabled = !disable.iter().any(|d| d == stage);
        *cfg.stage_mut(stage).expect("known stage") = Some(StageConfig { enabled, params, max_attempts });
    }
    let jobs = define_pipeline(&store, &ds, &cfg)?;
    ctx.emit(&jobs, || {
        let mut per: std::collections::BTreeMap<&str, usize> = Default::default();
        for j in &jobs {
            *per.entry(j.app.as_str()).or_default() += 1;
        }
        let parts: Vec<String> = STAGES.iter().filter_map(|s| per.get(s).map(|n| format!("{s} {n}"))).collect();
        format!("submitted {} jobs for {}: {}", jobs.len(), ds.name(), parts.join(", "))
    })
}

fn default_sweep() -> SweepSpec {
    let set = |min: u32, max: u32| json!({ "min_octave_px": min, "max_octave_px": max }).as_object().cloned().unwrap();
    SweepSpec {
        parameter_sets: vec![set(32, 512), set(128, 512), set(256, 512)],
        corpus: SweepCorpus::Synthetic { counts: [10, 10, 10, 5], seed: 2024 },
        detector: DetectorConfig::default(),
        base: sweep_base(),
    }
}

fn sweep(ctx: &Ctx, spec_path: Option<&Path>, save: bool) -> Result<()> {
    let spec = match spec_path {
        None => default_sweep(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
        }
    };
    let report = run_sweep(&spec)?;
    let id = if save { Some(ctx.store()?.save_sweep(&serde_json::to_value(&spec)?, &serde_json::to_value(&report)?)?) } else { None };
    let out = json!({ "id": id, "report": report });
    ctx.emit(&out, || {
        let mut s = report.table();
        if let Some(id) = &id {
            s.push_str(&format!("saved as {id}\n"));
        }
        s
    })
}

fn ingest_config(job: &IngestJobArgs) -> IngestConfig {
    IngestConfig { app: job.app.clone(), args: kv_map(&job.args), ..IngestConfig::default() }
}

fn ingest(ctx: &Ctx, c: IngestCommand) -> Result<()> {
    let ds = ctx.dataset()?;
    let store = ctx.store()?;
    let stop = AtomicBool::new(false);
    let events = match c {
        IngestCommand::Sim { cadence_s, sections, job } => {
            let synth: Option<SyntheticSpec> = match std::fs::read_to_string(ds.root.join(SYNTH_FILE)) {
                Ok(text) => Some(serde_json::from_str(&text)?),
                Err(_) => None,
            };
            if sections as usize > ds.info.num_sections {
                return Err(anyhow!(UsageError(format!(
                    "dataset {} has {} sections, asked for {sections}",
                    ds.name(),
                    ds.info.num_sections
                ))));
            }
            Ingestor::new(&store, &ds, ingest_config(&job))?.simulate(synth.as_ref(), cadence_s, sections, &stop)?
        }
        IngestCommand::Watch { poll_s, sections, timeout_s, job } => {
            Ingestor::new(&store, &ds, ingest_config(&job))?.watch(poll_s, sections, timeout_s, &stop)?
        }
    };
    ctx.emit(&events, || {
        events.iter().map(|e| format!("section {} arrived {}\n", e.section_index, ts(e.arrival))).collect()
    })
}

fn serve(ctx: &Ctx, bind: Option<String>) -> Result<()> {
    let addr_s = bind.or_else(|| ctx.cfg.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.to_string());
    let addr: std::net::SocketAddr =
        addr_s.parse().map_err(|e| UsageError(format!("bad bind address {addr_s:?}: {e}")))?;
    let store = ctx.store()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        eprintln!("serving on http://{addr}");
        emflow_workflow::api::serve(store, addr, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .with_context(|| format!("serving on {addr}"))
}
