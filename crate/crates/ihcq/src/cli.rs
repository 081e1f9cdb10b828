//! The `ihcq` command line.
//!
//! Every command writes `<out>/<command>.json` holding `{manifest, result}`;
//! `ihcq rerun --report FILE` replays a report from its manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ihcq_core::annotations::rasterize;
use ihcq_core::embed::{
    cohort_similarity, mosaic, pixel_features, project_2d, resize_area, FeatureVector,
    Projection2D,
};
use ihcq_core::metrics::{compare_models, f1_from_counts, greedy_match, ReplicateScores};
use ihcq_core::quantify::{
    accuracy, auroc, bin_tps, cohens_kappa, compute_tps, confusion, consensus_category,
    cutoff_sweep, group_summary, TpsCategory,
};
use ihcq_core::slide::PatchImage;
use ihcq_core::stats;
use serde_json::{json, Value};

use crate::config::{ProjectionKind, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::{Slide, TileOutcome};
use crate::pipeline::{detect_slide, generate_slide, infer_slide, pmap_file_name, Backend};
use crate::report::{self, Report, RunManifest, TOOL};
use crate::tables::{self, ScatterRow, SlideScores};
use crate::{pmap, png};

#[derive(Debug, Parser)]
#[command(name = "ihcq", version, about = "Whole-slide IHC cell detection and TPS quantification")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for randomized commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for tile fan-out.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Built-in stain-deconvolution baseline.
    Deconv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Paint point annotations into a class label map PNG.
    Rasterize {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long)]
        radius: Option<u32>,
    },
    /// Write a probability map (PMAP) per tissue tile of a slide.
    Infer {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long, value_enum, default_value = "deconv")]
        backend: BackendKind,
    },
    /// Detect cells on a slide, inline or from per-tile PMAP files.
    Detect {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long, value_enum, conflicts_with = "pmaps")]
        backend: Option<BackendKind>,
        /// Directory of `tile_<gx>_<gy>.json` PMAP files.
        #[arg(long)]
        pmaps: Option<PathBuf>,
    },
    /// Tumor proportion score of a detections CSV.
    Tps {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        slide_id: Option<String>,
    },
    /// Greedy per-class matching of predictions against ground truth.
    Match {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        max_dist: Option<f64>,
    },
    /// Majority TPS category of three raters per slide.
    Consensus {
        #[arg(long)]
        ratings: PathBuf,
    },
    /// Kappa, accuracy, confusion, ROC and cutoff sweep of predicted TPS.
    Evaluate(EvalArgs),
    /// ROC curve of predicted TPS at a fixed ground-truth cutoff.
    Roc(EvalArgs),
    /// Accuracy as the second cutoff sweeps its range.
    Sweep(EvalArgs),
    /// Per-group mean and sample SD of TPS values.
    Groupstats {
        #[arg(long)]
        groups: PathBuf,
    },
    /// Generate a synthetic slide with known ground truth.
    Synth(SynthArgs),
    /// Patch features, 2D projection, mosaic and cohort similarity.
    Embed(EmbedArgs),
    /// Paired signed-rank comparison of two models' replicate scores.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        name_a: Option<String>,
        #[arg(long)]
        name_b: Option<String>,
    },
    /// Replay a report from its embedded run manifest.
    Rerun {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `slide_id,tps` or rater columns `slide_id,r1,r2,r3`.
    #[arg(long)]
    pub gt: PathBuf,
    /// `slide_id,tps`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Ground-truth TPS at or above which a slide is positive (default: the
    /// high cutoff).
    #[arg(long)]
    pub gt_cutoff: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub slide_id: Option<String>,
    #[arg(long)]
    pub grid_w: Option<u32>,
    #[arg(long)]
    pub grid_h: Option<u32>,
    #[arg(long)]
    pub n_cells: Option<u32>,
    #[arg(long)]
    pub pos_fraction: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Also write a synthetic PMAP per tile under `pmaps/`.
    #[arg(long)]
    pub pmaps: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Slide manifests; each slide is one cohort. Repeatable.
    #[arg(long)]
    pub slide: Vec<PathBuf>,
    /// Precomputed features `patch_id,cohort_id,f0..`.
    #[arg(long, conflicts_with = "slide")]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pca")]
    pub method: ProjectionKind,
    /// External projection `patch_id,u,v` (with `--method external`).
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Per-patch TPS `slide_id,tps` keyed by patch id, for `--features`.
    #[arg(long)]
    pub tps: Option<PathBuf>,
    #[arg(long)]
    pub grid_n: Option<u32>,
}

/// A finished command: its report path and lines for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub report_path: PathBuf,
    pub report: Report,
    pub stdout: Vec<String>,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    stdout: Vec<String>,
}

impl Ctx {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
}

/// Flags that never affect results and are left out of recorded commands.
const UNRECORDED: [&str; 3] = ["--out", "--config", "--workers"];

fn recorded_command(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if UNRECORDED.contains(&a.as_str()) {
            it.next();
        } else if !UNRECORDED.iter().any(|f| a.starts_with(&format!("{f}="))) {
            out.push(a.clone());
        }
    }
    out
}

fn parse(args: &[String]) -> Result<Cli> {
    use clap::error::ErrorKind;
    Cli::try_parse_from(args).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp
        | ErrorKind::DisplayVersion
        | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => Error::Help(e.to_string()),
        _ => Error::Usage(e.to_string()),
    })
}

/// Run with full argv (`args[0]` is the program name).
pub fn run(args: &[String]) -> Result<Outcome> {
    let cli = parse(args)?;
    if let Command::Rerun { report } = &cli.command {
        return rerun(report, &cli);
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    execute(cli.command, cfg, cli.out, recorded_command(args), report::now_unix())
}

fn rerun(report_path: &Path, cli: &Cli) -> Result<Outcome> {
    let old = report::read_report(report_path)?;
    if old.manifest.tool != TOOL {
        return Err(Error::format(report_path, format!("not an {TOOL} report")));
    }
    report::verify_inputs(&old.manifest.inputs)?;
    let mut argv = vec![TOOL.to_string()];
    argv.extend(old.manifest.command.iter().cloned());
    let replay = parse(&argv)?;
    if matches!(replay.command, Command::Rerun { .. }) {
        return Err(Error::Usage("a rerun report cannot be replayed".into()));
    }
    let mut cfg = RunConfig::from_snapshot(&old.manifest.config)?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    execute(
        replay.command,
        cfg,
        cli.out.clone(),
        old.manifest.command,
        old.manifest.created_unix,
    )
}

fn execute(
    command: Command,
    cfg: RunConfig,
    out: PathBuf,
    recorded: Vec<String>,
    created_unix: u64,
) -> Result<Outcome> {
    let mut ctx = Ctx {
        cfg,
        out,
        inputs: Vec::new(),
        stdout: Vec::new(),
    };
    let (name, result) = match command {
        Command::Rasterize {
            annotations,
            width,
            height,
            radius,
        } => ("rasterize", cmd_rasterize(&mut ctx, &annotations, width, height, radius)?),
        Command::Infer { slide, backend } => ("infer", cmd_infer(&mut ctx, &slide, backend)?),
        Command::Detect {
            slide,
            backend: _,
            pmaps,
        } => ("detect", cmd_detect(&mut ctx, &slide, pmaps.as_deref())?),
        Command::Tps {
            detections,
            slide_id,
        } => ("tps", cmd_tps(&mut ctx, &detections, slide_id)?),
        Command::Match { pred, gt, max_dist } => ("match", cmd_match(&mut ctx, &pred, &gt, max_dist)?),
        Command::Consensus { ratings } => ("consensus", cmd_consensus(&mut ctx, &ratings)?),
        Command::Evaluate(a) => ("evaluate", cmd_evaluate(&mut ctx, &a)?),
        Command::Roc(a) => ("roc", cmd_roc(&mut ctx, &a)?),
        Command::Sweep(a) => ("sweep", cmd_sweep(&mut ctx, &a)?),
        Command::Groupstats { groups } => ("groupstats", cmd_groupstats(&mut ctx, &groups)?),
        Command::Synth(a) => ("synth", cmd_synth(&mut ctx, &a)?),
        Command::Embed(a) => ("embed", cmd_embed(&mut ctx, &a)?),
        Command::Compare {
            a,
            b,
            name_a,
            name_b,
        } => ("compare", cmd_compare(&mut ctx, &a, &b, name_a, name_b)?),
        Command::Rerun { .. } => unreachable!("handled before dispatch"),
    };
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: recorded,
        config: ctx.cfg.snapshot(),
        inputs: report::digest_inputs(&ctx.inputs)?,
        created_unix,
    };
    let report = Report { manifest, result };
    let report_path = ctx.out.join(format!("{name}.json"));
    report::write_report(&report_path, &report)?;
    Ok(Outcome {
        report_path,
        report,
        stdout: ctx.stdout,
    })
}

fn validated(ctx: &Ctx) -> Result<()> {
    ctx.cfg.validate()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_rasterize(ctx: &mut Ctx, anns_path: &Path, w: u32, h: u32, radius: Option<u32>) -> Result<Value> {
    if let Some(r) = radius {
        ctx.cfg.disk_radius = r;
    }
    validated(ctx)?;
    ctx.input(anns_path);
    let anns = tables::read_annotations(anns_path)?;
    let map = rasterize(&anns, w, h, ctx.cfg.disk_radius)?;
    png::write_label_map(&ctx.out.join("labels.png"), &map)?;
    let count = |code: u8| map.values().iter().filter(|&&v| v == code).count();
    Ok(json!({
        "width": w,
        "height": h,
        "radius": ctx.cfg.disk_radius,
        "annotations": anns.len(),
        "pixels": { "TC_NEG": count(1), "TC_POS": count(2) },
        "label_map": "labels.png",
    }))
}

fn load_slide(ctx: &mut Ctx, path: &Path) -> Result<Slide> {
    let slide = Slide::load(path)?;
    ctx.inputs.extend(slide.input_files());
    Ok(slide)
}

fn cmd_infer(ctx: &mut Ctx, slide_path: &Path, _backend: BackendKind) -> Result<Value> {
    validated(ctx)?;
    let slide = load_slide(ctx, slide_path)?;
    let dir = ctx.out.join("pmaps");
    let (tiles, written) = infer_slide(&slide, &ctx.cfg.stain, &ctx.cfg.slide_options(), &dir)?;
    let names: Vec<String> = written
        .iter()
        .map(|p| format!("pmaps/{}", p.file_name().unwrap_or_default().to_string_lossy()))
        .collect();
    Ok(json!({
        "slide_id": slide.manifest.slide_id,
        "backend": "deconv",
        "tiles": tiles,
        "pmaps": names,
    }))
}

fn cmd_detect(ctx: &mut Ctx, slide_path: &Path, pmaps: Option<&Path>) -> Result<Value> {
    validated(ctx)?;
    let slide = load_slide(ctx, slide_path)?;
    let backend = match pmaps {
        Some(dir) => {
            for rec in slide.tiles_row_major() {
                let header = dir.join(pmap_file_name(rec.gx, rec.gy));
                if header.is_file() {
                    ctx.inputs.push(pmap::payload_path(&header));
                    ctx.inputs.push(header);
                }
            }
            Backend::Pmaps(dir.to_path_buf())
        }
        None => Backend::Deconv(ctx.cfg.stain),
    };
    let found = detect_slide(&slide, &backend, &ctx.cfg.slide_options())?;
    tables::write_detections(&ctx.out.join("detections.csv"), &found.detections)?;
    let n_pos: u64 = found.tiles.iter().map(|t| t.n_pos).sum();
    let n_neg: u64 = found.tiles.iter().map(|t| t.n_neg).sum();
    Ok(json!({
        "slide_id": found.slide_id,
        "backend": if pmaps.is_some() { "pmaps" } else { "deconv" },
        "n_detections": found.detections.len(),
        "n_neg": n_neg,
        "n_pos": n_pos,
        "tiles": found.tiles,
        "detections": "detections.csv",
    }))
}

fn cmd_tps(ctx: &mut Ctx, path: &Path, slide_id: Option<String>) -> Result<Value> {
    validated(ctx)?;
    ctx.input(path);
    let dets = tables::read_detections(path)?;
    let id = slide_id.unwrap_or_else(|| stem(path));
    let tps = compute_tps(id, &dets)?;
    let category = bin_tps(tps.tps, &ctx.cfg.cutoffs);
    Ok(json!({
        "slide_id": tps.slide_id,
        "n_pos": tps.n_pos,
        "n_neg": tps.n_neg,
        "tps": tps.tps,
        "category": category,
        "cutoffs": ctx.cfg.cutoffs,
    }))
}

fn cmd_match(ctx: &mut Ctx, pred: &Path, gt: &Path, max_dist: Option<f64>) -> Result<Value> {
    if let Some(d) = max_dist {
        ctx.cfg.max_dist = d;
    }
    validated(ctx)?;
    ctx.input(pred);
    ctx.input(gt);
    let preds = tables::read_detections(pred)?;
    let gts = tables::read_annotations(gt)?;
    let counts = greedy_match(&preds, &gts, ctx.cfg.max_dist)?;
    Ok(json!({
        "max_dist": ctx.cfg.max_dist,
        "counts": counts,
        "f1": f1_from_counts(&counts),
    }))
}

fn cmd_consensus(ctx: &mut Ctx, path: &Path) -> Result<Value> {
    validated(ctx)?;
    ctx.input(path);
    let SlideScores::Raters(panels) = tables::read_slide_scores(path)? else {
        return Err(Error::row(path, 1, "expected header `slide_id,r1,r2,r3`"));
    };
    let mut histogram: BTreeMap<&str, u64> = TpsCategory::ALL.iter().map(|c| (c.as_str(), 0)).collect();
    let slides: Vec<Value> = panels
        .iter()
        .map(|p| {
            let c = consensus_category(p, &ctx.cfg.cutoffs);
            *histogram.get_mut(c.category.as_str()).expect("all categories present") += 1;
            json!({
                "slide_id": p.slide_id,
                "tps_by_rater": p.tps_by_rater,
                "category": c.category,
                "no_majority": c.no_majority,
            })
        })
        .collect();
    Ok(json!({
        "cutoffs": ctx.cfg.cutoffs,
        "n": slides.len(),
        "histogram": TpsCategory::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), json!(histogram[c.as_str()])))
            .collect::<serde_json::Map<_, _>>(),
        "slides": slides,
    }))
}

/// Paired ground-truth and predicted TPS, in ground-truth file order.
///
/// Rater panels reduce to their median: the median falls in a bin exactly
/// when at least two raters do, and a three-way split lands in the middle
/// bin, so binning the median reproduces the consensus category at any
/// cutoffs.
struct Paired {
    ids: Vec<String>,
    gt: Vec<f64>,
    pred: Vec<f64>,
    no_majority: usize,
}

fn paired(ctx: &mut Ctx, a: &EvalArgs) -> Result<Paired> {
    ctx.input(&a.gt);
    ctx.input(&a.pred);
    let gt_rows: Vec<(String, f64, bool)> = match tables::read_slide_scores(&a.gt)? {
        SlideScores::Tps(rows) => rows.into_iter().map(|(id, t)| (id, t, false)).collect(),
        SlideScores::Raters(panels) => panels
            .into_iter()
            .map(|p| {
                let c = consensus_category(&p, &ctx.cfg.cutoffs);
                let m = stats::median(&p.tps_by_rater).expect("three raters");
                (p.slide_id, m, c.no_majority)
            })
            .collect(),
    };
    let pred: BTreeMap<String, f64> = tables::read_tps_table(&a.pred)?.into_iter().collect();
    let mut out = Paired {
        ids: Vec::new(),
        gt: Vec::new(),
        pred: Vec::new(),
        no_majority: 0,
    };
    for (id, t, nm) in gt_rows {
        let p = *pred.get(&id).ok_or_else(|| {
            Error::format(&a.pred, format!("no prediction for slide {id:?}"))
        })?;
        out.ids.push(id);
        out.gt.push(t);
        out.pred.push(p);
        out.no_majority += nm as usize;
    }
    if out.ids.is_empty() {
        return Err(Error::format(&a.gt, "no slides"));
    }
    Ok(out)
}

fn roc_value(ctx: &Ctx, a: &EvalArgs, p: &Paired) -> Result<(Value, Option<ihcq_core::quantify::Roc>)> {
    let cut = a.gt_cutoff.unwrap_or(ctx.cfg.cutoffs.high);
    let positive: Vec<bool> = p.gt.iter().map(|&t| t >= cut).collect();
    match auroc(&positive, &p.pred) {
        Ok(roc) => Ok((
            json!({ "gt_cutoff": cut, "auc": roc.auc, "points": roc.points }),
            Some(roc),
        )),
        Err(ihcq_core::quantify::QuantifyError::SingleClass) => Ok((
            json!({ "gt_cutoff": cut, "auc": null, "points": [], "note": "ground truth has a single class at this cutoff" }),
            None,
        )),
        Err(e) => Err(e.into()),
    }
}

fn cmd_evaluate(ctx: &mut Ctx, a: &EvalArgs) -> Result<Value> {
    validated(ctx)?;
    let p = paired(ctx, a)?;
    let gt_cat: Vec<TpsCategory> = p.gt.iter().map(|&t| bin_tps(t, &ctx.cfg.cutoffs)).collect();
    let pred_cat: Vec<TpsCategory> = p.pred.iter().map(|&t| bin_tps(t, &ctx.cfg.cutoffs)).collect();
    let kappa = cohens_kappa(&gt_cat, &pred_cat)?;
    let (roc, roc_curve) = roc_value(ctx, a, &p)?;
    if let Some(r) = &roc_curve {
        tables::write_roc(&ctx.out.join("roc.csv"), r)?;
    }
    let curve = cutoff_sweep(&p.gt, &p.pred, &ctx.cfg.sweep)?;
    tables::write_sweep(&ctx.out.join("sweep.csv"), &curve)?;
    Ok(json!({
        "dataset": a.dataset.clone().unwrap_or_else(|| stem(&a.gt)),
        "n": p.ids.len(),
        "cutoffs": ctx.cfg.cutoffs,
        "kappa": kappa,
        "accuracy": accuracy(&gt_cat, &pred_cat)?,
        "confusion": confusion(&gt_cat, &pred_cat)?,
        "no_majority": p.no_majority,
        "curve": curve,
        "roc": roc,
        "files": { "roc": roc_curve.as_ref().map(|_| "roc.csv"), "sweep": "sweep.csv" },
    }))
}

fn cmd_roc(ctx: &mut Ctx, a: &EvalArgs) -> Result<Value> {
    validated(ctx)?;
    let p = paired(ctx, a)?;
    let (roc, curve) = roc_value(ctx, a, &p)?;
    if let Some(r) = &curve {
        tables::write_roc(&ctx.out.join("roc.csv"), r)?;
    }
    Ok(json!({ "n": p.ids.len(), "roc": roc, "file": curve.as_ref().map(|_| "roc.csv") }))
}

fn cmd_sweep(ctx: &mut Ctx, a: &EvalArgs) -> Result<Value> {
    validated(ctx)?;
    let p = paired(ctx, a)?;
    let curve = cutoff_sweep(&p.gt, &p.pred, &ctx.cfg.sweep)?;
    tables::write_sweep(&ctx.out.join("sweep.csv"), &curve)?;
    Ok(json!({ "n": p.ids.len(), "range": ctx.cfg.sweep, "curve": curve, "file": "sweep.csv" }))
}

fn cmd_groupstats(ctx: &mut Ctx, path: &Path) -> Result<Value> {
    validated(ctx)?;
    ctx.input(path);
    let stats = group_summary(&tables::read_groups(path)?)?;
    for s in &stats {
        ctx.stdout.push(format!("{}\t{}", s.label, s.report));
    }
    Ok(json!({ "groups": stats }))
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<Value> {
    let s = &mut ctx.cfg.synth;
    if let Some(v) = &a.slide_id {
        s.slide_id = v.clone();
    }
    if let Some(v) = a.grid_w {
        s.grid_w = v;
    }
    if let Some(v) = a.grid_h {
        s.grid_h = v;
    }
    if let Some(v) = a.n_cells {
        s.tile.n_cells = v;
    }
    if let Some(v) = a.pos_fraction {
        s.tile.pos_fraction = v;
    }
    if let Some(v) = a.noise_sigma {
        s.tile.noise_sigma = v;
    }
    if a.pmaps {
        s.write_pmaps = true;
    }
    validated(ctx)?;
    let spec = ctx.cfg.synth_spec();
    let g = generate_slide(&spec, &ctx.out, ctx.cfg.workers)?;
    let n_pos = g
        .truth
        .annotations
        .iter()
        .filter(|a| a.cls == ihcq_core::CellClass::TcPos)
        .count();
    Ok(json!({
        "slide_id": spec.slide_id,
        "grid": [spec.grid_w, spec.grid_h],
        "tile_size": spec.tile.width,
        "n_cells": g.truth.annotations.len(),
        "n_pos": n_pos,
        "true_tps": g.truth.true_tps,
        "manifest": "manifest.json",
        "truth": "truth.csv",
        "pmaps": spec.write_pmaps.then_some("pmaps"),
    }))
}

struct EmbedInput {
    features: Vec<FeatureVector>,
    thumbs: Vec<Option<PatchImage>>,
    tps: Vec<Option<f64>>,
}

fn embed_from_slides(ctx: &mut Ctx, paths: &[PathBuf]) -> Result<EmbedInput> {
    let mut input = EmbedInput {
        features: Vec::new(),
        thumbs: Vec::new(),
        tps: Vec::new(),
    };
    let opts = ctx.cfg.slide_options();
    let thumb = ctx.cfg.embed.thumb_size;
    for path in paths {
        let slide = load_slide(ctx, path)?;
        let found = detect_slide(&slide, &Backend::Deconv(ctx.cfg.stain), &opts)?;
        let tile_tps: BTreeMap<(u32, u32), Option<f64>> = found
            .tiles
            .iter()
            .map(|t| {
                let total = t.n_pos + t.n_neg;
                ((t.gx, t.gy), (total > 0).then(|| 100.0 * t.n_pos as f64 / total as f64))
            })
            .collect();
        for rec in slide.tiles_row_major() {
            let TileOutcome::Kept(tile) = slide.load_tile(rec, &opts.tiles)? else {
                continue;
            };
            let id = format!("{}:{}_{}", slide.manifest.slide_id, tile.gx, tile.gy);
            input
                .features
                .push(pixel_features(&tile.image, id, slide.manifest.slide_id.clone()));
            input.thumbs.push(Some(resize_area(&tile.image, thumb, thumb)));
            input.tps.push(tile_tps.get(&(tile.gx, tile.gy)).copied().flatten());
        }
    }
    Ok(input)
}

fn cmd_embed(ctx: &mut Ctx, a: &EmbedArgs) -> Result<Value> {
    if let Some(g) = a.grid_n {
        ctx.cfg.embed.grid_n = g;
    }
    validated(ctx)?;
    let input = match &a.features {
        Some(path) => {
            ctx.input(path);
            let features = tables::read_features(path)?;
            let tps = match &a.tps {
                Some(t) => {
                    ctx.input(t);
                    let table: BTreeMap<String, f64> = tables::read_tps_table(t)?.into_iter().collect();
                    features.iter().map(|f| table.get(&f.patch_id).copied()).collect()
                }
                None => vec![None; features.len()],
            };
            EmbedInput {
                thumbs: vec![None; features.len()],
                tps,
                features,
            }
        }
        None if !a.slide.is_empty() => embed_from_slides(ctx, &a.slide)?,
        None => return Err(Error::Usage("embed needs --slide or --features".into())),
    };
    let feats = &input.features;

    let proj = match a.method {
        ProjectionKind::Pca => project_2d(feats)?,
        ProjectionKind::External => {
            let path = a
                .projection
                .as_ref()
                .ok_or_else(|| Error::Usage("--method external needs --projection".into()))?;
            ctx.input(path);
            let mut by_id: BTreeMap<String, ihcq_core::embed::ProjectedPoint> = tables::read_projection(path)?
                .into_iter()
                .map(|p| (p.patch_id.clone(), p))
                .collect();
            let points = feats
                .iter()
                .map(|f| {
                    by_id.remove(&f.patch_id).ok_or_else(|| {
                        Error::format(path, format!("no projected point for patch {:?}", f.patch_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Projection2D::from_points(points)
        }
    };

    tables::write_features(&ctx.out.join("features.csv"), feats)?;
    tables::write_projection(&ctx.out.join("projection.csv"), &proj.points)?;
    let rows: Vec<ScatterRow> = proj
        .points
        .iter()
        .zip(feats)
        .zip(&input.tps)
        .map(|((point, f), tps)| ScatterRow {
            point,
            tps: *tps,
            cohort_id: &f.cohort_id,
        })
        .collect();
    tables::write_scatter(&ctx.out.join("scatter.csv"), &rows)?;

    let layout = mosaic(&proj, ctx.cfg.embed.grid_n)?;
    let mosaic_json = serde_json::to_vec_pretty(&layout).map_err(|e| Error::format("mosaic.json", e))?;
    crate::fsutil::write_atomic(&ctx.out.join("mosaic.json"), &mosaic_json)?;
    let mut mosaic_png = None;
    if input.thumbs.iter().all(Option::is_some) {
        let t = ctx.cfg.embed.thumb_size;
        let side = t * layout.grid_n;
        let mut canvas = PatchImage::filled(side, side, [255, 255, 255], feats_mpp(&input));
        for cell in &layout.cells {
            let thumb = input.thumbs[cell.index].as_ref().expect("checked above");
            for y in 0..t {
                for x in 0..t {
                    canvas.set_pixel(cell.col * t + x, cell.row * t + y, thumb.pixel(x, y));
                }
            }
        }
        png::write_rgb(&ctx.out.join("mosaic.png"), &canvas)?;
        mosaic_png = Some("mosaic.png");
    }

    let similarity = match cohort_similarity(feats) {
        Ok(s) => json!(s),
        Err(e @ (ihcq_core::embed::EmbedError::TooFewCohorts(_) | ihcq_core::embed::EmbedError::SmallCohort { .. })) => {
            json!({ "skipped": e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    Ok(json!({
        "n_patches": feats.len(),
        "dimension": feats.first().map_or(0, |f| f.values.len()),
        "method": proj.method,
        "grid_n": layout.grid_n,
        "occupied_cells": layout.cells.len(),
        "similarity": similarity,
        "files": {
            "features": "features.csv",
            "projection": "projection.csv",
            "scatter": "scatter.csv",
            "mosaic_layout": "mosaic.json",
            "mosaic_image": mosaic_png,
        },
    }))
}

fn feats_mpp(input: &EmbedInput) -> ihcq_core::slide::ResolutionSpec {
    input
        .thumbs
        .iter()
        .flatten()
        .next()
        .map(|t| t.mpp())
        .unwrap_or_else(ihcq_core::slide::ResolutionSpec::reference)
}

fn cmd_compare(
    ctx: &mut Ctx,
    a: &Path,
    b: &Path,
    name_a: Option<String>,
    name_b: Option<String>,
) -> Result<Value> {
    validated(ctx)?;
    ctx.input(a);
    ctx.input(b);
    let sa = ReplicateScores::new(name_a.unwrap_or_else(|| stem(a)), tables::read_scores(a)?)?;
    let sb = ReplicateScores::new(name_b.unwrap_or_else(|| stem(b)), tables::read_scores(b)?)?;
    Ok(json!(compare_models(&sa, &sb)?))
}
