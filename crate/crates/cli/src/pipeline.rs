//! Shared machinery behind the subcommands: fitting a field to a dataset,
//! extracting its zero level set, rendering held-out views, and scoring
//! against the analytic ground truth. Kept free of manifest/config plumbing
//! so `ablate` can reuse the pieces per sweep point.

use std::path::Path;

use dirsurf_core::eval::{self, GridSpec, Polylines, TriMesh};
use dirsurf_core::geom;
use dirsurf_core::io;
use dirsurf_core::nets::FieldBundle;
use dirsurf_core::render::{self, BoundedRay, SamplingConfig};
use dirsurf_core::scenes::{self, AnalyticScene, SceneMeta, ViewMeta};
use dirsurf_core::train::{self, MetricsRow, RayBatchSource};
use dirsurf_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const METRICS_NAME: &str = "metrics.csv";
pub const REPORT_NAME: &str = "report.json";
pub const SURFACE_2D_NAME: &str = "surface.json";
pub const SURFACE_3D_NAME: &str = "surface.obj";
pub const RENDERS_DIR: &str = "renders";

/// The learned SDF clipped against the supervised domain ball: outside it
/// the network was never trained, so whatever it says there is noise.
/// Inside the ball the max() never moves the zero set.
fn clipped<'a, const D: usize>(b: &'a FieldBundle, radius: f64) -> impl Fn([f64; D]) -> f64 + 'a {
    move |p| b.sdf_value(p).max(geom::norm(p) - radius)
}

pub fn extract_contour(b: &FieldBundle, radius: f64, resolution: usize) -> Result<Polylines> {
    let spec = GridSpec::<2>::centered(radius * 1.05, resolution);
    eval::marching_squares(clipped(b, radius), &spec)
}

pub fn extract_mesh(b: &FieldBundle, radius: f64, resolution: usize) -> Result<TriMesh> {
    let spec = GridSpec::<3>::centered(radius * 1.05, resolution);
    eval::marching_tetrahedra(clipped(b, radius), &spec)
}

/// Extract and sample the current surface — `None` when the level set is
/// still empty (early training) or extraction fails.
pub type SurfaceSampler<const D: usize> =
    fn(&FieldBundle, f64, usize, usize, u64) -> Option<Vec<[f64; D]>>;

pub fn sample_surface_2d(
    b: &FieldBundle,
    radius: f64,
    resolution: usize,
    n: usize,
    seed: u64,
) -> Option<Vec<[f64; 2]>> {
    let c = extract_contour(b, radius, resolution).ok()?;
    if c.is_empty() {
        return None;
    }
    Some(eval::sample_segments(&c, n, seed))
}

pub fn sample_surface_3d(
    b: &FieldBundle,
    radius: f64,
    resolution: usize,
    n: usize,
    seed: u64,
) -> Option<Vec<[f64; 3]>> {
    let m = extract_mesh(b, radius, resolution).ok()?;
    if m.is_empty() {
        return None;
    }
    Some(eval::sample_triangles(&m, n, seed))
}

/// Train (or resume) on the configured dataset, writing `checkpoint.bin`
/// and `metrics.csv` into the run directory. Returns the final bundle and
/// the last metrics row.
pub fn fit_bundle<const D: usize>(
    cfg: &RunConfig,
    gt: Option<&AnalyticScene<D>>,
    resume: bool,
    sampler: SurfaceSampler<D>,
) -> Result<(FieldBundle, Option<MetricsRow>)> {
    let ds = scenes::load_dataset::<D>(cfg.dataset_dir()?)?;
    let src = RayBatchSource::from_dataset(&ds);
    let out = cfg.out_dir();
    let field = *cfg.field();
    let tcfg = cfg.train().clone();
    let radius = ds.meta.scene_scale;
    let eval_res = (cfg.eval().grid_resolution / 2).max(32);
    let seed = cfg.seed;
    let gt_pts: Option<Vec<[f64; D]>> = match (gt, tcfg.eval_every > 0) {
        (Some(s), true) => {
            let pts = eval::surface_points(&s.csg, 1024, seed, s.domain_radius);
            (!pts.is_empty()).then_some(pts)
        }
        _ => None,
    };
    let mut eval_closure;
    let eval_arg: Option<&mut dyn FnMut(&FieldBundle, usize) -> Option<f64>> = match gt_pts {
        Some(pts) => {
            eval_closure = move |b: &FieldBundle, _step: usize| {
                let pred = sampler(b, radius, eval_res, 1024, seed)?;
                eval::chamfer_distance(&pred, &pts).ok()
            };
            Some(&mut eval_closure)
        }
        None => None,
    };
    let (bundle, report) = if resume {
        let (mut b, mut adam, step) = train::load_checkpoint(&out.join(CHECKPOINT_NAME), field)?;
        let r = train::fit_from(&mut b, &mut adam, step, &src, &tcfg, Some(out), eval_arg)?;
        (b, r)
    } else {
        let mut b = FieldBundle::new(field, seed)?;
        let r = train::fit(&mut b, &src, &tcfg, Some(out), eval_arg)?;
        (b, r)
    };
    Ok((bundle, report.metrics.last().cloned()))
}

// ---- held-out views ---------------------------------------------------------

/// Cameras the fit never saw: midpoints between consecutive training camera
/// positions, pushed back out to the average orbit radius. Always returns
/// exactly `k` views (datasets have at least one view).
pub fn heldout_views(meta: &SceneMeta, k: usize) -> Vec<ViewMeta> {
    let n = meta.views.len();
    let mut out = Vec::with_capacity(k);
    if n == 0 {
        return out;
    }
    let vnorm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for j in 0..k {
        if n == 1 {
            out.push(meta.views[0].clone());
            continue;
        }
        let i = (j * (n - 1)) / k.max(1);
        let a = &meta.views[i];
        let b = &meta.views[i + 1];
        let dim = a.origin.len();
        let mut origin: Vec<f64> = (0..dim).map(|c| 0.5 * (a.origin[c] + b.origin[c])).collect();
        let rm = vnorm(&origin);
        if rm > 1e-9 {
            let s = 0.5 * (vnorm(&a.origin) + vnorm(&b.origin)) / rm;
            for c in origin.iter_mut() {
                *c *= s;
            }
        } else {
            origin = a.origin.clone();
        }
        let target: Vec<f64> = (0..dim).map(|c| 0.5 * (a.target[c] + b.target[c])).collect();
        out.push(ViewMeta {
            origin,
            target,
            up: a.up.clone(),
            fov_deg: a.fov_deg,
        });
    }
    out
}

pub struct HeldoutRender<const D: usize> {
    pub views: Vec<ViewMeta>,
    pub colors: Vec<Vec<[f64; 3]>>,
    pub normals: Vec<Vec<[f64; D]>>,
}

fn normal_rgb<const D: usize>(n: [f64; D]) -> [f64; 3] {
    // Unit components map to [0,1]; the zero "no hit" normal lands mid-gray.
    let mut c = [0.5; 3];
    for a in 0..D.min(3) {
        c[a] = 0.5 * (n[a] + 1.0);
    }
    c
}

/// Deterministically render `views` with the learned field (no jitter) and
/// write color PPM + f64 tensor + normal-map PPM per view under `renders/`.
pub fn render_heldout<const D: usize>(
    bundle: &FieldBundle,
    meta: &SceneMeta,
    views: &[ViewMeta],
    sampling: SamplingConfig,
    out: &Path,
) -> Result<HeldoutRender<D>> {
    let dir = out.join(RENDERS_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut s = sampling;
    s.jitter = false;
    let mut hr = HeldoutRender {
        views: views.to_vec(),
        colors: Vec::with_capacity(views.len()),
        normals: Vec::with_capacity(views.len()),
    };
    for (j, vm) in views.iter().enumerate() {
        let rays = scenes::view_rays::<D>(vm, meta.width, meta.height)?;
        let mut colors = Vec::with_capacity(rays.len());
        let mut normals = Vec::with_capacity(rays.len());
        for ray in rays {
            let bray = BoundedRay::through_domain(ray, meta.scene_scale);
            let o = render::render_ray_f64(bundle, &bray, &s, meta.background, None);
            colors.push(o.color);
            normals.push(o.normal);
        }
        io::write_ppm(&dir.join(format!("render_{j:04}.ppm")), meta.width, meta.height, &colors)?;
        let flat: Vec<f64> = colors.iter().flat_map(|c| c.iter().copied()).collect();
        io::write_f64_tensor(
            &dir.join(format!("render_{j:04}.f64")),
            &[meta.height, meta.width, 3],
            &flat,
        )?;
        let nrgb: Vec<[f64; 3]> = normals.iter().map(|n| normal_rgb(*n)).collect();
        io::write_ppm(&dir.join(format!("normal_{j:04}.ppm")), meta.width, meta.height, &nrgb)?;
        hr.colors.push(colors);
        hr.normals.push(normals);
    }
    let mut doc = serde_json::to_vec_pretty(&hr.views)?;
    doc.push(b'\n');
    io::atomic_write(&dir.join("views.json"), &doc)?;
    Ok(hr)
}

/// PSNR against the analytic renders plus normal MAE over pixels where the
/// ground truth actually hits the surface.
pub fn heldout_metrics<const D: usize>(
    scene: &AnalyticScene<D>,
    hr: &HeldoutRender<D>,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut se = 0.0;
    let mut npx = 0usize;
    let mut pred_n: Vec<[f64; D]> = Vec::new();
    let mut gt_n: Vec<[f64; D]> = Vec::new();
    let mut mask = Vec::new();
    for (j, vm) in hr.views.iter().enumerate() {
        let (gt_colors, _) = scenes::render_view(scene, vm)?;
        let rays = scenes::view_rays::<D>(vm, scene.width, scene.height)?;
        for (i, ray) in rays.iter().enumerate() {
            let (near, far) = scene.ray_span(ray);
            match scenes::sphere_trace(&scene.csg, ray, near, far) {
                Some(h) => {
                    mask.push(true);
                    gt_n.push(h.normal);
                }
                None => {
                    mask.push(false);
                    gt_n.push([0.0; D]);
                }
            }
            pred_n.push(hr.normals[j][i]);
            for ch in 0..3 {
                let d = hr.colors[j][i][ch] - gt_colors[i][ch];
                se += d * d;
            }
            npx += 1;
        }
    }
    if npx == 0 {
        return Ok((None, None));
    }
    let mse = se / (3.0 * npx as f64);
    let psnr = (mse > 0.0).then(|| -10.0 * mse.log10());
    let mae = eval::normal_mae(&pred_n, &gt_n, &mask).ok();
    Ok((psnr, mae))
}

// ---- evaluation reports -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scene: String,
    pub dim: usize,
    pub grid_resolution: usize,
    pub vertices: usize,
    /// Segments in 2D, triangles in 3D.
    pub elements: usize,
    /// Contour length in 2D, mesh area in 3D.
    pub surface_measure: f64,
    pub chamfer: Option<f64>,
    pub accuracy: Option<f64>,
    pub normal_mae_deg: Option<f64>,
    pub psnr: Option<f64>,
    pub heldout_views: usize,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    io::atomic_write(&out.join(REPORT_NAME), &bytes)
}

fn gt_metrics<const D: usize>(
    pred: &[[f64; D]],
    scene: &AnalyticScene<D>,
    gt_samples: usize,
    seed: u64,
) -> (Option<f64>, Option<f64>) {
    let gt_pts = eval::surface_points(&scene.csg, gt_samples, seed, scene.domain_radius);
    if pred.is_empty() || gt_pts.is_empty() {
        return (None, None);
    }
    (
        eval::chamfer_distance(pred, &gt_pts).ok(),
        eval::accuracy(pred, &gt_pts).ok(),
    )
}

/// Extract, score, render held-out views, write `surface.json` and
/// `report.json` (2D).
pub fn eval_pipeline_2d(
    cfg: &RunConfig,
    meta: &SceneMeta,
    bundle: &FieldBundle,
    gt: Option<&AnalyticScene<2>>,
) -> Result<EvalReport> {
    let out = cfg.out_dir();
    let ev = *cfg.eval();
    let contour = extract_contour(bundle, meta.scene_scale, ev.grid_resolution)?;
    eval::write_polylines_json(&out.join(SURFACE_2D_NAME), &contour)?;
    let (mut chamfer, mut accuracy) = (None, None);
    if let Some(s) = gt {
        if !contour.is_empty() {
            let pred = eval::sample_segments(&contour, ev.surface_samples, cfg.seed);
            (chamfer, accuracy) = gt_metrics(&pred, s, ev.gt_samples, cfg.seed);
        }
    }
    let views = heldout_views(meta, ev.heldout_views);
    let sampling = cfg.train().sampling;
    let hr = render_heldout::<2>(bundle, meta, &views, sampling, out)?;
    let (psnr, mae) = match gt {
        Some(s) => heldout_metrics(s, &hr)?,
        None => (None, None),
    };
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scene: meta.name.clone(),
        dim: 2,
        grid_resolution: ev.grid_resolution,
        vertices: contour.vertices.len(),
        elements: contour.segments.len(),
        surface_measure: contour.total_length(),
        chamfer,
        accuracy,
        normal_mae_deg: mae,
        psnr,
        heldout_views: views.len(),
    };
    write_report(out, &report)?;
    Ok(report)
}

/// 3D counterpart of [`eval_pipeline_2d`]; writes `surface.obj`.
pub fn eval_pipeline_3d(
    cfg: &RunConfig,
    meta: &SceneMeta,
    bundle: &FieldBundle,
    gt: Option<&AnalyticScene<3>>,
) -> Result<EvalReport> {
    let out = cfg.out_dir();
    let ev = *cfg.eval();
    let mesh = extract_mesh(bundle, meta.scene_scale, ev.grid_resolution)?;
    eval::write_obj(&out.join(SURFACE_3D_NAME), &mesh)?;
    let (mut chamfer, mut accuracy) = (None, None);
    if let Some(s) = gt {
        if !mesh.is_empty() {
            let pred = eval::sample_triangles(&mesh, ev.surface_samples, cfg.seed);
            (chamfer, accuracy) = gt_metrics(&pred, s, ev.gt_samples, cfg.seed);
        }
    }
    let views = heldout_views(meta, ev.heldout_views);
    let sampling = cfg.train().sampling;
    let hr = render_heldout::<3>(bundle, meta, &views, sampling, out)?;
    let (psnr, mae) = match gt {
        Some(s) => heldout_metrics(s, &hr)?,
        None => (None, None),
    };
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scene: meta.name.clone(),
        dim: 3,
        grid_resolution: ev.grid_resolution,
        vertices: mesh.vertices.len(),
        elements: mesh.triangles.len(),
        surface_measure: mesh.area(),
        chamfer,
        accuracy,
        normal_mae_deg: mae,
        psnr,
        heldout_views: views.len(),
    };
    write_report(out, &report)?;
    Ok(report)
}
