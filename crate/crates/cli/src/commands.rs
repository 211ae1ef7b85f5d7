//! One function per subcommand. Each resolves its configuration, writes
//! `config.resolved.json` into the run directory up front, does the work,
//! and finishes by writing the checksummed manifest.

use std::path::Path;

use dirsurf_core::dirparam::{DirMode, FusionPoint};
use dirsurf_core::eval::{self, DispersionProfile, BAND_LABELS};
use dirsurf_core::geom::{self, Ray};
use dirsurf_core::io;
use dirsurf_core::nets::FieldBundle;
use dirsurf_core::scenes::{self, AnalyticScene, SceneKind, SceneMeta};
use dirsurf_core::train::{self, MetricsRow};
use dirsurf_core::{Error, Result};
use serde_json::json;

use crate::config::{default_out_root, Overrides, RunConfig};
use crate::manifest::{self, RunManifest, MANIFEST_SCHEMA_VERSION};
use crate::pipeline::{self, EvalReport, CHECKPOINT_NAME};
use crate::{AblateArgs, AblateAxis, DiagnoseArgs, RunArgs, RunRefArgs, TrainArgs};

pub const TOOL_NAME: &str = "dirsurf";

fn tool_string() -> String {
    format!("{TOOL_NAME} {}", env!("CARGO_PKG_VERSION"))
}

fn load_base(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Write the manifest as the run's final action.
fn finalize(
    command: &str,
    cfg: &RunConfig,
    started_utc: String,
    final_metrics: serde_json::Value,
) -> Result<()> {
    let out = cfg.out_dir();
    let files = manifest::inventory(out)?;
    RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool: tool_string(),
        command: command.into(),
        started_utc,
        finished_utc: manifest::utc_now(),
        config: cfg.clone(),
        final_metrics,
        files,
    }
    .write(out)
}

fn scene_2d(id: Option<&str>) -> Option<AnalyticScene<2>> {
    match scenes::builtin_scene(id?).ok()? {
        SceneKind::D2(s) => Some(s),
        SceneKind::D3(_) => None,
    }
}

fn scene_3d(id: Option<&str>) -> Option<AnalyticScene<3>> {
    match scenes::builtin_scene(id?).ok()? {
        SceneKind::D3(s) => Some(s),
        SceneKind::D2(_) => None,
    }
}

fn row_json(row: Option<&MetricsRow>) -> serde_json::Value {
    match row {
        Some(r) => json!({
            "step": r.step,
            "loss_total": r.total,
            "loss_color": r.color,
            "loss_eikonal": r.eikonal,
            "loss_mask": r.mask,
            "s": r.s,
            "gamma": r.gamma,
            "chamfer": r.chamfer,
        }),
        None => serde_json::Value::Null,
    }
}

// ---- generate --------------------------------------------------------------

pub fn generate(args: &RunArgs) -> Result<()> {
    let started = manifest::utc_now();
    let ov = args.overrides();
    let mut cfg = load_base(args.config.as_deref())?;
    cfg.apply(&ov);
    let scene_id = cfg
        .scene
        .clone()
        .ok_or_else(|| Error::Config("generate needs a scene id (--scene)".into()))?;
    let mut kind = scenes::builtin_scene(&scene_id)?;
    // The output directory IS the dataset directory; record it as such so
    // the resolved config can be handed straight to `train`.
    if cfg.out_dir.is_none() {
        cfg.out_dir = cfg
            .dataset
            .clone()
            .or_else(|| Some(default_out_root().join(format!("{scene_id}-data"))));
    }
    cfg.resolve(kind.dim(), &ov)?;
    cfg.dataset = Some(cfg.out_dir().to_path_buf());
    cfg.write_resolved(cfg.out_dir())?;
    let meta = match &mut kind {
        SceneKind::D2(s) => {
            s.seed = cfg.seed;
            scenes::generate_dataset(s, cfg.out_dir())?
        }
        SceneKind::D3(s) => {
            s.seed = cfg.seed;
            scenes::generate_dataset(s, cfg.out_dir())?
        }
    };
    let metrics = json!({
        "scene": meta.name,
        "dim": meta.dim,
        "views": meta.views.len(),
        "width": meta.width,
        "height": meta.height,
    });
    finalize("generate", &cfg, started, metrics)?;
    println!(
        "wrote {} views of {} to {}",
        meta.views.len(),
        meta.name,
        cfg.out_dir().display()
    );
    Ok(())
}

// ---- train -----------------------------------------------------------------

pub fn train(args: &TrainArgs) -> Result<()> {
    let started = manifest::utc_now();
    let ov = args.run.overrides();
    let config_path = match (&args.run.config, args.resume, &args.run.out) {
        (Some(p), _, _) => Some(p.clone()),
        // Resuming without an explicit config picks up the resolved one the
        // interrupted run wrote.
        (None, true, Some(out)) => Some(out.join(crate::config::RESOLVED_CONFIG_NAME)),
        (None, true, None) => {
            return Err(Error::Config("--resume needs --config or --out".into()))
        }
        (None, false, _) => None,
    };
    let mut cfg = load_base(config_path.as_deref())?;
    cfg.apply(&ov);
    let meta = scenes::load_meta(cfg.dataset_dir()?)?;
    cfg.resolve(meta.dim, &ov)?;
    cfg.write_resolved(cfg.out_dir())?;
    let scene_id = cfg.scene_id(Some(&meta)).map(str::to_owned);
    let row = match meta.dim {
        2 => {
            let gt = scene_2d(scene_id.as_deref());
            pipeline::fit_bundle::<2>(&cfg, gt.as_ref(), args.resume, pipeline::sample_surface_2d)?
                .1
        }
        3 => {
            let gt = scene_3d(scene_id.as_deref());
            pipeline::fit_bundle::<3>(&cfg, gt.as_ref(), args.resume, pipeline::sample_surface_3d)?
                .1
        }
        d => return Err(Error::Dimension(format!("unsupported dimension {d}"))),
    };
    finalize("train", &cfg, started, row_json(row.as_ref()))?;
    match &row {
        Some(r) => println!(
            "step {}: loss {:.6} (s = {:.2}) -> {}",
            r.step,
            r.total,
            r.s,
            cfg.out_dir().display()
        ),
        None => println!("nothing to train: checkpoint already at the configured iteration count"),
    }
    Ok(())
}

// ---- checkpoint-consuming commands ------------------------------------------

/// Resolve config + dataset meta for a command pointed at an existing run
/// directory, and load its checkpoint.
fn open_run(args: &RunRefArgs) -> Result<(RunConfig, SceneMeta, FieldBundle)> {
    let mut ov = args.run_overrides();
    if ov.out_dir.is_none() {
        // Outputs land next to the checkpoint unless redirected.
        ov.out_dir = Some(args.run.clone());
    }
    let config_path = args
        .config
        .clone()
        .unwrap_or_else(|| args.run.join(crate::config::RESOLVED_CONFIG_NAME));
    let mut cfg = RunConfig::load(&config_path)?;
    cfg.apply(&ov);
    let meta = scenes::load_meta(cfg.dataset_dir()?)?;
    cfg.resolve(meta.dim, &Overrides::default())?;
    if let Some(r) = args.grid_resolution {
        cfg.eval.as_mut().unwrap().grid_resolution = r;
        cfg.eval.as_ref().unwrap().validate()?;
    }
    if let Some(h) = args.heldout {
        cfg.eval.as_mut().unwrap().heldout_views = h;
    }
    let (bundle, _, _) =
        train::load_checkpoint(&args.run.join(CHECKPOINT_NAME), *cfg.field())?;
    if bundle.cfg.dim != meta.dim {
        return Err(Error::Dimension(format!(
            "checkpoint is {}-dimensional, dataset is {}-dimensional",
            bundle.cfg.dim, meta.dim
        )));
    }
    Ok((cfg, meta, bundle))
}

pub fn render(args: &RunRefArgs) -> Result<()> {
    let started = manifest::utc_now();
    let (cfg, meta, bundle) = open_run(args)?;
    cfg.write_resolved(cfg.out_dir())?;
    let views = pipeline::heldout_views(&meta, cfg.eval().heldout_views);
    let sampling = cfg.train().sampling;
    let count = match meta.dim {
        2 => pipeline::render_heldout::<2>(&bundle, &meta, &views, sampling, cfg.out_dir())?
            .views
            .len(),
        3 => pipeline::render_heldout::<3>(&bundle, &meta, &views, sampling, cfg.out_dir())?
            .views
            .len(),
        d => return Err(Error::Dimension(format!("unsupported dimension {d}"))),
    };
    finalize("render", &cfg, started, json!({ "heldout_views": count }))?;
    println!(
        "rendered {count} held-out views into {}",
        cfg.out_dir().join(pipeline::RENDERS_DIR).display()
    );
    Ok(())
}

pub fn extract(args: &RunRefArgs) -> Result<()> {
    let started = manifest::utc_now();
    let (cfg, meta, bundle) = open_run(args)?;
    cfg.write_resolved(cfg.out_dir())?;
    let res = cfg.eval().grid_resolution;
    let metrics = match meta.dim {
        2 => {
            let c = pipeline::extract_contour(&bundle, meta.scene_scale, res)?;
            eval::write_polylines_json(&cfg.out_dir().join(pipeline::SURFACE_2D_NAME), &c)?;
            json!({
                "resolution": res,
                "vertices": c.vertices.len(),
                "segments": c.segments.len(),
                "total_length": c.total_length(),
            })
        }
        3 => {
            let m = pipeline::extract_mesh(&bundle, meta.scene_scale, res)?;
            eval::write_obj(&cfg.out_dir().join(pipeline::SURFACE_3D_NAME), &m)?;
            json!({
                "resolution": res,
                "vertices": m.vertices.len(),
                "triangles": m.triangles.len(),
                "area": m.area(),
                "closed": m.is_closed(),
            })
        }
        d => return Err(Error::Dimension(format!("unsupported dimension {d}"))),
    };
    finalize("extract", &cfg, started, metrics)?;
    println!("extracted level set into {}", cfg.out_dir().display());
    Ok(())
}

pub fn evaluate(args: &RunRefArgs) -> Result<()> {
    let started = manifest::utc_now();
    let (cfg, meta, bundle) = open_run(args)?;
    cfg.write_resolved(cfg.out_dir())?;
    let scene_id = cfg.scene_id(Some(&meta)).map(str::to_owned);
    let report = match meta.dim {
        2 => {
            let gt = scene_2d(scene_id.as_deref());
            pipeline::eval_pipeline_2d(&cfg, &meta, &bundle, gt.as_ref())?
        }
        3 => {
            let gt = scene_3d(scene_id.as_deref());
            pipeline::eval_pipeline_3d(&cfg, &meta, &bundle, gt.as_ref())?
        }
        d => return Err(Error::Dimension(format!("unsupported dimension {d}"))),
    };
    finalize("eval", &cfg, started, serde_json::to_value(&report)?)?;
    match report.chamfer {
        Some(cd) => println!(
            "chamfer {:.5}  accuracy {:.5}  normal MAE {}  -> {}",
            cd,
            report.accuracy.unwrap_or(f64::NAN),
            report
                .normal_mae_deg
                .map(|m| format!("{m:.2} deg"))
                .unwrap_or_else(|| "n/a".into()),
            cfg.out_dir().join(pipeline::REPORT_NAME).display()
        ),
        None => println!(
            "no analytic ground truth for scene '{}'; wrote extraction + renders only",
            report.scene
        ),
    }
    Ok(())
}

// ---- ablate -----------------------------------------------------------------

pub const GAMMA_SWEEP: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.5];
pub const ABLATE_TABLE_NAME: &str = "ablate.csv";

struct SweepPoint {
    label: String,
    apply: Box<dyn Fn(&mut RunConfig)>,
}

fn sweep_points(axis: AblateAxis) -> Vec<SweepPoint> {
    // Every axis except `mode` probes the hybrid blend machinery, so those
    // points force hybrid mode and vary one knob.
    match axis {
        AblateAxis::GammaBInit => GAMMA_SWEEP
            .iter()
            .map(|&g| SweepPoint {
                label: format!("{g:.1}"),
                apply: Box::new(move |c: &mut RunConfig| {
                    let d = &mut c.field.as_mut().unwrap().directional;
                    d.mode = DirMode::Hybrid;
                    d.gamma_b_init = g;
                }),
            })
            .collect(),
        AblateAxis::Detach => [true, false]
            .iter()
            .map(|&det| SweepPoint {
                label: if det { "on".into() } else { "off".into() },
                apply: Box::new(move |c: &mut RunConfig| {
                    let d = &mut c.field.as_mut().unwrap().directional;
                    d.mode = DirMode::Hybrid;
                    d.detach_blend = det;
                }),
            })
            .collect(),
        AblateAxis::FusionOrder => [FusionPoint::PreEncoding, FusionPoint::PostEncoding]
            .iter()
            .map(|&f| SweepPoint {
                label: match f {
                    FusionPoint::PreEncoding => "pre".into(),
                    FusionPoint::PostEncoding => "post".into(),
                },
                apply: Box::new(move |c: &mut RunConfig| {
                    let d = &mut c.field.as_mut().unwrap().directional;
                    d.mode = DirMode::Hybrid;
                    d.fusion = f;
                }),
            })
            .collect(),
        AblateAxis::Mode => DirMode::ALL
            .iter()
            .map(|&m| SweepPoint {
                label: m.name().into(),
                apply: Box::new(move |c: &mut RunConfig| {
                    c.field.as_mut().unwrap().directional.mode = m;
                }),
            })
            .collect(),
    }
}

struct SweepOutcome {
    label: String,
    report: Option<EvalReport>,
    row: Option<MetricsRow>,
    error: Option<String>,
}

fn run_sweep_point<const D: usize>(
    cfg: &RunConfig,
    gt: Option<&AnalyticScene<D>>,
    meta: &SceneMeta,
    sampler: pipeline::SurfaceSampler<D>,
    eval2: fn(&RunConfig, &SceneMeta, &FieldBundle, Option<&AnalyticScene<D>>) -> Result<EvalReport>,
) -> Result<(EvalReport, Option<MetricsRow>)> {
    cfg.write_resolved(cfg.out_dir())?;
    let (bundle, row) = pipeline::fit_bundle::<D>(cfg, gt, false, sampler)?;
    let report = eval2(cfg, meta, &bundle, gt)?;
    Ok((report, row))
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

fn ablate_csv(axis: AblateAxis, rows: &[SweepOutcome]) -> String {
    let mut out = String::from(
        "axis,value,status,chamfer,accuracy,normal_mae_deg,loss_total,loss_color,loss_eikonal,loss_mask\n",
    );
    for r in rows {
        let status = if r.error.is_none() { "ok" } else { "failed" };
        let (cd, acc, mae) = match &r.report {
            Some(rep) => (rep.chamfer, rep.accuracy, rep.normal_mae_deg),
            None => (None, None, None),
        };
        let (lt, lc, le, lm) = match &r.row {
            Some(m) => (Some(m.total), Some(m.color), Some(m.eikonal), Some(m.mask)),
            None => (None, None, None, None),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            r.label,
            status,
            csv_field(cd),
            csv_field(acc),
            csv_field(mae),
            csv_field(lt),
            csv_field(lc),
            csv_field(le),
            csv_field(lm),
        ));
    }
    out
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let started = manifest::utc_now();
    let ov = args.run.overrides();
    let mut cfg = load_base(args.run.config.as_deref())?;
    cfg.apply(&ov);
    let meta = scenes::load_meta(cfg.dataset_dir()?)?;
    if cfg.out_dir.is_none() {
        let stem = cfg
            .scene_id(Some(&meta))
            .unwrap_or("run")
            .to_owned();
        cfg.out_dir = Some(default_out_root().join(format!("{stem}-ablate-{}", args.axis.name())));
    }
    cfg.resolve(meta.dim, &ov)?;
    cfg.write_resolved(cfg.out_dir())?;
    let base_out = cfg.out_dir().to_path_buf();
    let scene_id = cfg.scene_id(Some(&meta)).map(str::to_owned);
    let mut outcomes = Vec::new();
    for point in sweep_points(args.axis) {
        let mut pc = cfg.clone();
        (point.apply)(&mut pc);
        pc.out_dir = Some(base_out.join(format!("{}={}", args.axis.name(), point.label)));
        let result = match meta.dim {
            2 => {
                let gt = scene_2d(scene_id.as_deref());
                run_sweep_point::<2>(
                    &pc,
                    gt.as_ref(),
                    &meta,
                    pipeline::sample_surface_2d,
                    pipeline::eval_pipeline_2d,
                )
            }
            3 => {
                let gt = scene_3d(scene_id.as_deref());
                run_sweep_point::<3>(
                    &pc,
                    gt.as_ref(),
                    &meta,
                    pipeline::sample_surface_3d,
                    pipeline::eval_pipeline_3d,
                )
            }
            d => Err(Error::Dimension(format!("unsupported dimension {d}"))),
        };
        let outcome = match result {
            Ok((report, row)) => SweepOutcome {
                label: point.label,
                report: Some(report),
                row,
                error: None,
            },
            Err(e) => {
                eprintln!("ablate point {}={} failed: {e}", args.axis.name(), point.label);
                let _ = io::atomic_write(
                    &pc.out_dir().join("error.txt"),
                    format!("{e}\n").as_bytes(),
                );
                SweepOutcome {
                    label: point.label,
                    report: None,
                    row: None,
                    error: Some(e.to_string()),
                }
            }
        };
        outcomes.push(outcome);
    }
    let table = ablate_csv(args.axis, &outcomes);
    io::atomic_write(&base_out.join(ABLATE_TABLE_NAME), table.as_bytes())?;
    let metrics = json!({
        "axis": args.axis.name(),
        "points": outcomes.len(),
        "failed": outcomes.iter().filter(|o| o.error.is_some()).count(),
        "chamfer": outcomes
            .iter()
            .map(|o| json!({"value": o.label, "chamfer": o.report.as_ref().and_then(|r| r.chamfer)}))
            .collect::<Vec<_>>(),
    });
    finalize("ablate", &cfg, started, metrics)?;
    println!(
        "swept {} points over {}; table at {}",
        outcomes.len(),
        args.axis.name(),
        base_out.join(ABLATE_TABLE_NAME).display()
    );
    Ok(())
}

// ---- diagnose ---------------------------------------------------------------

pub const DISPERSION_CSV_NAME: &str = "dispersion.csv";
/// Samples per diagnostic ray and their spacing along the ray; the window
/// starts this far before the hit so every |f| band is populated.
pub const FAN_SAMPLES: usize = 60;
pub const FAN_STEP: f64 = 0.008;
pub const FAN_BACK: f64 = 0.45;

struct FanSpec<const D: usize> {
    origin: [f64; D],
    targets: Vec<[f64; D]>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Where to aim the diagnostic fan for each scene: into the concave notch
/// (L-shape, bowl), across the silhouette (disk, blob, sphere), or at the
/// plane (half-space).
fn fan_spec_2d(id: &str, n: usize) -> Option<FanSpec<2>> {
    let (origin, xs, y) = match id {
        "flat2d-lshape" => ([0.5, 1.5], linspace(0.0, 0.45, n), -0.04),
        "flat2d-halfplane" => ([0.0, 1.5], linspace(-0.6, 0.6, n), -0.1),
        "flat2d-disk" | "flat2d-blob" => ([0.0, 1.5], linspace(-0.35, 0.35, n), 0.0),
        _ => return None,
    };
    Some(FanSpec {
        origin,
        targets: xs.into_iter().map(|x| [x, y]).collect(),
    })
}

fn fan_spec_3d(id: &str, n: usize) -> Option<FanSpec<3>> {
    let (origin, xs, y, z) = match id {
        "sphere3d" => ([0.4, 0.1, 2.0], linspace(-0.3, 0.3, n), 0.05, 0.0),
        "bowl3d" => ([0.3, 0.1, 1.8], linspace(-0.25, 0.25, n), 0.0, 0.1),
        _ => return None,
    };
    Some(FanSpec {
        origin,
        targets: xs.into_iter().map(|x| [x, y, z]).collect(),
    })
}

struct FanOutcome<const D: usize> {
    profiles: Vec<(u64, Option<DispersionProfile<D>>)>,
    /// Per ray, per sample: (surface normal, reflection direction); `None`
    /// column for rays that miss.
    dirs: Vec<Option<Vec<([f64; D], [f64; D])>>>,
}

fn run_fan<const D: usize>(scene: &AnalyticScene<D>, spec: &FanSpec<D>) -> FanOutcome<D> {
    let mut profiles = Vec::with_capacity(spec.targets.len());
    let mut dirs = Vec::with_capacity(spec.targets.len());
    for (id, target) in spec.targets.iter().enumerate() {
        let ray = Ray {
            origin: spec.origin,
            dir: geom::normalize(geom::sub(*target, spec.origin)),
        };
        let hit = scenes::sphere_trace(&scene.csg, &ray, 0.0, 1e3);
        let Some(hit) = hit else {
            profiles.push((id as u64, None));
            dirs.push(None);
            continue;
        };
        let ts: Vec<f64> = (0..FAN_SAMPLES)
            .map(|i| hit.t - FAN_BACK + i as f64 * FAN_STEP)
            .filter(|&t| t > 1e-3)
            .collect();
        let profile = eval::reflection_dispersion(&scene.csg, &ray, &ts).ok();
        let d_view = geom::scale(ray.dir, -1.0);
        let cols: Vec<([f64; D], [f64; D])> = ts
            .iter()
            .map(|&t| {
                let (_, g) = scenes::analytic_eval(&scene.csg, ray.at(t));
                let n = geom::normalize_or(g, 1e-12).unwrap_or(g);
                (n, dirsurf_core::dirparam::reflect_direction(d_view, n))
            })
            .collect();
        profiles.push((id as u64, profile));
        dirs.push(Some(cols));
    }
    FanOutcome { profiles, dirs }
}

fn fan_csv<const D: usize>(profiles: &[(u64, Option<DispersionProfile<D>>)]) -> String {
    let mut out = String::from("ray_id,band,spread_rad,n_samples\n");
    for (id, p) in profiles {
        for b in 0..3 {
            match p {
                Some(p) => out.push_str(&format!(
                    "{},{},{:.17e},{}\n",
                    id, BAND_LABELS[b], p.bands[b].spread, p.bands[b].count
                )),
                // Missed rays are flagged with empty bands, not dropped.
                None => out.push_str(&format!("{},{},nan,0\n", id, BAND_LABELS[b])),
            }
        }
    }
    out
}

/// Mean per-ray spread per band (rays with at least 2 samples in the band),
/// plus the far/near ratio the L-shape criterion watches.
fn fan_summary<const D: usize>(o: &FanOutcome<D>) -> serde_json::Value {
    let mut means = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (_, p) in &o.profiles {
        if let Some(p) = p {
            for b in 0..3 {
                if p.bands[b].count >= 2 {
                    means[b] += p.bands[b].spread;
                    counts[b] += 1;
                }
            }
        }
    }
    for b in 0..3 {
        if counts[b] > 0 {
            means[b] /= counts[b] as f64;
        }
    }
    let ratio = if counts[0] > 0 && counts[2] > 0 && means[0] > 0.0 {
        Some(means[2] / means[0])
    } else {
        None
    };
    json!({
        "rays": o.profiles.len(),
        "hits": o.profiles.iter().filter(|(_, p)| p.is_some()).count(),
        "band_mean_spread": {
            BAND_LABELS[0]: means[0],
            BAND_LABELS[1]: means[1],
            BAND_LABELS[2]: means[2],
        },
        "far_over_near": ratio,
    })
}

fn dir_color<const D: usize>(d: [f64; D]) -> [f64; 3] {
    let mut c = [0.5; 3];
    for a in 0..D.min(3) {
        c[a] = 0.5 * (d[a] + 1.0);
    }
    c
}

/// One column per ray, one row per sample; missed rays are black columns.
fn fan_images<const D: usize>(o: &FanOutcome<D>, out: &Path) -> Result<()> {
    let w = o.dirs.len();
    let h = FAN_SAMPLES;
    let mut normals = vec![[0.0; 3]; w * h];
    let mut reflections = vec![[0.0; 3]; w * h];
    for (x, col) in o.dirs.iter().enumerate() {
        if let Some(col) = col {
            for (y, (n, r)) in col.iter().enumerate().take(h) {
                normals[y * w + x] = dir_color(*n);
                reflections[y * w + x] = dir_color(*r);
            }
        }
    }
    io::write_ppm(&out.join("normals.ppm"), w, h, &normals)?;
    io::write_ppm(&out.join("reflections.ppm"), w, h, &reflections)
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let started = manifest::utc_now();
    let mut cfg = load_base(args.config.as_deref())?;
    if let Some(s) = &args.scene {
        cfg.scene = Some(s.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let scene_id = cfg
        .scene
        .clone()
        .ok_or_else(|| Error::Config("diagnose needs a scene id (--scene)".into()))?;
    let kind = scenes::builtin_scene(&scene_id)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(default_out_root().join(format!("{scene_id}-diagnose")));
    }
    cfg.resolve(kind.dim(), &Overrides::default())?;
    cfg.write_resolved(cfg.out_dir())?;
    let out = cfg.out_dir().to_path_buf();
    let rays = args.rays.max(1);
    let (csv, summary) = match &kind {
        SceneKind::D2(s) => {
            let spec = fan_spec_2d(&scene_id, rays).ok_or_else(|| {
                Error::Usage(format!("no diagnostic fan defined for scene '{scene_id}'"))
            })?;
            let o = run_fan(s, &spec);
            fan_images(&o, &out)?;
            (fan_csv(&o.profiles), fan_summary(&o))
        }
        SceneKind::D3(s) => {
            let spec = fan_spec_3d(&scene_id, rays).ok_or_else(|| {
                Error::Usage(format!("no diagnostic fan defined for scene '{scene_id}'"))
            })?;
            let o = run_fan(s, &spec);
            fan_images(&o, &out)?;
            (fan_csv(&o.profiles), fan_summary(&o))
        }
    };
    io::atomic_write(&out.join(DISPERSION_CSV_NAME), csv.as_bytes())?;
    finalize("diagnose", &cfg, started, summary.clone())?;
    println!(
        "dispersion over {} rays -> {}",
        rays,
        out.join(DISPERSION_CSV_NAME).display()
    );
    if let Some(r) = summary.get("far_over_near").and_then(|v| v.as_f64()) {
        println!("far-band / near-band mean spread: {r:.3}");
    }
    Ok(())
}

pub fn version() {
    println!("{}", tool_string());
}
