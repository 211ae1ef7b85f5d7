//! Acceptance gate for the whole workspace: nine criteria, one verdict line
//! each. Criteria 1-6 exercise the libraries directly; 7-9 drive the real
//! binary end to end (datasets, training runs, reports). The suite uses a
//! custom harness so the verdict lines always reach the terminal in order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dirsurf_cli::manifest::{inventory, FileEntry};
use dirsurf_cli::pipeline::EvalReport;
use dirsurf_core::dirparam::{
    blend_weight, blend_weight_on_tape, direction_f64, direction_on_tape, gamma_from_raw,
    gamma_on_tape, hybrid_direction, reflect_direction, DirFallback, DirMode, DirectionalConfig,
};
use dirsurf_core::eval::{
    chamfer_distance, marching_squares, marching_tetrahedra, normal_mae, GridSpec,
};
use dirsurf_core::geom::{self, Ray};
use dirsurf_core::nets::{pe_f64, pe_on_tape, FieldBundle, FieldConfig, PeConfig};
use dirsurf_core::render::{
    composite_weights, render_ray_f64, sdensity_opacity, stratified_samples, BoundedRay,
    SamplingConfig,
};
use dirsurf_core::rng;
use dirsurf_core::scenes::{analytic_eval, builtin_scene, Csg, SceneKind};
use dirsurf_core::tape::{Tape, TapeValue};

type Verdict = Result<String, String>;

fn main() {
    let work = tempfile::tempdir().expect("acceptance needs a scratch directory");
    let mut e2e: Option<E2e> = None;

    let results: Vec<(usize, &str, Verdict)> = vec![
        (1, "directional identities", criterion_1()),
        (2, "autodiff against finite differences", criterion_2()),
        (3, "rendering invariants", criterion_3()),
        (4, "geometric initialization", criterion_4()),
        (5, "extraction and metric oracles", criterion_5()),
        (6, "reflection dispersion diagnostic", criterion_6(work.path())),
        (7, "three-scene mode comparison", criterion_7(work.path(), &mut e2e)),
        (8, "ablation orderings", criterion_8(work.path(), &e2e)),
        (9, "rerun determinism", criterion_9(work.path())),
    ];

    let mut failed = 0usize;
    for (n, label, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {n} ({label}): PASS — {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({label}): FAIL — {detail}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- shared helpers ---------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dirsurf")
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("could not spawn {}: {e}", bin()))?;
    if out.status.success() {
        Ok(())
    } else {
        let err = String::from_utf8_lossy(&out.stderr);
        let tail: String = err.lines().rev().take(3).collect::<Vec<_>>().join(" | ");
        Err(format!("`dirsurf {}` exited {:?}: {tail}", args.join(" "), out.status.code()))
    }
}

fn random_unit<const D: usize>(r: &mut rand_chacha::ChaCha8Rng) -> [f64; D] {
    loop {
        let v: [f64; D] = std::array::from_fn(|_| rng::standard_normal(r));
        if geom::norm(v) > 1e-3 {
            return geom::normalize(v);
        }
    }
}

fn read_report(run: &Path) -> Result<EvalReport, String> {
    let raw = std::fs::read_to_string(run.join("report.json"))
        .map_err(|e| format!("missing report in {}: {e}", run.display()))?;
    serde_json::from_str(&raw).map_err(|e| format!("bad report in {}: {e}", run.display()))
}

/// Even-odd point-in-region test against the chains of a surface.json file.
fn probe_inside(surface_json: &Path, p: [f64; 2]) -> Result<bool, String> {
    let raw = std::fs::read_to_string(surface_json)
        .map_err(|e| format!("missing {}: {e}", surface_json.display()))?;
    let v: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| format!("bad surface json: {e}"))?;
    let chains = v["chains"]
        .as_array()
        .ok_or_else(|| "surface json has no chains".to_string())?;
    let mut inside = false;
    for chain in chains {
        let pts: Vec<[f64; 2]> = serde_json::from_value(chain.clone())
            .map_err(|e| format!("bad chain: {e}"))?;
        for w in pts.windows(2) {
            let ([x1, y1], [x2, y2]) = (w[0], w[1]);
            if (y1 > p[1]) != (y2 > p[1]) {
                let xint = x1 + (p[1] - y1) * (x2 - x1) / (y2 - y1);
                if xint > p[0] {
                    inside = !inside;
                }
            }
        }
    }
    Ok(inside)
}

// ---- criterion 1: reflection/blend/hybrid identities --------------------------------

const PAIRS: usize = 2000;
const IDENTITY_TOL: f64 = 1e-9;

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    check_identities::<2>(&mut worst)?;
    check_identities::<3>(&mut worst)?;

    // Blend weight: exact boundary and strict monotonicity in |f| and gamma.
    let mut r = rng::stream(11, "accept.c1.blend", &[]);
    for _ in 0..PAIRS {
        let gamma = gamma_from_raw(-0.2 + 0.6 * rng::uniform(&mut r));
        if blend_weight(gamma, 0.0) != 1.0 {
            return Err(format!("alpha(0) != 1 at gamma {gamma}"));
        }
        let f1 = rng::uniform(&mut r);
        let f2 = f1 + 1e-3 + rng::uniform(&mut r);
        if !(blend_weight(gamma, f1) > blend_weight(gamma, f2)) {
            return Err(format!("alpha not decreasing in |f| at gamma {gamma}"));
        }
        let g2 = gamma * (1.1 + rng::uniform(&mut r));
        let f = 0.01 + rng::uniform(&mut r);
        if !(blend_weight(gamma, f) > blend_weight(g2, f)) {
            return Err(format!("alpha not decreasing in gamma at f {f}"));
        }
    }

    let dt = t0.elapsed();
    if dt > Duration::from_secs(5) {
        return Err(format!("identity suite took {dt:.2?} (budget 5 s)"));
    }
    Ok(format!(
        "max identity error {worst:.2e} over {PAIRS} pairs in 2D and 3D; \
         blend boundary and monotonicity hold; limits bit-exact; {dt:.2?}"
    ))
}

fn check_identities<const D: usize>(worst: &mut f64) -> Result<(), String> {
    let mut r = rng::stream(11, "accept.c1", &[D as u64]);
    for i in 0..PAIRS {
        let d: [f64; D] = random_unit(&mut r);
        let n: [f64; D] = random_unit(&mut r);
        let dr = reflect_direction(d, n);

        let e_norm = (geom::norm(dr) - 1.0).abs();
        let e_proj = (geom::dot(dr, n) - geom::dot(d, n)).abs();
        let back = reflect_direction(dr, n);
        let e_invol = geom::dist(back, d);
        for e in [e_norm, e_proj, e_invol] {
            *worst = worst.max(e);
            if e >= IDENTITY_TOL {
                return Err(format!("{D}D pair {i}: identity error {e:.2e} >= {IDENTITY_TOL:.0e}"));
            }
        }

        // Hybrid limits reproduce the endpoint directions (and therefore
        // their encodings) bit for bit.
        let (at_one, _) = hybrid_direction(d, n, 1.0);
        let (at_zero, _) = hybrid_direction(d, n, 0.0);
        if at_one != dr || at_zero != d {
            return Err(format!("{D}D pair {i}: hybrid endpoints not bit-exact"));
        }
        // alpha = 1 arises from f = 0, alpha = 0 from exp underflow.
        let pe = PeConfig { bands: 2, include_input: true };
        let (on_surface, fb1) = direction_f64(DirMode::Hybrid, d, Some(n), 20.0, 0.0);
        let (far_away, fb2) = direction_f64(DirMode::Hybrid, d, Some(n), 50.0, 1e6);
        if on_surface != dr || fb1 != DirFallback::None {
            return Err(format!("{D}D pair {i}: alpha=1 does not reproduce reflection"));
        }
        if far_away != d || fb2 != DirFallback::None {
            return Err(format!("{D}D pair {i}: alpha=0 does not reproduce viewing"));
        }
        let mut feat_ref = Vec::new();
        let mut feat_lim = Vec::new();
        pe_f64(pe, &dr, &mut feat_ref);
        pe_f64(pe, &on_surface, &mut feat_lim);
        if feat_ref != feat_lim {
            return Err(format!("{D}D pair {i}: encoded features differ at alpha=1"));
        }
    }
    Ok(())
}

// ---- criterion 2: gradients against central finite differences ---------------------

const NETS: usize = 50;
const PARAM_REL_TOL: f64 = 1e-3;
const SPATIAL_REL_TOL: f64 = 1e-4;

fn small_cfg(k: usize) -> FieldConfig {
    let dim = if k % 2 == 0 { 2 } else { 3 };
    let mode = match k % 3 {
        0 => DirMode::Viewing,
        1 => DirMode::Reflection,
        _ => DirMode::Hybrid,
    };
    FieldConfig {
        dim,
        pos_pe: PeConfig { bands: 1 + (k / 7) % 2, include_input: true },
        dir_pe: PeConfig { bands: 1, include_input: true },
        sdf_width: 6 + 2 * ((k / 2) % 2),
        sdf_hidden_layers: 1 + (k / 5) % 2,
        feature_dim: 2,
        radiance_width: 6,
        radiance_hidden_layers: 1,
        s_init: 12.0,
        init_radius: 0.45,
        directional: DirectionalConfig {
            mode,
            detach_blend: (k / 3) % 2 == 0,
            ..DirectionalConfig::default()
        },
    }
}

fn random_net(k: usize) -> FieldBundle {
    let mut b = FieldBundle::new(small_cfg(k), 1000 + k as u64).expect("small config is valid");
    let mut r = rng::stream(77, "accept.c2.noise", &[k as u64]);
    for v in b.store.data_mut() {
        *v += 0.05 * rng::standard_normal(&mut r);
    }
    b
}

/// One scalar touching every differentiable path: radiance color (through
/// the direction construction), the eikonal residual from forward tangents,
/// and the blend weight when the mode has one.
fn assemble_loss<const D: usize>(
    b: &FieldBundle,
    x: [f64; D],
    d_view: [f64; D],
) -> (Tape, TapeValue) {
    let mut tape = Tape::new();
    let tp = b.push_params(&mut tape);
    let eval = b.sdf_on_tape(&mut tape, &tp, x);
    let pairs: Vec<(TapeValue, TapeValue)> = eval.f.t.iter().map(|&t| (t, t)).collect();
    let g2 = tape.dot_gather(&pairs);
    let g = tape.sqrt(g2).expect("gradient norm positive on these nets");
    let resid = tape.add_const(g, -1.0);
    let eik = tape.mul(resid, resid);
    let n: [TapeValue; D] =
        std::array::from_fn(|j| tape.div(eval.f.t[j], g).expect("norm positive"));
    let dv: [TapeValue; D] = std::array::from_fn(|j| tape.constant(d_view[j]));
    let gamma = b
        .gamma_b_on_tape(&tape, &tp)
        .map(|gb| gamma_on_tape(&mut tape, gb));
    let dir = direction_on_tape(&mut tape, &b.cfg.directional, dv, Some(n), gamma, eval.f.p);
    let dir_feats = pe_on_tape(b.cfg.dir_pe, &mut tape, &dir.d);
    let c = b.radiance_on_tape(&mut tape, &tp, x, n, &dir_feats, &eval.feature);
    let mut l = tape.add(c[0], c[1]);
    l = tape.add(l, c[2]);
    l = tape.add(l, eik);
    if let Some(a) = dir.alpha {
        l = tape.add(l, a);
    }
    (tape, l)
}

fn loss_value<const D: usize>(b: &FieldBundle, x: [f64; D], d_view: [f64; D]) -> f64 {
    let (_, l) = assemble_loss(b, x, d_view);
    l.value()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_net<const D: usize>(k: usize, b: &FieldBundle) -> Result<(f64, f64), String> {
    let mut r = rng::stream(77, "accept.c2.point", &[k as u64]);
    let x: [f64; D] = std::array::from_fn(|_| 0.6 * (2.0 * rng::uniform(&mut r) - 1.0));
    let d_view: [f64; D] = random_unit(&mut r);

    // Spatial tangents against central differences of the plain evaluation.
    let e = b.sdf_eval(x);
    let mut worst_spatial: f64 = 0.0;
    for j in 0..D {
        let h = 1e-6;
        let (mut xp, mut xm) = (x, x);
        xp[j] += h;
        xm[j] -= h;
        let fd = (b.sdf_value(xp) - b.sdf_value(xm)) / (2.0 * h);
        let err = rel_err(e.grad[j], fd);
        worst_spatial = worst_spatial.max(err);
        if err >= SPATIAL_REL_TOL {
            return Err(format!(
                "net {k} axis {j}: spatial tangent {} vs fd {fd}, rel {err:.2e}",
                e.grad[j]
            ));
        }
    }

    // Every parameter gradient of the combined loss against central
    // differences; a failed step retries at smaller h in case it straddled
    // a ReLU kink of the radiance net.
    let (mut tape, l) = assemble_loss(b, x, d_view);
    let grads = tape.backward(l).map_err(|e| format!("net {k}: backward failed: {e}"))?;
    let mut worst_param: f64 = 0.0;
    for pi in 0..b.param_count() {
        let mut best = f64::INFINITY;
        for h in [1e-5, 1e-6, 1e-7] {
            let mut bp = b.clone();
            bp.store.data_mut()[pi] += h;
            let mut bm = b.clone();
            bm.store.data_mut()[pi] -= h;
            let fd = (loss_value(&bp, x, d_view) - loss_value(&bm, x, d_view)) / (2.0 * h);
            best = best.min(rel_err(grads[pi], fd));
            if best < PARAM_REL_TOL {
                break;
            }
        }
        worst_param = worst_param.max(best);
        if best >= PARAM_REL_TOL {
            return Err(format!(
                "net {k} param {pi}: reverse {} disagrees with fd, rel {best:.2e}",
                grads[pi]
            ));
        }
    }
    Ok((worst_spatial, worst_param))
}

/// With the blend detached, the blend weight must push exactly zero gradient
/// into the SDF parameters; without it, some SDF parameter must feel it.
fn check_detach<const D: usize>(k: usize) -> Result<(), String> {
    let blend_grads = |detach: bool| -> Result<Vec<f64>, String> {
        let mut cfg = small_cfg(k);
        cfg.directional.mode = DirMode::Hybrid;
        cfg.directional.detach_blend = detach;
        let mut b = FieldBundle::new(cfg, 2000 + k as u64).expect("valid config");
        let mut r = rng::stream(78, "accept.c2.detach", &[k as u64]);
        for v in b.store.data_mut() {
            *v += 0.05 * rng::standard_normal(&mut r);
        }
        let x: [f64; D] = std::array::from_fn(|_| 0.3 + 0.2 * rng::uniform(&mut r));
        let mut tape = Tape::new();
        let tp = b.push_params(&mut tape);
        let eval = b.sdf_on_tape(&mut tape, &tp, x);
        let gb = b.gamma_b_on_tape(&tape, &tp).expect("hybrid registers gamma_b");
        let gamma = gamma_on_tape(&mut tape, gb);
        let alpha = blend_weight_on_tape(&mut tape, gamma, eval.f.p, detach);
        let grads = tape
            .backward(alpha)
            .map_err(|e| format!("net {k}: blend backward failed: {e}"))?;
        let mut sdf_grads = Vec::new();
        for seg in b.store.segments() {
            if seg.name.starts_with("sdf.") {
                sdf_grads.extend_from_slice(&grads[seg.offset..seg.offset + seg.len]);
            }
        }
        Ok(sdf_grads)
    };
    let detached = blend_grads(true)?;
    if detached.iter().any(|&g| g != 0.0) {
        return Err(format!("net {k}: detached blend leaks gradient into the SDF parameters"));
    }
    let attached = blend_grads(false)?;
    if attached.iter().all(|&g| g == 0.0) {
        return Err(format!("net {k}: undetached blend reaches no SDF parameter"));
    }
    Ok(())
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut worst_spatial: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    let mut params_checked = 0usize;
    for k in 0..NETS {
        let b = random_net(k);
        let (ws, wp) = if b.cfg.dim == 2 {
            check_net::<2>(k, &b)?
        } else {
            check_net::<3>(k, &b)?
        };
        worst_spatial = worst_spatial.max(ws);
        worst_param = worst_param.max(wp);
        params_checked += b.param_count();
    }
    for k in 0..6 {
        if k % 2 == 0 {
            check_detach::<2>(k)?;
        } else {
            check_detach::<3>(k)?;
        }
    }
    let dt = t0.elapsed();
    if dt > Duration::from_secs(30) {
        return Err(format!("oracle comparison took {dt:.2?} (budget 30 s)"));
    }
    Ok(format!(
        "{NETS} nets, {params_checked} parameter gradients: worst rel {worst_param:.1e} \
         (tol {PARAM_REL_TOL:.0e}), spatial worst {worst_spatial:.1e} (tol {SPATIAL_REL_TOL:.0e}); \
         detach path exactly zero; {dt:.2?}"
    ))
}

// ---- criterion 3: rendering invariants ----------------------------------------------

const SDENSITY_ORACLE: f64 = 0.6321205588285577;

fn criterion_3() -> Verdict {
    // Weights sum to at most one on random rays through random fields.
    let mut total_rays = 0usize;
    let mut worst_acc: f64 = 0.0;
    worst_acc = worst_acc.max(acc_bound::<2>(0, &mut total_rays)?);
    worst_acc = worst_acc.max(acc_bound::<2>(1, &mut total_rays)?);
    worst_acc = worst_acc.max(acc_bound::<3>(2, &mut total_rays)?);
    worst_acc = worst_acc.max(acc_bound::<3>(3, &mut total_rays)?);

    // On a linear SDF the weight mass concentrates at the zero crossing.
    let mut r = rng::stream(13, "accept.c3.linear", &[]);
    let mut worst_offset: f64 = 0.0;
    for i in 0..100 {
        let n: [f64; 2] = random_unit(&mut r);
        let c = 0.4 * (2.0 * rng::uniform(&mut r) - 1.0);
        let origin = geom::add(geom::scale(n, c + 0.8 + 0.6 * rng::uniform(&mut r)), [
            0.3 * rng::standard_normal(&mut r),
            0.3 * rng::standard_normal(&mut r),
        ]);
        // Walk down the gradient, with some slant.
        let slant = random_unit::<2>(&mut r);
        let mut dir = geom::normalize(geom::add(geom::scale(n, -1.0), geom::scale(slant, 0.4)));
        if geom::dot(dir, n) > -0.3 {
            dir = geom::scale(n, -1.0);
        }
        let f0 = geom::dot(n, origin) - c;
        let slope = geom::dot(n, dir);
        let t_star = -f0 / slope;
        let t1 = 2.0 * t_star;
        let samples = 24usize;
        let ts = stratified_samples(0.0, t1, samples, None);
        let alphas: Vec<f64> = ts
            .windows(2)
            .map(|w| {
                let fa = f0 + slope * w[0];
                let fb = f0 + slope * w[1];
                sdensity_opacity(fa, fb, 30.0)
            })
            .collect();
        let (weights, acc) = composite_weights(&alphas);
        if acc > 1.0 + 1e-9 {
            return Err(format!("linear ray {i}: accumulated weight {acc} > 1"));
        }
        let argmax = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        let t_hat = 0.5 * (ts[argmax] + ts[argmax + 1]);
        let spacing = t1 / samples as f64;
        let off = (t_hat - t_star).abs();
        worst_offset = worst_offset.max(off / spacing);
        if off > spacing {
            return Err(format!(
                "linear ray {i}: weight argmax at {t_hat:.4}, crossing at {t_star:.4}, \
                 spacing {spacing:.4}"
            ));
        }
    }

    // The worked S-density example, against an independent recomputation.
    let got = sdensity_opacity(0.1, -0.1, 10.0);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let independent = ((sigmoid(10.0 * 0.1) - sigmoid(10.0 * -0.1)) / sigmoid(10.0 * 0.1)).max(0.0);
    if (got - SDENSITY_ORACLE).abs() > 1e-6 || (got - independent).abs() > 1e-12 {
        return Err(format!(
            "s-density worked example: got {got}, oracle {SDENSITY_ORACLE}, \
             recomputed {independent}"
        ));
    }

    Ok(format!(
        "sum of weights <= 1+1e-9 on {total_rays} random rays (max {worst_acc:.12}); \
         argmax within one spacing on 100 linear rays (worst {worst_offset:.2} spacings); \
         opacity example matches {SDENSITY_ORACLE}"
    ))
}

fn acc_bound<const D: usize>(variant: u64, total: &mut usize) -> Result<f64, String> {
    let mut b = FieldBundle::new(FieldConfig::desk_default(D), 300 + variant)
        .map_err(|e| e.to_string())?;
    if variant % 2 == 1 {
        // Roughed-up weights give a field with several sign changes.
        let mut r = rng::stream(300, "accept.c3.rough", &[variant]);
        for v in b.store.data_mut() {
            *v += 0.2 * rng::standard_normal(&mut r);
        }
    }
    let sampling = SamplingConfig { n_coarse: 16, n_importance: 16, jitter: variant % 2 == 0 };
    let mut r = rng::stream(301, "accept.c3.rays", &[variant]);
    let mut worst: f64 = 0.0;
    for _ in 0..2500 {
        let o = geom::scale(random_unit::<D>(&mut r), 1.5 + rng::uniform(&mut r));
        let target: [f64; D] =
            std::array::from_fn(|_| 0.7 * (2.0 * rng::uniform(&mut r) - 1.0));
        let dir = geom::normalize(geom::sub(target, o));
        let bray = BoundedRay::through_domain(Ray { origin: o, dir }, 1.0);
        let out = render_ray_f64(&b, &bray, &sampling, [0.2, 0.2, 0.2], Some(&mut r));
        if out.acc > 1.0 + 1e-9 {
            return Err(format!("random ray: accumulated weight {} > 1 + 1e-9", out.acc));
        }
        worst = worst.max(out.acc);
        *total += 1;
    }
    Ok(worst)
}

// ---- criterion 4: geometric initialization ------------------------------------------

fn criterion_4() -> Verdict {
    let h2 = init_hausdorff_2d(4242)?;
    let h3 = init_hausdorff_3d(4243)?;
    if h2 >= 0.1 || h3 >= 0.1 {
        return Err(format!(
            "fresh zero set strays from the configured sphere: 2D {h2:.4}, 3D {h3:.4} (bound 0.1)"
        ));
    }
    Ok(format!("fresh-net zero set vs configured sphere: Hausdorff {h2:.4} (2D), {h3:.4} (3D)"))
}

fn init_hausdorff_2d(seed: u64) -> Result<f64, String> {
    let cfg = FieldConfig::desk_default(2);
    let b = FieldBundle::new(cfg, seed).map_err(|e| e.to_string())?;
    let contour = marching_squares(|p| b.sdf_value(p), &GridSpec::centered(1.0, 256))
        .map_err(|e| e.to_string())?;
    let chains = contour.chains();
    if chains.is_empty() {
        return Err("fresh 2D net has an empty zero set".into());
    }
    let r = cfg.init_radius;
    let mut h: f64 = 0.0;
    for ch in &chains {
        for &p in ch {
            h = h.max((geom::norm(p) - r).abs());
        }
    }
    for i in 0..720 {
        let a = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / 720.0;
        let q = [r * a.cos(), r * a.sin()];
        let mut d = f64::INFINITY;
        for ch in &chains {
            for w in ch.windows(2) {
                d = d.min(point_segment_distance(q, w[0], w[1]));
            }
        }
        h = h.max(d);
    }
    Ok(h)
}

fn init_hausdorff_3d(seed: u64) -> Result<f64, String> {
    let cfg = FieldConfig::desk_default(3);
    let b = FieldBundle::new(cfg, seed).map_err(|e| e.to_string())?;
    let mesh = marching_tetrahedra(|p| b.sdf_value(p), &GridSpec::centered(1.0, 80))
        .map_err(|e| e.to_string())?;
    if mesh.is_empty() {
        return Err("fresh 3D net has an empty zero set".into());
    }
    let r = cfg.init_radius;
    let mut h: f64 = 0.0;
    for &v in &mesh.vertices {
        h = h.max((geom::norm(v) - r).abs());
    }
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for i in 0..1000 {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / 1000.0;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let a = golden * i as f64;
        let q = [r * rho * a.cos(), r * rho * a.sin(), r * z];
        let mut d = f64::INFINITY;
        for &v in &mesh.vertices {
            d = d.min(geom::dist(q, v));
        }
        h = h.max(d);
    }
    Ok(h)
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = geom::sub(b, a);
    let len2 = geom::dot(ab, ab);
    if len2 == 0.0 {
        return geom::dist(p, a);
    }
    let t = (geom::dot(geom::sub(p, a), ab) / len2).clamp(0.0, 1.0);
    geom::dist(p, geom::add(a, geom::scale(ab, t)))
}

// ---- criterion 5: extraction residuals and metric oracles ----------------------------

fn criterion_5() -> Verdict {
    let mut scenes_checked = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for id in ["flat2d-disk", "flat2d-lshape", "flat2d-blob"] {
        let csg = match builtin_scene(id).map_err(|e| e.to_string())? {
            SceneKind::D2(s) => s.csg,
            SceneKind::D3(_) => unreachable!("{id} is two-dimensional"),
        };
        worst_ratio = worst_ratio.max(residual_ratio_2d(&csg, id)?);
        scenes_checked.push(id);
    }
    for id in ["sphere3d", "bowl3d"] {
        let csg = match builtin_scene(id).map_err(|e| e.to_string())? {
            SceneKind::D3(s) => s.csg,
            SceneKind::D2(_) => unreachable!("{id} is three-dimensional"),
        };
        worst_ratio = worst_ratio.max(residual_ratio_3d(&csg, id)?);
        scenes_checked.push(id);
    }

    // Chamfer oracle: concentric circles a known 0.1 apart.
    let n = 8192;
    let circle = |radius: f64| -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect()
    };
    let ch = chamfer_distance(&circle(0.5), &circle(0.6)).map_err(|e| e.to_string())?;
    if (ch - 0.1).abs() > 1e-3 {
        return Err(format!("concentric-circle Chamfer {ch:.6} is not 0.1 within 1e-3"));
    }

    // Normal-MAE oracle: a pure 10-degree rotation.
    let mut r = rng::stream(55, "accept.c5.normals", &[]);
    let gt: Vec<[f64; 2]> = (0..400).map(|_| random_unit(&mut r)).collect();
    let rot = 10.0_f64.to_radians();
    let pred: Vec<[f64; 2]> = gt.iter().map(|&v| geom::rot2(v, rot)).collect();
    let mask = vec![true; gt.len()];
    let mae = normal_mae(&pred, &gt, &mask).map_err(|e| e.to_string())?;
    if (mae - 10.0).abs() > 1e-6 {
        return Err(format!("rotated-normal MAE {mae:.9} is not 10 degrees within 1e-6"));
    }

    Ok(format!(
        "vertex residual <= bound on {} scenes (worst {:.2} of bound); \
         circle Chamfer {ch:.6}; rotation MAE {mae:.7} deg",
        scenes_checked.len(),
        worst_ratio
    ))
}

fn residual_ratio_2d(csg: &Csg<2>, id: &str) -> Result<f64, String> {
    let spec = GridSpec::centered(1.0, 160);
    let bound = spec.residual_bound();
    let contour =
        marching_squares(|p| analytic_eval(csg, p).0, &spec).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for ch in contour.chains() {
        for p in ch {
            let res = analytic_eval(csg, p).0.abs();
            worst = worst.max(res / bound);
            if res > bound {
                return Err(format!("{id}: vertex residual {res:.2e} above bound {bound:.2e}"));
            }
        }
    }
    Ok(worst)
}

fn residual_ratio_3d(csg: &Csg<3>, id: &str) -> Result<f64, String> {
    let spec = GridSpec::centered(1.0, 64);
    let bound = spec.residual_bound();
    let mesh =
        marching_tetrahedra(|p| analytic_eval(csg, p).0, &spec).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for &v in &mesh.vertices {
        let res = analytic_eval(csg, v).0.abs();
        worst = worst.max(res / bound);
        if res > bound {
            return Err(format!("{id}: vertex residual {res:.2e} above bound {bound:.2e}"));
        }
    }
    Ok(worst)
}

// ---- criterion 6: dispersion fan diagnostic ------------------------------------------

fn criterion_6(work: &Path) -> Verdict {
    let t0 = Instant::now();
    let lshape_dir = work.join("diag-lshape");
    let half_dir = work.join("diag-halfplane");
    run_bin(&[
        "diagnose", "--scene", "flat2d-lshape", "--rays", "32",
        "--out", lshape_dir.to_str().unwrap(),
    ])?;
    run_bin(&[
        "diagnose", "--scene", "flat2d-halfplane", "--rays", "32",
        "--out", half_dir.to_str().unwrap(),
    ])?;

    let (near, far) = band_means(&lshape_dir.join("dispersion.csv"))?;
    if !(far >= 2.0 * near && far > 0.0) {
        return Err(format!(
            "L-shape fan: far-band spread {far:.4} does not dominate near-band {near:.4}"
        ));
    }

    let raw = std::fs::read_to_string(half_dir.join("dispersion.csv"))
        .map_err(|e| format!("half-space dispersion missing: {e}"))?;
    for line in raw.lines().skip(1) {
        let spread: f64 = line
            .split(',')
            .nth(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad dispersion row: {line}"))?;
        if spread != 0.0 {
            return Err(format!("half-space fan has nonzero spread: {line}"));
        }
    }

    let dt = t0.elapsed();
    if dt > Duration::from_secs(5) {
        return Err(format!("diagnostic took {dt:.2?} (budget 5 s)"));
    }
    Ok(format!(
        "L-shape fan near {near:.4} rad, far {far:.4} rad (>= 2x); \
         half-space spreads all exactly 0; {dt:.2?}"
    ))
}

/// Mean per-ray circular spread of the near and far |f| bands, counting only
/// rays with at least two samples in the band.
fn band_means(csv: &Path) -> Result<(f64, f64), String> {
    let raw =
        std::fs::read_to_string(csv).map_err(|e| format!("missing {}: {e}", csv.display()))?;
    let mut sums = BTreeMap::new();
    for line in raw.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(format!("bad dispersion row: {line}"));
        }
        let band = cols[1].to_string();
        let spread: f64 = cols[2].parse().map_err(|_| format!("bad spread: {line}"))?;
        let count: usize = cols[3].parse().map_err(|_| format!("bad count: {line}"))?;
        if count >= 2 {
            let e = sums.entry(band).or_insert((0.0, 0usize));
            e.0 += spread;
            e.1 += 1;
        }
    }
    let mean = |label: &str| -> Result<f64, String> {
        let (s, n) = sums
            .get(label)
            .copied()
            .ok_or_else(|| format!("no rays with two samples in band {label}"))?;
        Ok(s / n as f64)
    };
    Ok((mean("0.00-0.02")?, mean("0.10-inf")?))
}

// ---- criteria 7 and 8: end-to-end mode comparison and ablations -----------------------

/// Everything criteria 7 and 8 share: seed, config, and the trained runs.
const E2E_SEED: &str = "7";
const E2E_CONFIG: &str = r#"{
  "schema_version": 1,
  "seed": 7,
  "train": {
    "iterations": 5000,
    "rays_per_batch": 16,
    "masked_fraction": 0.75,
    "warmup_steps": 500,
    "lr_base": 5e-4,
    "lr_floor": 5e-6,
    "seed": 0,
    "log_every": 250,
    "eval_every": 0,
    "checkpoint_every": 0,
    "workers": 1,
    "sampling": {"n_coarse": 16, "n_importance": 16, "jitter": true},
    "weights": {"color": 1.0, "eikonal": 0.1, "mask": 0.1},
    "uniform_eikonal_points": 8
  },
  "eval": {"grid_resolution": 192, "gt_samples": 2048, "surface_samples": 2048, "heldout_views": 2}
}
"#;
const NOTCH_PROBE: [f64; 2] = [0.25, 0.25];

struct E2e {
    root: PathBuf,
    chamfer: BTreeMap<String, f64>,
}

impl E2e {
    fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
}

fn train_and_eval(root: &Path, config: &Path, dataset: &str, name: &str, extra: &[&str]) -> Result<f64, String> {
    let run = root.join("runs").join(name);
    let mut args = vec![
        "train",
        "--config", config.to_str().unwrap(),
        "--dataset", dataset,
        "--out", run.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_bin(&args)?;
    run_bin(&["eval", "--run", run.to_str().unwrap()])?;
    Ok(read_report(&run)?.chamfer.ok_or_else(|| format!("{name}: report has no Chamfer"))?)
}

fn criterion_7(work: &Path, out: &mut Option<E2e>) -> Verdict {
    let t0 = Instant::now();
    let root = work.join("e2e");
    let config = root.join("accept2d.json");
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    std::fs::write(&config, E2E_CONFIG).map_err(|e| e.to_string())?;

    let mut chamfer = BTreeMap::new();
    for scene in ["disk", "lshape", "blob"] {
        let data = root.join("data").join(scene);
        run_bin(&[
            "generate", "--scene", &format!("flat2d-{scene}"),
            "--seed", E2E_SEED, "--out", data.to_str().unwrap(),
        ])?;
        for mode in ["viewing", "reflection", "hybrid"] {
            let ch = train_and_eval(
                &root, &config, data.to_str().unwrap(),
                &format!("{scene}-{mode}"), &["--mode", mode],
            )?;
            chamfer.insert(format!("{scene}-{mode}"), ch);
        }
    }
    let elapsed = t0.elapsed();

    let get = |k: &str| chamfer[k];
    let e2e = E2e { root, chamfer: chamfer.clone() };
    let hybrid_in = probe_inside(&e2e.run_dir("lshape-hybrid").join("surface.json"), NOTCH_PROBE)?;
    let reflection_in =
        probe_inside(&e2e.run_dir("lshape-reflection").join("surface.json"), NOTCH_PROBE)?;
    *out = Some(e2e);

    let mut failures = Vec::new();
    // (a) Specular disk: reflection-family wins, viewing visibly worse.
    if get("disk-hybrid") > 1.1 * get("disk-reflection") {
        failures.push(format!(
            "disk: hybrid {:.5} > 1.1 x reflection {:.5}",
            get("disk-hybrid"), get("disk-reflection")
        ));
    }
    if get("disk-viewing") < 1.5 * get("disk-hybrid") {
        failures.push(format!(
            "disk: viewing {:.5} < 1.5 x hybrid {:.5}",
            get("disk-viewing"), get("disk-hybrid")
        ));
    }
    // (b) Specular L-shape: hybrid keeps the notch open, reflection seals it.
    if hybrid_in {
        failures.push("lshape: notch probe ended up inside the hybrid reconstruction".into());
    }
    if !reflection_in {
        failures.push("lshape: reflection mode unexpectedly recovered the notch".into());
    }
    let best = get("lshape-viewing").min(get("lshape-reflection"));
    if get("lshape-hybrid") > 1.25 * best {
        failures.push(format!(
            "lshape: hybrid {:.5} > 1.25 x best-of-others {best:.5}",
            get("lshape-hybrid")
        ));
    }
    // (c) Diffuse blob: hybrid on par with viewing.
    if get("blob-hybrid") > 1.15 * get("blob-viewing") {
        failures.push(format!(
            "blob: hybrid {:.5} > 1.15 x viewing {:.5}",
            get("blob-hybrid"), get("blob-viewing")
        ));
    }
    if elapsed > Duration::from_secs(900) {
        failures.push(format!("nine runs took {elapsed:.0?} (budget 15 min)"));
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!(
        "disk v/r/h {:.4}/{:.4}/{:.4}, lshape {:.4}/{:.4}/{:.4} (notch: hybrid open, \
         reflection sealed), blob {:.4}/{:.4}/{:.4}; nine runs in {:.0?}",
        get("disk-viewing"), get("disk-reflection"), get("disk-hybrid"),
        get("lshape-viewing"), get("lshape-reflection"), get("lshape-hybrid"),
        get("blob-viewing"), get("blob-reflection"), get("blob-hybrid"),
        elapsed
    ))
}

fn criterion_8(work: &Path, e2e: &Option<E2e>) -> Verdict {
    let e2e = e2e
        .as_ref()
        .ok_or_else(|| "needs the criterion-7 baseline runs, which did not complete".to_string())?;
    let _ = work;
    let base = e2e.chamfer["lshape-hybrid"];
    let config = e2e.root.join("accept2d.json");
    let data = e2e.root.join("data").join("lshape");
    let data = data.to_str().unwrap();

    // The baseline run already is gamma_b 0.3 / detach on / pre-encoding
    // fusion, so each ablation needs exactly one more run.
    let gamma_low = train_and_eval(
        &e2e.root, &config, data, "lshape-gamma-low",
        &["--mode", "hybrid", "--gamma-b-init", "0.0"],
    )?;
    let no_detach = train_and_eval(
        &e2e.root, &config, data, "lshape-no-detach",
        &["--mode", "hybrid", "--detach", "false"],
    )?;
    let post_pe = train_and_eval(
        &e2e.root, &config, data, "lshape-post-pe",
        &["--mode", "hybrid", "--fusion-order", "post"],
    )?;

    let mut failures = Vec::new();
    if !(gamma_low > base) {
        failures.push(format!("gamma_b 0.0 Chamfer {gamma_low:.5} is not above init-0.3 {base:.5}"));
    }
    if !(no_detach >= base) {
        failures.push(format!("no-detach Chamfer {no_detach:.5} is below detach {base:.5}"));
    }
    if !(post_pe >= base) {
        failures.push(format!("post-encoding Chamfer {post_pe:.5} is below pre-encoding {base:.5}"));
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!(
        "L-shape hybrid baseline {base:.5}; gamma_b 0.0 -> {gamma_low:.5}, \
         no-detach -> {no_detach:.5}, post-encoding fusion -> {post_pe:.5}"
    ))
}

// ---- criterion 9: bitwise rerun determinism ------------------------------------------

const DET_CONFIG: &str = r#"{
  "schema_version": 1,
  "seed": 19,
  "train": {
    "iterations": 80,
    "rays_per_batch": 8,
    "masked_fraction": 0.75,
    "warmup_steps": 10,
    "lr_base": 5e-4,
    "lr_floor": 5e-6,
    "seed": 0,
    "log_every": 20,
    "eval_every": 40,
    "checkpoint_every": 40,
    "workers": 1,
    "sampling": {"n_coarse": 8, "n_importance": 8, "jitter": true},
    "weights": {"color": 1.0, "eikonal": 0.1, "mask": 0.1},
    "uniform_eikonal_points": 4
  },
  "eval": {"grid_resolution": 64, "gt_samples": 512, "surface_samples": 512, "heldout_views": 2}
}
"#;

fn criterion_9(work: &Path) -> Verdict {
    let root = work.join("det");
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let config = root.join("det.json");
    std::fs::write(&config, DET_CONFIG).map_err(|e| e.to_string())?;
    let data = root.join("data");
    let run = root.join("run");

    let gen_args = [
        "generate", "--scene", "flat2d-disk", "--seed", "19",
        "--out", data.to_str().unwrap(),
    ];
    run_bin(&gen_args)?;
    let gen_first = snapshot(&data)?;
    run_bin(&gen_args)?;
    let gen_second = snapshot(&data)?;
    if gen_first != gen_second {
        return Err(diff_summary("generate", &gen_first, &gen_second));
    }

    let train_args = [
        "train", "--config", config.to_str().unwrap(),
        "--dataset", data.to_str().unwrap(), "--mode", "hybrid",
        "--workers", "1", "--out", run.to_str().unwrap(),
    ];
    run_bin(&train_args)?;
    let train_first = snapshot(&run)?;
    run_bin(&train_args)?;
    let train_second = snapshot(&run)?;
    if train_first != train_second {
        return Err(diff_summary("train", &train_first, &train_second));
    }
    if !train_first.iter().any(|f| f.path == "metrics.csv") {
        return Err("train run left no metrics.csv to compare".into());
    }

    Ok(format!(
        "generate ({} files) and train ({} files incl. metrics.csv) rerun \
         bitwise-identical",
        gen_first.len(),
        train_first.len()
    ))
}

fn snapshot(dir: &Path) -> Result<Vec<FileEntry>, String> {
    inventory(dir).map_err(|e| format!("inventory of {} failed: {e}", dir.display()))
}

fn diff_summary(what: &str, a: &[FileEntry], b: &[FileEntry]) -> String {
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return format!("{what}: {} changed between reruns ({} vs {})", x.path, x.sha256, y.sha256);
        }
    }
    format!("{what}: rerun produced a different file set ({} vs {} files)", a.len(), b.len())
}
