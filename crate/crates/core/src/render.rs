//! Differentiable volume rendering: stratified + importance sampling along
//! rays, SDF-to-opacity conversion through the logistic S-density, and
//! front-to-back compositing.
//!
//! Two flavors share the same math: a plain f64 path (generic over
//! [`Field`], so analytic oracles can stand in for the networks in tests)
//! and an on-tape path used in training, where the whole chain — SDF,
//! normals, direction features, radiance, opacity, compositing — lives on
//! one tape so the color loss differentiates end to end.

use rand_chacha::ChaCha8Rng;

use crate::dirparam::{self, DirFallback, DirectionalConfig, FusionPoint};
use crate::error::{Error, Result};
use crate::geom::{self, Ray};
use crate::nets::{pe_f64, pe_on_tape, FieldBundle, PeConfig, TapeParams};
use crate::rng;
use crate::tape::{Tape, TapeValue};

/// A camera ray with its sampling segment.
#[derive(Debug, Clone, Copy)]
pub struct BoundedRay<const D: usize> {
    pub ray: Ray<D>,
    pub near: f64,
    pub far: f64,
}

impl<const D: usize> BoundedRay<D> {
    /// Clip the ray against the ball of `domain_radius` around the origin
    /// of the scene (cameras always sit outside it).
    pub fn through_domain(ray: Ray<D>, domain_radius: f64) -> BoundedRay<D> {
        let d = geom::norm(ray.origin);
        BoundedRay {
            ray,
            near: (d - domain_radius).max(1e-3),
            far: d + domain_radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    /// Jitter samples within strata; false collapses to deterministic
    /// midpoints (useful for tests and final renders).
    pub jitter: bool,
}

impl SamplingConfig {
    pub fn desk_default(dim: usize) -> Self {
        if dim == 2 {
            SamplingConfig {
                n_coarse: 32,
                n_importance: 32,
                jitter: true,
            }
        } else {
            SamplingConfig {
                n_coarse: 48,
                n_importance: 48,
                jitter: true,
            }
        }
    }
}

// ---- sampling -----------------------------------------------------------------

/// One uniform sample per equal stratum of [near, far]; without an RNG the
/// samples sit at the stratum midpoints.
pub fn stratified_samples(
    near: f64,
    far: f64,
    n: usize,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    debug_assert!(n >= 1 && far > near);
    let w = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let u = match jitter.as_deref_mut() {
                Some(r) => rng::uniform(r),
                None => 0.5,
            };
            near + w * (i as f64 + u)
        })
        .collect()
}

const IMPORTANCE_FLOOR: f64 = 0.01;
const DUPLICATE_NUDGE: f64 = 1e-12;

/// Draw `m` extra samples from the inverse CDF of the coarse interval
/// weights (a uniform floor mixed in so no interval starves), then merge
/// with the coarse t-values keeping the list strictly increasing. All-zero
/// weights fall back to plain stratification.
pub fn importance_resample(
    coarse_ts: &[f64],
    weights: &[f64],
    m: usize,
    near: f64,
    far: f64,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    debug_assert_eq!(weights.len() + 1, coarse_ts.len());
    let nbins = weights.len();
    let total: f64 = weights.iter().sum();
    let mut extra = if total <= 0.0 {
        stratified_samples(near, far, m, jitter)
    } else {
        let floor = IMPORTANCE_FLOOR / nbins as f64;
        let mut cdf = Vec::with_capacity(nbins + 1);
        cdf.push(0.0);
        let mut run = 0.0;
        for &w in weights {
            run += w + floor;
            cdf.push(run);
        }
        let norm = run;
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let u = match jitter.as_deref_mut() {
                Some(r) => rng::uniform(r),
                None => (j as f64 + 0.5) / m as f64,
            } * norm;
            // Find the bin with cdf[b] <= u < cdf[b+1].
            let b = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) => i.min(nbins - 1),
                Err(i) => i.saturating_sub(1).min(nbins - 1),
            };
            let span = cdf[b + 1] - cdf[b];
            let frac = if span > 0.0 { (u - cdf[b]) / span } else { 0.5 };
            out.push(coarse_ts[b] + frac * (coarse_ts[b + 1] - coarse_ts[b]));
        }
        out
    };
    let mut merged = coarse_ts.to_vec();
    merged.append(&mut extra);
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..merged.len() {
        if merged[i] <= merged[i - 1] {
            merged[i] = merged[i - 1] + DUPLICATE_NUDGE;
        }
    }
    merged
}

// ---- S-density opacity -----------------------------------------------------------

/// Guards the division when sigma(s*f) underflows to zero deep inside free
/// space; shifts the worked-example value by ~1e-12, far below tolerances.
const OPACITY_EPS: f64 = 1e-12;

/// NeuS discrete opacity of the interval [t_i, t_i+1]:
/// `max((sigma(s f_i) - sigma(s f_i+1)) / sigma(s f_i), 0)`.
/// Positive only while the SDF decreases along the ray, which is what makes
/// the weights concentrate at the first front-facing crossing.
pub fn sdensity_opacity(f_i: f64, f_next: f64, s: f64) -> f64 {
    let a = crate::tape::sigmoid(s * f_i);
    let b = crate::tape::sigmoid(s * f_next);
    ((a - b) / (a + OPACITY_EPS)).max(0.0)
}

pub fn sdensity_opacity_on_tape(
    tape: &mut Tape,
    f_i: TapeValue,
    f_next: TapeValue,
    s: TapeValue,
) -> Result<TapeValue> {
    let zi = tape.mul(s, f_i);
    let zj = tape.mul(s, f_next);
    let si = tape.sigmoid(zi);
    let sj = tape.sigmoid(zj);
    let num = tape.sub(si, sj);
    let den = tape.add_const(si, OPACITY_EPS);
    let ratio = tape.div(num, den)?;
    Ok(tape.relu(ratio))
}

/// Front-to-back weights w_i = a_i * prod_j<i (1 - a_j) and their sum.
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut acc = 0.0;
    let weights = alphas
        .iter()
        .map(|&a| {
            let w = t * a;
            t *= 1.0 - a;
            acc += w;
            w
        })
        .collect();
    (weights, acc)
}

// ---- field abstraction ------------------------------------------------------------

/// What the f64 renderer needs from a surface+radiance model. Implemented
/// by the learned [`FieldBundle`] and by analytic test oracles.
pub trait Field<const D: usize> {
    /// Signed distance, spatial gradient, geometric feature.
    fn sdf_with_grad(&self, x: [f64; D]) -> (f64, [f64; D], Vec<f64>);
    fn radiance(&self, x: [f64; D], n: [f64; D], dir_feats: &[f64], feature: &[f64]) -> [f64; 3];
    fn directional(&self) -> DirectionalConfig;
    fn dir_pe(&self) -> PeConfig;
    fn s(&self) -> f64;
    fn gamma(&self) -> Option<f64>;
}

impl<const D: usize> Field<D> for FieldBundle {
    fn sdf_with_grad(&self, x: [f64; D]) -> (f64, [f64; D], Vec<f64>) {
        let e = self.sdf_eval(x);
        (e.f, e.grad, e.feature)
    }

    fn radiance(&self, x: [f64; D], n: [f64; D], dir_feats: &[f64], feature: &[f64]) -> [f64; 3] {
        self.radiance_f64(x, n, dir_feats, feature)
    }

    fn directional(&self) -> DirectionalConfig {
        self.cfg.directional
    }

    fn dir_pe(&self) -> PeConfig {
        self.cfg.dir_pe
    }

    fn s(&self) -> f64 {
        FieldBundle::s(self)
    }

    fn gamma(&self) -> Option<f64> {
        FieldBundle::gamma(self)
    }
}

/// Direction features in f64: blend (or not, per mode) and encode.
fn direction_features_f64<const D: usize>(
    cfg: &DirectionalConfig,
    dir_pe: PeConfig,
    d_view: [f64; D],
    normal: Option<[f64; D]>,
    gamma: Option<f64>,
    f: f64,
    out: &mut Vec<f64>,
) -> DirFallback {
    out.clear();
    match cfg.fusion {
        FusionPoint::PreEncoding => {
            let g = gamma.unwrap_or(1.0);
            let (d, fb) = dirparam::direction_f64(cfg.mode, d_view, normal, g, f);
            pe_f64(dir_pe, &d, out);
            fb
        }
        FusionPoint::PostEncoding => match (cfg.mode, normal) {
            (dirparam::DirMode::Viewing, _) => {
                pe_f64(dir_pe, &d_view, out);
                DirFallback::None
            }
            (_, None) => {
                pe_f64(dir_pe, &d_view, out);
                DirFallback::DegenerateNormal
            }
            (dirparam::DirMode::Reflection, Some(n)) => {
                pe_f64(dir_pe, &dirparam::reflect_direction(d_view, n), out);
                DirFallback::None
            }
            (dirparam::DirMode::Hybrid, Some(n)) => {
                let alpha = dirparam::blend_weight(gamma.unwrap_or(1.0), f);
                let d_ref = dirparam::reflect_direction(d_view, n);
                let mut ref_feats = Vec::new();
                pe_f64(dir_pe, &d_ref, &mut ref_feats);
                pe_f64(dir_pe, &d_view, out);
                for (o, r) in out.iter_mut().zip(ref_feats.iter()) {
                    *o = alpha * r + (1.0 - alpha) * *o;
                }
                DirFallback::None
            }
        },
    }
}

// ---- f64 rendering ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RenderOutput<const D: usize> {
    pub color: [f64; 3],
    /// Accumulated weight (opacity of the whole ray).
    pub acc: f64,
    /// Expected hit distance under the weights.
    pub depth: f64,
    /// Weight-averaged unit normal; zero when nothing was hit.
    pub normal: [f64; D],
    pub background_applied: bool,
    /// Samples whose SDF gradient was too short to define a normal.
    pub degenerate_normals: usize,
}

/// Full forward rendering of one ray without gradients.
pub fn render_ray_f64<const D: usize, F: Field<D>>(
    field: &F,
    bray: &BoundedRay<D>,
    sampling: &SamplingConfig,
    background: [f64; 3],
    mut rng: Option<&mut ChaCha8Rng>,
) -> RenderOutput<D> {
    let cfg = field.directional();
    let s = field.s();
    let gamma = field.gamma();
    let d_view = geom::scale(bray.ray.dir, -1.0);

    let coarse = stratified_samples(bray.near, bray.far, sampling.n_coarse, rng.as_deref_mut());
    let ts = if sampling.n_importance > 0 {
        let fs: Vec<f64> = coarse
            .iter()
            .map(|&t| field.sdf_with_grad(bray.ray.at(t)).0)
            .collect();
        let alphas: Vec<f64> = (0..coarse.len() - 1)
            .map(|i| sdensity_opacity(fs[i], fs[i + 1], s))
            .collect();
        let (weights, _) = composite_weights(&alphas);
        importance_resample(
            &coarse,
            &weights,
            sampling.n_importance,
            bray.near,
            bray.far,
            rng.as_deref_mut(),
        )
    } else {
        coarse
    };

    let k = ts.len();
    let mut fs = Vec::with_capacity(k);
    let mut colors = Vec::with_capacity(k - 1);
    let mut normals = Vec::with_capacity(k - 1);
    let mut degenerate = 0usize;
    let mut dir_feats = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let x = bray.ray.at(t);
        let (f, grad, feature) = field.sdf_with_grad(x);
        fs.push(f);
        if i + 1 == k {
            break; // the last sample only closes the final interval
        }
        let normal = geom::normalize_or(grad, dirparam::DEGENERATE_NORM_EPS);
        let fb = direction_features_f64(
            &cfg,
            field.dir_pe(),
            d_view,
            normal,
            gamma,
            f,
            &mut dir_feats,
        );
        if fb == DirFallback::DegenerateNormal {
            degenerate += 1;
        }
        let n_in = normal.unwrap_or([0.0; D]);
        colors.push(field.radiance(x, n_in, &dir_feats, &feature));
        normals.push(n_in);
    }

    let alphas: Vec<f64> = (0..k - 1)
        .map(|i| sdensity_opacity(fs[i], fs[i + 1], s))
        .collect();
    let (weights, acc) = composite_weights(&alphas);
    let mut color = background.map(|c| c * (1.0 - acc));
    let mut depth = 0.0;
    let mut normal = [0.0; D];
    for i in 0..weights.len() {
        for ch in 0..3 {
            color[ch] += weights[i] * colors[i][ch];
        }
        depth += weights[i] * ts[i];
        for j in 0..D {
            normal[j] += weights[i] * normals[i][j];
        }
    }
    depth /= acc.max(1e-9);
    let normal = geom::normalize_or(normal, 1e-12).unwrap_or([0.0; D]);
    RenderOutput {
        color,
        acc,
        depth,
        normal,
        background_applied: acc < 1.0 - 1e-12,
        degenerate_normals: degenerate,
    }
}

// ---- on-tape rendering -----------------------------------------------------------------

/// Rendering of one ray recorded on a tape: the color and accumulated
/// weight are differentiable nodes; gradients of the SDF at every sample
/// are exposed for the eikonal term.
pub struct TapeRender<const D: usize> {
    pub color: [TapeValue; 3],
    pub acc: TapeValue,
    /// (spatial gradient handles, |f| value) per fine sample.
    pub sample_grads: Vec<([TapeValue; D], f64)>,
    pub depth: f64,
    pub degenerate_normals: usize,
    pub degenerate_blends: usize,
    pub ts: Vec<f64>,
}

/// Render one ray entirely on the tape. The coarse proposal pass runs in
/// plain f64 (it only places samples); every quantity that reaches the loss
/// is recorded.
#[allow(clippy::too_many_arguments)]
pub fn render_ray_on_tape<const D: usize>(
    bundle: &FieldBundle,
    tape: &mut Tape,
    tp: &TapeParams,
    bray: &BoundedRay<D>,
    sampling: &SamplingConfig,
    background: [f64; 3],
    ray_id: u64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeRender<D>> {
    render_ray_on_tape_inner(bundle, tape, tp, bray, sampling, background, rng.as_deref_mut())
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("ray {ray_id}: {m}")),
            Error::Domain(m) => Error::Numeric(format!("ray {ray_id}: {m}")),
            other => other,
        })
}

fn render_ray_on_tape_inner<const D: usize>(
    bundle: &FieldBundle,
    tape: &mut Tape,
    tp: &TapeParams,
    bray: &BoundedRay<D>,
    sampling: &SamplingConfig,
    background: [f64; 3],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TapeRender<D>> {
    let cfg = bundle.cfg.directional;
    let s = bundle.s_on_tape(tape, tp);
    let gamma = bundle
        .gamma_b_on_tape(tape, tp)
        .map(|gb| dirparam::gamma_on_tape(tape, gb));
    let d_view_f = geom::scale(bray.ray.dir, -1.0);
    let d_view: [TapeValue; D] = d_view_f.map(|c| tape.constant(c));

    let coarse = stratified_samples(bray.near, bray.far, sampling.n_coarse, rng.as_deref_mut());
    let ts = if sampling.n_importance > 0 {
        let fs: Vec<f64> = coarse
            .iter()
            .map(|&t| bundle.sdf_value(bray.ray.at(t)))
            .collect();
        let alphas: Vec<f64> = (0..coarse.len() - 1)
            .map(|i| sdensity_opacity(fs[i], fs[i + 1], bundle.s()))
            .collect();
        let (weights, _) = composite_weights(&alphas);
        importance_resample(
            &coarse,
            &weights,
            sampling.n_importance,
            bray.near,
            bray.far,
            rng.as_deref_mut(),
        )
    } else {
        coarse
    };

    let k = ts.len();
    let mut f_vals = Vec::with_capacity(k);
    let mut sample_grads = Vec::with_capacity(k);
    let mut colors: Vec<[TapeValue; 3]> = Vec::with_capacity(k - 1);
    let mut degenerate_normals = 0usize;
    let mut degenerate_blends = 0usize;
    for (i, &t) in ts.iter().enumerate() {
        let x = bray.ray.at(t);
        let eval = bundle.sdf_on_tape(tape, tp, x);
        let f = eval.f.p;
        sample_grads.push((eval.f.t, f.value().abs()));
        f_vals.push(f);
        if i + 1 == k {
            break;
        }
        // Unit normal from the spatial gradient, on the tape.
        let pairs: Vec<(TapeValue, TapeValue)> =
            eval.f.t.iter().map(|&g| (g, g)).collect();
        let g2 = tape.dot_gather(&pairs);
        let normal = if g2.value() < dirparam::DEGENERATE_NORM_EPS * dirparam::DEGENERATE_NORM_EPS
        {
            None
        } else {
            let n = tape.sqrt(g2)?;
            Some(std::array::from_fn(|j| {
                tape.div(eval.f.t[j], n).expect("norm positive by check")
            }))
        };
        let dir_feats = match cfg.fusion {
            FusionPoint::PreEncoding => {
                let td = dirparam::direction_on_tape(tape, &cfg, d_view, normal, gamma, f);
                match td.fallback {
                    DirFallback::DegenerateNormal => degenerate_normals += 1,
                    DirFallback::DegenerateBlend => degenerate_blends += 1,
                    DirFallback::None => {}
                }
                pe_on_tape(bundle.cfg.dir_pe, tape, &td.d)
            }
            FusionPoint::PostEncoding => match (cfg.mode, normal) {
                (dirparam::DirMode::Viewing, _) => pe_on_tape(bundle.cfg.dir_pe, tape, &d_view),
                (_, None) => {
                    degenerate_normals += 1;
                    pe_on_tape(bundle.cfg.dir_pe, tape, &d_view)
                }
                (dirparam::DirMode::Reflection, Some(n)) => {
                    let d_ref = dirparam::reflect_on_tape(tape, d_view, n);
                    pe_on_tape(bundle.cfg.dir_pe, tape, &d_ref)
                }
                (dirparam::DirMode::Hybrid, Some(n)) => {
                    let g = gamma.expect("hybrid mode carries gamma");
                    let alpha = dirparam::blend_weight_on_tape(tape, g, f, cfg.detach_blend);
                    let d_ref = dirparam::reflect_on_tape(tape, d_view, n);
                    let view_feats = pe_on_tape(bundle.cfg.dir_pe, tape, &d_view);
                    let ref_feats = pe_on_tape(bundle.cfg.dir_pe, tape, &d_ref);
                    view_feats
                        .iter()
                        .zip(ref_feats.iter())
                        .map(|(&v, &r)| {
                            // v + alpha * (r - v)
                            let diff = tape.sub(r, v);
                            let stepped = tape.mul(alpha, diff);
                            tape.add(stepped, v)
                        })
                        .collect()
                }
            },
        };
        let n_in = normal.unwrap_or_else(|| [tape.constant(0.0); D]);
        colors.push(bundle.radiance_on_tape(tape, tp, x, n_in, &dir_feats, &eval.feature));
    }

    // Opacities, weights, compositing — all on the tape.
    let mut transmit = tape.constant(1.0);
    let mut weights = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let a = sdensity_opacity_on_tape(tape, f_vals[i], f_vals[i + 1], s)?;
        let w = tape.mul(transmit, a);
        weights.push(w);
        let one_minus = tape.affine(a, -1.0, 1.0);
        transmit = tape.mul(transmit, one_minus);
    }
    let acc = {
        // sum of weights = 1 - final transmittance, but accumulate
        // explicitly so the invariant is the recorded one.
        let one = tape.constant(1.0);
        let pairs: Vec<(TapeValue, TapeValue)> = weights.iter().map(|&w| (w, one)).collect();
        tape.dot_gather(&pairs)
    };
    let color: [TapeValue; 3] = std::array::from_fn(|ch| {
        let pairs: Vec<(TapeValue, TapeValue)> = weights
            .iter()
            .zip(colors.iter())
            .map(|(&w, c)| (w, c[ch]))
            .collect();
        let fg = tape.dot_gather(&pairs);
        // + (1 - acc) * background
        let rem = tape.affine(acc, -1.0, 1.0);
        let bg = tape.scale(rem, background[ch]);
        tape.add(fg, bg)
    });
    let mut depth = 0.0;
    for (i, w) in weights.iter().enumerate() {
        depth += w.value() * ts[i];
    }
    depth /= acc.value().max(1e-9);

    tape.check_health()?;
    Ok(TapeRender {
        color,
        acc,
        sample_grads,
        depth,
        degenerate_normals,
        degenerate_blends,
        ts,
    })
}
