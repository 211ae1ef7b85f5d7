//! Losses, Adam, the learning-rate schedule, and the fit loop.
//!
//! Each ray builds its own tape (render + per-ray loss terms), backward
//! runs per ray, and gradients accumulate into one batch vector in ray
//! order — so a run is bitwise reproducible for a fixed seed and worker
//! count, and rays can be processed by a thread pool without changing the
//! reduction order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom;
use crate::io::{self, NamedArray};
use crate::nets::FieldBundle;
use crate::render::{self, BoundedRay, SamplingConfig, TapeRender};
use crate::rng;
use crate::scenes::LoadedDataset;
use crate::tape::{Tape, TapeValue};

// ---- losses -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            eikonal: 0.1,
            mask: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.color < 0.0 || self.eikonal < 0.0 || self.mask < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Clamp bound for the mask BCE.
pub const MASK_EPS: f64 = 1e-4;
/// Keeps sqrt differentiable at an exactly-zero gradient; one ulp below
/// anything the loss can resolve around the unit level set.
const EIKONAL_EPS: f64 = 1e-24;

/// Mean absolute error over channels of one rendered ray.
pub fn color_term(tape: &mut Tape, rendered: &[TapeValue; 3], target: [f64; 3]) -> TapeValue {
    let mut sum = None;
    for ch in 0..3 {
        let d = tape.add_const(rendered[ch], -target[ch]);
        let a = tape.abs(d);
        sum = Some(match sum {
            None => a,
            Some(s) => tape.add(s, a),
        });
    }
    tape.scale(sum.unwrap(), 1.0 / 3.0)
}

/// Binary cross-entropy of the accumulated weight against the mask, with
/// the weight clamped into (eps, 1-eps).
pub fn mask_term(tape: &mut Tape, acc: TapeValue, mask: f64) -> Result<TapeValue> {
    let lo = tape.max_const(acc, MASK_EPS);
    let w = tape.min_const(lo, 1.0 - MASK_EPS);
    let ln_w = tape.ln(w)?;
    let one_minus = tape.affine(w, -1.0, 1.0);
    let ln_1w = tape.ln(one_minus)?;
    let a = tape.scale(ln_w, -mask);
    let b = tape.scale(ln_1w, -(1.0 - mask));
    Ok(tape.add(a, b))
}

/// Sum over points of (|grad f| - 1)^2; the caller divides by the global
/// point count so per-ray contributions combine into a mean.
pub fn eikonal_sum<const D: usize>(
    tape: &mut Tape,
    grads: &[[TapeValue; D]],
) -> Result<Option<TapeValue>> {
    let mut terms = Vec::with_capacity(grads.len());
    for g in grads {
        let pairs: Vec<(TapeValue, TapeValue)> = g.iter().map(|&c| (c, c)).collect();
        let g2 = tape.dot_gather(&pairs);
        let g2e = tape.add_const(g2, EIKONAL_EPS);
        let n = tape.sqrt(g2e)?;
        let d = tape.add_const(n, -1.0);
        terms.push(tape.mul(d, d));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let one = tape.constant(1.0);
    let pairs: Vec<(TapeValue, TapeValue)> = terms.iter().map(|&t| (t, one)).collect();
    Ok(Some(tape.dot_gather(&pairs)))
}

/// The same residual in plain f64, for oracles and diagnostics.
pub fn eikonal_residual_f64<const D: usize>(grad: [f64; D]) -> f64 {
    let n = (geom::dot(grad, grad) + EIKONAL_EPS).sqrt();
    (n - 1.0) * (n - 1.0)
}

// ---- optimizer ---------------------------------------------------------------

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Linear warmup to `base`, then cosine decay to `floor`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub base: f64,
    pub floor: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1);
        let p = (step - self.warmup_steps) as f64 / span as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

// ---- configuration --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    /// Fraction of each batch drawn from masked (object) pixels.
    pub masked_fraction: f64,
    pub warmup_steps: usize,
    pub lr_base: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables mid-run evaluation.
    pub eval_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub workers: usize,
    pub sampling: SamplingConfig,
    pub weights: LossWeights,
    /// Extra eikonal points drawn uniformly in the domain cube each step.
    pub uniform_eikonal_points: usize,
}

impl TrainConfig {
    pub fn desk_default(dim: usize) -> Self {
        TrainConfig {
            iterations: if dim == 2 { 5_000 } else { 30_000 },
            rays_per_batch: if dim == 2 { 256 } else { 512 },
            masked_fraction: 0.75,
            warmup_steps: 500,
            lr_base: 5e-4,
            lr_floor: 5e-6,
            seed: 0,
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 0,
            workers: 1,
            sampling: SamplingConfig::desk_default(dim),
            weights: LossWeights::default(),
            uniform_eikonal_points: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.rays_per_batch == 0 {
            return Err(Error::Config("rays_per_batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.masked_fraction) {
            return Err(Error::Config("masked_fraction must lie in [0,1]".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            base: self.lr_base,
            floor: self.lr_floor,
            total_steps: self.iterations,
        }
    }
}

// ---- batching --------------------------------------------------------------------

/// Dataset flattened for ray-level sampling, with masked/unmasked pools.
pub struct RayBatchSource<const D: usize> {
    pub rays: Vec<BoundedRay<D>>,
    pub colors: Vec<[f64; 3]>,
    pub masks: Vec<f64>,
    pub background: [f64; 3],
    pub domain_radius: f64,
    masked: Vec<u32>,
    unmasked: Vec<u32>,
}

impl<const D: usize> RayBatchSource<D> {
    pub fn from_dataset(ds: &LoadedDataset<D>) -> RayBatchSource<D> {
        let mut rays = Vec::with_capacity(ds.pixel_count());
        let mut colors = Vec::with_capacity(ds.pixel_count());
        let mut masks = Vec::with_capacity(ds.pixel_count());
        let mut masked = Vec::new();
        let mut unmasked = Vec::new();
        for view in &ds.views {
            for (i, ray) in view.rays.iter().enumerate() {
                let idx = rays.len() as u32;
                rays.push(BoundedRay::through_domain(*ray, ds.meta.scene_scale));
                colors.push(view.colors[i]);
                masks.push(if view.mask[i] { 1.0 } else { 0.0 });
                if view.mask[i] {
                    masked.push(idx);
                } else {
                    unmasked.push(idx);
                }
            }
        }
        RayBatchSource {
            rays,
            colors,
            masks,
            background: ds.meta.background,
            domain_radius: ds.meta.scene_scale,
            masked,
            unmasked,
        }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Pixel indices for one step: `masked_fraction` of the batch from the
    /// object pixels, the rest from background, both with replacement.
    pub fn sample_batch(&self, seed: u64, step: usize, n: usize, masked_fraction: f64) -> Vec<u32> {
        let mut r = rng::stream(seed, "batch", &[step as u64]);
        let want_masked = if self.unmasked.is_empty() {
            n
        } else if self.masked.is_empty() {
            0
        } else {
            ((n as f64 * masked_fraction).round() as usize).min(n)
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let pool = if i < want_masked {
                &self.masked
            } else {
                &self.unmasked
            };
            out.push(pool[rng::uniform_index(&mut r, pool.len())]);
        }
        out
    }
}

// ---- one training step ---------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub total: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub s: f64,
    pub gamma: Option<f64>,
    pub degenerate_normals: usize,
}

/// Per-ray loss contributions and gradient, kept separate so the global
/// reduction can run in ray order regardless of how rays were chunked
/// across workers (f64 addition order fixes the bits).
struct RayContribution {
    grads: Vec<f64>,
    color: f64,
    eikonal: f64,
    mask: f64,
    degenerate: usize,
}

/// Render + losses + backward for one contiguous chunk of the batch on a
/// reused tape. `eik_norm` is the global 1/N for the eikonal mean.
fn run_chunk<const D: usize>(
    bundle: &FieldBundle,
    src: &RayBatchSource<D>,
    indices: &[u32],
    offset: usize,
    cfg: &TrainConfig,
    step: usize,
    eik_norm: f64,
) -> Result<Vec<RayContribution>> {
    let mut tape = Tape::new();
    let batch = cfg.rays_per_batch as f64;
    let w = cfg.weights;
    let mut out_contribs = Vec::with_capacity(indices.len());
    for (k, &pix) in indices.iter().enumerate() {
        let pos = offset + k;
        tape.reset();
        let tp = bundle.push_params(&mut tape);
        let mut ray_rng = rng::stream(cfg.seed, "ray", &[step as u64, pos as u64]);
        let jitter = if cfg.sampling.jitter {
            Some(&mut ray_rng)
        } else {
            None
        };
        let out: TapeRender<D> = render::render_ray_on_tape(
            bundle,
            &mut tape,
            &tp,
            &src.rays[pix as usize],
            &cfg.sampling,
            src.background,
            pix as u64,
            jitter,
        )?;

        let c = color_term(&mut tape, &out.color, src.colors[pix as usize]);
        let m = mask_term(&mut tape, out.acc, src.masks[pix as usize])?;
        let grads_only: Vec<[TapeValue; D]> =
            out.sample_grads.iter().map(|(g, _)| *g).collect();
        let e = eikonal_sum(&mut tape, &grads_only)?;

        let mut loss = tape.scale(c, w.color / batch);
        let ms = tape.scale(m, w.mask / batch);
        loss = tape.add(loss, ms);
        let mut eik_val = 0.0;
        if let Some(e) = e {
            eik_val = e.value();
            let es = tape.scale(e, w.eikonal * eik_norm);
            loss = tape.add(loss, es);
        }
        let mut grads = vec![0.0; bundle.param_count()];
        tape.backward_into(loss, &mut grads, 1.0)
            .map_err(|err| Error::Numeric(format!("ray {pix} backward: {err}")))?;
        out_contribs.push(RayContribution {
            grads,
            color: c.value(),
            eikonal: eik_val,
            mask: m.value(),
            degenerate: out.degenerate_normals,
        });
    }
    Ok(out_contribs)
}

/// Uniform-domain eikonal points on their own tape.
fn uniform_eikonal<const D: usize>(
    bundle: &FieldBundle,
    cfg: &TrainConfig,
    step: usize,
    radius: f64,
    eik_norm: f64,
    grads: &mut [f64],
) -> Result<f64> {
    if cfg.uniform_eikonal_points == 0 {
        return Ok(0.0);
    }
    let mut r = rng::stream(cfg.seed, "eik", &[step as u64]);
    let mut tape = Tape::new();
    let tp = bundle.push_params(&mut tape);
    let mut gs = Vec::with_capacity(cfg.uniform_eikonal_points);
    for _ in 0..cfg.uniform_eikonal_points {
        let x: [f64; D] = std::array::from_fn(|_| (2.0 * rng::uniform(&mut r) - 1.0) * radius);
        let eval = bundle.sdf_on_tape(&mut tape, &tp, x);
        gs.push(eval.f.t);
    }
    let sum = eikonal_sum(&mut tape, &gs)?.expect("nonempty");
    let scaled = tape.scale(sum, cfg.weights.eikonal * eik_norm);
    tape.backward_into(scaled, grads, 1.0)?;
    Ok(sum.value())
}

/// One optimization step: sample a batch, accumulate gradients in ray
/// order (chunked across workers), update all parameters with Adam.
pub fn train_step<const D: usize>(
    bundle: &mut FieldBundle,
    src: &RayBatchSource<D>,
    cfg: &TrainConfig,
    adam: &mut Adam,
    step: usize,
) -> Result<StepMetrics> {
    let indices = src.sample_batch(cfg.seed, step, cfg.rays_per_batch, cfg.masked_fraction);
    let samples_per_ray = cfg.sampling.n_coarse + cfg.sampling.n_importance;
    let n_eik = indices.len() * samples_per_ray + cfg.uniform_eikonal_points;
    let eik_norm = 1.0 / n_eik.max(1) as f64;

    let workers = cfg.workers.min(indices.len()).max(1);
    let results: Vec<Result<Vec<RayContribution>>> = if workers == 1 {
        vec![run_chunk(bundle, src, &indices, 0, cfg, step, eik_norm)]
    } else {
        let chunk = indices.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .enumerate()
                .map(|(ci, slice)| {
                    let bundle = &*bundle;
                    scope.spawn(move || {
                        run_chunk(bundle, src, slice, ci * chunk, cfg, step, eik_norm)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut grads = vec![0.0; bundle.param_count()];
    let mut color = 0.0;
    let mut eik = 0.0;
    let mut mask = 0.0;
    let mut degenerate = 0usize;
    for res in results {
        for r in res? {
            for (a, g) in grads.iter_mut().zip(r.grads.iter()) {
                *a += g;
            }
            color += r.color;
            eik += r.eikonal;
            mask += r.mask;
            degenerate += r.degenerate;
        }
    }
    eik += uniform_eikonal::<D>(bundle, cfg, step, src.domain_radius, eik_norm, &mut grads)?;

    let batch = indices.len() as f64;
    let color_mean = color / batch;
    let mask_mean = mask / batch;
    let eik_mean = eik * eik_norm;
    let w = cfg.weights;
    let total = w.color * color_mean + w.mask * mask_mean + w.eikonal * eik_mean;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "step {step}: non-finite total loss ({total})"
        )));
    }

    let lr = cfg.schedule().lr_at(step);
    adam.update(bundle.store.data_mut(), &grads, lr);

    Ok(StepMetrics {
        total,
        color: color_mean,
        eikonal: eik_mean,
        mask: mask_mean,
        s: bundle.s(),
        gamma: bundle.gamma(),
        degenerate_normals: degenerate,
    })
}

// ---- checkpoints ----------------------------------------------------------------------

const OPT_M: &str = "opt.m";
const OPT_V: &str = "opt.v";
const OPT_STEP: &str = "opt.step";

pub fn save_checkpoint(path: &Path, bundle: &FieldBundle, adam: &Adam, step: usize) -> Result<()> {
    let mut arrays = bundle.to_arrays();
    arrays.push(NamedArray {
        name: OPT_M.into(),
        shape: vec![adam.m.len()],
        data: adam.m.clone(),
    });
    arrays.push(NamedArray {
        name: OPT_V.into(),
        shape: vec![adam.v.len()],
        data: adam.v.clone(),
    });
    arrays.push(NamedArray {
        name: OPT_STEP.into(),
        shape: vec![1],
        data: vec![step as f64],
    });
    io::write_arrays(path, &arrays)
}

pub fn load_checkpoint(
    path: &Path,
    cfg: crate::nets::FieldConfig,
) -> Result<(FieldBundle, Adam, usize)> {
    let arrays = io::read_arrays(path)?;
    let bundle = FieldBundle::from_arrays(cfg, &arrays)?;
    let m = io::find_array(&arrays, OPT_M)?.data.clone();
    let v = io::find_array(&arrays, OPT_V)?.data.clone();
    let step = io::find_array(&arrays, OPT_STEP)?.data[0] as usize;
    if m.len() != bundle.param_count() || v.len() != bundle.param_count() {
        return Err(Error::Format(
            "checkpoint optimizer state does not match parameter count".into(),
        ));
    }
    let mut adam = Adam::new(bundle.param_count());
    adam.m = m;
    adam.v = v;
    adam.step = step as u64;
    Ok((bundle, adam, step))
}

// ---- fit loop ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub s: f64,
    pub gamma: Option<f64>,
    pub chamfer: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_color,loss_eikonal,loss_mask,s,gamma,chamfer";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let gamma = r.gamma.map(|g| format!("{g:.17e}")).unwrap_or_default();
        let chamfer = r.chamfer.map(|c| format!("{c:.17e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
            r.step, r.total, r.color, r.eikonal, r.mask, r.s, gamma, chamfer
        ));
    }
    out
}

#[derive(Debug)]
pub struct FitReport {
    pub metrics: Vec<MetricsRow>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Full training loop from a fresh optimizer. `run_dir` (if given) receives
/// `metrics.csv` and checkpoints; `eval_fn` is called at the eval cadence and
/// may return a Chamfer distance to log.
pub fn fit<const D: usize>(
    bundle: &mut FieldBundle,
    src: &RayBatchSource<D>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    eval_fn: Option<&mut dyn FnMut(&FieldBundle, usize) -> Option<f64>>,
) -> Result<FitReport> {
    let mut adam = Adam::new(bundle.param_count());
    fit_from(bundle, &mut adam, 0, src, cfg, run_dir, eval_fn)
}

/// Continue training from `start_step` with restored optimizer state. Step
/// randomness is derived statelessly from `(seed, step)`, so a resumed run
/// reproduces exactly the steps an uninterrupted one would have taken; the
/// resumed rows are merged into any existing `metrics.csv`.
pub fn fit_from<const D: usize>(
    bundle: &mut FieldBundle,
    adam: &mut Adam,
    start_step: usize,
    src: &RayBatchSource<D>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    mut eval_fn: Option<&mut dyn FnMut(&FieldBundle, usize) -> Option<f64>>,
) -> Result<FitReport> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::Usage("fit: empty dataset".into()));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    if let Some(dir) = run_dir {
        let path = dir.join("checkpoint.bin");
        if start_step == 0 && cfg.checkpoint_every > 0 {
            // Seed a checkpoint of the initial state so an abort on any step
            // has something to point at.
            save_checkpoint(&path, bundle, adam, 0)?;
            last_checkpoint = Some(path);
        } else if start_step > 0 && path.exists() {
            last_checkpoint = Some(path);
        }
    }
    for step in start_step..cfg.iterations {
        let metrics = train_step(bundle, src, cfg, adam, step).map_err(|e| {
            let ckpt = last_checkpoint
                .as_ref()
                .map(|p| format!("; last good checkpoint: {}", p.display()))
                .unwrap_or_default();
            Error::Numeric(format!("{e}{ckpt}"))
        })?;

        let log_this = (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.iterations;
        let eval_this =
            cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.iterations);
        let chamfer = if eval_this {
            eval_fn.as_mut().and_then(|f| f(bundle, step + 1))
        } else {
            None
        };
        if log_this || chamfer.is_some() {
            rows.push(MetricsRow {
                step: step + 1,
                total: metrics.total,
                color: metrics.color,
                eikonal: metrics.eikonal,
                mask: metrics.mask,
                s: metrics.s,
                gamma: metrics.gamma,
                chamfer,
            });
        }
        if let Some(dir) = run_dir {
            let final_step = step + 1 == cfg.iterations;
            if final_step || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
                // Metrics land before the checkpoint: whichever write a kill
                // interrupts, resuming regenerates the missing rows exactly.
                flush_metrics(dir, start_step, &rows)?;
                let path = dir.join("checkpoint.bin");
                save_checkpoint(&path, bundle, adam, step + 1)?;
                last_checkpoint = Some(path);
            }
        }
    }
    if let Some(dir) = run_dir {
        flush_metrics(dir, start_step, &rows)?;
    }
    Ok(FitReport {
        metrics: rows,
        last_checkpoint,
    })
}

/// Write `metrics.csv`, keeping rows from before `start_step` (a resumed
/// run's earlier legs) so the merged log matches an uninterrupted run line
/// for line.
fn flush_metrics(dir: &Path, start_step: usize, rows: &[MetricsRow]) -> Result<()> {
    let path = dir.join("metrics.csv");
    let mut text = String::new();
    if start_step > 0 {
        if let Ok(existing) = std::fs::read_to_string(&path) {
            for line in existing.lines().skip(1) {
                let step: usize = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(usize::MAX);
                if step <= start_step {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    text.push_str(&metrics_to_csv(rows)[METRICS_HEADER.len() + 1..]);
    let mut full = String::from(METRICS_HEADER);
    full.push('\n');
    full.push_str(&text);
    io::atomic_write(&path, full.as_bytes())
}
