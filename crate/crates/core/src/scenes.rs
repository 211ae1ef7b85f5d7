//! Analytic ground-truth scenes: CSG signed distance fields with materials
//! and lights, camera rigs, and synthetic dataset generation.
//!
//! Everything here is exact and deterministic — these scenes are the oracle
//! the learned fields are measured against. The same definitions drive 2D
//! flatland scenes (one-row images) and small 3D scenes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{self, Ray};
use crate::io;

// ---- CSG signed distance fields -------------------------------------------

/// CSG tree over exact primitives. Union/intersection/difference compose by
/// min/max, which bounds the true distance but keeps the zero level set
/// exact — good enough for ground truth geometry and safe for sphere
/// tracing from outside.
#[derive(Debug, Clone)]
pub enum Csg<const D: usize> {
    Sphere {
        center: [f64; D],
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        center: [f64; D],
        half: [f64; D],
    },
    /// f = n.x - offset; inside where f < 0. `normal` need not be unit at
    /// construction; it is normalized on evaluation.
    HalfSpace {
        normal: [f64; D],
        offset: f64,
    },
    Union(Box<Csg<D>>, Box<Csg<D>>),
    Intersect(Box<Csg<D>>, Box<Csg<D>>),
    Subtract(Box<Csg<D>>, Box<Csg<D>>),
    Translate(Box<Csg<D>>, [f64; D]),
}

/// Exact signed distance and its gradient, propagated through min/max by
/// picking the active branch (ties take the first operand).
pub fn analytic_eval<const D: usize>(csg: &Csg<D>, p: [f64; D]) -> (f64, [f64; D]) {
    match csg {
        Csg::Sphere { center, radius } => {
            let d = geom::sub(p, *center);
            let r = geom::norm(d);
            if r > 1e-12 {
                (r - radius, geom::scale(d, 1.0 / r))
            } else {
                // Center singularity: any unit vector is a valid subgradient.
                let mut g = [0.0; D];
                g[0] = 1.0;
                (-radius, g)
            }
        }
        Csg::Cuboid { center, half } => {
            let d = geom::sub(p, *center);
            let q: [f64; D] = std::array::from_fn(|i| d[i].abs() - half[i]);
            let outside: [f64; D] = q.map(|v| v.max(0.0));
            let out_len = geom::norm(outside);
            if out_len > 0.0 {
                let g = std::array::from_fn(|i| d[i].signum() * outside[i] / out_len);
                (out_len, g)
            } else {
                // Inside: distance to the closest face.
                let mut k = 0;
                for i in 1..D {
                    if q[i] > q[k] {
                        k = i;
                    }
                }
                let mut g = [0.0; D];
                g[k] = d[k].signum();
                (q[k], g)
            }
        }
        Csg::HalfSpace { normal, offset } => {
            let n = geom::normalize(*normal);
            (geom::dot(n, p) - offset, n)
        }
        Csg::Union(a, b) => {
            let ea = analytic_eval(a, p);
            let eb = analytic_eval(b, p);
            if ea.0 <= eb.0 {
                ea
            } else {
                eb
            }
        }
        Csg::Intersect(a, b) => {
            let ea = analytic_eval(a, p);
            let eb = analytic_eval(b, p);
            if ea.0 >= eb.0 {
                ea
            } else {
                eb
            }
        }
        Csg::Subtract(a, b) => {
            let ea = analytic_eval(a, p);
            let (fb, gb) = analytic_eval(b, p);
            if ea.0 >= -fb {
                ea
            } else {
                (-fb, geom::scale(gb, -1.0))
            }
        }
        Csg::Translate(c, t) => {
            let (f, g) = analytic_eval(c, geom::sub(p, *t));
            (f, g)
        }
    }
}

// ---- sphere tracing ---------------------------------------------------------

pub const TRACE_TOL: f64 = 1e-6;
pub const TRACE_MAX_STEPS: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct Hit<const D: usize> {
    pub t: f64,
    pub point: [f64; D],
    pub normal: [f64; D],
}

/// March along the ray stepping by the signed distance. Returns `None` past
/// `t_far` or when the step budget runs out without converging.
pub fn sphere_trace<const D: usize>(
    csg: &Csg<D>,
    ray: &Ray<D>,
    t_near: f64,
    t_far: f64,
) -> Option<Hit<D>> {
    let mut t = t_near;
    for _ in 0..TRACE_MAX_STEPS {
        if t > t_far {
            return None;
        }
        let p = geom::add(ray.origin, geom::scale(ray.dir, t));
        let (f, g) = analytic_eval(csg, p);
        if f < TRACE_TOL {
            return Some(Hit {
                t,
                point: p,
                normal: geom::normalize(g),
            });
        }
        t += f;
    }
    None
}

// ---- materials, lights, shading -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub specular_strength: f64,
    pub shininess: f64,
    /// Fraction of the final color taken from the environment map along the
    /// analytic reflection direction; the strongest source of
    /// view-dependence in the synthetic scenes.
    pub mirror: f64,
}

impl Material {
    fn validate(&self) -> Result<()> {
        if self.albedo.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Config("albedo channels must lie in [0,1]".into()));
        }
        if self.specular_strength < 0.0 || self.shininess <= 0.0 {
            return Err(Error::Config(
                "specular_strength must be >= 0 and shininess > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mirror) {
            return Err(Error::Config("mirror must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DirectionalLight<const D: usize> {
    /// Unit vector from the surface toward the light.
    pub dir: [f64; D],
    pub intensity: f64,
}

/// One fixed environment lobe: color scaled by max(d . dir, 0)^power.
#[derive(Debug, Clone, Copy)]
pub struct EnvLobe<const D: usize> {
    pub dir: [f64; D],
    pub color: [f64; 3],
    pub power: f64,
}

#[derive(Debug, Clone)]
pub struct Lights<const D: usize> {
    pub ambient: f64,
    pub lights: Vec<DirectionalLight<D>>,
    pub env_base: [f64; 3],
    pub env_lobes: [EnvLobe<D>; 3],
}

/// Procedural environment: a base color plus three fixed directional lobes.
pub fn env_color<const D: usize>(lights: &Lights<D>, d: [f64; D]) -> [f64; 3] {
    let mut c = lights.env_base;
    for lobe in &lights.env_lobes {
        let a = geom::dot(d, lobe.dir).max(0.0).powf(lobe.power);
        for ch in 0..3 {
            c[ch] += a * lobe.color[ch];
        }
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Blinn-Phong with directional lights, plus a mirror blend that samples
/// the environment along the analytic reflection direction. `d_view` points
/// from the surface toward the camera.
pub fn shade<const D: usize>(
    mat: &Material,
    lights: &Lights<D>,
    n: [f64; D],
    d_view: [f64; D],
) -> [f64; 3] {
    let mut base = [lights.ambient; 3];
    for l in &lights.lights {
        let diff = geom::dot(n, l.dir).max(0.0);
        // Light exactly opposite the view leaves no half-vector (and no
        // visible highlight).
        let spec = match geom::normalize_or(geom::add(l.dir, d_view), 1e-9) {
            Some(h) => mat.specular_strength * geom::dot(n, h).max(0.0).powf(mat.shininess),
            None => 0.0,
        };
        for ch in 0..3 {
            base[ch] += l.intensity * (mat.albedo[ch] * diff + spec);
        }
    }
    if mat.mirror > 0.0 {
        let env = env_color(lights, geom::reflect(d_view, n));
        for ch in 0..3 {
            base[ch] = (1.0 - mat.mirror) * base[ch] + mat.mirror * env[ch];
        }
    }
    base.map(|v| v.clamp(0.0, 1.0))
}

// ---- cameras -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewMeta {
    pub origin: Vec<f64>,
    pub target: Vec<f64>,
    /// 3D only; ignored in 2D.
    pub up: Option<Vec<f64>>,
    pub fov_deg: f64,
}

fn array_from<const D: usize>(v: &[f64], what: &str) -> Result<[f64; D]> {
    v.try_into()
        .map_err(|_| Error::Dimension(format!("{what}: expected {} components, got {}", D, v.len())))
}

/// Pixel-center rays for one view, row-major. 2D views are one row wide
/// fans in the plane; 3D views are pinholes looking at the target.
pub fn view_rays<const D: usize>(view: &ViewMeta, width: usize, height: usize) -> Result<Vec<Ray<D>>> {
    let origin: [f64; D] = array_from(&view.origin, "view origin")?;
    let target: [f64; D] = array_from(&view.target, "view target")?;
    let forward = geom::normalize_or(geom::sub(target, origin), 1e-12)
        .ok_or_else(|| Error::Config("view target coincides with origin".into()))?;
    let fov = view.fov_deg.to_radians();
    let mut rays = Vec::with_capacity(width * height);
    if D == 2 {
        if height != 1 {
            return Err(Error::Dimension("2D views are a single pixel row".into()));
        }
        let f2: [f64; 2] = [forward[0], forward[1]];
        for i in 0..width {
            let a = fov * ((i as f64 + 0.5) / width as f64 - 0.5);
            let d2 = geom::rot2(f2, a);
            let mut dir = [0.0; D];
            dir[0] = d2[0];
            dir[1] = d2[1];
            rays.push(Ray { origin, dir });
        }
    } else {
        let up3: [f64; 3] = match &view.up {
            Some(u) => array_from(u, "view up")?,
            None => [0.0, 0.0, 1.0],
        };
        let f3: [f64; 3] = [forward[0], forward[1], forward[2]];
        let right = geom::normalize_or(geom::cross3(f3, up3), 1e-9)
            .ok_or_else(|| Error::Config("view up is parallel to the view direction".into()))?;
        let upv = geom::cross3(right, f3);
        let th = (fov / 2.0).tan();
        let aspect = width as f64 / height as f64;
        for j in 0..height {
            for i in 0..width {
                let sx = (2.0 * (i as f64 + 0.5) / width as f64 - 1.0) * th * aspect;
                let sy = (1.0 - 2.0 * (j as f64 + 0.5) / height as f64) * th;
                let d3 = geom::normalize([
                    f3[0] + sx * right[0] + sy * upv[0],
                    f3[1] + sx * right[1] + sy * upv[1],
                    f3[2] + sx * right[2] + sy * upv[2],
                ]);
                let mut dir = [0.0; D];
                dir[..3].copy_from_slice(&d3);
                rays.push(Ray { origin, dir });
            }
        }
    }
    Ok(rays)
}

/// A fan of rays from one point toward a target — used by the dispersion
/// diagnostic.
pub fn fan_view(origin: &[f64], target: &[f64], fov_deg: f64) -> ViewMeta {
    ViewMeta {
        origin: origin.to_vec(),
        target: target.to_vec(),
        up: None,
        fov_deg,
    }
}

// ---- scene definitions ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AnalyticScene<const D: usize> {
    pub name: String,
    pub csg: Csg<D>,
    pub material: Material,
    pub lights: Lights<D>,
    pub background: [f64; 3],
    pub views: Vec<ViewMeta>,
    pub width: usize,
    pub height: usize,
    /// Radius of the ball bounding the object; rays sample inside it.
    pub domain_radius: f64,
    pub seed: u64,
}

impl<const D: usize> AnalyticScene<D> {
    /// Near/far along a ray: the segment inside the bounding ball around
    /// the origin (cameras always sit outside it).
    pub fn ray_span(&self, ray: &Ray<D>) -> (f64, f64) {
        let d = geom::norm(ray.origin);
        ((d - self.domain_radius).max(1e-3), d + self.domain_radius)
    }
}

#[derive(Debug, Clone)]
pub enum SceneKind {
    D2(AnalyticScene<2>),
    D3(AnalyticScene<3>),
}

impl SceneKind {
    pub fn name(&self) -> &str {
        match self {
            SceneKind::D2(s) => &s.name,
            SceneKind::D3(s) => &s.name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SceneKind::D2(_) => 2,
            SceneKind::D3(_) => 3,
        }
    }
}

pub const SCENE_IDS: [&str; 6] = [
    "flat2d-disk",
    "flat2d-lshape",
    "flat2d-blob",
    "flat2d-halfplane",
    "sphere3d",
    "bowl3d",
];

fn lights_2d() -> Lights<2> {
    let lobe = |deg: f64, color: [f64; 3], power: f64| EnvLobe {
        dir: [deg.to_radians().cos(), deg.to_radians().sin()],
        color,
        power,
    };
    Lights {
        ambient: 0.10,
        lights: vec![
            DirectionalLight {
                dir: geom::normalize([0.5, 0.84]),
                intensity: 0.85,
            },
            DirectionalLight {
                dir: geom::normalize([-0.7, 0.4]),
                intensity: 0.3,
            },
        ],
        env_base: [0.18, 0.20, 0.24],
        env_lobes: [
            lobe(40.0, [0.50, 0.32, 0.10], 2.0),
            lobe(160.0, [0.10, 0.26, 0.45], 2.0),
            lobe(275.0, [0.65, 0.62, 0.55], 10.0),
        ],
    }
}

fn lights_3d() -> Lights<3> {
    let lobe = |dir: [f64; 3], color: [f64; 3], power: f64| EnvLobe {
        dir: geom::normalize(dir),
        color,
        power,
    };
    Lights {
        ambient: 0.10,
        lights: vec![
            DirectionalLight {
                dir: geom::normalize([0.4, 0.3, 0.85]),
                intensity: 0.85,
            },
            DirectionalLight {
                dir: geom::normalize([-0.6, 0.5, 0.4]),
                intensity: 0.3,
            },
        ],
        env_base: [0.18, 0.20, 0.24],
        env_lobes: [
            lobe([0.8, 0.2, 0.55], [0.50, 0.32, 0.10], 2.0),
            lobe([-0.7, 0.4, 0.3], [0.10, 0.26, 0.45], 2.0),
            lobe([0.2, -0.75, 0.62], [0.65, 0.62, 0.55], 10.0),
        ],
    }
}

/// Full circle of inward-looking views, the flatland rig.
fn circle_views(n: usize, radius: f64, fov_deg: f64) -> Vec<ViewMeta> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            ViewMeta {
                origin: vec![radius * a.cos(), radius * a.sin()],
                target: vec![0.0, 0.0],
                up: None,
                fov_deg,
            }
        })
        .collect()
}

/// Arc of views above the scene (for the half-plane, which has no "behind").
fn arc_views(n: usize, radius: f64, fov_deg: f64, from_deg: f64, to_deg: f64) -> Vec<ViewMeta> {
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1).max(1) as f64;
            let a = (from_deg + t * (to_deg - from_deg)).to_radians();
            ViewMeta {
                origin: vec![radius * a.cos(), radius * a.sin()],
                target: vec![0.0, -0.1],
                up: None,
                fov_deg,
            }
        })
        .collect()
}

/// Spiral from the equator up the hemisphere, azimuth stepped by the golden
/// ratio for even coverage.
fn spiral_views(n: usize, radius: f64, fov_deg: f64) -> Vec<ViewMeta> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    (0..n)
        .map(|k| {
            let elev = (60.0 * k as f64 / (n - 1).max(1) as f64).to_radians();
            let azim = 2.0 * std::f64::consts::PI * ((k as f64 * GOLDEN) % 1.0);
            ViewMeta {
                origin: vec![
                    radius * elev.cos() * azim.cos(),
                    radius * elev.cos() * azim.sin(),
                    radius * elev.sin(),
                ],
                target: vec![0.0, 0.0, 0.0],
                up: Some(vec![0.0, 0.0, 1.0]),
                fov_deg,
            }
        })
        .collect()
}

const CAMERA_RADIUS: f64 = 2.0;
const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// The L-shape: a square with its upper-right quadrant carved out, leaving
/// a concave notch. This probe point sits centered in the notch interior
/// (outside the object).
pub const LSHAPE_NOTCH_PROBE: [f64; 2] = [0.3, 0.3];
/// A point solidly inside the L material.
pub const LSHAPE_INSIDE_PROBE: [f64; 2] = [-0.3, -0.3];

fn lshape_csg() -> Csg<2> {
    Csg::Subtract(
        Box::new(Csg::Cuboid {
            center: [0.0, 0.0],
            half: [0.55, 0.55],
        }),
        Box::new(Csg::Cuboid {
            center: [0.3, 0.3],
            half: [0.35, 0.35],
        }),
    )
}

/// Look up a built-in scene. Unknown ids list the valid ones.
pub fn builtin_scene(id: &str) -> Result<SceneKind> {
    let specular = |albedo| Material {
        albedo,
        specular_strength: 0.5,
        shininess: 64.0,
        mirror: 0.62,
    };
    let scene2 = |name: &str, csg, material: Material, views| -> Result<SceneKind> {
        material.validate()?;
        Ok(SceneKind::D2(AnalyticScene {
            name: name.into(),
            csg,
            material,
            lights: lights_2d(),
            background: BACKGROUND,
            views,
            width: 256,
            height: 1,
            domain_radius: 1.0,
            seed: 0,
        }))
    };
    let scene3 = |name: &str, csg, material: Material, views| -> Result<SceneKind> {
        material.validate()?;
        Ok(SceneKind::D3(AnalyticScene {
            name: name.into(),
            csg,
            material,
            lights: lights_3d(),
            background: BACKGROUND,
            views,
            width: 48,
            height: 48,
            domain_radius: 1.0,
            seed: 0,
        }))
    };
    match id {
        "flat2d-disk" => scene2(
            id,
            Csg::Sphere {
                center: [0.0, 0.0],
                radius: 0.55,
            },
            specular([0.62, 0.26, 0.18]),
            circle_views(64, CAMERA_RADIUS, 60.0),
        ),
        "flat2d-lshape" => scene2(
            id,
            lshape_csg(),
            specular([0.20, 0.42, 0.58]),
            circle_views(64, CAMERA_RADIUS, 60.0),
        ),
        // Heavily overlapped lobes keep the outline blobby but the junction
        // dimples shallow; this scene is the diffuse control, so it should
        // not smuggle in the concave-corner pathology the L-shape probes.
        "flat2d-blob" => scene2(
            id,
            Csg::Union(
                Box::new(Csg::Sphere {
                    center: [-0.13, -0.05],
                    radius: 0.36,
                }),
                Box::new(Csg::Union(
                    Box::new(Csg::Sphere {
                        center: [0.17, -0.03],
                        radius: 0.33,
                    }),
                    Box::new(Csg::Sphere {
                        center: [0.02, 0.19],
                        radius: 0.31,
                    }),
                )),
            ),
            Material {
                albedo: [0.55, 0.50, 0.30],
                specular_strength: 0.05,
                shininess: 8.0,
                mirror: 0.0,
            },
            circle_views(64, CAMERA_RADIUS, 60.0),
        ),
        // Diagnostic-only scene: an infinite planar mirror. Views come from
        // the upper arc and it is never part of the training comparisons.
        "flat2d-halfplane" => scene2(
            id,
            Csg::HalfSpace {
                normal: [0.0, 1.0],
                offset: -0.1,
            },
            Material {
                albedo: [0.30, 0.30, 0.33],
                specular_strength: 0.6,
                shininess: 64.0,
                mirror: 0.65,
            },
            arc_views(48, CAMERA_RADIUS, 60.0, 20.0, 160.0),
        ),
        "sphere3d" => scene3(
            id,
            Csg::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.5,
            },
            specular([0.60, 0.30, 0.20]),
            spiral_views(36, CAMERA_RADIUS, 50.0),
        ),
        "bowl3d" => scene3(
            id,
            Csg::Subtract(
                Box::new(Csg::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.55,
                }),
                Box::new(Csg::Sphere {
                    center: [0.0, 0.0, 0.25],
                    radius: 0.42,
                }),
            ),
            specular([0.28, 0.33, 0.50]),
            spiral_views(36, CAMERA_RADIUS, 50.0),
        ),
        other => Err(Error::Usage(format!(
            "unknown scene id '{other}'; valid ids: {}",
            SCENE_IDS.join(", ")
        ))),
    }
}

// ---- dataset generation -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub schema_version: u32,
    pub name: String,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub seed: u64,
    pub scene_scale: f64,
    pub views: Vec<ViewMeta>,
}

pub fn view_image_name(k: usize) -> String {
    format!("view_{k:04}.ppm")
}

pub fn view_tensor_name(k: usize) -> String {
    format!("view_{k:04}.f64")
}

pub fn view_mask_name(k: usize) -> String {
    format!("mask_{k:04}.pgm")
}

/// Trace and shade one view. Returns linear RGB per pixel plus the hit mask.
pub fn render_view<const D: usize>(
    scene: &AnalyticScene<D>,
    view: &ViewMeta,
) -> Result<(Vec<[f64; 3]>, Vec<bool>)> {
    let rays = view_rays::<D>(view, scene.width, scene.height)?;
    let mut colors = Vec::with_capacity(rays.len());
    let mut mask = Vec::with_capacity(rays.len());
    for ray in &rays {
        let (near, far) = scene.ray_span(ray);
        match sphere_trace(&scene.csg, ray, near, far) {
            Some(hit) => {
                let d_view = geom::scale(ray.dir, -1.0);
                colors.push(shade(&scene.material, &scene.lights, hit.normal, d_view));
                mask.push(true);
            }
            None => {
                colors.push(scene.background);
                mask.push(false);
            }
        }
    }
    Ok((colors, mask))
}

/// Write the dataset for a scene: `scene.json`, plus per view an 8-bit PPM
/// preview, the authoritative f64 tensor [H, W, 3], and the P5 mask.
pub fn generate_dataset<const D: usize>(scene: &AnalyticScene<D>, dir: &Path) -> Result<SceneMeta> {
    std::fs::create_dir_all(dir)?;
    for (k, view) in scene.views.iter().enumerate() {
        let (colors, mask) = render_view(scene, view)?;
        io::write_ppm(&dir.join(view_image_name(k)), scene.width, scene.height, &colors)?;
        let flat: Vec<f64> = colors.iter().flat_map(|c| c.iter().copied()).collect();
        io::write_f64_tensor(
            &dir.join(view_tensor_name(k)),
            &[scene.height, scene.width, 3],
            &flat,
        )?;
        let gray: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        io::write_pgm(&dir.join(view_mask_name(k)), scene.width, scene.height, &gray)?;
    }
    let meta = SceneMeta {
        schema_version: 1,
        name: scene.name.clone(),
        dim: D,
        width: scene.width,
        height: scene.height,
        background: scene.background,
        seed: scene.seed,
        scene_scale: scene.domain_radius,
        views: scene.views.clone(),
    };
    io::atomic_write(&dir.join("scene.json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

// ---- dataset loading -----------------------------------------------------------

pub struct LoadedView<const D: usize> {
    pub rays: Vec<Ray<D>>,
    pub colors: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

pub struct LoadedDataset<const D: usize> {
    pub meta: SceneMeta,
    pub views: Vec<LoadedView<D>>,
}

impl<const D: usize> LoadedDataset<D> {
    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.rays.len()).sum()
    }
}

pub fn load_meta(dir: &Path) -> Result<SceneMeta> {
    let raw = std::fs::read(dir.join("scene.json"))?;
    let meta: SceneMeta = serde_json::from_slice(&raw)?;
    if meta.schema_version != 1 {
        return Err(Error::Format(format!(
            "scene.json: unsupported schema_version {}",
            meta.schema_version
        )));
    }
    Ok(meta)
}

pub fn load_dataset<const D: usize>(dir: &Path) -> Result<LoadedDataset<D>> {
    let meta = load_meta(dir)?;
    if meta.dim != D {
        return Err(Error::Dimension(format!(
            "dataset is {}-dimensional, loader instantiated for {}",
            meta.dim, D
        )));
    }
    let px = meta.width * meta.height;
    let mut views = Vec::with_capacity(meta.views.len());
    for (k, vm) in meta.views.iter().enumerate() {
        let rays = view_rays::<D>(vm, meta.width, meta.height)?;
        let (dims, flat) = io::read_f64_tensor(&dir.join(view_tensor_name(k)))?;
        if dims != vec![meta.height, meta.width, 3] {
            return Err(Error::Format(format!(
                "view {k}: tensor dims {dims:?} do not match scene.json"
            )));
        }
        let colors: Vec<[f64; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (mw, mh, gray) = io::read_pgm(&dir.join(view_mask_name(k)))?;
        if (mw, mh) != (meta.width, meta.height) {
            return Err(Error::Format(format!("view {k}: mask size mismatch")));
        }
        let mask: Vec<bool> = gray.iter().map(|&g| g >= 128).collect();
        if rays.len() != px || colors.len() != px || mask.len() != px {
            return Err(Error::Format(format!("view {k}: inconsistent pixel counts")));
        }
        views.push(LoadedView { rays, colors, mask });
    }
    Ok(LoadedDataset { meta, views })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_distance_and_gradient() {
        let s = Csg::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        };
        let (f, g) = analytic_eval(&s, [1.0, 0.0, 0.0]);
        assert!((f - 0.5).abs() < 1e-15);
        assert_eq!(g, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn union_takes_the_minimum() {
        let a = Csg::Sphere {
            center: [-0.5, 0.0],
            radius: 0.3,
        };
        let b = Csg::Sphere {
            center: [0.5, 0.0],
            radius: 0.3,
        };
        let u = Csg::Union(Box::new(a.clone()), Box::new(b.clone()));
        for p in [[-0.9, 0.1], [0.0, 0.0], [0.8, -0.2]] {
            let fu = analytic_eval(&u, p).0;
            let fa = analytic_eval(&a, p).0;
            let fb = analytic_eval(&b, p).0;
            assert_eq!(fu, fa.min(fb));
        }
    }

    #[test]
    fn lshape_probe_points() {
        let l = lshape_csg();
        assert!(analytic_eval(&l, LSHAPE_NOTCH_PROBE).0 > 0.0, "notch must be carved out");
        assert!(analytic_eval(&l, LSHAPE_INSIDE_PROBE).0 < 0.0, "arm must be solid");
        // Just outside the outer boundary.
        assert!(analytic_eval(&l, [-0.7, 0.0]).0 > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes: Vec<Csg<2>> = vec![
            Csg::Sphere {
                center: [0.1, -0.2],
                radius: 0.4,
            },
            Csg::Cuboid {
                center: [0.0, 0.1],
                half: [0.5, 0.3],
            },
            Csg::HalfSpace {
                normal: [0.3, 0.9],
                offset: 0.2,
            },
            lshape_csg(),
            Csg::Translate(
                Box::new(Csg::Cuboid {
                    center: [0.0, 0.0],
                    half: [0.2, 0.2],
                }),
                [0.3, -0.1],
            ),
        ];
        // Probes avoid the measure-zero edges where the subgradient and the
        // symmetric difference quotient legitimately disagree.
        let probes = [
            [0.9, 0.7],
            [-0.6, 0.41],
            [0.2, -0.8],
            [0.75, 0.05],
            [-0.1, -0.45],
        ];
        let h = 1e-6;
        for csg in &shapes {
            for &p in &probes {
                let (_, g) = analytic_eval(csg, p);
                for j in 0..2 {
                    let mut pp = p;
                    let mut pm = p;
                    pp[j] += h;
                    pm[j] -= h;
                    let fd = (analytic_eval(csg, pp).0 - analytic_eval(csg, pm).0) / (2.0 * h);
                    assert!(
                        (g[j] - fd).abs() < 1e-6,
                        "{csg:?} at {p:?}, axis {j}: {} vs {fd}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn trace_hits_sphere_at_analytic_distance() {
        let s = Csg::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        };
        let ray = Ray {
            origin: [-2.0, 0.0, 0.0],
            dir: [1.0, 0.0, 0.0],
        };
        let hit = sphere_trace(&s, &ray, 0.0, 4.0).expect("must hit");
        assert!((hit.t - 1.5).abs() < 1e-5);
        assert!(geom::dist(hit.normal, [-1.0, 0.0, 0.0]) < 1e-5);
    }

    #[test]
    fn tangent_ray_misses() {
        let s = Csg::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.5,
        };
        let ray = Ray {
            origin: [-2.0, 0.5 + 1e-3, 0.0],
            dir: [1.0, 0.0, 0.0],
        };
        assert!(sphere_trace(&s, &ray, 0.0, 4.0).is_none());
    }

    #[test]
    fn hit_normal_matches_analytic_gradient() {
        let l = lshape_csg();
        let ray = Ray {
            origin: [1.8, 0.9],
            dir: geom::normalize([-1.0, -0.8]),
        };
        let hit = sphere_trace(&l, &ray, 0.0, 4.0).expect("must hit");
        let (f, g) = analytic_eval(&l, hit.point);
        assert!(f.abs() < 1e-5);
        assert!(geom::dist(hit.normal, geom::normalize(g)) < 1e-5);
    }

    #[test]
    fn shade_examples() {
        let n = [0.0, 1.0];
        let mut lights = lights_2d();
        lights.lights = vec![DirectionalLight {
            dir: [0.0, 1.0],
            intensity: 1.0,
        }];
        let mat = Material {
            albedo: [0.3, 0.5, 0.7],
            specular_strength: 0.0,
            shininess: 16.0,
            mirror: 0.0,
        };
        // Light along the normal, no specular: albedo + ambient per channel.
        let c = shade(&mat, &lights, n, [0.0, 1.0]);
        for ch in 0..3 {
            assert!((c[ch] - (mat.albedo[ch] + lights.ambient)).abs() < 1e-12);
        }
        // Light from behind, no ambient: black.
        lights.ambient = 0.0;
        lights.lights[0].dir = [0.0, -1.0];
        let c = shade(&mat, &lights, n, [0.0, 1.0]);
        assert_eq!(c, [0.0, 0.0, 0.0]);
        // Overbright inputs clamp to exactly 1.
        lights.ambient = 5.0;
        let c = shade(&mat, &lights, n, [0.0, 1.0]);
        assert_eq!(c, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn mirror_only_material_returns_env_of_reflection() {
        let mut lights = lights_2d();
        lights.ambient = 0.0;
        lights.lights.clear();
        let mat = Material {
            albedo: [0.5, 0.5, 0.5],
            specular_strength: 0.0,
            shininess: 16.0,
            mirror: 1.0,
        };
        let n = geom::normalize([0.2, 0.98]);
        let v = geom::normalize([-0.5, 0.86]);
        let c = shade(&mat, &lights, n, v);
        let want = env_color(&lights, geom::reflect(v, n));
        assert_eq!(c, want);
    }

    #[test]
    fn rays_are_unit_and_aimed() {
        let vm = ViewMeta {
            origin: vec![2.0, 0.0],
            target: vec![0.0, 0.0],
            up: None,
            fov_deg: 60.0,
        };
        let rays = view_rays::<2>(&vm, 64, 1).unwrap();
        assert_eq!(rays.len(), 64);
        for r in &rays {
            assert!((geom::norm(r.dir) - 1.0).abs() < 1e-12);
        }
        // The fan is symmetric about the forward axis.
        let first = rays[0].dir;
        let last = rays[63].dir;
        assert!((first[1] + last[1]).abs() < 1e-12);

        let vm3 = ViewMeta {
            origin: vec![2.0, 0.0, 0.5],
            target: vec![0.0, 0.0, 0.0],
            up: Some(vec![0.0, 0.0, 1.0]),
            fov_deg: 50.0,
        };
        let rays3 = view_rays::<3>(&vm3, 8, 8).unwrap();
        assert_eq!(rays3.len(), 64);
        for r in &rays3 {
            assert!((geom::norm(r.dir) - 1.0).abs() < 1e-12);
            // All rays point broadly toward the origin.
            assert!(geom::dot(r.dir, geom::normalize(geom::sub([0.0; 3], r.origin))) > 0.8);
        }
    }

    #[test]
    fn unknown_scene_id_lists_valid_ones() {
        let err = builtin_scene("nope").unwrap_err().to_string();
        for id in SCENE_IDS {
            assert!(err.contains(id), "error should list '{id}': {err}");
        }
    }

    #[test]
    fn builtin_lshape_has_64_views() {
        match builtin_scene("flat2d-lshape").unwrap() {
            SceneKind::D2(s) => assert_eq!(s.views.len(), 64),
            _ => panic!("lshape is 2D"),
        }
    }

    #[test]
    fn disk_mask_width_matches_angular_subtense() {
        let SceneKind::D2(s) = builtin_scene("flat2d-disk").unwrap() else {
            panic!("disk is 2D");
        };
        let expected = {
            let half = (0.55f64 / CAMERA_RADIUS).asin();
            2.0 * half / 60f64.to_radians() * s.width as f64
        };
        for view in s.views.iter().step_by(16) {
            let (_, mask) = render_view(&s, view).unwrap();
            let count = mask.iter().filter(|&&m| m).count() as f64;
            assert!(
                (count - expected).abs() <= 1.0,
                "masked {count} pixels, expected {expected:.2}"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let SceneKind::D2(mut s) = builtin_scene("flat2d-disk").unwrap() else {
            panic!("disk is 2D");
        };
        s.views.truncate(4);
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        generate_dataset(&s, &d1).unwrap();
        generate_dataset(&s, &d2).unwrap();
        for k in 0..4 {
            for name in [view_image_name(k), view_tensor_name(k), view_mask_name(k)] {
                let b1 = std::fs::read(d1.join(&name)).unwrap();
                let b2 = std::fs::read(d2.join(&name)).unwrap();
                assert_eq!(b1, b2, "{name} differs between identical runs");
            }
        }

        let ds = load_dataset::<2>(&d1).unwrap();
        assert_eq!(ds.views.len(), 4);
        assert_eq!(ds.pixel_count(), 4 * 256);
        // Masked pixels re-trace onto the surface; colors match shading bit
        // for bit (the f64 tensor is authoritative).
        let view0 = &ds.views[0];
        let (colors, mask) = render_view(&s, &s.views[0]).unwrap();
        for i in 0..view0.rays.len() {
            assert_eq!(view0.mask[i], mask[i]);
            for ch in 0..3 {
                assert_eq!(view0.colors[i][ch].to_bits(), colors[i][ch].to_bits());
            }
            if view0.mask[i] {
                let (near, far) = s.ray_span(&view0.rays[i]);
                let hit = sphere_trace(&s.csg, &view0.rays[i], near, far).expect("masked ray");
                let (f, _) = analytic_eval(&s.csg, hit.point);
                assert!(f.abs() < 1e-5);
            }
        }
    }
}
