//! Surface extraction, geometric metrics, and the reflection-dispersion
//! diagnostic.
//!
//! 2D contours come from the standard 16-case marching-squares table with a
//! center-sample decider for the two ambiguous saddle cases. 3D meshes come
//! from marching tetrahedra over the Freudenthal six-tet decomposition of
//! each cell: the decomposition tiles space consistently, so shared
//! face-diagonal crossings match between neighboring cells and the output
//! is watertight wherever the field is sign-transverse. Triangle
//! orientation is fixed numerically per triangle (normal toward positive
//! field), which sidesteps per-case orientation bookkeeping.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{self, Ray};
use crate::io;
use crate::rng;
use crate::scenes::{self, Csg, Hit};

/// Grid sample values of exactly zero are nudged inside so every lattice
/// point has a definite sign. Crossings can still collapse onto a grid point
/// (producing zero-area triangles or zero-length segments); those are kept,
/// because dropping them would unpair edges and break watertightness.
const ZERO_NUDGE: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<const D: usize> {
    pub min: [f64; D],
    pub max: [f64; D],
    /// Cells per axis; the grid has `resolution + 1` samples per axis.
    pub resolution: usize,
}

impl<const D: usize> GridSpec<D> {
    pub fn centered(half_extent: f64, resolution: usize) -> Self {
        GridSpec {
            min: [-half_extent; D],
            max: [half_extent; D],
            resolution,
        }
    }

    pub fn step(&self) -> [f64; D] {
        std::array::from_fn(|a| (self.max[a] - self.min[a]) / self.resolution as f64)
    }

    pub fn diagonal(&self) -> f64 {
        geom::dist(self.min, self.max)
    }

    /// Residual bound the extraction guarantees for every output vertex.
    pub fn residual_bound(&self) -> f64 {
        self.diagonal() / self.resolution as f64
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Usage("extraction grid needs resolution >= 2".into()));
        }
        for a in 0..D {
            if !(self.max[a] > self.min[a]) {
                return Err(Error::Usage("extraction grid has empty extent".into()));
            }
        }
        Ok(())
    }
}

// ---- 2D: marching squares --------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct Polylines {
    pub vertices: Vec<[f64; 2]>,
    /// Directed segments; the negative (inside) region lies to the left.
    pub segments: Vec<[u32; 2]>,
    pub resolution: usize,
}

impl Polylines {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| geom::dist(self.vertices[s[0] as usize], self.vertices[s[1] as usize]))
            .sum()
    }

    /// Winding number of the contour around `p` (+1 inside a
    /// counter-clockwise loop, 0 outside, by the inside-left convention).
    pub fn winding_number(&self, p: [f64; 2]) -> f64 {
        let mut angle = 0.0;
        for s in &self.segments {
            let a = geom::sub(self.vertices[s[0] as usize], p);
            let b = geom::sub(self.vertices[s[1] as usize], p);
            let cross = a[0] * b[1] - a[1] * b[0];
            let dot = a[0] * b[0] + a[1] * b[1];
            angle += cross.atan2(dot);
        }
        angle / std::f64::consts::TAU
    }

    /// Chain segments into vertex lists; closed loops repeat their first
    /// vertex at the end. Open chains (contours leaving the grid) come
    /// after the loops.
    pub fn chains(&self) -> Vec<Vec<[f64; 2]>> {
        let mut next = vec![u32::MAX; self.vertices.len()];
        let mut indeg = vec![0u32; self.vertices.len()];
        for s in &self.segments {
            next[s[0] as usize] = s[1];
            indeg[s[1] as usize] += 1;
        }
        let mut used = vec![false; self.vertices.len()];
        let mut out = Vec::new();
        // Open chains start at vertices with no incoming segment.
        let starts: Vec<usize> = (0..self.vertices.len())
            .filter(|&v| indeg[v] == 0 && next[v] != u32::MAX)
            .collect();
        for phase in 0..2 {
            for v0 in 0..self.vertices.len() {
                if phase == 0 && !starts.contains(&v0) {
                    continue;
                }
                if used[v0] || next[v0] == u32::MAX {
                    continue;
                }
                let mut chain = vec![self.vertices[v0]];
                let mut v = v0;
                used[v0] = true;
                while next[v] != u32::MAX {
                    let n = next[v] as usize;
                    chain.push(self.vertices[n]);
                    if n == v0 || used[n] {
                        break;
                    }
                    used[n] = true;
                    v = n;
                }
                if chain.len() > 1 {
                    out.push(chain);
                }
            }
        }
        out
    }
}

/// Edge key for vertex dedup: (axis, grid i, grid j) with axis 0 for
/// horizontal edges (i,j)-(i+1,j) and 1 for vertical (i,j)-(i,j+1).
type EdgeKey2 = (u8, u32, u32);

struct Ms2Builder {
    vertices: Vec<[f64; 2]>,
    segments: Vec<[u32; 2]>,
    index: HashMap<EdgeKey2, u32>,
}

impl Ms2Builder {
    fn crossing(
        &mut self,
        key: EdgeKey2,
        pa: [f64; 2],
        pb: [f64; 2],
        fa: f64,
        fb: f64,
    ) -> u32 {
        *self.index.entry(key).or_insert_with(|| {
            let t = fa / (fa - fb);
            let v = geom::lerp(pa, pb, t);
            self.vertices.push(v);
            (self.vertices.len() - 1) as u32
        })
    }
}

/// Extract the zero level set of `f` on a regular grid. Segment direction
/// keeps the negative region on the left, so closed contours around a
/// negative interior wind counter-clockwise.
pub fn marching_squares<F: Fn([f64; 2]) -> f64>(f: F, spec: &GridSpec<2>) -> Result<Polylines> {
    spec.validate()?;
    let n = spec.resolution;
    let h = spec.step();
    let coord = |i: usize, j: usize| -> [f64; 2] {
        [
            spec.min[0] + i as f64 * h[0],
            spec.min[1] + j as f64 * h[1],
        ]
    };
    let mut grid = vec![0.0f64; (n + 1) * (n + 1)];
    for j in 0..=n {
        for i in 0..=n {
            let v = f(coord(i, j));
            grid[j * (n + 1) + i] = if v == 0.0 { ZERO_NUDGE } else { v };
        }
    }
    let g = |i: usize, j: usize| grid[j * (n + 1) + i];

    let mut b = Ms2Builder {
        vertices: Vec::new(),
        segments: Vec::new(),
        index: HashMap::new(),
    };
    for j in 0..n {
        for i in 0..n {
            // Corners: c0 bottom-left, c1 bottom-right, c2 top-right,
            // c3 top-left; mask bit k set when f(ck) < 0.
            let f0 = g(i, j);
            let f1 = g(i + 1, j);
            let f2 = g(i + 1, j + 1);
            let f3 = g(i, j + 1);
            let mask = (f0 < 0.0) as u8
                | (((f1 < 0.0) as u8) << 1)
                | (((f2 < 0.0) as u8) << 2)
                | (((f3 < 0.0) as u8) << 3);
            if mask == 0 || mask == 15 {
                continue;
            }
            let (i32_, j32) = (i as u32, j as u32);
            let p0 = coord(i, j);
            let p1 = coord(i + 1, j);
            let p2 = coord(i + 1, j + 1);
            let p3 = coord(i, j + 1);
            // Edge crossings, created on demand.
            let bot = |b: &mut Ms2Builder| b.crossing((0, i32_, j32), p0, p1, f0, f1);
            let top = |b: &mut Ms2Builder| b.crossing((0, i32_, j32 + 1), p3, p2, f3, f2);
            let left = |b: &mut Ms2Builder| b.crossing((1, i32_, j32), p0, p3, f0, f3);
            let right = |b: &mut Ms2Builder| b.crossing((1, i32_ + 1, j32), p1, p2, f1, f2);
            let seg = |b: &mut Ms2Builder, from: u32, to: u32| b.segments.push([from, to]);
            match mask {
                1 => {
                    let (s, e) = (bot(&mut b), left(&mut b));
                    seg(&mut b, s, e);
                }
                2 => {
                    let (s, e) = (right(&mut b), bot(&mut b));
                    seg(&mut b, s, e);
                }
                4 => {
                    let (s, e) = (top(&mut b), right(&mut b));
                    seg(&mut b, s, e);
                }
                8 => {
                    let (s, e) = (left(&mut b), top(&mut b));
                    seg(&mut b, s, e);
                }
                3 => {
                    let (s, e) = (right(&mut b), left(&mut b));
                    seg(&mut b, s, e);
                }
                6 => {
                    let (s, e) = (top(&mut b), bot(&mut b));
                    seg(&mut b, s, e);
                }
                12 => {
                    let (s, e) = (left(&mut b), right(&mut b));
                    seg(&mut b, s, e);
                }
                9 => {
                    let (s, e) = (bot(&mut b), top(&mut b));
                    seg(&mut b, s, e);
                }
                7 => {
                    let (s, e) = (top(&mut b), left(&mut b));
                    seg(&mut b, s, e);
                }
                11 => {
                    let (s, e) = (right(&mut b), top(&mut b));
                    seg(&mut b, s, e);
                }
                13 => {
                    let (s, e) = (bot(&mut b), right(&mut b));
                    seg(&mut b, s, e);
                }
                14 => {
                    let (s, e) = (left(&mut b), bot(&mut b));
                    seg(&mut b, s, e);
                }
                5 | 10 => {
                    // Ambiguous saddles: the center sample decides whether
                    // the two inside corners connect through the cell.
                    let center = f(geom::lerp(p0, p2, 0.5)) < 0.0;
                    let pairs: [(u32, u32); 2] = match (mask, center) {
                        (5, true) => {
                            let a = (top(&mut b), left(&mut b));
                            let c = (bot(&mut b), right(&mut b));
                            [a, c]
                        }
                        (5, false) => {
                            let a = (bot(&mut b), left(&mut b));
                            let c = (top(&mut b), right(&mut b));
                            [a, c]
                        }
                        (10, true) => {
                            let a = (left(&mut b), bot(&mut b));
                            let c = (right(&mut b), top(&mut b));
                            [a, c]
                        }
                        _ => {
                            let a = (right(&mut b), bot(&mut b));
                            let c = (left(&mut b), top(&mut b));
                            [a, c]
                        }
                    };
                    for (s, e) in pairs {
                        seg(&mut b, s, e);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    let polys = Polylines {
        segments: b.segments,
        vertices: b.vertices,
        resolution: n,
    };
    Ok(polys)
}

// ---- 3D: marching tetrahedra -------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise seen from the positive (outside) side.
    pub triangles: Vec<[u32; 3]>,
    pub resolution: usize,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                geom::norm(geom::cross3(geom::sub(b, a), geom::sub(c, a))) * 0.5
            })
            .sum()
    }

    /// Every undirected edge shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        !self.triangles.is_empty() && counts.values().all(|&c| c == 2)
    }
}

/// The six axis-order tetrahedra of the Freudenthal decomposition. Each
/// entry is the axis permutation applied as successive unit steps from the
/// cell's low corner toward its high corner.
const TET_AXIS_ORDERS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Extract the zero level set of `f` as a triangle mesh. Watertight on
/// sign-transverse fields whose surface stays inside the grid.
pub fn marching_tetrahedra<F: Fn([f64; 3]) -> f64>(f: F, spec: &GridSpec<3>) -> Result<TriMesh> {
    spec.validate()?;
    let n = spec.resolution;
    let np = n + 1;
    let h = spec.step();
    let coord = |i: usize, j: usize, k: usize| -> [f64; 3] {
        [
            spec.min[0] + i as f64 * h[0],
            spec.min[1] + j as f64 * h[1],
            spec.min[2] + k as f64 * h[2],
        ]
    };
    let gid = |i: usize, j: usize, k: usize| -> u32 { ((k * np + j) * np + i) as u32 };
    let mut grid = vec![0.0f64; np * np * np];
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                let v = f(coord(i, j, k));
                grid[gid(i, j, k) as usize] = if v == 0.0 { ZERO_NUDGE } else { v };
            }
        }
    }
    let point_of = |g: u32| -> [f64; 3] {
        let i = (g as usize) % np;
        let j = (g as usize) / np % np;
        let k = (g as usize) / (np * np);
        coord(i, j, k)
    };

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();
    let mut crossing = |a: u32, b: u32, vertices: &mut Vec<[f64; 3]>| -> u32 {
        let key = (a.min(b), a.max(b));
        *index.entry(key).or_insert_with(|| {
            let (fa, fb) = (grid[a as usize], grid[b as usize]);
            let t = fa / (fa - fb);
            vertices.push(geom::lerp(point_of(a), point_of(b), t));
            (vertices.len() - 1) as u32
        })
    };

    let emit = |tri: [u32; 3], ins: &[u32], outs: &[u32], vertices: &Vec<[f64; 3]>,
                    triangles: &mut Vec<[u32; 3]>| {
        let a = vertices[tri[0] as usize];
        let b = vertices[tri[1] as usize];
        let c = vertices[tri[2] as usize];
        let nrm = geom::cross3(geom::sub(b, a), geom::sub(c, a));
        let mut out_c = [0.0; 3];
        for &o in outs {
            out_c = geom::add(out_c, point_of(o));
        }
        out_c = geom::scale(out_c, 1.0 / outs.len() as f64);
        let mut in_c = [0.0; 3];
        for &i in ins {
            in_c = geom::add(in_c, point_of(i));
        }
        in_c = geom::scale(in_c, 1.0 / ins.len() as f64);
        if geom::dot(nrm, geom::sub(out_c, in_c)) >= 0.0 {
            triangles.push(tri);
        } else {
            triangles.push([tri[0], tri[2], tri[1]]);
        }
    };

    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for order in TET_AXIS_ORDERS {
                    let mut cursor = [i, j, k];
                    let mut tet = [gid(i, j, k), 0, 0, 0];
                    for (step, &axis) in order.iter().enumerate() {
                        cursor[axis] += 1;
                        tet[step + 1] = gid(cursor[0], cursor[1], cursor[2]);
                    }
                    let mut ins: Vec<u32> = Vec::with_capacity(4);
                    let mut outs: Vec<u32> = Vec::with_capacity(4);
                    for &v in &tet {
                        if grid[v as usize] < 0.0 {
                            ins.push(v);
                        } else {
                            outs.push(v);
                        }
                    }
                    match ins.len() {
                        0 | 4 => {}
                        1 | 3 => {
                            let (apex, base) = if ins.len() == 1 {
                                (ins[0], &outs)
                            } else {
                                (outs[0], &ins)
                            };
                            let tri = [
                                crossing(apex, base[0], &mut vertices),
                                crossing(apex, base[1], &mut vertices),
                                crossing(apex, base[2], &mut vertices),
                            ];
                            emit(tri, &ins, &outs, &vertices, &mut triangles);
                        }
                        2 => {
                            // Quad with cyclic order AC, AD, BD, BC for
                            // ins = [A, B], outs = [C, D].
                            let ac = crossing(ins[0], outs[0], &mut vertices);
                            let ad = crossing(ins[0], outs[1], &mut vertices);
                            let bd = crossing(ins[1], outs[1], &mut vertices);
                            let bc = crossing(ins[1], outs[0], &mut vertices);
                            emit([ac, ad, bd], &ins, &outs, &vertices, &mut triangles);
                            emit([ac, bd, bc], &ins, &outs, &vertices, &mut triangles);
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
    Ok(TriMesh {
        vertices,
        triangles,
        resolution: n,
    })
}

// ---- surface sampling ------------------------------------------------------------------

/// Uniform points along the extracted contour (arc-length weighted).
pub fn sample_segments(p: &Polylines, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let lengths: Vec<f64> = p
        .segments
        .iter()
        .map(|s| geom::dist(p.vertices[s[0] as usize], p.vertices[s[1] as usize]))
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut r = rng::stream(seed, "contour-sample", &[]);
    let mut out = Vec::with_capacity(n);
    if total <= 0.0 {
        return out;
    }
    let mut cum = Vec::with_capacity(lengths.len());
    let mut run = 0.0;
    for l in &lengths {
        run += l;
        cum.push(run);
    }
    for _ in 0..n {
        let u = rng::uniform(&mut r) * total;
        let si = cum.partition_point(|&c| c < u).min(p.segments.len() - 1);
        let prev = if si == 0 { 0.0 } else { cum[si - 1] };
        let t = ((u - prev) / lengths[si].max(1e-300)).clamp(0.0, 1.0);
        let s = p.segments[si];
        out.push(geom::lerp(
            p.vertices[s[0] as usize],
            p.vertices[s[1] as usize],
            t,
        ));
    }
    out
}

/// Uniform points on the mesh (area weighted).
pub fn sample_triangles(m: &TriMesh, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let areas: Vec<f64> = m
        .triangles
        .iter()
        .map(|t| {
            let a = m.vertices[t[0] as usize];
            let b = m.vertices[t[1] as usize];
            let c = m.vertices[t[2] as usize];
            geom::norm(geom::cross3(geom::sub(b, a), geom::sub(c, a))) * 0.5
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut r = rng::stream(seed, "mesh-sample", &[]);
    let mut out = Vec::with_capacity(n);
    if total <= 0.0 {
        return out;
    }
    let mut cum = Vec::with_capacity(areas.len());
    let mut run = 0.0;
    for a in &areas {
        run += a;
        cum.push(run);
    }
    for _ in 0..n {
        let u = rng::uniform(&mut r) * total;
        let ti = cum.partition_point(|&c| c < u).min(m.triangles.len() - 1);
        let t = m.triangles[ti];
        let a = m.vertices[t[0] as usize];
        let b = m.vertices[t[1] as usize];
        let c = m.vertices[t[2] as usize];
        let r1 = rng::uniform(&mut r).sqrt();
        let r2 = rng::uniform(&mut r);
        let p = geom::add(
            geom::scale(a, 1.0 - r1),
            geom::add(geom::scale(b, r1 * (1.0 - r2)), geom::scale(c, r1 * r2)),
        );
        out.push(p);
    }
    out
}

/// Ground-truth surface points: random domain points projected onto the
/// zero level set by five Newton steps along the analytic gradient;
/// rejected if the residual stays above tolerance.
pub fn surface_points<const D: usize>(
    csg: &Csg<D>,
    n: usize,
    seed: u64,
    domain_radius: f64,
) -> Vec<[f64; D]> {
    let mut r = rng::stream(seed, "gt-surface", &[]);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < 200 * n {
        attempts += 1;
        let mut x: [f64; D] =
            std::array::from_fn(|_| (2.0 * rng::uniform(&mut r) - 1.0) * domain_radius);
        for _ in 0..5 {
            let (f, g) = scenes::analytic_eval(csg, x);
            let g2 = geom::dot(g, g).max(1e-12);
            x = geom::sub(x, geom::scale(g, f / g2));
        }
        let (f, _) = scenes::analytic_eval(csg, x);
        if f.abs() < 1e-7 {
            out.push(x);
        }
    }
    out
}

// ---- metrics -----------------------------------------------------------------------------

/// Uniform-grid nearest-neighbor index.
struct GridIndex<'a, const D: usize> {
    pts: &'a [[f64; D]],
    cells: HashMap<[i64; D], Vec<u32>>,
    min: [f64; D],
    h: f64,
    key_lo: [i64; D],
    key_hi: [i64; D],
}

impl<'a, const D: usize> GridIndex<'a, D> {
    fn build(pts: &'a [[f64; D]]) -> GridIndex<'a, D> {
        let mut min = [f64::INFINITY; D];
        let mut max = [f64::NEG_INFINITY; D];
        for p in pts {
            for a in 0..D {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let cells_per_axis = (pts.len() as f64).powf(1.0 / D as f64).ceil().max(1.0) as usize;
        let extent = (0..D)
            .map(|a| max[a] - min[a])
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let h = extent / cells_per_axis as f64;
        let mut cells: HashMap<[i64; D], Vec<u32>> = HashMap::new();
        let mut key_lo = [i64::MAX; D];
        let mut key_hi = [i64::MIN; D];
        for (i, p) in pts.iter().enumerate() {
            let key: [i64; D] = std::array::from_fn(|a| ((p[a] - min[a]) / h).floor() as i64);
            for a in 0..D {
                key_lo[a] = key_lo[a].min(key[a]);
                key_hi[a] = key_hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        GridIndex {
            pts,
            cells,
            min,
            h,
            key_lo,
            key_hi,
        }
    }

    /// Exact nearest distance: expand Chebyshev rings until no farther ring
    /// can contain a closer point (a ring at cell distance r+1 is at least
    /// r*h away in Euclidean distance). The ring budget reaches the farthest
    /// occupied cell even when the query sits outside the indexed box.
    fn nearest(&self, q: [f64; D]) -> f64 {
        let base: [i64; D] = std::array::from_fn(|a| ((q[a] - self.min[a]) / self.h).floor() as i64);
        let mut best = f64::INFINITY; // squared distance
        let max_ring = (0..D)
            .map(|a| (base[a] - self.key_lo[a]).abs().max((base[a] - self.key_hi[a]).abs()))
            .max()
            .unwrap_or(0)
            + 1;
        for ring in 0..=max_ring {
            let lower = (ring as f64 - 1.0).max(0.0) * self.h;
            if best <= lower * lower {
                break;
            }
            self.visit_ring(base, ring, &mut best, q);
        }
        best.sqrt()
    }

    fn visit_ring(&self, base: [i64; D], ring: i64, best: &mut f64, q: [f64; D]) {
        let mut offset = [-ring; D];
        loop {
            if offset.iter().map(|o| o.abs()).max().unwrap() == ring {
                let key: [i64; D] = std::array::from_fn(|a| base[a] + offset[a]);
                if let Some(ids) = self.cells.get(&key) {
                    for &i in ids {
                        let p = self.pts[i as usize];
                        let d2: f64 = (0..D).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum();
                        if d2 < *best {
                            *best = d2;
                        }
                    }
                }
            }
            // Odometer over the offset cube.
            let mut a = 0;
            loop {
                offset[a] += 1;
                if offset[a] <= ring {
                    break;
                }
                offset[a] = -ring;
                a += 1;
                if a == D {
                    return;
                }
            }
        }
    }
}

/// Note: `nearest` compares squared distances; `best` holds d² until the
/// final sqrt.
fn mean_nearest<const D: usize>(from: &[[f64; D]], to: &[[f64; D]]) -> f64 {
    let idx = GridIndex::build(to);
    from.iter().map(|&p| idx.nearest(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance:
/// `( mean_p min_q |p-q| + mean_q min_p |p-q| ) / 2`.
pub fn chamfer_distance<const D: usize>(p: &[[f64; D]], q: &[[f64; D]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Usage("chamfer: empty point set".into()));
    }
    Ok(0.5 * (mean_nearest(p, q) + mean_nearest(q, p)))
}

/// One-directional mean distance prediction -> ground truth.
pub fn accuracy<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Usage("accuracy: empty point set".into()));
    }
    Ok(mean_nearest(pred, gt))
}

/// Mean angular error in degrees over masked pixels.
pub fn normal_mae<const D: usize>(
    pred: &[[f64; D]],
    gt: &[[f64; D]],
    mask: &[bool],
) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "normal_mae: {} predictions vs {} references vs {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let a = geom::normalize_or(pred[i], 1e-12).unwrap_or(pred[i]);
        let b = geom::normalize_or(gt[i], 1e-12).unwrap_or(gt[i]);
        sum += geom::angle_between(a, b).to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Usage("normal_mae: empty mask".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub chamfer: f64,
    pub normal_mae_deg: Option<f64>,
    pub accuracy: f64,
}

// ---- reflection dispersion ------------------------------------------------------------

/// |f| band edges separating near-surface, mid, and far samples.
pub const BAND_EDGES: [f64; 2] = [0.02, 0.1];
pub const BAND_LABELS: [&str; 3] = ["0.00-0.02", "0.02-0.10", "0.10-inf"];

pub fn band_of(f_abs: f64) -> usize {
    if f_abs < BAND_EDGES[0] {
        0
    } else if f_abs < BAND_EDGES[1] {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct BandSpread {
    /// Circular standard deviation  sqrt(-2 ln |mean direction|)  of the
    /// reflection directions whose sample fell in this band, radians.
    pub spread: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct DispersionProfile<const D: usize> {
    pub bands: [BandSpread; 3],
    /// Per-sample angle (radians) between the local normal and the normal
    /// at the ray's true intersection point, aligned with the input ts.
    pub normal_angles: Vec<f64>,
    pub hit: Hit<D>,
}

fn circular_spread<const D: usize>(dirs: &[[f64; D]]) -> f64 {
    if dirs.len() < 2 {
        return 0.0;
    }
    let mut mean = [0.0; D];
    for d in dirs {
        mean = geom::add(mean, *d);
    }
    mean = geom::scale(mean, 1.0 / dirs.len() as f64);
    let r = geom::norm(mean).clamp(1e-12, 1.0);
    if r > 1.0 - 1e-12 {
        // All directions agree up to rounding; don't let sqrt(-0.0) leak a -0.
        return 0.0;
    }
    (-2.0 * r.ln()).sqrt()
}

/// How scattered the reflection directions are along one ray, grouped by
/// distance band. On a flat surface the normal field is constant and every
/// spread is exactly zero; near concave features the far bands scatter.
pub fn reflection_dispersion<const D: usize>(
    csg: &Csg<D>,
    ray: &Ray<D>,
    ts: &[f64],
) -> Result<DispersionProfile<D>> {
    let hit = sphere_trace_far(csg, ray)
        .ok_or_else(|| Error::Usage("dispersion: ray does not intersect the surface".into()))?;
    let d_view = geom::scale(ray.dir, -1.0);
    let mut by_band: [Vec<[f64; D]>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut normal_angles = Vec::with_capacity(ts.len());
    for &t in ts {
        let x = ray.at(t);
        let (f, g) = scenes::analytic_eval(csg, x);
        let n = geom::normalize_or(g, 1e-12).unwrap_or(g);
        by_band[band_of(f.abs())].push(crate::dirparam::reflect_direction(d_view, n));
        normal_angles.push(geom::angle_between(n, hit.normal));
    }
    let bands = std::array::from_fn(|b| BandSpread {
        spread: circular_spread(&by_band[b]),
        count: by_band[b].len(),
    });
    Ok(DispersionProfile {
        bands,
        normal_angles,
        hit,
    })
}

fn sphere_trace_far<const D: usize>(csg: &Csg<D>, ray: &Ray<D>) -> Option<Hit<D>> {
    scenes::sphere_trace(csg, ray, 0.0, 1e3)
}

/// CSV rows for a set of rays: `ray_id,band,spread_rad,n_samples`.
pub fn dispersion_csv<const D: usize>(profiles: &[(u64, DispersionProfile<D>)]) -> String {
    let mut out = String::from("ray_id,band,spread_rad,n_samples\n");
    for (id, p) in profiles {
        for b in 0..3 {
            out.push_str(&format!(
                "{},{},{:.17e},{}\n",
                id, BAND_LABELS[b], p.bands[b].spread, p.bands[b].count
            ));
        }
    }
    out
}

// ---- writers -------------------------------------------------------------------------

/// ASCII OBJ (v/f records, 1-based indices).
pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {:.17} {:.17} {:.17}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    io::atomic_write(path, s.as_bytes())
}

/// JSON document: `{"chains": [[[x,y],...], ...]}` — one vertex list per
/// contour chain; closed loops repeat their first vertex last.
pub fn write_polylines_json(path: &Path, p: &Polylines) -> Result<()> {
    let doc = serde_json::json!({ "chains": p.chains() });
    io::atomic_write(path, serde_json::to_string_pretty(&doc)?.as_bytes())
}
