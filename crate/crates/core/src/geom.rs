//! Small fixed-dimension vector helpers.
//!
//! The whole pipeline is generic over the spatial dimension `D` (2 for the
//! flatland testbed, 3 for solid scenes), so points and directions are plain
//! `[f64; D]` arrays.

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<const D: usize> {
    pub origin: [f64; D],
    pub dir: [f64; D],
}

impl<const D: usize> Ray<D> {
    pub fn at(&self, t: f64) -> [f64; D] {
        add(self.origin, scale(self.dir, t))
    }
}

pub fn add<const D: usize>(a: [f64; D], b: [f64; D]) -> [f64; D] {
    std::array::from_fn(|i| a[i] + b[i])
}

pub fn sub<const D: usize>(a: [f64; D], b: [f64; D]) -> [f64; D] {
    std::array::from_fn(|i| a[i] - b[i])
}

pub fn scale<const D: usize>(a: [f64; D], k: f64) -> [f64; D] {
    std::array::from_fn(|i| a[i] * k)
}

pub fn dot<const D: usize>(a: [f64; D], b: [f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        s += a[i] * b[i];
    }
    s
}

pub fn norm<const D: usize>(a: [f64; D]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector along `a`; returns `None` when the norm is below `eps`.
pub fn normalize_or<const D: usize>(a: [f64; D], eps: f64) -> Option<[f64; D]> {
    let n = norm(a);
    if n < eps {
        None
    } else {
        Some(scale(a, 1.0 / n))
    }
}

/// Unit vector along `a`; panics on (near-)zero input. Use for values that
/// are unit by construction.
pub fn normalize<const D: usize>(a: [f64; D]) -> [f64; D] {
    normalize_or(a, 1e-300).expect("normalize: zero-length vector")
}

pub fn dist<const D: usize>(a: [f64; D], b: [f64; D]) -> f64 {
    norm(sub(a, b))
}

pub fn lerp<const D: usize>(a: [f64; D], b: [f64; D], t: f64) -> [f64; D] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// Mirror `v` across the hyperplane with unit normal `n`: `2(v·n)n − v`.
pub fn reflect<const D: usize>(v: [f64; D], n: [f64; D]) -> [f64; D] {
    let d = 2.0 * dot(v, n);
    std::array::from_fn(|i| d * n[i] - v[i])
}

/// Rotate a 2D vector by `angle` radians (counter-clockwise).
pub fn rot2(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Angle between two unit vectors, in radians, clamped against rounding.
pub fn angle_between<const D: usize>(a: [f64; D], b: [f64; D]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}
