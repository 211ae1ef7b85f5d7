//! Directional parameterization of the radiance field.
//!
//! The radiance network can be conditioned on the viewing direction, on the
//! reflection of the viewing direction about the surface normal, or on a
//! hybrid that blends the two with a weight driven by the signed distance:
//!
//! ```text
//! d_ref = 2 (d_view . n) n - d_view
//! alpha = exp(-gamma * |f|)          gamma = exp(10 * gamma_b)
//! d_hyb = normalize(alpha * d_ref + (1 - alpha) * d_view)
//! ```
//!
//! Near the surface (|f| -> 0) the hybrid approaches the reflection
//! parameterization, which keeps specular highlights stable; far from it
//! the normal is meaningless and the blend falls back to the viewing
//! direction. `gamma_b` is trainable so the transition scale adapts.
//!
//! Conventions: every direction here is unit length and points *away from
//! the surface point* — the view vector points back toward the camera, i.e.
//! it is the negated ray direction.

use crate::geom;
use crate::tape::{Tape, TapeValue};

/// Length below which a blended direction is considered degenerate and the
/// viewing direction is used instead.
pub const DEGENERATE_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirMode {
    Viewing,
    Reflection,
    Hybrid,
}

impl DirMode {
    pub const ALL: [DirMode; 3] = [DirMode::Viewing, DirMode::Reflection, DirMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            DirMode::Viewing => "viewing",
            DirMode::Reflection => "reflection",
            DirMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for DirMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "viewing" => Ok(DirMode::Viewing),
            "reflection" => Ok(DirMode::Reflection),
            "hybrid" => Ok(DirMode::Hybrid),
            other => Err(crate::Error::Config(format!(
                "unknown direction mode '{other}' (viewing|reflection|hybrid)"
            ))),
        }
    }
}

/// Where the hybrid blend happens relative to the directional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoint {
    /// Blend raw directions, then encode the blended direction (default).
    PreEncoding,
    /// Encode both directions, then blend the feature vectors.
    PostEncoding,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionalConfig {
    pub mode: DirMode,
    pub fusion: FusionPoint,
    /// Detach |f| inside the blend weight so the geometry only feels the
    /// reconstruction losses, not the appearance model's preference for a
    /// particular blend.
    pub detach_blend: bool,
    pub gamma_b_init: f64,
}

impl Default for DirectionalConfig {
    fn default() -> Self {
        DirectionalConfig {
            mode: DirMode::Hybrid,
            fusion: FusionPoint::PreEncoding,
            detach_blend: true,
            gamma_b_init: 0.3,
        }
    }
}

impl DirectionalConfig {
    /// Hybrid mode trains `gamma_b`; the pure modes have no blend parameter.
    pub fn uses_gamma(&self) -> bool {
        self.mode == DirMode::Hybrid
    }
}

/// Sharpness of the blend: `gamma = exp(10 * gamma_b)`. The exponential map
/// keeps gamma positive and makes small steps in `gamma_b` multiplicative.
pub fn gamma_from_raw(gamma_b: f64) -> f64 {
    (10.0 * gamma_b).exp()
}

/// `alpha = exp(-gamma * |f|)`: 1 on the surface, decaying with distance.
pub fn blend_weight(gamma: f64, f: f64) -> f64 {
    (-gamma * f.abs()).exp()
}

/// `d_ref = 2 (d_view . n) n - d_view`. Unit in, unit out.
pub fn reflect_direction<const D: usize>(d_view: [f64; D], n: [f64; D]) -> [f64; D] {
    geom::reflect(d_view, n)
}

/// Blend and renormalize; a degenerate blend falls back to the view vector.
pub fn hybrid_direction<const D: usize>(
    d_view: [f64; D],
    n: [f64; D],
    alpha: f64,
) -> ([f64; D], bool) {
    let d_ref = reflect_direction(d_view, n);
    // At the endpoints the blend is one of the inputs; return it without
    // renormalizing so the limits are bit-exact, not just within roundoff.
    if alpha >= 1.0 {
        return (d_ref, false);
    }
    if alpha <= 0.0 {
        return (d_view, false);
    }
    let blended = geom::add(geom::scale(d_ref, alpha), geom::scale(d_view, 1.0 - alpha));
    match geom::normalize_or(blended, DEGENERATE_NORM_EPS) {
        Some(d) => (d, false),
        None => (d_view, true),
    }
}

/// Why a directional evaluation fell back to the viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirFallback {
    None,
    /// The SDF gradient was too small to define a normal.
    DegenerateNormal,
    /// The hybrid blend cancelled to (near) zero length.
    DegenerateBlend,
}

/// Plain-f64 direction for a sample. `normal` is `None` when the SDF
/// gradient was too short to normalize. Used by diagnostics and rendering
/// outside training.
pub fn direction_f64<const D: usize>(
    mode: DirMode,
    d_view: [f64; D],
    normal: Option<[f64; D]>,
    gamma: f64,
    f: f64,
) -> ([f64; D], DirFallback) {
    match (mode, normal) {
        (DirMode::Viewing, _) => (d_view, DirFallback::None),
        (_, None) => (d_view, DirFallback::DegenerateNormal),
        (DirMode::Reflection, Some(n)) => (reflect_direction(d_view, n), DirFallback::None),
        (DirMode::Hybrid, Some(n)) => {
            let alpha = blend_weight(gamma, f);
            let (d, fell) = hybrid_direction(d_view, n, alpha);
            (
                d,
                if fell {
                    DirFallback::DegenerateBlend
                } else {
                    DirFallback::None
                },
            )
        }
    }
}

/// A direction assembled on the tape, so gradients flow to the normal (and
/// through the blend weight to `gamma_b` when it is not detached).
pub struct TapeDirection<const D: usize> {
    pub d: [TapeValue; D],
    pub alpha: Option<TapeValue>,
    pub fallback: DirFallback,
}

/// `gamma` as a tape node from the raw trainable scalar.
pub fn gamma_on_tape(tape: &mut Tape, gamma_b: TapeValue) -> TapeValue {
    let scaled = tape.scale(gamma_b, 10.0);
    tape.exp(scaled)
}

/// `alpha = exp(-gamma * |f|)` on the tape, detaching |f| if asked.
pub fn blend_weight_on_tape(
    tape: &mut Tape,
    gamma: TapeValue,
    f: TapeValue,
    detach_sdf: bool,
) -> TapeValue {
    let f_abs = tape.abs(f);
    let f_used = if detach_sdf { tape.detach(f_abs) } else { f_abs };
    let prod = tape.mul(gamma, f_used);
    let neg = tape.neg(prod);
    tape.exp(neg)
}

pub fn reflect_on_tape<const D: usize>(
    tape: &mut Tape,
    d_view: [TapeValue; D],
    n: [TapeValue; D],
) -> [TapeValue; D] {
    let pairs: Vec<(TapeValue, TapeValue)> = (0..D).map(|j| (d_view[j], n[j])).collect();
    let dn = tape.dot_gather(&pairs);
    let two_dn = tape.scale(dn, 2.0);
    std::array::from_fn(|j| {
        let p = tape.mul(two_dn, n[j]);
        tape.sub(p, d_view[j])
    })
}

/// Build the conditioning direction for one sample on the tape.
///
/// `d_view` components are typically constants (the ray is fixed); `normal`
/// components are live nodes derived from the SDF gradient. `gamma` must be
/// provided in hybrid mode.
pub fn direction_on_tape<const D: usize>(
    tape: &mut Tape,
    cfg: &DirectionalConfig,
    d_view: [TapeValue; D],
    normal: Option<[TapeValue; D]>,
    gamma: Option<TapeValue>,
    f: TapeValue,
) -> TapeDirection<D> {
    match (cfg.mode, normal) {
        (DirMode::Viewing, _) => TapeDirection {
            d: d_view,
            alpha: None,
            fallback: DirFallback::None,
        },
        (_, None) => TapeDirection {
            d: d_view,
            alpha: None,
            fallback: DirFallback::DegenerateNormal,
        },
        (DirMode::Reflection, Some(n)) => TapeDirection {
            d: reflect_on_tape(tape, d_view, n),
            alpha: None,
            fallback: DirFallback::None,
        },
        (DirMode::Hybrid, Some(n)) => {
            let gamma = gamma.expect("hybrid direction requires gamma on the tape");
            let alpha = blend_weight_on_tape(tape, gamma, f, cfg.detach_blend);
            let d_ref = reflect_on_tape(tape, d_view, n);
            // alpha * d_ref + (1 - alpha) * d_view, written as
            // d_view + alpha * (d_ref - d_view) to spend one mul per axis.
            let blended: [TapeValue; D] = std::array::from_fn(|j| {
                let diff = tape.sub(d_ref[j], d_view[j]);
                let scaled = tape.mul(alpha, diff);
                tape.add(scaled, d_view[j])
            });
            let nrm_pairs: Vec<(TapeValue, TapeValue)> =
                blended.iter().map(|&b| (b, b)).collect();
            let nrm2 = tape.dot_gather(&nrm_pairs);
            if nrm2.value() < DEGENERATE_NORM_EPS * DEGENERATE_NORM_EPS {
                return TapeDirection {
                    d: d_view,
                    alpha: Some(alpha),
                    fallback: DirFallback::DegenerateBlend,
                };
            }
            let nrm = tape.sqrt(nrm2).expect("norm positive by check above");
            let d = std::array::from_fn(|j| {
                tape.div(blended[j], nrm).expect("norm positive by check above")
            });
            TapeDirection {
                d,
                alpha: Some(alpha),
                fallback: DirFallback::None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    // exp(10 * 0.3) and exp(-gamma * 0.05), frozen from an independent
    // high-precision evaluation.
    const GAMMA_AT_03: f64 = 20.085536923187668;
    const ALPHA_AT_03_005: f64 = 0.366_309_437_122_377_85;

    #[test]
    fn gamma_and_blend_weight_match_frozen_values() {
        let g = gamma_from_raw(0.3);
        assert!((g - GAMMA_AT_03).abs() < 1e-12, "gamma = {g}");
        let a = blend_weight(g, 0.05);
        assert!((a - ALPHA_AT_03_005).abs() < 1e-12, "alpha = {a}");
        // |f| enters as a magnitude: sign must not matter.
        assert_eq!(blend_weight(g, -0.05), a);
    }

    #[test]
    fn blend_weight_is_one_on_surface() {
        assert_eq!(blend_weight(gamma_from_raw(0.3), 0.0), 1.0);
    }

    #[test]
    fn reflection_of_grazing_and_normal_incidence() {
        // Head-on: the reflection returns the same direction.
        let n = [0.0, 1.0];
        let v = [0.0, 1.0];
        assert_eq!(reflect_direction(v, n), [0.0, 1.0]);
        // 45 degrees in 2D: (1,1)/sqrt(2) about +y reflects to (-1,1)/sqrt(2).
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = reflect_direction([s, s], n);
        assert!((r[0] + s).abs() < 1e-15 && (r[1] - s).abs() < 1e-15);
    }

    #[test]
    fn hybrid_falls_back_when_blend_cancels() {
        // d_view tangent to the surface: d_ref = -d_view, so alpha = 0.5
        // cancels exactly.
        let d_view = [1.0, 0.0];
        let n = [0.0, 1.0];
        let (d, fell) = hybrid_direction(d_view, n, 0.5);
        assert!(fell);
        assert_eq!(d, d_view);
        // Slightly off half blend does not cancel.
        let (d, fell) = hybrid_direction(d_view, n, 0.4);
        assert!(!fell);
        assert!((geom::norm(d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_direction_matches_f64_direction() {
        let cfg = DirectionalConfig::default();
        let d_view = geom::normalize([0.3, -0.8, 0.52]);
        let n = geom::normalize([0.1, 0.95, 0.2]);
        let f = 0.03;
        let gamma = gamma_from_raw(cfg.gamma_b_init);
        let (want, _) = direction_f64(DirMode::Hybrid, d_view, Some(n), gamma, f);

        let mut tape = Tape::new();
        let gb = tape.param(cfg.gamma_b_init);
        let g = gamma_on_tape(&mut tape, gb);
        let dv = d_view.map(|c| tape.constant(c));
        let nn = n.map(|c| tape.constant(c));
        let fv = tape.constant(f);
        let got = direction_on_tape(&mut tape, &cfg, dv, Some(nn), Some(g), fv);
        assert_eq!(got.fallback, DirFallback::None);
        for j in 0..3 {
            assert!((got.d[j].value() - want[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn detached_blend_blocks_gamma_free_sdf_gradient() {
        // With detach enabled, d alpha / d f = 0; without it, the exact
        // derivative is -gamma * sign(f) * alpha.
        for (detach, want_grad) in [(true, 0.0), (false, -1.0)] {
            let mut tape = Tape::new();
            let f = tape.param(0.05);
            let gamma = tape.constant(gamma_from_raw(0.3));
            let alpha = blend_weight_on_tape(&mut tape, gamma, f, detach);
            let g = tape.backward(alpha).unwrap();
            let exact = -gamma.value() * alpha.value();
            let expect = want_grad * exact.abs() * if want_grad == 0.0 { 0.0 } else { 1.0 };
            if detach {
                assert_eq!(g[0], 0.0);
            } else {
                assert!((g[0] - exact).abs() < 1e-12, "got {} want {exact}", g[0]);
                let _ = expect;
            }
        }
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        // d alpha / d gamma_b with detached |f| is still live: only the SDF
        // path is cut, not the gamma path.
        let f = 0.05;
        let gb0 = 0.3;
        let eval = |gb: f64| blend_weight(gamma_from_raw(gb), f);
        let h = 1e-6;
        let fd = (eval(gb0 + h) - eval(gb0 - h)) / (2.0 * h);

        let mut tape = Tape::new();
        let gb = tape.param(gb0);
        let gamma = gamma_on_tape(&mut tape, gb);
        let fv = tape.constant(f);
        let alpha = blend_weight_on_tape(&mut tape, gamma, fv, true);
        let g = tape.backward(alpha).unwrap();
        assert!(
            (g[0] - fd).abs() / fd.abs() < 1e-7,
            "analytic {} vs fd {fd}",
            g[0]
        );
    }
}
