//! Networks: positional encoding, the SDF and radiance MLPs, geometric
//! initialization, and the flat parameter store.
//!
//! Every forward pass exists in up to three flavors sharing one parameter
//! layout:
//!   * plain f64 (surface extraction, standalone rendering, metrics),
//!   * f64 with hand-rolled forward spatial tangents (normals at eval time),
//!   * on-tape, with [`SpatialDual`] tangents for the SDF trunk so the
//!     eikonal term and normal-dependent appearance stay differentiable
//!     with respect to the parameters.
//!
//! Layer inputs and outputs are kept contiguous on the tape so each neuron
//! is a single fused dot node.

use crate::dirparam::DirectionalConfig;
use crate::error::{Error, Result};
use crate::io::NamedArray;
use crate::rng;
use crate::tape::{Block, SpatialDual, Tape, TapeValue};

/// Sharpness of the softplus used inside the SDF network; at this scale it
/// is a C-infinity stand-in for ReLU with well-defined second derivatives.
pub const SOFTPLUS_BETA: f64 = 100.0;

// ---- positional encoding ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    /// Frequency bands 2^0 .. 2^(bands-1).
    pub bands: usize,
    /// Prepend the raw coordinates to the encoding.
    pub include_input: bool,
}

impl PeConfig {
    pub fn dim(&self, d: usize) -> usize {
        d * (usize::from(self.include_input) + 2 * self.bands)
    }
}

/// Canonical feature order: raw inputs (optional), then per band k the sines
/// of all coordinates followed by the cosines of all coordinates.
pub fn pe_f64(cfg: PeConfig, x: &[f64], out: &mut Vec<f64>) {
    if cfg.include_input {
        out.extend_from_slice(x);
    }
    for k in 0..cfg.bands {
        let w = (1u64 << k) as f64;
        for &xi in x {
            out.push((w * xi).sin());
        }
        for &xi in x {
            out.push((w * xi).cos());
        }
    }
}

pub fn pe_on_tape(cfg: PeConfig, tape: &mut Tape, x: &[TapeValue]) -> Vec<TapeValue> {
    let mut out = Vec::with_capacity(cfg.dim(x.len()));
    if cfg.include_input {
        out.extend_from_slice(x);
    }
    for k in 0..cfg.bands {
        let w = (1u64 << k) as f64;
        let scaled: Vec<TapeValue> = x.iter().map(|&xi| tape.scale(xi, w)).collect();
        for &s in &scaled {
            out.push(tape.sin(s));
        }
        for &s in &scaled {
            out.push(tape.cos(s));
        }
    }
    out
}

pub fn pe_dual<const D: usize>(
    cfg: PeConfig,
    tape: &mut Tape,
    x: &[SpatialDual<D>],
) -> Vec<SpatialDual<D>> {
    let mut out = Vec::with_capacity(cfg.dim(x.len()));
    if cfg.include_input {
        out.extend_from_slice(x);
    }
    for k in 0..cfg.bands {
        let w = (1u64 << k) as f64;
        let scaled: Vec<SpatialDual<D>> = x.iter().map(|xi| xi.scale(tape, w)).collect();
        for s in &scaled {
            out.push(s.sin(tape));
        }
        for s in &scaled {
            out.push(s.cos(tape));
        }
    }
    out
}

// ---- parameter store -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All trainable scalars in one flat vector, addressed by named segments.
/// Segment order fixes the gradient layout and the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            data: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "segment shape/data mismatch");
        self.segments.push(Segment {
            name: name.into(),
            shape,
            offset: self.data.len(),
            len: n,
        });
        self.data.extend_from_slice(&values);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter segment '{name}'")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        let s = self.segment(name)?;
        Ok(&self.data[s.offset..s.offset + s.len])
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Ok(&mut self.data[s.offset..s.offset + s.len])
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.segments
            .iter()
            .map(|s| {
                NamedArray::new(
                    s.name.clone(),
                    s.shape.clone(),
                    self.data[s.offset..s.offset + s.len].to_vec(),
                )
            })
            .collect()
    }

    /// Fill this store's segments from named arrays; shapes must match.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        for s in self.segments.clone() {
            let a = crate::io::find_array(arrays, &s.name)?;
            if a.shape != s.shape {
                return Err(Error::Format(format!(
                    "array '{}': shape {:?} in file, {:?} expected",
                    s.name, a.shape, s.shape
                )));
            }
            self.data[s.offset..s.offset + s.len].copy_from_slice(&a.data);
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

// ---- MLP definition ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
}

impl MlpConfig {
    /// (in, out) of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| o * (i + 1)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hidden {
    SoftplusBeta(f64),
    Relu,
}

fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.w{layer}")
}

fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.b{layer}")
}

// ---- field configuration ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Spatial dimension (2 or 3).
    pub dim: usize,
    pub pos_pe: PeConfig,
    pub dir_pe: PeConfig,
    pub sdf_width: usize,
    pub sdf_hidden_layers: usize,
    /// Geometric feature channels handed from the SDF trunk to the radiance
    /// network.
    pub feature_dim: usize,
    pub radiance_width: usize,
    pub radiance_hidden_layers: usize,
    /// Initial value of the sharpness s (stored internally as ln s).
    pub s_init: f64,
    /// Radius of the sphere the geometric initialization approximates.
    pub init_radius: f64,
    pub directional: DirectionalConfig,
}

impl FieldConfig {
    pub fn desk_default(dim: usize) -> Self {
        FieldConfig {
            dim,
            pos_pe: PeConfig {
                bands: 4,
                include_input: true,
            },
            dir_pe: PeConfig {
                bands: 2,
                include_input: true,
            },
            sdf_width: 32,
            sdf_hidden_layers: 2,
            feature_dim: 8,
            radiance_width: 32,
            radiance_hidden_layers: 2,
            s_init: 15.0,
            init_radius: 0.5,
            directional: DirectionalConfig::default(),
        }
    }

    pub fn sdf_mlp(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.pos_pe.dim(self.dim),
            hidden_width: self.sdf_width,
            hidden_layers: self.sdf_hidden_layers,
            output_dim: 1 + self.feature_dim,
        }
    }

    pub fn radiance_mlp(&self) -> MlpConfig {
        MlpConfig {
            // position, normal, encoded direction, geometric feature
            input_dim: self.dim + self.dim + self.dir_pe.dim(self.dim) + self.feature_dim,
            hidden_width: self.radiance_width,
            hidden_layers: self.radiance_hidden_layers,
            output_dim: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!(
                "field dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        if !self.pos_pe.include_input {
            return Err(Error::Config(
                "positional encoding must include the raw coordinates \
                 (the geometric initialization needs identity columns)"
                    .into(),
            ));
        }
        if self.s_init <= 0.0 || self.init_radius <= 0.0 {
            return Err(Error::Config("s_init and init_radius must be positive".into()));
        }
        if self.sdf_hidden_layers == 0 || self.radiance_hidden_layers == 0 {
            return Err(Error::Config("networks need at least one hidden layer".into()));
        }
        Ok(())
    }
}

// ---- the bundle --------------------------------------------------------------

pub const SDF_PREFIX: &str = "sdf";
pub const RADIANCE_PREFIX: &str = "rad";
pub const S_RAW_NAME: &str = "sdf.s_raw";
pub const GAMMA_B_NAME: &str = "dir.gamma_b";

/// SDF network, radiance network and the global trainable scalars, sharing
/// one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBundle {
    pub cfg: FieldConfig,
    pub store: ParamStore,
}

impl FieldBundle {
    /// Build and initialize. The SDF network gets the sphere-like geometric
    /// initialization; the radiance network gets fan-in scaled Gaussians.
    pub fn new(cfg: FieldConfig, seed: u64) -> Result<FieldBundle> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        init_sdf_net(&cfg, seed, &mut store);
        store.add(S_RAW_NAME, vec![1], vec![cfg.s_init.ln()]);
        init_radiance_net(&cfg, seed, &mut store);
        if cfg.directional.uses_gamma() {
            store.add(GAMMA_B_NAME, vec![1], vec![cfg.directional.gamma_b_init]);
        }
        Ok(FieldBundle { cfg, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Density sharpness, always read through exp so it stays positive.
    pub fn s(&self) -> f64 {
        self.store.values(S_RAW_NAME).expect("s_raw always present")[0].exp()
    }

    pub fn gamma_b(&self) -> Option<f64> {
        self.store.values(GAMMA_B_NAME).ok().map(|v| v[0])
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma_b().map(crate::dirparam::gamma_from_raw)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.store.to_arrays()
    }

    pub fn from_arrays(cfg: FieldConfig, arrays: &[NamedArray]) -> Result<FieldBundle> {
        let mut b = FieldBundle::new(cfg, 0)?;
        b.store.load_arrays(arrays)?;
        Ok(b)
    }

    // ---- tape forwards -----------------------------------------------------

    /// Push every parameter onto a fresh tape as one contiguous block.
    pub fn push_params(&self, tape: &mut Tape) -> TapeParams {
        TapeParams {
            all: tape.param_block(self.store.data()),
        }
    }

    pub fn s_on_tape(&self, tape: &mut Tape, tp: &TapeParams) -> TapeValue {
        let seg = self.store.segment(S_RAW_NAME).expect("s_raw always present");
        let raw = tape.block_get(tp.all, seg.offset);
        tape.exp(raw)
    }

    pub fn gamma_b_on_tape(&self, tape: &Tape, tp: &TapeParams) -> Option<TapeValue> {
        let seg = self.store.segment(GAMMA_B_NAME).ok()?;
        Some(tape.block_get(tp.all, seg.offset))
    }

    /// SDF trunk with spatial tangents: returns the signed distance as a
    /// dual (value + spatial gradient, all differentiable in the
    /// parameters) plus the geometric feature.
    pub fn sdf_on_tape<const D: usize>(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        x: [f64; D],
    ) -> SdfTapeEval<D> {
        debug_assert_eq!(D, self.cfg.dim);
        let coords = SpatialDual::<D>::inputs(tape, x);
        let encoded = pe_dual(self.cfg.pos_pe, tape, &coords);
        let input = DualBlocks::gather(tape, &encoded);
        let outputs = mlp_dual(
            tape,
            tp.all,
            &self.store,
            SDF_PREFIX,
            &self.cfg.sdf_mlp(),
            SOFTPLUS_BETA,
            input,
        );
        SdfTapeEval {
            f: outputs[0],
            feature: outputs[1..].iter().map(|d| d.p).collect(),
        }
    }

    /// Radiance network on the tape. `dir_feats` is the already-encoded
    /// direction conditioning built by the renderer.
    pub fn radiance_on_tape<const D: usize>(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        x: [f64; D],
        normal: [TapeValue; D],
        dir_feats: &[TapeValue],
        feature: &[TapeValue],
    ) -> [TapeValue; 3] {
        debug_assert_eq!(D, self.cfg.dim);
        let mlp = self.cfg.radiance_mlp();
        let mut inputs = Vec::with_capacity(mlp.input_dim);
        for &c in &x {
            inputs.push(tape.constant(c));
        }
        inputs.extend_from_slice(&normal);
        inputs.extend_from_slice(dir_feats);
        inputs.extend_from_slice(feature);
        debug_assert_eq!(inputs.len(), mlp.input_dim);
        let block = tape.copy_block(&inputs);
        let out = mlp_tape(tape, tp.all, &self.store, RADIANCE_PREFIX, &mlp, Hidden::Relu, block);
        [
            tape.sigmoid(out[0]),
            tape.sigmoid(out[1]),
            tape.sigmoid(out[2]),
        ]
    }

    // ---- f64 forwards ---------------------------------------------------------

    /// Signed distance only (cheapest path; grid extraction).
    pub fn sdf_value<const D: usize>(&self, x: [f64; D]) -> f64 {
        debug_assert_eq!(D, self.cfg.dim);
        let mut enc = Vec::with_capacity(self.cfg.pos_pe.dim(D));
        pe_f64(self.cfg.pos_pe, &x, &mut enc);
        let out = mlp_f64(
            &self.store,
            SDF_PREFIX,
            &self.cfg.sdf_mlp(),
            Hidden::SoftplusBeta(SOFTPLUS_BETA),
            &enc,
        );
        out[0]
    }

    /// Signed distance, spatial gradient and geometric feature.
    pub fn sdf_eval<const D: usize>(&self, x: [f64; D]) -> SdfF64Eval<D> {
        debug_assert_eq!(D, self.cfg.dim);
        let mut enc: Vec<(f64, [f64; D])> = Vec::with_capacity(self.cfg.pos_pe.dim(D));
        let duals: Vec<(f64, [f64; D])> = (0..D)
            .map(|i| {
                let mut t = [0.0; D];
                t[i] = 1.0;
                (x[i], t)
            })
            .collect();
        pe_f64_dual(self.cfg.pos_pe, &duals, &mut enc);
        let out = mlp_f64_dual(
            &self.store,
            SDF_PREFIX,
            &self.cfg.sdf_mlp(),
            SOFTPLUS_BETA,
            &enc,
        );
        SdfF64Eval {
            f: out[0].0,
            grad: out[0].1,
            feature: out[1..].iter().map(|&(v, _)| v).collect(),
        }
    }

    pub fn radiance_f64<const D: usize>(
        &self,
        x: [f64; D],
        normal: [f64; D],
        dir_feats: &[f64],
        feature: &[f64],
    ) -> [f64; 3] {
        debug_assert_eq!(D, self.cfg.dim);
        let mlp = self.cfg.radiance_mlp();
        let mut input = Vec::with_capacity(mlp.input_dim);
        input.extend_from_slice(&x);
        input.extend_from_slice(&normal);
        input.extend_from_slice(dir_feats);
        input.extend_from_slice(feature);
        debug_assert_eq!(input.len(), mlp.input_dim);
        let out = mlp_f64(&self.store, RADIANCE_PREFIX, &mlp, Hidden::Relu, &input);
        [
            crate::tape::sigmoid(out[0]),
            crate::tape::sigmoid(out[1]),
            crate::tape::sigmoid(out[2]),
        ]
    }
}

pub struct TapeParams {
    /// Every trainable scalar, in [`ParamStore`] order.
    pub all: Block,
}

pub struct SdfTapeEval<const D: usize> {
    pub f: SpatialDual<D>,
    pub feature: Vec<TapeValue>,
}

pub struct SdfF64Eval<const D: usize> {
    pub f: f64,
    pub grad: [f64; D],
    pub feature: Vec<f64>,
}

// ---- initialization ----------------------------------------------------------

/// Unit directions spread evenly: equal angles on the circle, a Fibonacci
/// lattice on the sphere.
fn spread_directions(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(n);
    if dim == 2 {
        for i in 0..n {
            let a = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            dirs.push(vec![a.cos(), a.sin()]);
        }
    } else {
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = golden * i as f64;
            dirs.push(vec![r * a.cos(), r * a.sin(), z]);
        }
    }
    dirs
}

/// Sphere start, built constructively so it holds at small widths: the
/// first layer projects onto evenly spread unit directions (sine/cosine
/// columns zeroed), the interior layers pass the non-negative activations
/// through an identity, and the output row rescales the sum of ReLU cones
/// into |x| exactly (mean of max(u.x, 0) over directions is |x|/pi in 2D
/// and |x|/4 in 3D), so f(x) is close to |x| - radius. A little noise on
/// top breaks the symmetry for training.
fn init_sdf_net(cfg: &FieldConfig, seed: u64, store: &mut ParamStore) {
    let mlp = cfg.sdf_mlp();
    let dims = mlp.layer_dims();
    let last = dims.len() - 1;
    let width = mlp.hidden_width;
    let cone_gain = if cfg.dim == 2 {
        std::f64::consts::PI / width as f64
    } else {
        4.0 / width as f64
    };
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let mut r = rng::stream(seed, "init.sdf", &[l as u64]);
        let mut w = vec![0.0; fan_out * fan_in];
        let mut b = vec![0.0; fan_out];
        if l == 0 {
            let dirs = spread_directions(cfg.dim, fan_out);
            for (row, u) in dirs.iter().enumerate() {
                for (col, &uc) in u.iter().enumerate() {
                    w[row * fan_in + col] = uc + 5e-3 * rng::standard_normal(&mut r);
                }
                // sine/cosine columns stay zero: the start only sees the
                // identity part of the encoding.
            }
        } else if l < last {
            for row in 0..fan_out {
                for col in 0..fan_in {
                    let eye = if row == col { 1.0 } else { 0.0 };
                    w[row * fan_in + col] = eye + 5e-3 * rng::standard_normal(&mut r);
                }
            }
        } else {
            // Row 0 is the signed distance; the remaining rows feed the
            // geometric feature and start near zero.
            for col in 0..fan_in {
                w[col] = cone_gain + 1e-4 * rng::standard_normal(&mut r);
            }
            b[0] = -cfg.init_radius;
            let feat_std = 1e-2 / (fan_in as f64).sqrt();
            for row in 1..fan_out {
                for col in 0..fan_in {
                    w[row * fan_in + col] = feat_std * rng::standard_normal(&mut r);
                }
            }
        }
        store.add(weight_name(SDF_PREFIX, l), vec![fan_out, fan_in], w);
        store.add(bias_name(SDF_PREFIX, l), vec![fan_out], b);
    }
}

fn init_radiance_net(cfg: &FieldConfig, seed: u64, store: &mut ParamStore) {
    let mlp = cfg.radiance_mlp();
    let dims = mlp.layer_dims();
    let last = dims.len() - 1;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let mut r = rng::stream(seed, "init.rad", &[l as u64]);
        // Fan-in scaled for the ReLU body; the output layer starts small so
        // the sigmoid begins near mid-gray.
        let std = if l == last {
            0.1 / (fan_in as f64).sqrt()
        } else {
            (2.0 / fan_in as f64).sqrt()
        };
        let w: Vec<f64> = (0..fan_out * fan_in)
            .map(|_| std * rng::standard_normal(&mut r))
            .collect();
        let b = vec![0.0; fan_out];
        store.add(weight_name(RADIANCE_PREFIX, l), vec![fan_out, fan_in], w);
        store.add(bias_name(RADIANCE_PREFIX, l), vec![fan_out], b);
    }
}

// ---- forward implementations ---------------------------------------------------

fn mlp_f64(store: &ParamStore, prefix: &str, cfg: &MlpConfig, hidden: Hidden, input: &[f64]) -> Vec<f64> {
    debug_assert_eq!(input.len(), cfg.input_dim);
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let mut cur = input.to_vec();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = store.values(&weight_name(prefix, l)).expect("layer weights");
        let b = store.values(&bias_name(prefix, l)).expect("layer biases");
        let mut next = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut z = b[o];
            for i in 0..fan_in {
                z += row[i] * cur[i];
            }
            next.push(if l == last {
                z
            } else {
                match hidden {
                    Hidden::SoftplusBeta(beta) => crate::tape::softplus(beta * z) / beta,
                    Hidden::Relu => z.max(0.0),
                }
            });
        }
        cur = next;
    }
    cur
}

fn pe_f64_dual<const D: usize>(
    cfg: PeConfig,
    x: &[(f64, [f64; D])],
    out: &mut Vec<(f64, [f64; D])>,
) {
    if cfg.include_input {
        out.extend_from_slice(x);
    }
    for k in 0..cfg.bands {
        let w = (1u64 << k) as f64;
        for &(v, t) in x {
            let (s, c) = ((w * v).sin(), (w * v).cos());
            out.push((s, t.map(|ti| w * c * ti)));
        }
        for &(v, t) in x {
            let (s, c) = ((w * v).sin(), (w * v).cos());
            out.push((c, t.map(|ti| -w * s * ti)));
        }
    }
}

fn mlp_f64_dual<const D: usize>(
    store: &ParamStore,
    prefix: &str,
    cfg: &MlpConfig,
    beta: f64,
    input: &[(f64, [f64; D])],
) -> Vec<(f64, [f64; D])> {
    debug_assert_eq!(input.len(), cfg.input_dim);
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let mut cur = input.to_vec();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = store.values(&weight_name(prefix, l)).expect("layer weights");
        let b = store.values(&bias_name(prefix, l)).expect("layer biases");
        let mut next = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut z = b[o];
            let mut zt = [0.0; D];
            for i in 0..fan_in {
                z += row[i] * cur[i].0;
                for j in 0..D {
                    zt[j] += row[i] * cur[i].1[j];
                }
            }
            if l == last {
                next.push((z, zt));
            } else {
                let v = crate::tape::softplus(beta * z) / beta;
                let d = crate::tape::sigmoid(beta * z);
                next.push((v, zt.map(|t| d * t)));
            }
        }
        cur = next;
    }
    cur
}

fn mlp_tape(
    tape: &mut Tape,
    params: Block,
    store: &ParamStore,
    prefix: &str,
    cfg: &MlpConfig,
    hidden: Hidden,
    input: Block,
) -> Vec<TapeValue> {
    debug_assert_eq!(input.len(), cfg.input_dim);
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let mut cur = input;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let wseg = store.segment(&weight_name(prefix, l)).expect("layer weights");
        let bseg = store.segment(&bias_name(prefix, l)).expect("layer biases");
        let m = tape.mark();
        for o in 0..fan_out {
            let row = params.slice(wseg.offset + o * fan_in, fan_in);
            let bias = tape.block_get(params, bseg.offset + o);
            tape.dot(row, cur, Some(bias));
        }
        let z = tape.block_since(m);
        if l == last {
            return (0..fan_out).map(|o| tape.block_get(z, o)).collect();
        }
        let m2 = tape.mark();
        for o in 0..fan_out {
            let zo = tape.block_get(z, o);
            match hidden {
                Hidden::SoftplusBeta(beta) => tape.softplus_beta(zo, beta),
                Hidden::Relu => tape.relu(zo),
            };
        }
        cur = tape.block_since(m2);
    }
    unreachable!("loop returns on the last layer");
}

struct DualBlocks<const D: usize> {
    p: Block,
    t: [Block; D],
}

impl<const D: usize> DualBlocks<D> {
    /// Re-emit scattered dual features as contiguous blocks per component.
    fn gather(tape: &mut Tape, feats: &[SpatialDual<D>]) -> DualBlocks<D> {
        let ps: Vec<TapeValue> = feats.iter().map(|f| f.p).collect();
        let p = tape.copy_block(&ps);
        let t = std::array::from_fn(|j| {
            let ts: Vec<TapeValue> = feats.iter().map(|f| f.t[j]).collect();
            tape.copy_block(&ts)
        });
        DualBlocks { p, t }
    }
}

/// MLP with spatial tangents carried alongside the values. Layer outputs
/// stay contiguous by construction: all value dots, then per tangent axis
/// all tangent dots, then the activations.
fn mlp_dual<const D: usize>(
    tape: &mut Tape,
    params: Block,
    store: &ParamStore,
    prefix: &str,
    cfg: &MlpConfig,
    beta: f64,
    input: DualBlocks<D>,
) -> Vec<SpatialDual<D>> {
    debug_assert_eq!(input.p.len(), cfg.input_dim);
    let dims = cfg.layer_dims();
    let last = dims.len() - 1;
    let mut cur = input;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let wseg = store.segment(&weight_name(prefix, l)).expect("layer weights");
        let bseg = store.segment(&bias_name(prefix, l)).expect("layer biases");
        let m = tape.mark();
        for o in 0..fan_out {
            let row = params.slice(wseg.offset + o * fan_in, fan_in);
            let bias = tape.block_get(params, bseg.offset + o);
            tape.dot(row, cur.p, Some(bias));
        }
        let zp = tape.block_since(m);
        let zt: [Block; D] = std::array::from_fn(|j| {
            let m = tape.mark();
            for o in 0..fan_out {
                let row = params.slice(wseg.offset + o * fan_in, fan_in);
                tape.dot(row, cur.t[j], None);
            }
            tape.block_since(m)
        });
        if l == last {
            return (0..fan_out)
                .map(|o| SpatialDual {
                    p: tape.block_get(zp, o),
                    t: std::array::from_fn(|j| tape.block_get(zt[j], o)),
                })
                .collect();
        }
        let m = tape.mark();
        for o in 0..fan_out {
            let zo = tape.block_get(zp, o);
            tape.softplus_beta(zo, beta);
        }
        let ap = tape.block_since(m);
        let m = tape.mark();
        for o in 0..fan_out {
            let zo = tape.block_get(zp, o);
            tape.sigmoid_scaled(zo, beta);
        }
        let dv = tape.block_since(m);
        let at: [Block; D] = std::array::from_fn(|j| {
            let m = tape.mark();
            for o in 0..fan_out {
                let d = tape.block_get(dv, o);
                let t = tape.block_get(zt[j], o);
                tape.mul(d, t);
            }
            tape.block_since(m)
        });
        cur = DualBlocks { p: ap, t: at };
    }
    unreachable!("loop returns on the last layer");
}
