//! Scalar reverse-mode automatic differentiation with a forward spatial
//! tangent channel.
//!
//! The tape records every scalar operation of a forward pass in topological
//! order and replays it backwards to accumulate adjoints. Networks are small
//! enough here that a scalar tape is practical; the one concession to speed
//! is a fused dot-product node over contiguous node ranges, which keeps the
//! per-neuron cost at a handful of nodes instead of hundreds.
//!
//! Spatial derivatives (the SDF gradient that becomes the surface normal)
//! are carried by [`SpatialDual`]: the tangent components are themselves
//! tape values, so a reverse pass through an expression built from tangents
//! yields exact mixed second derivatives. That is what makes the eikonal
//! term differentiable with respect to the parameters.
//!
//! A tape is single-owner: handles from one tape must not be fed to another.
//! Non-finite forward values poison the tape; the poison surfaces as a
//! numeric error at the next `backward`/`check_health` call rather than
//! propagating silently.

use crate::error::{Error, Result};

/// Handle to one scalar on a tape. Carries a cached copy of the forward
/// value so reads don't touch the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeValue {
    value: f64,
    id: u32,
}

impl TapeValue {
    #[inline]
    pub fn value(self) -> f64 {
        self.value
    }

    /// Position of this node on its tape.
    #[inline]
    pub fn node_id(self) -> u32 {
        self.id
    }
}

/// Contiguous run of nodes, used as an operand of fused dot products.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    start: u32,
    len: u32,
}

impl Block {
    #[inline]
    pub fn len(self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.len == 0
    }

    /// Sub-range `[offset, offset + len)` of this block.
    pub fn slice(self, offset: usize, len: usize) -> Block {
        assert!(offset + len <= self.len as usize, "block slice out of range");
        Block {
            start: self.start + offset as u32,
            len: len as u32,
        }
    }
}

const NO_BIAS: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// Unary with the local partial precomputed at record time.
    Un { a: u32, pd: f64 },
    /// Binary with both local partials precomputed.
    Bin { a: u32, b: u32, pda: f64, pdb: f64 },
    /// `bias? + Σ_i values[w0+i] * values[x0+i]` over contiguous ranges.
    Dot { w0: u32, x0: u32, n: u32, bias: u32 },
    /// `Σ pairs (p, q)` gathered from the argument arena.
    Gather { a0: u32, n: u32 },
}

/// Binary operation selector for [`Tape::record_binary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Unary operation selector for [`Tape::record_unary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    Abs,
    Relu,
    /// Alias of `Relu`: `max(x, 0)` with subgradient 0 at 0.
    Max0,
}

pub const UNARY_OPS: [UnaryOp; 12] = [
    UnaryOp::Neg,
    UnaryOp::Exp,
    UnaryOp::Ln,
    UnaryOp::Sqrt,
    UnaryOp::Sin,
    UnaryOp::Cos,
    UnaryOp::Tanh,
    UnaryOp::Sigmoid,
    UnaryOp::Softplus,
    UnaryOp::Abs,
    UnaryOp::Relu,
    UnaryOp::Max0,
];

pub const BINARY_OPS: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

/// Recording tape. Nodes are appended in topological order; `backward`
/// visits them exactly once in reverse.
pub struct Tape {
    values: Vec<f64>,
    ops: Vec<Op>,
    args: Vec<u32>,
    params: Vec<u32>,
    adj: Vec<f64>,
    poisoned: Option<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            args: Vec::new(),
            params: Vec::new(),
            adj: Vec::new(),
            poisoned: None,
        }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            values: Vec::with_capacity(nodes),
            ops: Vec::with_capacity(nodes),
            args: Vec::new(),
            params: Vec::new(),
            adj: Vec::new(),
            poisoned: None,
        }
    }

    /// Drop all recorded nodes but keep the allocations.
    pub fn reset(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.args.clear();
        self.params.clear();
        self.poisoned = None;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Err if any recorded forward value was non-finite.
    pub fn check_health(&self) -> Result<()> {
        match self.poisoned {
            None => Ok(()),
            Some(id) => Err(Error::Numeric(format!(
                "non-finite value recorded at tape node {id}"
            ))),
        }
    }

    #[inline]
    fn push(&mut self, value: f64, op: Op) -> TapeValue {
        let id = self.values.len() as u32;
        if !value.is_finite() && self.poisoned.is_none() {
            self.poisoned = Some(id);
        }
        self.values.push(value);
        self.ops.push(op);
        TapeValue { value, id }
    }

    #[inline]
    fn handle(&self, id: u32) -> TapeValue {
        TapeValue {
            value: self.values[id as usize],
            id,
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: f64) -> TapeValue {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf: registered so `backward` reports its gradient.
    pub fn param(&mut self, value: f64) -> TapeValue {
        let v = self.push(value, Op::Leaf);
        self.params.push(v.id);
        v
    }

    /// Push a contiguous block of trainable leaves.
    pub fn param_block(&mut self, values: &[f64]) -> Block {
        let start = self.values.len() as u32;
        for &v in values {
            self.param(v);
        }
        Block {
            start,
            len: values.len() as u32,
        }
    }

    /// Push a contiguous block of non-trainable leaves.
    pub fn constant_block(&mut self, values: &[f64]) -> Block {
        let start = self.values.len() as u32;
        for &v in values {
            self.constant(v);
        }
        Block {
            start,
            len: values.len() as u32,
        }
    }

    /// Re-emit arbitrary values as a contiguous block (identity nodes).
    pub fn copy_block(&mut self, values: &[TapeValue]) -> Block {
        let start = self.values.len() as u32;
        for v in values {
            self.push(v.value, Op::Un { a: v.id, pd: 1.0 });
        }
        Block {
            start,
            len: values.len() as u32,
        }
    }

    #[inline]
    pub fn block_get(&self, block: Block, i: usize) -> TapeValue {
        assert!(i < block.len as usize);
        self.handle(block.start + i as u32)
    }

    /// Current end of the tape; pair with [`Tape::block_since`] to treat a
    /// run of consecutively pushed nodes as a contiguous block.
    #[inline]
    pub fn mark(&self) -> u32 {
        self.values.len() as u32
    }

    #[inline]
    pub fn block_since(&self, mark: u32) -> Block {
        Block {
            start: mark,
            len: self.values.len() as u32 - mark,
        }
    }

    pub fn block_values(&self, block: Block) -> &[f64] {
        &self.values[block.start as usize..(block.start + block.len) as usize]
    }

    /// Same numeric value, but `backward` propagates zero through it.
    pub fn detach(&mut self, a: TapeValue) -> TapeValue {
        self.push(a.value, Op::Leaf)
    }

    // ---- binary ------------------------------------------------------

    #[inline]
    pub fn add(&mut self, a: TapeValue, b: TapeValue) -> TapeValue {
        self.push(
            a.value + b.value,
            Op::Bin {
                a: a.id,
                b: b.id,
                pda: 1.0,
                pdb: 1.0,
            },
        )
    }

    #[inline]
    pub fn sub(&mut self, a: TapeValue, b: TapeValue) -> TapeValue {
        self.push(
            a.value - b.value,
            Op::Bin {
                a: a.id,
                b: b.id,
                pda: 1.0,
                pdb: -1.0,
            },
        )
    }

    #[inline]
    pub fn mul(&mut self, a: TapeValue, b: TapeValue) -> TapeValue {
        self.push(
            a.value * b.value,
            Op::Bin {
                a: a.id,
                b: b.id,
                pda: b.value,
                pdb: a.value,
            },
        )
    }

    pub fn div(&mut self, a: TapeValue, b: TapeValue) -> Result<TapeValue> {
        if b.value == 0.0 {
            return Err(Error::Domain("division by zero on tape".into()));
        }
        let v = a.value / b.value;
        Ok(self.push(
            v,
            Op::Bin {
                a: a.id,
                b: b.id,
                pda: 1.0 / b.value,
                pdb: -v / b.value,
            },
        ))
    }

    pub fn record_binary(&mut self, op: BinaryOp, a: TapeValue, b: TapeValue) -> Result<TapeValue> {
        match op {
            BinaryOp::Add => Ok(self.add(a, b)),
            BinaryOp::Sub => Ok(self.sub(a, b)),
            BinaryOp::Mul => Ok(self.mul(a, b)),
            BinaryOp::Div => self.div(a, b),
        }
    }

    // ---- unary -------------------------------------------------------

    #[inline]
    fn un(&mut self, a: TapeValue, value: f64, pd: f64) -> TapeValue {
        self.push(value, Op::Un { a: a.id, pd })
    }

    pub fn neg(&mut self, a: TapeValue) -> TapeValue {
        self.un(a, -a.value, -1.0)
    }

    /// `k * a`.
    pub fn scale(&mut self, a: TapeValue, k: f64) -> TapeValue {
        self.un(a, k * a.value, k)
    }

    /// `a + c`.
    pub fn add_const(&mut self, a: TapeValue, c: f64) -> TapeValue {
        self.un(a, a.value + c, 1.0)
    }

    /// `k * a + c`.
    pub fn affine(&mut self, a: TapeValue, k: f64, c: f64) -> TapeValue {
        self.un(a, k * a.value + c, k)
    }

    pub fn exp(&mut self, a: TapeValue) -> TapeValue {
        let v = a.value.exp();
        self.un(a, v, v)
    }

    pub fn ln(&mut self, a: TapeValue) -> Result<TapeValue> {
        if a.value <= 0.0 {
            return Err(Error::Domain(format!("ln of non-positive {}", a.value)));
        }
        Ok(self.un(a, a.value.ln(), 1.0 / a.value))
    }

    pub fn sqrt(&mut self, a: TapeValue) -> Result<TapeValue> {
        if a.value <= 0.0 {
            return Err(Error::Domain(format!("sqrt of non-positive {}", a.value)));
        }
        let v = a.value.sqrt();
        Ok(self.un(a, v, 0.5 / v))
    }

    pub fn sin(&mut self, a: TapeValue) -> TapeValue {
        self.un(a, a.value.sin(), a.value.cos())
    }

    pub fn cos(&mut self, a: TapeValue) -> TapeValue {
        self.un(a, a.value.cos(), -a.value.sin())
    }

    pub fn tanh(&mut self, a: TapeValue) -> TapeValue {
        let v = a.value.tanh();
        self.un(a, v, 1.0 - v * v)
    }

    pub fn sigmoid(&mut self, a: TapeValue) -> TapeValue {
        let v = sigmoid(a.value);
        self.un(a, v, v * (1.0 - v))
    }

    pub fn softplus(&mut self, a: TapeValue) -> TapeValue {
        self.un(a, softplus(a.value), sigmoid(a.value))
    }

    /// Fused `softplus(beta * a) / beta`, derivative `sigmoid(beta * a)`.
    pub fn softplus_beta(&mut self, a: TapeValue, beta: f64) -> TapeValue {
        self.un(a, softplus(beta * a.value) / beta, sigmoid(beta * a.value))
    }

    /// Fused `sigmoid(beta * a)`.
    pub fn sigmoid_scaled(&mut self, a: TapeValue, beta: f64) -> TapeValue {
        let v = sigmoid(beta * a.value);
        self.un(a, v, beta * v * (1.0 - v))
    }

    /// Subgradient 0 at 0: on the surface itself the choice is masked by the
    /// detached blend weight anyway.
    pub fn abs(&mut self, a: TapeValue) -> TapeValue {
        let pd = if a.value > 0.0 {
            1.0
        } else if a.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.un(a, a.value.abs(), pd)
    }

    pub fn relu(&mut self, a: TapeValue) -> TapeValue {
        if a.value > 0.0 {
            self.un(a, a.value, 1.0)
        } else {
            self.un(a, 0.0, 0.0)
        }
    }

    /// `max(a, 0)`, same semantics as [`Tape::relu`].
    pub fn max0(&mut self, a: TapeValue) -> TapeValue {
        self.relu(a)
    }

    /// `max(a, c)` via the relu composition, subgradient 0 at the joint.
    pub fn max_const(&mut self, a: TapeValue, c: f64) -> TapeValue {
        let shifted = self.add_const(a, -c);
        let r = self.relu(shifted);
        self.add_const(r, c)
    }

    /// `min(a, c)`.
    pub fn min_const(&mut self, a: TapeValue, c: f64) -> TapeValue {
        let shifted = self.affine(a, -1.0, c);
        let r = self.relu(shifted);
        self.affine(r, -1.0, c)
    }

    pub fn record_unary(&mut self, op: UnaryOp, a: TapeValue) -> Result<TapeValue> {
        Ok(match op {
            UnaryOp::Neg => self.neg(a),
            UnaryOp::Exp => self.exp(a),
            UnaryOp::Ln => self.ln(a)?,
            UnaryOp::Sqrt => self.sqrt(a)?,
            UnaryOp::Sin => self.sin(a),
            UnaryOp::Cos => self.cos(a),
            UnaryOp::Tanh => self.tanh(a),
            UnaryOp::Sigmoid => self.sigmoid(a),
            UnaryOp::Softplus => self.softplus(a),
            UnaryOp::Abs => self.abs(a),
            UnaryOp::Relu => self.relu(a),
            UnaryOp::Max0 => self.max0(a),
        })
    }

    // ---- fused dot products -------------------------------------------

    /// `Σ_i w[i] * x[i] (+ bias)` over two equal-length contiguous blocks,
    /// recorded as a single node.
    pub fn dot(&mut self, w: Block, x: Block, bias: Option<TapeValue>) -> TapeValue {
        assert_eq!(w.len, x.len, "dot: block length mismatch");
        let n = w.len as usize;
        let (w0, x0) = (w.start as usize, x.start as usize);
        let mut s = match bias {
            Some(b) => b.value,
            None => 0.0,
        };
        let (wv, xv) = (&self.values[w0..w0 + n], &self.values[x0..x0 + n]);
        for i in 0..n {
            s += wv[i] * xv[i];
        }
        self.push(
            s,
            Op::Dot {
                w0: w.start,
                x0: x.start,
                n: w.len,
                bias: bias.map_or(NO_BIAS, |b| b.id),
            },
        )
    }

    /// Fused sum of products over arbitrary handles.
    pub fn dot_gather(&mut self, pairs: &[(TapeValue, TapeValue)]) -> TapeValue {
        let a0 = self.args.len() as u32;
        let mut s = 0.0;
        for &(p, q) in pairs {
            s += p.value * q.value;
            self.args.push(p.id);
            self.args.push(q.id);
        }
        self.push(
            s,
            Op::Gather {
                a0,
                n: pairs.len() as u32,
            },
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from `output`; gradients of the registered parameters are
    /// accumulated into `acc` (index = registration order) scaled by `scale`.
    pub fn backward_into(&mut self, output: TapeValue, acc: &mut [f64], scale: f64) -> Result<()> {
        self.check_health()?;
        let n = self.values.len();
        if (output.id as usize) >= n {
            return Err(Error::Usage("backward: output is not on this tape".into()));
        }
        if acc.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "backward: accumulator has {} slots, tape has {} parameters",
                acc.len(),
                self.params.len()
            )));
        }
        self.adj.clear();
        self.adj.resize(n, 0.0);
        self.adj[output.id as usize] = 1.0;
        for i in (0..n).rev() {
            let g = self.adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Un { a, pd } => {
                    self.adj[a as usize] += g * pd;
                }
                Op::Bin { a, b, pda, pdb } => {
                    self.adj[a as usize] += g * pda;
                    self.adj[b as usize] += g * pdb;
                }
                Op::Dot { w0, x0, n, bias } => {
                    let (w0, x0, n) = (w0 as usize, x0 as usize, n as usize);
                    for k in 0..n {
                        let wv = self.values[w0 + k];
                        let xv = self.values[x0 + k];
                        self.adj[w0 + k] += g * xv;
                        self.adj[x0 + k] += g * wv;
                    }
                    if bias != NO_BIAS {
                        self.adj[bias as usize] += g;
                    }
                }
                Op::Gather { a0, n } => {
                    for k in 0..n as usize {
                        let p = self.args[a0 as usize + 2 * k] as usize;
                        let q = self.args[a0 as usize + 2 * k + 1] as usize;
                        let pv = self.values[p];
                        let qv = self.values[q];
                        self.adj[p] += g * qv;
                        self.adj[q] += g * pv;
                    }
                }
            }
        }
        for (slot, &pid) in acc.iter_mut().zip(self.params.iter()) {
            *slot += scale * self.adj[pid as usize];
        }
        Ok(())
    }

    /// Reverse pass returning the gradient of every registered parameter in
    /// registration order.
    pub fn backward(&mut self, output: TapeValue) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(output, &mut grads, 1.0)?;
        Ok(grads)
    }

    /// Adjoint of an arbitrary node after the most recent backward pass.
    pub fn adjoint(&self, v: TapeValue) -> f64 {
        self.adj[v.id as usize]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---- spatial duals ------------------------------------------------------

/// A tape scalar together with its partial derivatives with respect to the
/// spatial input coordinates. The tangents are tape values, so everything
/// built from them stays differentiable with respect to the parameters.
#[derive(Debug, Clone, Copy)]
pub struct SpatialDual<const D: usize> {
    pub p: TapeValue,
    pub t: [TapeValue; D],
}

impl<const D: usize> SpatialDual<D> {
    /// Seed the input coordinates: tangent vectors form the identity basis.
    pub fn inputs(tape: &mut Tape, coords: [f64; D]) -> [SpatialDual<D>; D] {
        let zero = tape.constant(0.0);
        let one = tape.constant(1.0);
        std::array::from_fn(|i| {
            let p = tape.constant(coords[i]);
            SpatialDual {
                p,
                t: std::array::from_fn(|j| if i == j { one } else { zero }),
            }
        })
    }

    /// Lift a value that does not depend on the spatial coordinates.
    pub fn from_value(tape: &mut Tape, v: TapeValue) -> SpatialDual<D> {
        let zero = tape.constant(0.0);
        SpatialDual { p: v, t: [zero; D] }
    }

    pub fn constant(tape: &mut Tape, v: f64) -> SpatialDual<D> {
        let p = tape.constant(v);
        Self::from_value(tape, p)
    }

    pub fn value(&self) -> f64 {
        self.p.value()
    }

    pub fn add(self, tape: &mut Tape, o: SpatialDual<D>) -> SpatialDual<D> {
        SpatialDual {
            p: tape.add(self.p, o.p),
            t: std::array::from_fn(|j| tape.add(self.t[j], o.t[j])),
        }
    }

    pub fn sub(self, tape: &mut Tape, o: SpatialDual<D>) -> SpatialDual<D> {
        SpatialDual {
            p: tape.sub(self.p, o.p),
            t: std::array::from_fn(|j| tape.sub(self.t[j], o.t[j])),
        }
    }

    pub fn mul(self, tape: &mut Tape, o: SpatialDual<D>) -> SpatialDual<D> {
        SpatialDual {
            p: tape.mul(self.p, o.p),
            t: std::array::from_fn(|j| tape.dot_gather(&[(self.p, o.t[j]), (o.p, self.t[j])])),
        }
    }

    pub fn div(self, tape: &mut Tape, o: SpatialDual<D>) -> Result<SpatialDual<D>> {
        let p = tape.div(self.p, o.p)?;
        let denom = tape.mul(o.p, o.p);
        let t = std::array::from_fn(|j| {
            let num = {
                let a = tape.mul(self.t[j], o.p);
                let b = tape.mul(self.p, o.t[j]);
                tape.sub(a, b)
            };
            tape.div(num, denom).expect("denominator checked above")
        });
        Ok(SpatialDual { p, t })
    }

    pub fn neg(self, tape: &mut Tape) -> SpatialDual<D> {
        SpatialDual {
            p: tape.neg(self.p),
            t: std::array::from_fn(|j| tape.neg(self.t[j])),
        }
    }

    pub fn scale(self, tape: &mut Tape, k: f64) -> SpatialDual<D> {
        SpatialDual {
            p: tape.scale(self.p, k),
            t: std::array::from_fn(|j| tape.scale(self.t[j], k)),
        }
    }

    pub fn add_const(self, tape: &mut Tape, c: f64) -> SpatialDual<D> {
        SpatialDual {
            p: tape.add_const(self.p, c),
            t: self.t,
        }
    }

    /// Multiply by a value that is constant along the spatial coordinates
    /// (network weights, the blend weight, ...).
    pub fn mul_value(self, tape: &mut Tape, c: TapeValue) -> SpatialDual<D> {
        SpatialDual {
            p: tape.mul(self.p, c),
            t: std::array::from_fn(|j| tape.mul(self.t[j], c)),
        }
    }

    fn chain(self, tape: &mut Tape, p: TapeValue, deriv: TapeValue) -> SpatialDual<D> {
        SpatialDual {
            p,
            t: std::array::from_fn(|j| tape.mul(deriv, self.t[j])),
        }
    }

    pub fn exp(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.exp(self.p);
        self.chain(tape, p, p)
    }

    pub fn ln(self, tape: &mut Tape) -> Result<SpatialDual<D>> {
        let p = tape.ln(self.p)?;
        let one = tape.constant(1.0);
        let deriv = tape.div(one, self.p)?;
        Ok(self.chain(tape, p, deriv))
    }

    pub fn sqrt(self, tape: &mut Tape) -> Result<SpatialDual<D>> {
        let p = tape.sqrt(self.p)?;
        let half = tape.constant(0.5);
        let deriv = tape.div(half, p)?;
        Ok(self.chain(tape, p, deriv))
    }

    pub fn sin(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.sin(self.p);
        let deriv = tape.cos(self.p);
        self.chain(tape, p, deriv)
    }

    pub fn cos(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.cos(self.p);
        let s = tape.sin(self.p);
        let deriv = tape.neg(s);
        self.chain(tape, p, deriv)
    }

    pub fn tanh(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.tanh(self.p);
        let sq = tape.mul(p, p);
        let deriv = tape.affine(sq, -1.0, 1.0);
        self.chain(tape, p, deriv)
    }

    pub fn sigmoid(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.sigmoid(self.p);
        let om = tape.affine(p, -1.0, 1.0);
        let deriv = tape.mul(p, om);
        self.chain(tape, p, deriv)
    }

    pub fn softplus(self, tape: &mut Tape) -> SpatialDual<D> {
        let p = tape.softplus(self.p);
        let deriv = tape.sigmoid(self.p);
        self.chain(tape, p, deriv)
    }

    pub fn softplus_beta(self, tape: &mut Tape, beta: f64) -> SpatialDual<D> {
        let p = tape.softplus_beta(self.p, beta);
        let deriv = tape.sigmoid_scaled(self.p, beta);
        self.chain(tape, p, deriv)
    }

    /// Piecewise-constant slope, so the tangents just flip sign (0 at 0).
    pub fn abs(self, tape: &mut Tape) -> SpatialDual<D> {
        let s = if self.p.value() > 0.0 {
            1.0
        } else if self.p.value() < 0.0 {
            -1.0
        } else {
            0.0
        };
        SpatialDual {
            p: tape.abs(self.p),
            t: std::array::from_fn(|j| tape.scale(self.t[j], s)),
        }
    }

    pub fn relu(self, tape: &mut Tape) -> SpatialDual<D> {
        let s = if self.p.value() > 0.0 { 1.0 } else { 0.0 };
        SpatialDual {
            p: tape.relu(self.p),
            t: std::array::from_fn(|j| tape.scale(self.t[j], s)),
        }
    }
}
