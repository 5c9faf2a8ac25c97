//! Reverse-mode tape over batched scalars.
//!
//! The tape is an append-only program of elementary operations. Each recorded
//! value ([`Var`]) is conceptually a scalar; for speed a `Var` may carry a
//! batch of lanes (one lane per collocation point) and every operation acts
//! lane-wise. Width-1 values broadcast against wider ones. Dense layers are
//! recorded as fused matrix ops so the forward and reverse sweeps run on BLAS
//! kernels instead of per-scalar nodes.
//!
//! Evaluation is eager: emitting an op computes its value immediately, so
//! domain errors (division by zero, log of a non-positive number) surface at
//! the offending operation. A reverse sweep ([`Tape::backward`]) visits each
//! op exactly once in reverse emission order, which makes gradient
//! accumulation deterministic: identical programs produce bit-identical
//! gradients.
//!
//! The tape is rebuilt from scratch every optimizer step; [`Tape::reset`]
//! keeps the value arena allocated (and initialized) so steady-state steps do
//! no zero-filling.

use thiserror::Error;

/// Identifies the tape a [`Var`] belongs to. Operations never mix tapes.
pub type TapeId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot(pub(crate) u32);

/// Handle to one recorded value (a batch of lanes) on a specific tape.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    pub(crate) tape: TapeId,
    pub(crate) slot: Slot,
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("width mismatch: {a} vs {b} (widths must match or broadcast from 1)")]
    WidthMismatch { a: usize, b: usize },
    #[error("division by zero at lane {lane}")]
    DivByZero { lane: usize },
    #[error("log of non-positive value {value:e} at lane {lane}")]
    LogDomain { value: f64, lane: usize },
    #[error("sqrt of negative value {value:e} at lane {lane}")]
    SqrtDomain { value: f64, lane: usize },
    #[error("backward output must have width 1, got {width}")]
    NonScalarOutput { width: usize },
}

pub type Result<T> = core::result::Result<T, TapeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    /// Piecewise-constant sign; derivative is taken as 0 everywhere.
    Sgn,
    Tanh,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Un {
        k: UnaryOp,
        x: Slot,
        y: Slot,
    },
    Bin {
        k: BinOp,
        a: Slot,
        b: Slot,
        y: Slot,
    },
    /// y = k * a * b + c
    Fma {
        k: f64,
        a: Slot,
        b: Slot,
        c: Option<Slot>,
        y: Slot,
    },
    /// y = k * x + c with constant k, c; only k matters on the reverse sweep.
    Affine {
        k: f64,
        x: Slot,
        y: Slot,
    },
    /// y[m, cols] = W[m, n] * x[n, cols] + bias[m]; bias added to every column.
    Dense {
        w: Slot,
        x: Slot,
        bias: Option<Slot>,
        y: Slot,
        m: u32,
        n: u32,
        cols: u32,
    },
    /// y[u, i] = sum_c cols[c].0[u] * cols[c].1[i] + bias[u]
    /// where each cols[c].0 has width m ("column" of the embedding) and each
    /// cols[c].1 has width `cols` or 1 (broadcast).
    Embed {
        pairs: Box<[(Slot, Slot)]>,
        bias: Option<Slot>,
        y: Slot,
        m: u32,
        cols: u32,
    },
    /// y = scale * sum_i x_i
    Sum {
        x: Slot,
        y: Slot,
        scale: f64,
    },
    /// y = sum_i a_i * b_i
    Dot {
        a: Slot,
        b: Slot,
        y: Slot,
    },
}

#[derive(Debug, Clone, Copy)]
struct SlotMeta {
    off: usize,
    width: usize,
}

/// Gradients of one backward sweep, keyed by leaf registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Slot>,
    values: Vec<Box<[f64]>>,
}

impl Gradients {
    /// Gradient block for a registered leaf; `None` if `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.iter().position(|s| *s == v.slot).map(|i| &*self.values[i])
    }

    /// Scalar gradient of a width-1 leaf.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map(|g| g[0]).unwrap_or(0.0)
    }

    /// Blocks in leaf registration order.
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter().map(|b| &**b)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// In-place `self += scale * other`. Blocks must line up (same program
    /// built on another tape, e.g. another chunk of collocation points).
    pub fn axpy(&mut self, scale: f64, other: &Gradients) {
        assert_eq!(self.values.len(), other.values.len(), "gradient layout mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            assert_eq!(a.len(), b.len(), "gradient block mismatch");
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * *y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in self.values.iter_mut() {
            for x in b.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

static TAPE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

pub struct Tape {
    id: TapeId,
    /// High-water value arena: only `len_used` entries are meaningful, the
    /// tail keeps stale (but initialized) values from previous steps.
    values: Vec<f64>,
    len_used: usize,
    slots: Vec<SlotMeta>,
    ops: Vec<Op>,
    leaves: Vec<Slot>,
    /// Cache for width-1 constants, keyed by bit pattern.
    const_cache: Vec<(u64, Slot)>,
    // backward scratch, reused across sweeps
    adj: Vec<f64>,
    adj_ready: Vec<bool>,
    active: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            values: Vec::new(),
            len_used: 0,
            slots: Vec::new(),
            ops: Vec::new(),
            leaves: Vec::new(),
            const_cache: Vec::new(),
            adj: Vec::new(),
            adj_ready: Vec::new(),
            active: Vec::new(),
        }
    }

    /// Clear the program but keep allocations. The tape gets a fresh id, so
    /// stale `Var`s from before the reset are rejected.
    pub fn reset(&mut self) {
        self.id = TAPE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.len_used = 0;
        self.slots.clear();
        self.ops.clear();
        self.leaves.clear();
        self.const_cache.clear();
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn arena_len(&self) -> usize {
        self.len_used
    }

    fn check(&self, v: Var) -> Result<Slot> {
        if v.tape != self.id {
            return Err(TapeError::TapeMismatch);
        }
        Ok(v.slot)
    }

    fn var(&self, slot: Slot) -> Var {
        Var { tape: self.id, slot }
    }

    #[inline]
    fn meta(&self, s: Slot) -> SlotMeta {
        self.slots[s.0 as usize]
    }

    pub fn width(&self, v: Var) -> usize {
        self.meta(v.slot).width
    }

    /// Lane values of a recorded variable.
    pub fn values(&self, v: Var) -> &[f64] {
        let m = self.meta(v.slot);
        &self.values[m.off..m.off + m.width]
    }

    /// First lane; the value of a width-1 scalar.
    pub fn value(&self, v: Var) -> f64 {
        self.values(v)[0]
    }

    fn alloc(&mut self, width: usize) -> Slot {
        let off = self.len_used;
        self.len_used += width;
        if self.values.len() < self.len_used {
            self.values.resize(self.len_used, 0.0);
        }
        let s = Slot(self.slots.len() as u32);
        self.slots.push(SlotMeta { off, width });
        s
    }

    /// Register a trainable leaf. Backward produces a gradient block for it.
    pub fn leaf(&mut self, data: &[f64]) -> Var {
        let s = self.alloc(data.len());
        let m = self.meta(s);
        self.values[m.off..m.off + m.width].copy_from_slice(data);
        self.leaves.push(s);
        self.var(s)
    }

    /// Non-trainable input (collocation coordinates, fixed embeddings, data).
    pub fn input(&mut self, data: &[f64]) -> Var {
        let s = self.alloc(data.len());
        let m = self.meta(s);
        self.values[m.off..m.off + m.width].copy_from_slice(data);
        self.var(s)
    }

    /// Width-1 constant, cached by bit pattern.
    pub fn constant(&mut self, v: f64) -> Var {
        let bits = v.to_bits();
        if let Some((_, s)) = self.const_cache.iter().find(|(b, _)| *b == bits) {
            return self.var(*s);
        }
        let s = self.alloc(1);
        let m = self.meta(s);
        self.values[m.off] = v;
        self.const_cache.push((bits, s));
        self.var(s)
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    // ---- elementary operations -------------------------------------------

    pub fn unary(&mut self, k: UnaryOp, x: Var) -> Result<Var> {
        let xs = self.check(x)?;
        let w = self.width(x);
        // domain checks before allocating the output
        match k {
            UnaryOp::Ln => {
                for (i, v) in self.values(x).iter().enumerate() {
                    if *v <= 0.0 {
                        return Err(TapeError::LogDomain { value: *v, lane: i });
                    }
                }
            }
            UnaryOp::Sqrt => {
                for (i, v) in self.values(x).iter().enumerate() {
                    if *v < 0.0 {
                        return Err(TapeError::SqrtDomain { value: *v, lane: i });
                    }
                }
            }
            UnaryOp::Recip => {
                for (i, v) in self.values(x).iter().enumerate() {
                    if *v == 0.0 {
                        return Err(TapeError::DivByZero { lane: i });
                    }
                }
            }
            _ => {}
        }
        let y = self.alloc(w);
        let (xm, ym) = (self.meta(xs), self.meta(y));
        let (head, tail) = self.values.split_at_mut(ym.off);
        let xv = &head[xm.off..xm.off + w];
        let yv = &mut tail[..w];
        match k {
            UnaryOp::Neg => {
                for i in 0..w {
                    yv[i] = -xv[i];
                }
            }
            UnaryOp::Abs => {
                for i in 0..w {
                    yv[i] = xv[i].abs();
                }
            }
            UnaryOp::Sgn => {
                for i in 0..w {
                    yv[i] = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            UnaryOp::Tanh => {
                for i in 0..w {
                    yv[i] = xv[i].tanh();
                }
            }
            UnaryOp::Sigmoid => {
                for i in 0..w {
                    yv[i] = 1.0 / (1.0 + (-xv[i]).exp());
                }
            }
            UnaryOp::Softplus => {
                for i in 0..w {
                    // overflow-safe: softplus(x) = max(x,0) + ln(1+exp(-|x|))
                    let v = xv[i];
                    yv[i] = v.max(0.0) + (-v.abs()).exp().ln_1p();
                }
            }
            UnaryOp::Sin => {
                for i in 0..w {
                    yv[i] = xv[i].sin();
                }
            }
            UnaryOp::Cos => {
                for i in 0..w {
                    yv[i] = xv[i].cos();
                }
            }
            UnaryOp::Exp => {
                for i in 0..w {
                    yv[i] = xv[i].exp();
                }
            }
            UnaryOp::Ln => {
                for i in 0..w {
                    yv[i] = xv[i].ln();
                }
            }
            UnaryOp::Sqrt => {
                for i in 0..w {
                    yv[i] = xv[i].sqrt();
                }
            }
            UnaryOp::Square => {
                for i in 0..w {
                    yv[i] = xv[i] * xv[i];
                }
            }
            UnaryOp::Recip => {
                for i in 0..w {
                    yv[i] = 1.0 / xv[i];
                }
            }
        }
        self.ops.push(Op::Un { k, x: xs, y });
        Ok(self.var(y))
    }

    fn bin_widths(&self, a: Var, b: Var) -> Result<usize> {
        let (wa, wb) = (self.width(a), self.width(b));
        if wa == wb || wa == 1 || wb == 1 {
            Ok(wa.max(wb))
        } else {
            Err(TapeError::WidthMismatch { a: wa, b: wb })
        }
    }

    pub fn binary(&mut self, k: BinOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        let w = self.bin_widths(a, b)?;
        if k == BinOp::Div {
            for (i, v) in self.values(b).iter().enumerate() {
                if *v == 0.0 {
                    return Err(TapeError::DivByZero { lane: i });
                }
            }
        }
        let y = self.alloc(w);
        let (am, bm, ym) = (self.meta(sa), self.meta(sb), self.meta(y));
        let (head, tail) = self.values.split_at_mut(ym.off);
        let yv = &mut tail[..w];
        let (astep, bstep) = (
            if am.width == 1 { 0 } else { 1 },
            if bm.width == 1 { 0 } else { 1 },
        );
        let av = &head[am.off..am.off + am.width];
        let bv = &head[bm.off..bm.off + bm.width];
        match k {
            BinOp::Add => {
                for i in 0..w {
                    yv[i] = av[i * astep] + bv[i * bstep];
                }
            }
            BinOp::Sub => {
                for i in 0..w {
                    yv[i] = av[i * astep] - bv[i * bstep];
                }
            }
            BinOp::Mul => {
                for i in 0..w {
                    yv[i] = av[i * astep] * bv[i * bstep];
                }
            }
            BinOp::Div => {
                for i in 0..w {
                    yv[i] = av[i * astep] / bv[i * bstep];
                }
            }
        }
        self.ops.push(Op::Bin { k, a: sa, b: sb, y });
        Ok(self.var(y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// y = k * a * b [+ c]. The workhorse of jet chain/product rules.
    pub fn fma(&mut self, k: f64, a: Var, b: Var, c: Option<Var>) -> Result<Var> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        let mut w = self.bin_widths(a, b)?;
        let sc = match c {
            Some(cv) => {
                let s = self.check(cv)?;
                let wc = self.width(cv);
                if wc != w && wc != 1 && w != 1 {
                    return Err(TapeError::WidthMismatch { a: w, b: wc });
                }
                w = w.max(wc);
                Some(s)
            }
            None => None,
        };
        let y = self.alloc(w);
        let ym = self.meta(y);
        let (am, bm) = (self.meta(sa), self.meta(sb));
        let cm = sc.map(|s| self.meta(s));
        let (head, tail) = self.values.split_at_mut(ym.off);
        let yv = &mut tail[..w];
        let (astep, bstep) = (
            if am.width == 1 { 0 } else { 1 },
            if bm.width == 1 { 0 } else { 1 },
        );
        let av = &head[am.off..am.off + am.width];
        let bv = &head[bm.off..bm.off + bm.width];
        match cm {
            Some(cm) => {
                let cstep = if cm.width == 1 { 0 } else { 1 };
                let cv = &head[cm.off..cm.off + cm.width];
                for i in 0..w {
                    yv[i] = k * av[i * astep] * bv[i * bstep] + cv[i * cstep];
                }
            }
            None => {
                for i in 0..w {
                    yv[i] = k * av[i * astep] * bv[i * bstep];
                }
            }
        }
        self.ops.push(Op::Fma { k, a: sa, b: sb, c: sc, y });
        Ok(self.var(y))
    }

    /// y = k * x + c with constant k, c.
    pub fn affine(&mut self, k: f64, x: Var, c: f64) -> Result<Var> {
        let xs = self.check(x)?;
        let w = self.width(x);
        let y = self.alloc(w);
        let (xm, ym) = (self.meta(xs), self.meta(y));
        let (head, tail) = self.values.split_at_mut(ym.off);
        let xv = &head[xm.off..xm.off + w];
        let yv = &mut tail[..w];
        for i in 0..w {
            yv[i] = k * xv[i] + c;
        }
        self.ops.push(Op::Affine { k, x: xs, y });
        Ok(self.var(y))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    /// Fused dense layer: y[m, cols] = W x + bias, recorded as one op and
    /// executed with a BLAS-style kernel. `w` is row-major `[m, n]`, `x` is
    /// `[n, cols]`, `bias` (width m) is added to every column.
    pub fn dense(&mut self, w: Var, x: Var, bias: Option<Var>, m: usize, n: usize) -> Result<Var> {
        let (ws, xs) = (self.check(w)?, self.check(x)?);
        if self.width(w) != m * n {
            return Err(TapeError::WidthMismatch { a: self.width(w), b: m * n });
        }
        let xw = self.width(x);
        if xw % n != 0 {
            return Err(TapeError::WidthMismatch { a: xw, b: n });
        }
        let cols = xw / n;
        let bs = match bias {
            Some(b) => {
                let s = self.check(b)?;
                if self.width(b) != m {
                    return Err(TapeError::WidthMismatch { a: self.width(b), b: m });
                }
                Some(s)
            }
            None => None,
        };
        let y = self.alloc(m * cols);
        let ym = self.meta(y);
        let (wm, xm) = (self.meta(ws), self.meta(xs));
        let bm = bs.map(|s| self.meta(s));
        let (head, tail) = self.values.split_at_mut(ym.off);
        let yv = &mut tail[..m * cols];
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                cols,
                1.0,
                head[wm.off..].as_ptr(),
                n as isize,
                1,
                head[xm.off..].as_ptr(),
                cols as isize,
                1,
                0.0,
                yv.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        if let Some(bm) = bm {
            let bv = &head[bm.off..bm.off + m];
            for u in 0..m {
                let row = &mut yv[u * cols..(u + 1) * cols];
                let b = bv[u];
                for v in row.iter_mut() {
                    *v += b;
                }
            }
        }
        self.ops.push(Op::Dense {
            w: ws,
            x: xs,
            bias: bs,
            y,
            m: m as u32,
            n: n as u32,
            cols: cols as u32,
        });
        Ok(self.var(y))
    }

    /// Embedding-layer combination: y[u, i] = sum_c col_c[u] * in_c[i] + bias[u].
    /// Each `col` has width m; each `in` has width `cols` or 1 (broadcast).
    pub fn embed(
        &mut self,
        pairs: &[(Var, Var)],
        bias: Option<Var>,
        m: usize,
        cols: usize,
    ) -> Result<Var> {
        let mut ps = Vec::with_capacity(pairs.len());
        for (col, inp) in pairs {
            let cs = self.check(*col)?;
            let is = self.check(*inp)?;
            if self.width(*col) != m {
                return Err(TapeError::WidthMismatch { a: self.width(*col), b: m });
            }
            let wi = self.width(*inp);
            if wi != cols && wi != 1 {
                return Err(TapeError::WidthMismatch { a: wi, b: cols });
            }
            ps.push((cs, is));
        }
        let bs = match bias {
            Some(b) => {
                let s = self.check(b)?;
                if self.width(b) != m {
                    return Err(TapeError::WidthMismatch { a: self.width(b), b: m });
                }
                Some(s)
            }
            None => None,
        };
        let y = self.alloc(m * cols);
        let ym = self.meta(y);
        let bm = bs.map(|s| self.meta(s));
        let pms: Vec<(SlotMeta, SlotMeta)> = ps.iter().map(|(c, i)| (self.meta(*c), self.meta(*i))).collect();
        let (head, tail) = self.values.split_at_mut(ym.off);
        let yv = &mut tail[..m * cols];
        match bm {
            Some(bm) => {
                let bv = &head[bm.off..bm.off + m];
                for u in 0..m {
                    yv[u * cols..(u + 1) * cols].fill(bv[u]);
                }
            }
            None => yv.fill(0.0),
        }
        for (cm, im) in &pms {
            let colv = &head[cm.off..cm.off + m];
            let inv = &head[im.off..im.off + im.width];
            if im.width == 1 {
                let v = inv[0];
                for u in 0..m {
                    let c = colv[u] * v;
                    for e in yv[u * cols..(u + 1) * cols].iter_mut() {
                        *e += c;
                    }
                }
            } else {
                for u in 0..m {
                    let c = colv[u];
                    let row = &mut yv[u * cols..(u + 1) * cols];
                    for (e, iv) in row.iter_mut().zip(inv.iter()) {
                        *e += c * iv;
                    }
                }
            }
        }
        self.ops.push(Op::Embed {
            pairs: ps.into_boxed_slice(),
            bias: bs,
            y,
            m: m as u32,
            cols: cols as u32,
        });
        Ok(self.var(y))
    }

    /// y = scale * sum(x), accumulated in lane order.
    pub fn sum_scaled(&mut self, x: Var, scale: f64) -> Result<Var> {
        let xs = self.check(x)?;
        let total: f64 = self.values(x).iter().sum();
        let y = self.alloc(1);
        let ym = self.meta(y);
        self.values[ym.off] = scale * total;
        self.ops.push(Op::Sum { x: xs, y, scale });
        Ok(self.var(y))
    }

    /// Mean over lanes.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.width(x);
        self.sum_scaled(x, 1.0 / n as f64)
    }

    /// y = sum_i a_i * b_i (equal widths).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        let (wa, wb) = (self.width(a), self.width(b));
        if wa != wb {
            return Err(TapeError::WidthMismatch { a: wa, b: wb });
        }
        let total: f64 = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(x, y)| x * y)
            .sum();
        let y = self.alloc(1);
        let ym = self.meta(y);
        self.values[ym.off] = total;
        self.ops.push(Op::Dot { a: sa, b: sb, y });
        Ok(self.var(y))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Prepare slot `s` for accumulation; returns true if it was fresh (so
    /// the caller may overwrite instead of add).
    #[inline]
    fn adj_fresh(&mut self, s: Slot) -> bool {
        let fresh = !self.adj_ready[s.0 as usize];
        self.adj_ready[s.0 as usize] = true;
        self.active[s.0 as usize] = true;
        fresh
    }

    /// Reverse sweep from a width-1 output. Returns the gradient blocks of
    /// every registered leaf (exactly 0 for leaves not on a path to `output`).
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let os = self.check(output)?;
        let ow = self.width(output);
        if ow != 1 {
            return Err(TapeError::NonScalarOutput { width: ow });
        }
        if self.adj.len() < self.len_used {
            self.adj.resize(self.len_used, 0.0);
        }
        self.adj_ready.clear();
        self.adj_ready.resize(self.slots.len(), false);
        self.active.clear();
        self.active.resize(self.slots.len(), false);

        self.adj_fresh(os);
        let om = self.meta(os);
        self.adj[om.off] = 1.0;

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;

        let mut slots = Vec::with_capacity(self.leaves.len());
        let mut values = Vec::with_capacity(self.leaves.len());
        for i in 0..self.leaves.len() {
            let leaf = self.leaves[i];
            let m = self.meta(leaf);
            let block: Box<[f64]> = if self.adj_ready[leaf.0 as usize] {
                self.adj[m.off..m.off + m.width].into()
            } else {
                vec![0.0; m.width].into()
            };
            slots.push(leaf);
            values.push(block);
        }
        Ok(Gradients { slots, values })
    }

    fn backward_op(&mut self, op: &Op) {
        let out = match op {
            Op::Un { y, .. }
            | Op::Bin { y, .. }
            | Op::Fma { y, .. }
            | Op::Affine { y, .. }
            | Op::Dense { y, .. }
            | Op::Embed { y, .. }
            | Op::Sum { y, .. }
            | Op::Dot { y, .. } => *y,
        };
        if !self.active[out.0 as usize] {
            return;
        }
        match op {
            Op::Un { k, x, y } => self.bw_unary(*k, *x, *y),
            Op::Bin { k, a, b, y } => self.bw_binary(*k, *a, *b, *y),
            Op::Fma { k, a, b, c, y } => self.bw_fma(*k, *a, *b, *c, *y),
            Op::Affine { k, x, y } => self.bw_scaled_accum(*k, *x, *y),
            Op::Dense { w, x, bias, y, m, n, cols } => {
                self.bw_dense(*w, *x, *bias, *y, *m as usize, *n as usize, *cols as usize)
            }
            Op::Embed { pairs, bias, y, m, cols } => {
                self.bw_embed(pairs, *bias, *y, *m as usize, *cols as usize)
            }
            Op::Sum { x, y, scale } => self.bw_sum(*x, *y, *scale),
            Op::Dot { a, b, y } => self.bw_dot(*a, *b, *y),
        }
    }

    /// adj[x] (+)= k * local[i] * adj[y], in place. `local` of None means 1.
    /// Handles broadcast (width-1 x gets the lane-ordered sum).
    #[inline]
    fn accum_prod(&mut self, x: Slot, y: Slot, k: f64, local: Local) {
        let fresh = self.adj_fresh(x);
        let xm = self.meta(x);
        let ym = self.meta(y);
        let w = ym.width;
        let vals = &self.values;
        // x strictly precedes y in the arena, so split at y's offset.
        let (ahead, atail) = self.adj.split_at_mut(ym.off);
        let dy = &atail[..w];
        let dx = &mut ahead[xm.off..xm.off + xm.width];
        if xm.width == w {
            match local {
                Local::One => {
                    if fresh {
                        for i in 0..w {
                            dx[i] = k * dy[i];
                        }
                    } else {
                        for i in 0..w {
                            dx[i] += k * dy[i];
                        }
                    }
                }
                Local::Slice { off, step } => {
                    if fresh {
                        for i in 0..w {
                            dx[i] = k * dy[i] * vals[off + i * step];
                        }
                    } else {
                        for i in 0..w {
                            dx[i] += k * dy[i] * vals[off + i * step];
                        }
                    }
                }
                Local::Fn1 { off, f } => {
                    if fresh {
                        for i in 0..w {
                            dx[i] = k * dy[i] * f(vals[off + i]);
                        }
                    } else {
                        for i in 0..w {
                            dx[i] += k * dy[i] * f(vals[off + i]);
                        }
                    }
                }
                Local::RecipSlice { off, step } => {
                    if fresh {
                        for i in 0..w {
                            dx[i] = k * dy[i] / vals[off + i * step];
                        }
                    } else {
                        for i in 0..w {
                            dx[i] += k * dy[i] / vals[off + i * step];
                        }
                    }
                }
                Local::Div { boff, bstep, yoff } => {
                    if fresh {
                        for i in 0..w {
                            dx[i] = k * dy[i] * vals[yoff + i] / vals[boff + i * bstep];
                        }
                    } else {
                        for i in 0..w {
                            dx[i] += k * dy[i] * vals[yoff + i] / vals[boff + i * bstep];
                        }
                    }
                }
            }
        } else {
            debug_assert_eq!(xm.width, 1);
            let mut s = 0.0;
            match local {
                Local::One => {
                    for dyi in dy.iter().take(w) {
                        s += k * dyi;
                    }
                }
                Local::Slice { off, step } => {
                    for (i, dyi) in dy.iter().enumerate().take(w) {
                        s += k * dyi * vals[off + i * step];
                    }
                }
                Local::Fn1 { off, f } => {
                    for (i, dyi) in dy.iter().enumerate().take(w) {
                        s += k * dyi * f(vals[off + i]);
                    }
                }
                Local::RecipSlice { off, step } => {
                    for (i, dyi) in dy.iter().enumerate().take(w) {
                        s += k * dyi / vals[off + i * step];
                    }
                }
                Local::Div { boff, bstep, yoff } => {
                    for (i, dyi) in dy.iter().enumerate().take(w) {
                        s += k * dyi * vals[yoff + i] / vals[boff + i * bstep];
                    }
                }
            }
            if fresh {
                dx[0] = s;
            } else {
                dx[0] += s;
            }
        }
    }

    fn bw_unary(&mut self, k: UnaryOp, x: Slot, y: Slot) {
        if k == UnaryOp::Sgn {
            return; // derivative 0
        }
        let xm = self.meta(x);
        let ym = self.meta(y);
        let local = match k {
            UnaryOp::Neg => {
                self.accum_prod(x, y, -1.0, Local::One);
                return;
            }
            UnaryOp::Abs => Local::Fn1 {
                off: xm.off,
                f: |v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
            },
            UnaryOp::Sgn => unreachable!(),
            UnaryOp::Tanh => Local::Fn1 { off: ym.off, f: |y| 1.0 - y * y },
            UnaryOp::Sigmoid => Local::Fn1 { off: ym.off, f: |y| y * (1.0 - y) },
            UnaryOp::Softplus => Local::Fn1 { off: xm.off, f: |v| 1.0 / (1.0 + (-v).exp()) },
            UnaryOp::Sin => Local::Fn1 { off: xm.off, f: f64::cos },
            UnaryOp::Cos => {
                self.accum_prod(x, y, -1.0, Local::Fn1 { off: xm.off, f: f64::sin });
                return;
            }
            UnaryOp::Exp => Local::Slice { off: ym.off, step: 1 },
            UnaryOp::Ln => Local::Fn1 { off: xm.off, f: |v| 1.0 / v },
            UnaryOp::Sqrt => Local::Fn1 { off: ym.off, f: |y| 0.5 / y },
            UnaryOp::Square => Local::Fn1 { off: xm.off, f: |v| 2.0 * v },
            UnaryOp::Recip => {
                self.accum_prod(x, y, -1.0, Local::Fn1 { off: ym.off, f: |y| y * y });
                return;
            }
        };
        self.accum_prod(x, y, 1.0, local);
    }

    fn bw_binary(&mut self, k: BinOp, a: Slot, b: Slot, y: Slot) {
        let am = self.meta(a);
        let bm = self.meta(b);
        let ym = self.meta(y);
        let (astep, bstep) = (
            if am.width == 1 { 0 } else { 1 },
            if bm.width == 1 { 0 } else { 1 },
        );
        match k {
            BinOp::Add => {
                self.accum_prod(a, y, 1.0, Local::One);
                self.accum_prod(b, y, 1.0, Local::One);
            }
            BinOp::Sub => {
                self.accum_prod(a, y, 1.0, Local::One);
                self.accum_prod(b, y, -1.0, Local::One);
            }
            BinOp::Mul => {
                self.accum_prod(a, y, 1.0, Local::Slice { off: bm.off, step: bstep });
                self.accum_prod(b, y, 1.0, Local::Slice { off: am.off, step: astep });
            }
            BinOp::Div => {
                // da = dy / b ; db = -dy * y / b
                self.accum_prod(a, y, 1.0, Local::RecipSlice { off: bm.off, step: bstep });
                self.accum_prod(
                    b,
                    y,
                    -1.0,
                    Local::Div { boff: bm.off, bstep, yoff: ym.off },
                );
            }
        }
    }

    fn bw_fma(&mut self, k: f64, a: Slot, b: Slot, c: Option<Slot>, y: Slot) {
        let am = self.meta(a);
        let bm = self.meta(b);
        let (astep, bstep) = (
            if am.width == 1 { 0 } else { 1 },
            if bm.width == 1 { 0 } else { 1 },
        );
        self.accum_prod(a, y, k, Local::Slice { off: bm.off, step: bstep });
        self.accum_prod(b, y, k, Local::Slice { off: am.off, step: astep });
        if let Some(cs) = c {
            self.accum_prod(cs, y, 1.0, Local::One);
        }
    }

    fn bw_scaled_accum(&mut self, k: f64, x: Slot, y: Slot) {
        self.accum_prod(x, y, k, Local::One);
    }

    fn bw_dense(&mut self, w: Slot, x: Slot, bias: Option<Slot>, y: Slot, m: usize, n: usize, cols: usize) {
        let ym = self.meta(y);
        let wm = self.meta(w);
        let xm = self.meta(x);
        let yoff = ym.off;

        // dW += dY X^T : [m, n] = [m, cols] x [cols, n]
        let w_fresh = self.adj_fresh(w);
        let x_fresh = self.adj_fresh(x);
        unsafe {
            let dy_ptr = self.adj.as_ptr().add(yoff);
            let x_ptr = self.values.as_ptr().add(xm.off);
            let dw_ptr = self.adj.as_mut_ptr().add(wm.off);
            matrixmultiply::dgemm(
                m,
                cols,
                n,
                1.0,
                dy_ptr,
                cols as isize,
                1,
                x_ptr,
                1,
                cols as isize, // X^T via swapped strides
                if w_fresh { 0.0 } else { 1.0 },
                dw_ptr,
                n as isize,
                1,
            );
            // dX += W^T dY : [n, cols] = [n, m] x [m, cols]
            let w_ptr = self.values.as_ptr().add(wm.off);
            let dx_ptr = self.adj.as_mut_ptr().add(xm.off);
            matrixmultiply::dgemm(
                n,
                m,
                cols,
                1.0,
                w_ptr,
                1,
                n as isize, // W^T via swapped strides
                dy_ptr,
                cols as isize,
                1,
                if x_fresh { 0.0 } else { 1.0 },
                dx_ptr,
                cols as isize,
                1,
            );
        }
        if let Some(bs) = bias {
            let fresh = self.adj_fresh(bs);
            let bmm = self.meta(bs);
            let (head, tail) = self.adj.split_at_mut(yoff);
            let dy = &tail[..m * cols];
            let db = &mut head[bmm.off..bmm.off + m];
            for u in 0..m {
                let mut s = 0.0;
                for i in 0..cols {
                    s += dy[u * cols + i];
                }
                if fresh {
                    db[u] = s;
                } else {
                    db[u] += s;
                }
            }
        }
    }

    fn bw_embed(&mut self, pairs: &[(Slot, Slot)], bias: Option<Slot>, y: Slot, m: usize, cols: usize) {
        let ym = self.meta(y);
        let yoff = ym.off;
        for &(cs, is) in pairs {
            let cm = self.meta(cs);
            let im = self.meta(is);
            // d col[u] (+)= sum_i dy[u,i] * in[i]
            {
                let fresh = self.adj_fresh(cs);
                let vals = &self.values;
                let (head, tail) = self.adj.split_at_mut(yoff);
                let dy = &tail[..m * cols];
                let dcol = &mut head[cm.off..cm.off + m];
                if im.width == 1 {
                    let v = vals[im.off];
                    for u in 0..m {
                        let mut s = 0.0;
                        for i in 0..cols {
                            s += dy[u * cols + i];
                        }
                        if fresh {
                            dcol[u] = s * v;
                        } else {
                            dcol[u] += s * v;
                        }
                    }
                } else {
                    for u in 0..m {
                        let mut s = 0.0;
                        for i in 0..cols {
                            s += dy[u * cols + i] * vals[im.off + i];
                        }
                        if fresh {
                            dcol[u] = s;
                        } else {
                            dcol[u] += s;
                        }
                    }
                }
            }
            // d in[i] (+)= sum_u dy[u,i] * col[u]
            {
                let fresh = self.adj_fresh(is);
                let vals = &self.values;
                let (head, tail) = self.adj.split_at_mut(yoff);
                let dy = &tail[..m * cols];
                let din = &mut head[im.off..im.off + im.width];
                if im.width == 1 {
                    let mut s = 0.0;
                    for u in 0..m {
                        let c = vals[cm.off + u];
                        for i in 0..cols {
                            s += dy[u * cols + i] * c;
                        }
                    }
                    if fresh {
                        din[0] = s;
                    } else {
                        din[0] += s;
                    }
                } else {
                    if fresh {
                        din.fill(0.0);
                    }
                    for u in 0..m {
                        let c = vals[cm.off + u];
                        for i in 0..cols {
                            din[i] += dy[u * cols + i] * c;
                        }
                    }
                }
            }
        }
        if let Some(bs) = bias {
            let fresh = self.adj_fresh(bs);
            let bm = self.meta(bs);
            let (head, tail) = self.adj.split_at_mut(yoff);
            let dy = &tail[..m * cols];
            let db = &mut head[bm.off..bm.off + m];
            for u in 0..m {
                let mut s = 0.0;
                for i in 0..cols {
                    s += dy[u * cols + i];
                }
                if fresh {
                    db[u] = s;
                } else {
                    db[u] += s;
                }
            }
        }
    }

    fn bw_sum(&mut self, x: Slot, y: Slot, scale: f64) {
        let ym = self.meta(y);
        let d = self.adj[ym.off] * scale;
        let fresh = self.adj_fresh(x);
        let xm = self.meta(x);
        let dx = &mut self.adj[xm.off..xm.off + xm.width];
        if fresh {
            dx.fill(d);
        } else {
            for v in dx.iter_mut() {
                *v += d;
            }
        }
    }

    fn bw_dot(&mut self, a: Slot, b: Slot, y: Slot) {
        let ym = self.meta(y);
        let d = self.adj[ym.off];
        for (tgt, src) in [(a, b), (b, a)] {
            let fresh = self.adj_fresh(tgt);
            let tm = self.meta(tgt);
            let sm = self.meta(src);
            let vals = &self.values;
            let dx = &mut self.adj[tm.off..tm.off + tm.width];
            if fresh {
                for (i, v) in dx.iter_mut().enumerate() {
                    *v = d * vals[sm.off + i];
                }
            } else {
                for (i, v) in dx.iter_mut().enumerate() {
                    *v += d * vals[sm.off + i];
                }
            }
        }
    }
}

/// How the local partial of an input is derived during the reverse sweep.
#[derive(Clone, Copy)]
enum Local {
    /// partial = 1
    One,
    /// partial = values[off + i*step]
    Slice { off: usize, step: usize },
    /// partial = f(values[off + i])
    Fn1 { off: usize, f: fn(f64) -> f64 },
    /// partial = 1 / values[off + i*step] (division, numerator side)
    RecipSlice { off: usize, step: usize },
    /// partial = values[yoff + i] / values[boff + i*bstep] (division,
    /// denominator side, used with k = -1)
    Div { boff: usize, bstep: usize, yoff: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_value_and_partials() {
        let mut t = Tape::new();
        let a = t.leaf(&[3.0]);
        let b = t.leaf(&[4.0]);
        let y = t.mul(a, b).unwrap();
        assert_eq!(t.value(y), 12.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(a), 4.0);
        assert_eq!(g.scalar(b), 3.0);
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&[0.0]);
        let y = t.unary(UnaryOp::Tanh, x).unwrap();
        assert_eq!(t.value(y), 0.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(x), 1.0);
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let mut t = Tape::new();
        let x = t.input(&[-1.0]);
        assert!(matches!(t.unary(UnaryOp::Ln, x), Err(TapeError::LogDomain { .. })));
    }

    #[test]
    fn div_by_zero_reports_lane() {
        let mut t = Tape::new();
        let a = t.input(&[1.0, 1.0]);
        let b = t.input(&[2.0, 0.0]);
        match t.div(a, b) {
            Err(TapeError::DivByZero { lane }) => assert_eq!(lane, 1),
            other => panic!("expected DivByZero, got {other:?}"),
        }
    }

    #[test]
    fn division_backward() {
        let mut t = Tape::new();
        let a = t.leaf(&[3.0]);
        let b = t.leaf(&[2.0]);
        let y = t.div(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.scalar(a) - 0.5).abs() < 1e-15);
        assert!((g.scalar(b) + 0.75).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(&[3.0]);
        let y = t.unary(UnaryOp::Square, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(w), 6.0);
    }

    #[test]
    fn tapes_do_not_mix() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(&[1.0]);
        let b = t2.leaf(&[1.0]);
        assert!(matches!(t1.mul(a, b), Err(TapeError::TapeMismatch)));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(&[2.0]);
        let b = t.leaf(&[5.0]);
        let y = t.unary(UnaryOp::Square, a).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(a), 4.0);
        assert_eq!(g.scalar(b), 0.0);
    }

    #[test]
    fn broadcast_mul_reduces_on_backward() {
        let mut t = Tape::new();
        let w = t.leaf(&[2.0]); // width 1
        let x = t.input(&[1.0, 2.0, 3.0]);
        let y = t.mul(w, x).unwrap();
        assert_eq!(t.values(y), &[2.0, 4.0, 6.0]);
        let s = t.sum_scaled(y, 1.0).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.scalar(w), 6.0); // sum of x
    }

    #[test]
    fn dense_matches_manual() {
        let mut t = Tape::new();
        // 2x3 matrix times 3x2 input
        let w = t.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = t.leaf(&[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let bias = t.leaf(&[10.0, 20.0]);
        let y = t.dense(w, x, Some(bias), 2, 3).unwrap();
        // row 0: [1,2,3] . cols of x + 10
        assert_eq!(
            t.values(y),
            &[1.0 - 2.0 + 10.0, 0.5 + 4.0 + 3.0 + 10.0, 4.0 - 5.0 + 20.0, 2.0 + 10.0 + 6.0 + 20.0]
        );
        let s = t.sum_scaled(y, 1.0).unwrap();
        let g = t.backward(s).unwrap();
        // d/dW[u,k] = sum_i x[k,i]
        let gw = g.get(w).unwrap();
        assert_eq!(gw, &[1.5, 1.0, 1.0, 1.5, 1.0, 1.0]);
        // d/dbias[u] = cols
        assert_eq!(g.get(bias).unwrap(), &[2.0, 2.0]);
        // d/dx[k,i] = sum_u w[u,k]
        assert_eq!(g.get(x).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn embed_matches_manual() {
        let mut t = Tape::new();
        let c0 = t.leaf(&[1.0, -1.0]); // m = 2
        let x0 = t.input(&[0.5, 1.5, 2.5]); // cols = 3
        let c1 = t.leaf(&[2.0, 3.0]);
        let th = t.leaf(&[4.0]); // broadcast width 1
        let bias = t.leaf(&[0.25, -0.25]);
        let y = t.embed(&[(c0, x0), (c1, th)], Some(bias), 2, 3).unwrap();
        assert_eq!(
            t.values(y),
            &[
                0.5 + 8.0 + 0.25,
                1.5 + 8.0 + 0.25,
                2.5 + 8.0 + 0.25,
                -0.5 + 12.0 - 0.25,
                -1.5 + 12.0 - 0.25,
                -2.5 + 12.0 - 0.25
            ]
        );
        let s = t.sum_scaled(y, 1.0).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(c0).unwrap(), &[4.5, 4.5]);
        assert_eq!(g.get(c1).unwrap(), &[12.0, 12.0]);
        assert_eq!(g.scalar(th), 3.0 * 2.0 + 3.0 * 3.0);
        assert_eq!(g.get(bias).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_linearity() {
        // backward(a f + b g) = a backward(f) + b backward(g), same tape
        let mut t = Tape::new();
        let x = t.leaf(&[0.7]);
        let y = t.leaf(&[-1.3]);
        let f = t.mul(x, y).unwrap();
        let sq = t.unary(UnaryOp::Square, x).unwrap();
        let g = t.add(sq, y).unwrap();
        let (a, b) = (2.5, -0.75);
        let af = t.affine(a, f, 0.0).unwrap();
        let bg = t.affine(b, g, 0.0).unwrap();
        let combo = t.add(af, bg).unwrap();
        let gc = t.backward(combo).unwrap();
        let gf = t.backward(f).unwrap();
        let gg = t.backward(g).unwrap();
        for leaf in [x, y] {
            let lhs = gc.scalar(leaf);
            let rhs = a * gf.scalar(leaf) + b * gg.scalar(leaf);
            assert!((lhs - rhs).abs() <= 1e-15 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn repeated_backward_is_consistent() {
        // two sweeps on one tape must not contaminate each other
        let mut t = Tape::new();
        let x = t.leaf(&[1.5]);
        let f = t.unary(UnaryOp::Square, x).unwrap();
        let g = t.unary(UnaryOp::Exp, x).unwrap();
        let gf1 = t.backward(f).unwrap();
        let gg = t.backward(g).unwrap();
        let gf2 = t.backward(f).unwrap();
        assert_eq!(gf1.scalar(x), gf2.scalar(x));
        assert!((gg.scalar(x) - 1.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn same_operand_twice_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(&[3.0]);
        let y = t.mul(x, x).unwrap(); // x^2 via Bin::Mul with a == b
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(x), 6.0);
    }

    #[test]
    fn reset_invalidates_old_vars() {
        let mut t = Tape::new();
        let a = t.leaf(&[1.0]);
        t.reset();
        let b = t.leaf(&[2.0]);
        assert!(matches!(t.mul(a, b), Err(TapeError::TapeMismatch)));
    }

    #[test]
    fn reset_reuses_arena_without_stale_values() {
        let mut t = Tape::new();
        let a = t.input(&[1.0, 2.0, 3.0, 4.0]);
        let _ = t.unary(UnaryOp::Square, a).unwrap();
        t.reset();
        let b = t.input(&[5.0, 6.0]);
        let y = t.unary(UnaryOp::Square, b).unwrap();
        assert_eq!(t.values(y), &[25.0, 36.0]);
    }
}
