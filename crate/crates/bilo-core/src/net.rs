//! Operator and function networks.
//!
//! The local-operator network u(x, Theta; W) is a dense tanh network whose
//! input layer embeds coordinates through a trainable matrix and PDE
//! parameters through a fixed random matrix R (excluded from the trainable
//! leaves so no optimizer step can zero it out). Output transforms compose a
//! closed-form map over the raw output so boundary and initial conditions
//! hold identically for any weights.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::jet::{self, Jet, Result, SeedConfig};
use crate::rng::Rng;
use crate::tape::{Tape, UnaryOp, Var};

/// Named parameter block, the unit of checkpointing and optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Dense network with a coordinate/parameter embedding layer, `depth` hidden
/// tanh layers of `width` units, and a linear output unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub n_coords: usize,
    pub n_params: usize,
    pub width: usize,
    pub depth: usize,
    /// Fixed rescale applied to each parameter before it enters the
    /// embedding (1.0 except where raw magnitudes would saturate tanh).
    pub param_scale: Vec<f64>,
    /// One trainable column per coordinate, each of length `width`.
    pub embed_cols: Vec<Vec<f64>>,
    /// One fixed column per parameter (the embedding matrix R).
    pub embed_r: Vec<Vec<f64>>,
    pub embed_bias: Vec<f64>,
    /// Row-major (weights, bias) per hidden dense layer.
    pub hidden: Vec<(Vec<f64>, Vec<f64>)>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl NetworkParams {
    /// Deterministic initialization: every entry (including R) uniform in
    /// [-1/sqrt(d), 1/sqrt(d)] with d the number of input units of its layer.
    pub fn init(seed: u64, n_coords: usize, n_params: usize, width: usize, depth: usize) -> Self {
        let mut rng = Rng::stream(seed, "net-init");
        let d0 = n_coords + n_params;
        let bound0 = 1.0 / (d0 as f64).sqrt();
        let draw = |n: usize, bound: f64, rng: &mut Rng| -> Vec<f64> {
            (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
        };
        let embed_cols = (0..n_coords).map(|_| draw(width, bound0, &mut rng)).collect();
        let embed_r = (0..n_params).map(|_| draw(width, bound0, &mut rng)).collect();
        let embed_bias = draw(width, bound0, &mut rng);
        let boundh = 1.0 / (width as f64).sqrt();
        let hidden = (0..depth)
            .map(|_| (draw(width * width, boundh, &mut rng), draw(width, boundh, &mut rng)))
            .collect();
        let out_w = draw(width, boundh, &mut rng);
        let out_b = draw(1, boundh, &mut rng);
        NetworkParams {
            n_coords,
            n_params,
            width,
            depth,
            param_scale: vec![1.0; n_params],
            embed_cols,
            embed_r,
            embed_bias,
            hidden,
            out_w,
            out_b,
        }
    }

    pub fn with_param_scale(mut self, scale: Vec<f64>) -> Self {
        assert_eq!(scale.len(), self.n_params);
        self.param_scale = scale;
        self
    }

    /// Checkpoint blocks in a fixed order; R is carried along (marked
    /// non-trainable) so a reload never re-randomizes it.
    pub fn to_blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: Vec<f64>, trainable: bool| {
            blocks.push(ParamBlock { name, shape, values, trainable });
        };
        for (i, c) in self.embed_cols.iter().enumerate() {
            push(format!("{prefix}.embed.w{i}"), vec![self.width], c.clone(), true);
        }
        for (k, r) in self.embed_r.iter().enumerate() {
            push(format!("{prefix}.embed.r{k}"), vec![self.width], r.clone(), false);
        }
        push(format!("{prefix}.embed.b"), vec![self.width], self.embed_bias.clone(), true);
        for (l, (w, b)) in self.hidden.iter().enumerate() {
            push(format!("{prefix}.hidden{l}.w"), vec![self.width, self.width], w.clone(), true);
            push(format!("{prefix}.hidden{l}.b"), vec![self.width], b.clone(), true);
        }
        push(format!("{prefix}.out.w"), vec![1, self.width], self.out_w.clone(), true);
        push(format!("{prefix}.out.b"), vec![1], self.out_b.clone(), true);
        blocks
    }

    pub fn load_blocks(&mut self, prefix: &str, blocks: &[ParamBlock]) -> Option<()> {
        let find = |name: String| -> Option<&ParamBlock> { blocks.iter().find(|b| b.name == name) };
        for i in 0..self.n_coords {
            self.embed_cols[i] = find(format!("{prefix}.embed.w{i}"))?.values.clone();
        }
        for k in 0..self.n_params {
            self.embed_r[k] = find(format!("{prefix}.embed.r{k}"))?.values.clone();
        }
        self.embed_bias = find(format!("{prefix}.embed.b"))?.values.clone();
        for l in 0..self.depth {
            self.hidden[l].0 = find(format!("{prefix}.hidden{l}.w"))?.values.clone();
            self.hidden[l].1 = find(format!("{prefix}.hidden{l}.b"))?.values.clone();
        }
        self.out_w = find(format!("{prefix}.out.w"))?.values.clone();
        self.out_b = find(format!("{prefix}.out.b"))?.values.clone();
        Some(())
    }

    /// Mutable views of the trainable blocks, in the bind order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = Vec::new();
        for c in self.embed_cols.iter_mut() {
            v.push(c);
        }
        v.push(&mut self.embed_bias);
        for (w, b) in self.hidden.iter_mut() {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    /// Register this network's leaves on a tape. Trainable blocks become
    /// leaves in the same order as [`Self::trainable_mut`]; R becomes plain
    /// input so backward never produces a gradient entry for it.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let embed_cols = self.embed_cols.iter().map(|c| tape.leaf(c)).collect();
        let embed_bias = tape.leaf(&self.embed_bias);
        let hidden = self
            .hidden
            .iter()
            .map(|(w, b)| (tape.leaf(w), tape.leaf(b)))
            .collect();
        let out_w = tape.leaf(&self.out_w);
        let out_b = tape.leaf(&self.out_b);
        let embed_r = self.embed_r.iter().map(|r| tape.input(r)).collect();
        BoundNet {
            width: self.width,
            param_scale: self.param_scale.clone(),
            embed_cols,
            embed_r,
            embed_bias,
            hidden,
            out_w,
            out_b,
        }
    }

    /// Plain forward pass (no tape), for metrics and reference grids.
    pub fn eval_plain(&self, coords: &[f64], params: &[f64]) -> f64 {
        assert_eq!(coords.len(), self.n_coords);
        assert_eq!(params.len(), self.n_params);
        let w = self.width;
        let mut h = vec![0.0f64; w];
        for u in 0..w {
            let mut acc = self.embed_bias[u];
            for (i, c) in coords.iter().enumerate() {
                acc += self.embed_cols[i][u] * c;
            }
            for (k, p) in params.iter().enumerate() {
                acc += self.embed_r[k][u] * (self.param_scale[k] * p);
            }
            h[u] = acc.tanh();
        }
        let mut next = vec![0.0f64; w];
        for (wm, b) in &self.hidden {
            for u in 0..w {
                let row = &wm[u * w..(u + 1) * w];
                let mut acc = b[u];
                for i in 0..w {
                    acc += row[i] * h[i];
                }
                next[u] = acc.tanh();
            }
            std::mem::swap(&mut h, &mut next);
        }
        let mut out = self.out_b[0];
        for i in 0..w {
            out += self.out_w[i] * h[i];
        }
        out
    }
}

/// Tape-bound network: leaf handles for one forward/backward pass.
pub struct BoundNet {
    pub width: usize,
    pub param_scale: Vec<f64>,
    pub embed_cols: Vec<Var>,
    pub embed_r: Vec<Var>,
    pub embed_bias: Var,
    pub hidden: Vec<(Var, Var)>,
    pub out_w: Var,
    pub out_b: Var,
}

impl BoundNet {
    /// Raw network output as a jet. Coordinate and parameter jets must share
    /// one seed configuration; every carried partial of the output ends up on
    /// the tape, so a reverse sweep differentiates them w.r.t. the weights.
    pub fn forward_jet(
        &self,
        tape: &mut Tape,
        cfg: &Arc<SeedConfig>,
        coords: &[Jet],
        params: &[Jet],
    ) -> Result<Jet> {
        assert_eq!(coords.len(), self.embed_cols.len());
        assert_eq!(params.len(), self.embed_r.len());
        let batch = coords
            .iter()
            .chain(params.iter())
            .map(|j| tape.width(j.value()))
            .max()
            .unwrap_or(1);

        // Scale parameters into embedding range.
        let scaled: Vec<Jet> = params
            .iter()
            .zip(&self.param_scale)
            .map(|(p, s)| jet::affine(tape, *s, p, 0.0))
            .collect::<Result<_>>()?;

        // Embedding pre-activation, one fused op per carried component.
        let mut pre = vec![None; cfg.len()];
        for (ci, l) in cfg.labels().iter().enumerate() {
            let mut pairs: Vec<(Var, Var)> = Vec::new();
            for (i, cj) in coords.iter().enumerate() {
                if let Some(c) = cj.comp(l) {
                    pairs.push((self.embed_cols[i], c));
                }
            }
            for (k, pj) in scaled.iter().enumerate() {
                if let Some(c) = pj.comp(l) {
                    pairs.push((self.embed_r[k], c));
                }
            }
            let bias = if ci == 0 { Some(self.embed_bias) } else { None };
            if pairs.is_empty() && bias.is_none() {
                continue;
            }
            pre[ci] = Some(tape.embed(&pairs, bias, self.width, batch)?);
        }
        let mut h = jet::unary(tape, UnaryOp::Tanh, &Jet::from_comps(cfg, pre))?;

        for (wm, b) in &self.hidden {
            let mut nxt = vec![None; cfg.len()];
            for ci in 0..cfg.len() {
                if let Some(x) = h_comp(&h, ci) {
                    let bias = if ci == 0 { Some(*b) } else { None };
                    nxt[ci] = Some(tape.dense(*wm, x, bias, self.width, self.width)?);
                }
            }
            h = jet::unary(tape, UnaryOp::Tanh, &Jet::from_comps(cfg, nxt))?;
        }

        let mut out = vec![None; cfg.len()];
        for ci in 0..cfg.len() {
            if let Some(x) = h_comp(&h, ci) {
                let bias = if ci == 0 { Some(self.out_b) } else { None };
                out[ci] = Some(tape.dense(self.out_w, x, bias, 1, self.width)?);
            }
        }
        Ok(Jet::from_comps(cfg, out))
    }
}

fn h_comp(j: &Jet, ci: usize) -> Option<Var> {
    j.cfg.labels().get(ci).and_then(|l| j.comp(l))
}

// ---- output transforms ------------------------------------------------------

/// Closed-form map applied over the raw network output so boundary and
/// initial conditions hold identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputTransform {
    /// u = raw * x(1-x): homogeneous Dirichlet on [0,1].
    DirichletUnit,
    /// u = sin^2(pi x)/2 + raw * x(1-x) * t: Fisher-KPP initial and boundary
    /// conditions.
    FisherKpp,
    /// u = raw * x(1-x) * t + z: zero Dirichlet with initial condition z
    /// supplied by the auxiliary input (heat / Burgers initial-condition
    /// inference).
    TimeDirichletPlusIc,
}

impl OutputTransform {
    /// `x` and `t` must be jet-lifted coordinates so products differentiate.
    /// `aux` is the auxiliary jet z where the transform needs it.
    pub fn apply(
        &self,
        tape: &mut Tape,
        raw: &Jet,
        x: &Jet,
        t: Option<&Jet>,
        aux: Option<&Jet>,
    ) -> Result<Jet> {
        let one_minus_x = jet::affine(tape, -1.0, x, 1.0)?;
        let bump = jet::mul(tape, x, &one_minus_x)?;
        match self {
            OutputTransform::DirichletUnit => jet::mul(tape, raw, &bump),
            OutputTransform::FisherKpp => {
                let t = t.expect("Fisher-KPP transform needs t");
                let pix = jet::affine(tape, std::f64::consts::PI, x, 0.0)?;
                let s = jet::unary(tape, UnaryOp::Sin, &pix)?;
                let s2 = jet::mul(tape, &s, &s)?;
                let ic = jet::affine(tape, 0.5, &s2, 0.0)?;
                let rb = jet::mul(tape, raw, &bump)?;
                let rbt = jet::mul(tape, &rb, t)?;
                jet::add(tape, &ic, &rbt)
            }
            OutputTransform::TimeDirichletPlusIc => {
                let t = t.expect("transform needs t");
                let z = aux.expect("transform needs the auxiliary jet");
                let rb = jet::mul(tape, raw, &bump)?;
                let rbt = jet::mul(tape, &rb, t)?;
                jet::add(tape, &rbt, z)
            }
        }
    }
}

/// Transform for the unknown-function network f(x; V).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FnTransform {
    /// D(x) = raw * x(1-x) + 1: endpoints pinned to 1 (variable diffusion).
    UnitEndpoints,
    /// f(x) = softplus(raw) * x(1-x): zero endpoints, positive inside (heat
    /// initial condition).
    PositiveBump,
    /// f(x) = raw * x(1-x): zero endpoints, signed (Burgers initial
    /// condition).
    ZeroEndpoints,
}

impl FnTransform {
    pub fn apply(&self, tape: &mut Tape, raw: &Jet, x: &Jet) -> Result<Jet> {
        let one_minus_x = jet::affine(tape, -1.0, x, 1.0)?;
        let bump = jet::mul(tape, x, &one_minus_x)?;
        match self {
            FnTransform::UnitEndpoints => {
                let rb = jet::mul(tape, raw, &bump)?;
                jet::affine(tape, 1.0, &rb, 1.0)
            }
            FnTransform::PositiveBump => {
                let s = jet::unary(tape, UnaryOp::Softplus, raw)?;
                jet::mul(tape, &s, &bump)
            }
            FnTransform::ZeroEndpoints => jet::mul(tape, raw, &bump),
        }
    }

    /// Plain evaluation of the transformed function net.
    pub fn eval_plain(&self, net: &NetworkParams, x: f64) -> f64 {
        let raw = net.eval_plain(&[x], &[]);
        let bump = x * (1.0 - x);
        match self {
            FnTransform::UnitEndpoints => raw * bump + 1.0,
            FnTransform::PositiveBump => (raw.max(0.0) + (-raw.abs()).exp().ln_1p()) * bump,
            FnTransform::ZeroEndpoints => raw * bump,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{Dir, Label};

    fn full_cfg() -> Arc<SeedConfig> {
        SeedConfig::new(1, 1, &[Label::c2(0, 0).with_param(0)])
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = NetworkParams::init(42, 2, 2, 16, 2);
        let b = NetworkParams::init(42, 2, 2, 16, 2);
        assert_eq!(a.out_w, b.out_w);
        assert_eq!(a.embed_r, b.embed_r);
        let c = NetworkParams::init(43, 2, 2, 16, 2);
        assert_ne!(a.out_w, c.out_w);

        // d = 129 input units: every entry within [-1/sqrt(129), 1/sqrt(129)]
        let n = NetworkParams::init(7, 128, 1, 8, 1);
        let bound = 1.0 / (129.0f64).sqrt();
        for col in n.embed_cols.iter().chain(n.embed_r.iter()) {
            assert!(col.iter().all(|v| v.abs() <= bound));
        }
        assert!(n.embed_bias.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn r_is_not_a_leaf() {
        let net = NetworkParams::init(1, 1, 1, 8, 2);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let cfg = SeedConfig::value_only(1, 1);
        let xv = tape.input(&[0.3]);
        let pv = tape.leaf(&[1.5]);
        let x = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let p = Jet::lift(&mut tape, &cfg, pv, Dir::Param(0), 1.0).unwrap();
        let y = bound.forward_jet(&mut tape, &cfg, &[x], &[p]).unwrap();
        let g = tape.backward(y.value()).unwrap();
        assert!(g.get(bound.embed_r[0]).is_none());
        assert!(g.get(bound.embed_cols[0]).is_some());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut net = NetworkParams::init(3, 1, 1, 8, 2);
        for b in net.trainable_mut() {
            for v in b.iter_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let cfg = full_cfg();
        let xv = tape.input(&[0.3, 0.7]);
        let pv = tape.leaf(&[2.0]);
        let x = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let p = Jet::lift(&mut tape, &cfg, pv, Dir::Param(0), 1.0).unwrap();
        let y = bound.forward_jet(&mut tape, &cfg, &[x], &[p]).unwrap();
        for l in cfg.labels() {
            if let Some(c) = y.comp(l) {
                assert!(tape.values(c).iter().all(|v| *v == 0.0), "label {l:?}");
            }
        }
    }

    #[test]
    fn jet_value_matches_plain_forward() {
        let net = NetworkParams::init(11, 2, 1, 16, 2);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let cfg = SeedConfig::new(2, 1, &[Label::c2(0, 0).with_param(0), Label::c1(1).with_param(0)]);
        let xs = [0.21, 0.55];
        let ts = [0.4, 0.9];
        let theta = 1.7;
        let xv = tape.input(&xs);
        let tv = tape.input(&ts);
        let pv = tape.leaf(&[theta]);
        let x = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let t = Jet::lift(&mut tape, &cfg, tv, Dir::Coord(1), 1.0).unwrap();
        let p = Jet::lift(&mut tape, &cfg, pv, Dir::Param(0), 1.0).unwrap();
        let y = bound.forward_jet(&mut tape, &cfg, &[x, t], &[p]).unwrap();
        let got = tape.values(y.value()).to_vec();
        for i in 0..2 {
            let plain = net.eval_plain(&[xs[i], ts[i]], &[theta]);
            assert!((got[i] - plain).abs() < 1e-14, "{} vs {}", got[i], plain);
        }
    }

    #[test]
    fn theta_sensitivity_is_nonzero() {
        // R != 0 makes the output depend on Theta
        let net = NetworkParams::init(3, 1, 1, 32, 2);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let cfg = SeedConfig::new(1, 1, &[Label::p1(0)]);
        let xv = tape.input(&[0.37]);
        let pv = tape.leaf(&[1.0]);
        let x = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let p = Jet::lift(&mut tape, &cfg, pv, Dir::Param(0), 1.0).unwrap();
        let raw = bound.forward_jet(&mut tape, &cfg, &[x], &[p]).unwrap();
        let one = tape.constant(1.0);
        let xj = Jet::lift(&mut tape, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let _ = one;
        let u = OutputTransform::DirichletUnit.apply(&mut tape, &raw, &xj, None, None).unwrap();
        let dtheta = u.comp(&Label::p1(0)).unwrap();
        assert!(tape.value(dtheta).abs() > 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_r() {
        let net = NetworkParams::init(9, 1, 2, 8, 2);
        let blocks = net.to_blocks("u");
        let mut other = NetworkParams::init(99, 1, 2, 8, 2);
        assert_ne!(other.embed_r, net.embed_r);
        other.load_blocks("u", &blocks).unwrap();
        assert_eq!(other.embed_r, net.embed_r);
        assert_eq!(other.out_w, net.out_w);
        let r_block = blocks.iter().find(|b| b.name == "u.embed.r0").unwrap();
        assert!(!r_block.trainable);
    }
}
