//! Forward Taylor jets over the reverse tape.
//!
//! A [`Jet`] carries a value together with a configurable set of partial
//! derivatives with respect to PDE coordinates (x, t or x, phi) and PDE
//! parameters (Theta components or the auxiliary variable z). Every jet
//! component is itself a tape value, so a reverse sweep differentiates any
//! scalar built from jet components — including mixed third-order ones like
//! d_theta d_xx u — with respect to the network weights.
//!
//! The carried set is fixed per problem by a [`SeedConfig`], which closes the
//! requested labels under sub-derivatives and precomputes the product
//! (Leibniz) and composition (Faa di Bruno, order <= 3) rules once.

use std::sync::Arc;

use thiserror::Error;

use crate::tape::{Result as TapeResult, Tape, TapeError, UnaryOp, Var};

/// One differentiation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    Coord(u8),
    Param(u8),
}

/// A partial-derivative label: a sorted multiset of directions.
///
/// At most two coordinate directions (second order) and at most one parameter
/// direction (the mixed third-order partials needed by the residual-gradient
/// loss), so labels have length <= 3.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Label(Vec<Dir>);

impl Label {
    pub fn value() -> Self {
        Label(Vec::new())
    }

    pub fn c1(i: u8) -> Self {
        Label(vec![Dir::Coord(i)])
    }

    pub fn c2(i: u8, j: u8) -> Self {
        let mut v = vec![Dir::Coord(i), Dir::Coord(j)];
        v.sort();
        Label(v)
    }

    pub fn p1(k: u8) -> Self {
        Label(vec![Dir::Param(k)])
    }

    /// This label with a parameter direction added.
    pub fn with_param(&self, k: u8) -> Self {
        let mut v = self.0.clone();
        v.push(Dir::Param(k));
        v.sort();
        Label(v)
    }

    /// Union as multisets.
    pub fn join(&self, other: &Label) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        v.sort();
        Label(v)
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn dirs(&self) -> &[Dir] {
        &self.0
    }

    fn is_valid(&self) -> bool {
        let coords = self.0.iter().filter(|d| matches!(d, Dir::Coord(_))).count();
        let params = self.0.iter().filter(|d| matches!(d, Dir::Param(_))).count();
        coords <= 2 && params <= 1
    }
}

#[derive(Debug, Error)]
pub enum JetError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("jets have mismatched seed configurations")]
    ConfigMismatch,
    #[error("required partial {0:?} is not carried by this seed configuration")]
    MissingComponent(Label),
    #[error("direction index out of range for this seed configuration")]
    BadDirection,
}

pub type Result<T> = core::result::Result<T, JetError>;

/// One term of a product rule: `coeff * f[a] * g[b]`.
type MulTerm = (u16, u16, f64);
/// One term of a composition rule: `coeff * d^order(phi) * prod(g[factors])`.
type ChainTerm = (u8, Vec<u16>, f64);

/// Which partials are carried, plus precomputed propagation rules.
#[derive(Debug)]
pub struct SeedConfig {
    pub n_coords: usize,
    pub n_params: usize,
    labels: Vec<Label>,
    mul_rules: Vec<Vec<MulTerm>>,
    chain_rules: Vec<Vec<ChainTerm>>,
    max_order: u8,
}

impl PartialEq for SeedConfig {
    fn eq(&self, other: &Self) -> bool {
        self.n_coords == other.n_coords
            && self.n_params == other.n_params
            && self.labels == other.labels
    }
}

fn enumerate_splits(dirs: &[Dir]) -> Vec<(Label, Label, f64)> {
    let n = dirs.len();
    let mut acc: Vec<(Label, Label, f64)> = Vec::new();
    for mask in 0..(1u32 << n) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, d) in dirs.iter().enumerate() {
            if mask & (1 << i) != 0 {
                a.push(*d);
            } else {
                b.push(*d);
            }
        }
        a.sort();
        b.sort();
        let (la, lb) = (Label(a), Label(b));
        if let Some(e) = acc.iter_mut().find(|(x, y, _)| *x == la && *y == lb) {
            e.2 += 1.0;
        } else {
            acc.push((la, lb, 1.0));
        }
    }
    acc
}

/// Set partitions of `dirs` positions, deduplicated as multisets of blocks.
fn enumerate_partitions(dirs: &[Dir]) -> Vec<(Vec<Label>, f64)> {
    fn recurse(rest: &[usize], dirs: &[Dir], current: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        match rest.split_first() {
            None => out.push(current.clone()),
            Some((&first, tail)) => {
                for i in 0..current.len() {
                    current[i].push(first);
                    recurse(tail, dirs, current, out);
                    current[i].pop();
                }
                current.push(vec![first]);
                recurse(tail, dirs, current, out);
                current.pop();
            }
        }
    }
    let idx: Vec<usize> = (0..dirs.len()).collect();
    let mut raw = Vec::new();
    recurse(&idx, dirs, &mut Vec::new(), &mut raw);
    let mut acc: Vec<(Vec<Label>, f64)> = Vec::new();
    for part in raw {
        let mut blocks: Vec<Label> = part
            .iter()
            .map(|b| {
                let mut v: Vec<Dir> = b.iter().map(|&i| dirs[i]).collect();
                v.sort();
                Label(v)
            })
            .collect();
        blocks.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(e) = acc.iter_mut().find(|(x, _)| *x == blocks) {
            e.1 += 1.0;
        } else {
            acc.push((blocks, 1.0));
        }
    }
    acc
}

impl SeedConfig {
    /// Build a configuration carrying `requested` labels (closed under
    /// sub-derivatives; the value component is always present and first).
    pub fn new(n_coords: usize, n_params: usize, requested: &[Label]) -> Arc<Self> {
        let mut labels: Vec<Label> = vec![Label::value()];
        let push = |l: Label, labels: &mut Vec<Label>| {
            assert!(l.is_valid(), "label exceeds supported derivative order: {l:?}");
            for d in l.dirs() {
                match d {
                    Dir::Coord(i) => assert!((*i as usize) < n_coords, "coord index out of range"),
                    Dir::Param(k) => assert!((*k as usize) < n_params, "param index out of range"),
                }
            }
            if !labels.contains(&l) {
                labels.push(l);
            }
        };
        for l in requested {
            // close under sub-multisets so Leibniz splits always resolve
            for (a, b, _) in enumerate_splits(l.dirs()) {
                push(a, &mut labels);
                push(b, &mut labels);
            }
            push(l.clone(), &mut labels);
        }
        labels[1..].sort_by(|a, b| (a.order(), &a.0).cmp(&(b.order(), &b.0)));

        let index = |l: &Label| -> u16 {
            labels.iter().position(|x| x == l).expect("closed set") as u16
        };
        let mut mul_rules = Vec::with_capacity(labels.len());
        let mut chain_rules = Vec::with_capacity(labels.len());
        let mut max_order = 0u8;
        for l in &labels {
            let splits = enumerate_splits(l.dirs());
            mul_rules.push(
                splits
                    .iter()
                    .map(|(a, b, c)| (index(a), index(b), *c))
                    .collect(),
            );
            let parts = enumerate_partitions(l.dirs());
            let mut terms: Vec<ChainTerm> = Vec::new();
            for (blocks, coeff) in parts {
                if blocks.is_empty() {
                    continue; // value label
                }
                let order = blocks.len() as u8;
                max_order = max_order.max(order);
                terms.push((order, blocks.iter().map(&index).collect(), coeff));
            }
            chain_rules.push(terms);
        }
        Arc::new(SeedConfig {
            n_coords,
            n_params,
            labels,
            mul_rules,
            chain_rules,
            max_order,
        })
    }

    /// Value-only configuration (plain forward evaluation on the tape).
    pub fn value_only(n_coords: usize, n_params: usize) -> Arc<Self> {
        Self::new(n_coords, n_params, &[])
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, l: &Label) -> Option<usize> {
        self.labels.iter().position(|x| x == l)
    }
}

/// Truncated Taylor value: a tape value per carried partial.
#[derive(Debug, Clone)]
pub struct Jet {
    pub cfg: Arc<SeedConfig>,
    comps: Vec<Option<Var>>,
}

fn same_cfg(a: &Jet, b: &Jet) -> Result<()> {
    if Arc::ptr_eq(&a.cfg, &b.cfg) || a.cfg == b.cfg {
        Ok(())
    } else {
        Err(JetError::ConfigMismatch)
    }
}

impl Jet {
    /// Lift a value with no derivative components (a constant w.r.t. all
    /// seeded directions). `v` may still depend on tape leaves.
    pub fn constant(cfg: &Arc<SeedConfig>, v: Var) -> Jet {
        let mut comps = vec![None; cfg.len()];
        comps[0] = Some(v);
        Jet { cfg: cfg.clone(), comps }
    }

    /// Lift a coordinate or parameter: the first-order partial in its own
    /// direction is `seed` (1 for plain lifting; a fixed rescale otherwise).
    pub fn lift(tape: &mut Tape, cfg: &Arc<SeedConfig>, v: Var, dir: Dir, seed: f64) -> Result<Jet> {
        match dir {
            Dir::Coord(i) if (i as usize) >= cfg.n_coords => return Err(JetError::BadDirection),
            Dir::Param(k) if (k as usize) >= cfg.n_params => return Err(JetError::BadDirection),
            _ => {}
        }
        let mut comps = vec![None; cfg.len()];
        comps[0] = Some(v);
        let l = Label(vec![dir]);
        if let Some(pos) = cfg.position(&l) {
            comps[pos] = Some(tape.constant(seed));
        }
        Ok(Jet { cfg: cfg.clone(), comps })
    }

    pub fn value(&self) -> Var {
        self.comps[0].expect("jet value component always present")
    }

    pub fn comp(&self, l: &Label) -> Option<Var> {
        self.cfg.position(l).and_then(|i| self.comps[i])
    }

    /// Component that must be carried; missing means the seed configuration
    /// does not support the requested operation.
    pub fn comp_required(&self, l: &Label) -> Result<Var> {
        match self.cfg.position(l) {
            None => Err(JetError::MissingComponent(l.clone())),
            Some(i) => Ok(self.comps[i].ok_or(JetError::MissingComponent(l.clone()))?),
        }
    }

    /// Treat component `None` as an exact zero, materialized lazily.
    pub fn comp_or_zero(&self, tape: &mut Tape, l: &Label) -> Var {
        match self.comp(l) {
            Some(v) => v,
            None => tape.constant(0.0),
        }
    }

    pub(crate) fn from_comps(cfg: &Arc<SeedConfig>, comps: Vec<Option<Var>>) -> Jet {
        assert!(comps[0].is_some());
        Jet { cfg: cfg.clone(), comps }
    }

    /// The jet of `d^extra self` over a reduced configuration: component `L`
    /// of the result is component `L + extra` of `self`. Used to assemble
    /// residual jets (value + parameter gradient) out of solution jets.
    pub fn derivative_jet(&self, extra: &Label, sub: &Arc<SeedConfig>) -> Result<Jet> {
        let mut comps = vec![None; sub.len()];
        for (i, l) in sub.labels().iter().enumerate() {
            let joined = l.join(extra);
            if !joined.is_valid() {
                return Err(JetError::MissingComponent(joined));
            }
            if i == 0 {
                comps[0] = Some(self.comp_required(&joined)?);
            } else {
                comps[i] = self.comp(&joined);
                if self.cfg.position(&joined).is_none() {
                    return Err(JetError::MissingComponent(joined));
                }
            }
        }
        Ok(Jet { cfg: sub.clone(), comps })
    }
}

// ---- jet arithmetic --------------------------------------------------------

pub fn add(tape: &mut Tape, f: &Jet, g: &Jet) -> Result<Jet> {
    same_cfg(f, g)?;
    let mut comps = vec![None; f.cfg.len()];
    for i in 0..comps.len() {
        comps[i] = match (f.comps[i], g.comps[i]) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
    }
    Ok(Jet::from_comps(&f.cfg, comps))
}

pub fn sub(tape: &mut Tape, f: &Jet, g: &Jet) -> Result<Jet> {
    same_cfg(f, g)?;
    let mut comps = vec![None; f.cfg.len()];
    for i in 0..comps.len() {
        comps[i] = match (f.comps[i], g.comps[i]) {
            (Some(a), Some(b)) => Some(tape.sub(a, b)?),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(tape.neg(b)?),
            (None, None) => None,
        };
    }
    Ok(Jet::from_comps(&f.cfg, comps))
}

pub fn neg(tape: &mut Tape, f: &Jet) -> Result<Jet> {
    let mut comps = vec![None; f.cfg.len()];
    for i in 0..comps.len() {
        comps[i] = match f.comps[i] {
            Some(a) => Some(tape.neg(a)?),
            None => None,
        };
    }
    Ok(Jet::from_comps(&f.cfg, comps))
}

/// k * f + c with constants (derivative components scale, value shifts).
pub fn affine(tape: &mut Tape, k: f64, f: &Jet, c: f64) -> Result<Jet> {
    let mut comps = vec![None; f.cfg.len()];
    comps[0] = Some(tape.affine(k, f.value(), c)?);
    for i in 1..comps.len() {
        comps[i] = match f.comps[i] {
            Some(a) => Some(tape.affine(k, a, 0.0)?),
            None => None,
        };
    }
    Ok(Jet::from_comps(&f.cfg, comps))
}

/// Product rule over every carried component.
pub fn mul(tape: &mut Tape, f: &Jet, g: &Jet) -> Result<Jet> {
    same_cfg(f, g)?;
    let cfg = f.cfg.clone();
    let mut comps = vec![None; cfg.len()];
    for (i, rule) in cfg.mul_rules.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for &(a, b, coeff) in rule {
            if let (Some(fa), Some(gb)) = (f.comps[a as usize], g.comps[b as usize]) {
                acc = Some(tape.fma(coeff, fa, gb, acc)?);
            }
        }
        comps[i] = acc;
    }
    assert!(comps[0].is_some());
    Ok(Jet::from_comps(&cfg, comps))
}

pub fn div(tape: &mut Tape, f: &Jet, g: &Jet) -> Result<Jet> {
    let r = unary(tape, UnaryOp::Recip, g)?;
    mul(tape, f, &r)
}

fn emit_derivs(tape: &mut Tape, k: UnaryOp, x: Var, y: Var, upto: u8) -> TapeResult<[Option<Var>; 3]> {
    use UnaryOp::*;
    let mut d: [Option<Var>; 3] = [None, None, None];
    if upto == 0 {
        return Ok(d);
    }
    match k {
        Neg | Sgn | Abs | Square => unreachable!("handled without Faa di Bruno"),
        Tanh => {
            let y2 = tape.unary(Square, y)?;
            let d1 = tape.affine(-1.0, y2, 1.0)?;
            d[0] = Some(d1);
            if upto >= 2 {
                let d2 = tape.fma(-2.0, y, d1, None)?;
                d[1] = Some(d2);
                if upto >= 3 {
                    let t = tape.fma(-2.0, d1, d1, None)?;
                    d[2] = Some(tape.fma(-2.0, y, d2, Some(t))?);
                }
            }
        }
        Sigmoid => {
            let om = tape.affine(-1.0, y, 1.0)?;
            let d1 = tape.mul(y, om)?;
            d[0] = Some(d1);
            if upto >= 2 {
                let t = tape.affine(-2.0, y, 1.0)?;
                let d2 = tape.mul(d1, t)?;
                d[1] = Some(d2);
                if upto >= 3 {
                    let t3 = tape.affine(-6.0, d1, 1.0)?;
                    d[2] = Some(tape.mul(d1, t3)?);
                }
            }
        }
        Softplus => {
            let s = tape.unary(Sigmoid, x)?;
            d[0] = Some(s);
            if upto >= 2 {
                let om = tape.affine(-1.0, s, 1.0)?;
                let d2 = tape.mul(s, om)?;
                d[1] = Some(d2);
                if upto >= 3 {
                    let t = tape.affine(-2.0, s, 1.0)?;
                    d[2] = Some(tape.mul(d2, t)?);
                }
            }
        }
        Exp => {
            d = [Some(y), Some(y), Some(y)];
            if upto < 3 {
                d[2] = None;
            }
            if upto < 2 {
                d[1] = None;
            }
        }
        Ln => {
            let r = tape.unary(Recip, x)?;
            d[0] = Some(r);
            if upto >= 2 {
                let r2 = tape.unary(Square, r)?;
                d[1] = Some(tape.neg(r2)?);
                if upto >= 3 {
                    let r3 = tape.mul(r2, r)?;
                    d[2] = Some(tape.affine(2.0, r3, 0.0)?);
                }
            }
        }
        Sin => {
            let c = tape.unary(Cos, x)?;
            d[0] = Some(c);
            if upto >= 2 {
                d[1] = Some(tape.neg(y)?);
                if upto >= 3 {
                    d[2] = Some(tape.neg(c)?);
                }
            }
        }
        Cos => {
            let s = tape.unary(Sin, x)?;
            d[0] = Some(tape.neg(s)?);
            if upto >= 2 {
                d[1] = Some(tape.neg(y)?);
                if upto >= 3 {
                    d[2] = Some(s);
                }
            }
        }
        Sqrt => {
            let r = tape.unary(Recip, y)?;
            d[0] = Some(tape.affine(0.5, r, 0.0)?);
            if upto >= 2 {
                let r2 = tape.unary(Square, r)?;
                let r3 = tape.mul(r2, r)?;
                d[1] = Some(tape.affine(-0.25, r3, 0.0)?);
                if upto >= 3 {
                    let r5 = tape.mul(r3, r2)?;
                    d[2] = Some(tape.affine(0.375, r5, 0.0)?);
                }
            }
        }
        Recip => {
            let y2 = tape.unary(Square, y)?;
            d[0] = Some(tape.neg(y2)?);
            if upto >= 2 {
                let y3 = tape.mul(y2, y)?;
                d[1] = Some(tape.affine(2.0, y3, 0.0)?);
                if upto >= 3 {
                    let y4 = tape.unary(Square, y2)?;
                    d[2] = Some(tape.affine(-6.0, y4, 0.0)?);
                }
            }
        }
    }
    Ok(d)
}

/// Composition rule (Faa di Bruno up to order 3) over every carried component.
pub fn unary(tape: &mut Tape, k: UnaryOp, g: &Jet) -> Result<Jet> {
    let cfg = g.cfg.clone();
    let x = g.value();
    let mut comps = vec![None; cfg.len()];

    // Linear and piecewise cases propagate directly.
    match k {
        UnaryOp::Neg => return neg(tape, g),
        UnaryOp::Sgn => {
            comps[0] = Some(tape.unary(k, x)?);
            return Ok(Jet::from_comps(&cfg, comps));
        }
        UnaryOp::Abs => {
            // |g|' = sgn(g) g'; higher derivatives of sgn vanish away from 0.
            let y = tape.unary(UnaryOp::Abs, x)?;
            comps[0] = Some(y);
            let sgn = tape.unary(UnaryOp::Sgn, x)?;
            for (i, rule) in cfg.chain_rules.iter().enumerate() {
                if i == 0 {
                    continue;
                }
                let mut acc: Option<Var> = None;
                for (order, factors, coeff) in rule {
                    if *order != 1 {
                        continue;
                    }
                    if let Some(f0) = g.comps[factors[0] as usize] {
                        acc = Some(tape.fma(*coeff, sgn, f0, acc)?);
                    }
                }
                comps[i] = acc;
            }
            return Ok(Jet::from_comps(&cfg, comps));
        }
        UnaryOp::Square => {
            // Cheap special case of the product rule.
            return mul(tape, g, g);
        }
        _ => {}
    }

    let y = tape.unary(k, x)?;
    comps[0] = Some(y);
    // Highest derivative actually needed given which components are present.
    let mut upto = 0u8;
    for (i, rule) in cfg.chain_rules.iter().enumerate().skip(1) {
        for (order, factors, _) in rule {
            if factors.iter().all(|&f| g.comps[f as usize].is_some()) {
                upto = upto.max(*order);
            }
        }
        let _ = i;
    }
    upto = upto.min(cfg.max_order);
    let d = emit_derivs(tape, k, x, y, upto)?;

    for (i, rule) in cfg.chain_rules.iter().enumerate().skip(1) {
        let mut acc: Option<Var> = None;
        for (order, factors, coeff) in rule {
            let dk = match d[(*order - 1) as usize] {
                Some(v) => v,
                None => continue,
            };
            let mut prod: Option<Var> = None;
            let mut all_present = true;
            for &fidx in factors {
                match g.comps[fidx as usize] {
                    Some(c) => {
                        prod = Some(match prod {
                            None => c,
                            Some(p) => tape.mul(p, c)?,
                        });
                    }
                    None => {
                        all_present = false;
                        break;
                    }
                }
            }
            if !all_present {
                continue;
            }
            let prod = prod.expect("order >= 1 has at least one factor");
            acc = Some(tape.fma(*coeff, dk, prod, acc)?);
        }
        comps[i] = acc;
    }
    Ok(Jet::from_comps(&cfg, comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_x2() -> Arc<SeedConfig> {
        // value, dx, dxx
        SeedConfig::new(1, 0, &[Label::c2(0, 0)])
    }

    #[test]
    fn closure_and_ordering() {
        let cfg = SeedConfig::new(2, 2, &[Label::c2(0, 0).with_param(0), Label::c2(0, 0).with_param(1), Label::c1(1).with_param(0), Label::c1(1).with_param(1)]);
        // (), x, t, p0, p1, xx, xp0, xp1, tp0, tp1, xxp0, xxp1
        assert_eq!(cfg.len(), 12);
        assert_eq!(cfg.labels()[0], Label::value());
        assert!(cfg.position(&Label::c1(0)).is_some());
        assert!(cfg.position(&Label::c1(0).with_param(1)).is_some());
    }

    #[test]
    fn lift_sets_own_direction() {
        let mut t = Tape::new();
        let cfg = cfg_x2();
        let xv = t.input(&[0.5]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        assert_eq!(t.value(x.value()), 0.5);
        assert_eq!(t.value(x.comp(&Label::c1(0)).unwrap()), 1.0);
        assert!(x.comp(&Label::c2(0, 0)).is_none()); // structural zero
    }

    #[test]
    fn square_jet_example() {
        // jet (value 2, dx 1, dxx 0) squared -> (4, 4, 2)
        let mut t = Tape::new();
        let cfg = cfg_x2();
        let xv = t.input(&[2.0]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let y = unary(&mut t, UnaryOp::Square, &x).unwrap();
        assert_eq!(t.value(y.value()), 4.0);
        assert_eq!(t.value(y.comp(&Label::c1(0)).unwrap()), 4.0);
        assert_eq!(t.value(y.comp(&Label::c2(0, 0)).unwrap()), 2.0);
    }

    #[test]
    fn tanh_jet_at_zero() {
        let mut t = Tape::new();
        let cfg = cfg_x2();
        let xv = t.input(&[0.0]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let y = unary(&mut t, UnaryOp::Tanh, &x).unwrap();
        assert_eq!(t.value(y.value()), 0.0);
        assert_eq!(t.value(y.comp(&Label::c1(0)).unwrap()), 1.0);
        // tanh'' (0) = 0
        assert_eq!(t.value(y.comp(&Label::c2(0, 0)).unwrap()), 0.0);
    }

    #[test]
    fn theta_x_squared_mixed_partial() {
        // u(x, theta) = theta * x^2: d_theta d_xx u = 2
        let mut t = Tape::new();
        let cfg = SeedConfig::new(1, 1, &[Label::c2(0, 0).with_param(0)]);
        let xv = t.input(&[1.7]);
        let thv = t.leaf(&[3.1]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let th = Jet::lift(&mut t, &cfg, thv, Dir::Param(0), 1.0).unwrap();
        let x2 = unary(&mut t, UnaryOp::Square, &x).unwrap();
        let u = mul(&mut t, &th, &x2).unwrap();
        let mixed = u.comp(&Label::c2(0, 0).with_param(0)).unwrap();
        assert_eq!(t.value(mixed), 2.0);
        // also check dxx = 2 theta and dtheta = x^2
        assert_eq!(t.value(u.comp(&Label::c2(0, 0)).unwrap()), 2.0 * 3.1);
        assert_eq!(t.value(u.comp(&Label::p1(0)).unwrap()), 1.7 * 1.7);
    }

    #[test]
    fn sin_second_derivative_analytic() {
        // f = sin(pi x): f''(0.5) = -pi^2
        let mut t = Tape::new();
        let cfg = cfg_x2();
        let xv = t.input(&[0.5]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let px = affine(&mut t, core::f64::consts::PI, &x, 0.0).unwrap();
        let s = unary(&mut t, UnaryOp::Sin, &px).unwrap();
        let dxx = t.value(s.comp(&Label::c2(0, 0)).unwrap());
        let expect = -core::f64::consts::PI.powi(2);
        assert!((dxx - expect).abs() < 1e-8 * expect.abs());
    }

    #[test]
    fn mismatched_configs_error() {
        let mut t = Tape::new();
        let cfg1 = cfg_x2();
        let cfg2 = SeedConfig::new(1, 1, &[Label::p1(0)]);
        let v1 = t.input(&[1.0]);
        let v2 = t.input(&[2.0]);
        let a = Jet::constant(&cfg1, v1);
        let b = Jet::constant(&cfg2, v2);
        assert!(matches!(mul(&mut t, &a, &b), Err(JetError::ConfigMismatch)));
    }

    #[test]
    fn division_via_reciprocal() {
        // f/g at f = x^2, g = 1 + x: check dx of quotient at x=2: d/dx (x^2/(1+x)) = (2x(1+x)-x^2)/(1+x)^2
        let mut t = Tape::new();
        let cfg = cfg_x2();
        let xv = t.input(&[2.0]);
        let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
        let f = unary(&mut t, UnaryOp::Square, &x).unwrap();
        let g = affine(&mut t, 1.0, &x, 1.0).unwrap();
        let q = div(&mut t, &f, &g).unwrap();
        let got = t.value(q.comp(&Label::c1(0)).unwrap());
        let expect = (2.0 * 2.0 * 3.0 - 4.0) / 9.0;
        assert!((got - expect).abs() < 1e-14);
    }
}
