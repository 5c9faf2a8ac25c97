//! Central finite-difference checking of jet components and weight gradients.
//!
//! The field under test is re-evaluated at perturbed coordinates, parameters,
//! and weights; every carried partial and every requested weight gradient is
//! compared against the corresponding central difference. Mixed third-order
//! partials use nested central differences (a parameter-direction difference
//! of a coordinate-direction second difference).

use crate::jet::{Dir, Label};

/// One evaluation of the field: its value, carried jet components, and the
/// gradients with respect to the checked weights.
pub struct FieldEval {
    pub value: f64,
    pub comps: Vec<(Label, f64)>,
    pub weight_grads: Vec<f64>,
}

/// A scalar field of (coords, params, weights) that can be re-evaluated at
/// arbitrary nearby points (each call builds a fresh tape internally).
pub struct FdField<'a> {
    pub coords: Vec<f64>,
    pub params: Vec<f64>,
    pub weights: Vec<f64>,
    /// Indices of weights whose reverse-mode gradient is checked.
    pub check_weights: Vec<usize>,
    #[allow(clippy::type_complexity)]
    pub eval: Box<dyn FnMut(&[f64], &[f64], &[f64]) -> FieldEval + 'a>,
}

fn shift(base: &[f64], i: usize, d: f64) -> Vec<f64> {
    let mut v = base.to_vec();
    v[i] += d;
    v
}

impl<'a> FdField<'a> {
    fn value_at(&mut self, dirs: &[(Dir, f64)], wshift: Option<(usize, f64)>) -> f64 {
        let mut c = self.coords.clone();
        let mut p = self.params.clone();
        for (d, h) in dirs {
            match d {
                Dir::Coord(i) => c[*i as usize] += h,
                Dir::Param(k) => p[*k as usize] += h,
            }
        }
        let w = match wshift {
            Some((j, h)) => shift(&self.weights, j, h),
            None => self.weights.clone(),
        };
        (self.eval)(&c, &p, &w).value
    }

    /// Central second difference in (a, b) with the extra offsets applied.
    fn fd2(&mut self, a: Dir, b: Dir, eps: f64, extra: &[(Dir, f64)]) -> f64 {
        if a == b {
            let vp = self.value_at(&[&[(a, eps)], extra].concat(), None);
            let v0 = self.value_at(extra, None);
            let vm = self.value_at(&[&[(a, -eps)], extra].concat(), None);
            (vp - 2.0 * v0 + vm) / (eps * eps)
        } else {
            let pp = self.value_at(&[&[(a, eps), (b, eps)], extra].concat(), None);
            let pm = self.value_at(&[&[(a, eps), (b, -eps)], extra].concat(), None);
            let mp = self.value_at(&[&[(a, -eps), (b, eps)], extra].concat(), None);
            let mm = self.value_at(&[&[(a, -eps), (b, -eps)], extra].concat(), None);
            (pp - pm - mp + mm) / (4.0 * eps * eps)
        }
    }

    fn fd_of_label(&mut self, l: &Label, eps: f64) -> f64 {
        let dirs: Vec<Dir> = l.dirs().to_vec();
        match dirs.len() {
            1 => {
                let d = dirs[0];
                let vp = self.value_at(&[(d, eps)], None);
                let vm = self.value_at(&[(d, -eps)], None);
                (vp - vm) / (2.0 * eps)
            }
            2 => self.fd2(dirs[0], dirs[1], eps, &[]),
            3 => {
                // one parameter direction + two coordinate directions:
                // difference the coordinate second difference in the parameter
                let eps3 = eps.max(1e-3);
                let p = *dirs
                    .iter()
                    .find(|d| matches!(d, Dir::Param(_)))
                    .expect("third-order labels carry a parameter direction");
                let cs: Vec<Dir> = dirs.iter().copied().filter(|d| *d != p).collect();
                let (a, b) = if cs.len() == 2 { (cs[0], cs[1]) } else { (cs[0], cs[0]) };
                let fp = self.fd2(a, b, eps3, &[(p, eps3)]);
                let fm = self.fd2(a, b, eps3, &[(p, -eps3)]);
                (fp - fm) / (2.0 * eps3)
            }
            n => panic!("unsupported label order {n}"),
        }
    }
}

/// Worst scale-relative error across all carried partials and checked weight
/// gradients. `eps` should lie in [1e-6, 1e-3]; third-order checks use at
/// least 1e-3 internally regardless.
pub fn finite_diff_check(field: &mut FdField, eps: f64) -> f64 {
    assert!((1e-6..=1e-3).contains(&eps), "eps {eps} outside [1e-6, 1e-3]");
    let base = {
        let c = field.coords.clone();
        let p = field.params.clone();
        let w = field.weights.clone();
        (field.eval)(&c, &p, &w)
    };
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (l, ad) in &base.comps {
        if l.order() == 0 {
            continue;
        }
        let fd = field.fd_of_label(l, eps);
        pairs.push((*ad, fd));
    }
    let weights = field.check_weights.clone();
    for (slot, &j) in weights.iter().enumerate() {
        let vp = field.value_at(&[], Some((j, eps)));
        let vm = field.value_at(&[], Some((j, -eps)));
        let fd = (vp - vm) / (2.0 * eps);
        pairs.push((base.weight_grads[slot], fd));
    }
    // Scale floor: magnitudes below the overall field scale are compared
    // against that scale instead, so FD rounding noise on structurally tiny
    // components does not register as a large relative error.
    let scale = pairs
        .iter()
        .map(|(_, fd)| fd.abs())
        .fold(base.value.abs().max(1e-3), f64::max);
    let mut worst = 0.0f64;
    for (ad, fd) in pairs {
        let denom = ad.abs().max(fd.abs()).max(1e-3 * scale);
        worst = worst.max((ad - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{self, Jet, SeedConfig};
    use crate::tape::{Tape, UnaryOp};

    #[test]
    fn polynomial_field_passes() {
        // f(x, theta; w) = w * theta * x^2 + sin(x)
        let cfg = SeedConfig::new(1, 1, &[Label::c2(0, 0).with_param(0)]);
        let mut field = FdField {
            coords: vec![0.7],
            params: vec![1.3],
            weights: vec![0.9],
            check_weights: vec![0],
            eval: Box::new(move |c, p, w| {
                let mut t = Tape::new();
                let wv = t.leaf(&[w[0]]);
                let xv = t.input(&[c[0]]);
                let pv = t.input(&[p[0]]);
                let x = Jet::lift(&mut t, &cfg, xv, Dir::Coord(0), 1.0).unwrap();
                let th = Jet::lift(&mut t, &cfg, pv, Dir::Param(0), 1.0).unwrap();
                let x2 = jet::unary(&mut t, UnaryOp::Square, &x).unwrap();
                let tx2 = jet::mul(&mut t, &th, &x2).unwrap();
                let wj = Jet::constant(&cfg, wv);
                let a = jet::mul(&mut t, &wj, &tx2).unwrap();
                let s = jet::unary(&mut t, UnaryOp::Sin, &x).unwrap();
                let f = jet::add(&mut t, &a, &s).unwrap();
                let comps = cfg
                    .labels()
                    .iter()
                    .map(|l| (l.clone(), f.comp(l).map(|v| t.value(v)).unwrap_or(0.0)))
                    .collect();
                let g = t.backward(f.value()).unwrap();
                FieldEval {
                    value: t.value(f.value()),
                    comps,
                    weight_grads: vec![g.scalar(wv)],
                }
            }),
        };
        let worst = finite_diff_check(&mut field, 1e-4);
        assert!(worst < 1e-6, "worst {worst}");
    }
}
