//! The benchmark inverse problems.
//!
//! Each problem fixes its PDE residual, domain and collocation grids, output
//! transforms, ground truth and initial guess, plus the synthetic-data
//! generators (Gaussian observation noise, Poisson point-process sampling for
//! the singular-forcing problem).

use std::sync::Arc;

use thiserror::Error;

use crate::fdm::{self, FieldOnGrid};
use crate::jet::{self, Dir, Jet, JetError, Label, SeedConfig};
use crate::net::{FnTransform, OutputTransform};
use crate::rng::Rng;
use crate::tape::{Tape, TapeError, UnaryOp, Var};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Fdm(#[from] fdm::FdmError),
    #[error("negative intensity {value} at grid node {node}")]
    NegativeIntensity { node: usize, value: f64 },
    #[error("problem `{0:?}` does not define {1}")]
    Unsupported(ProblemTag, &'static str),
}

pub type Result<T> = core::result::Result<T, ProblemError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProblemTag {
    /// -Theta u_xx = sin(pi x), infer the scalar Theta.
    ModelPoisson,
    /// u_t = 0.01 D u_xx + rho u (1 - u), infer (D, rho).
    FisherKpp,
    /// -(D(x) u')' = pi^2 sin(pi x), infer the function D(x).
    PoissonVarDiff,
    /// u_t = 0.01 u_xx, infer the initial condition f(x).
    HeatIc,
    /// u_t + 0.2 u u_x = 0, infer the initial condition f(x).
    BurgersIc,
    /// u'' - mu u = -lambda delta(x - z), infer (lambda, mu) from particles.
    SingularElliptic,
}

/// What is being inferred.
#[derive(Debug, Clone)]
pub enum UnknownKind {
    Scalars {
        names: Vec<&'static str>,
        ground_truth: Vec<f64>,
        initial_guess: Vec<f64>,
    },
    Function {
        transform: FnTransform,
        /// Function-net width (paper: 64).
        width: usize,
    },
}

/// Collocation points; `ts` present for time-dependent problems.
#[derive(Debug, Clone, Default)]
pub struct Points {
    pub xs: Vec<f64>,
    pub ts: Option<Vec<f64>>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollocationSets {
    pub res: Points,
    pub dat: Points,
    /// Regularization points for function inference.
    pub reg: Vec<f64>,
    /// Quadrature grid for the point-process likelihood (includes the gene
    /// site, which the residual grid excludes).
    pub quad: Vec<f64>,
}

/// Observed data: points, values, and how they were generated.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub points: Points,
    pub values: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

/// M snapshots of particle positions in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSnapshots {
    pub snapshots: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ParticleSnapshots {
    pub fn total_count(&self) -> usize {
        self.snapshots.iter().map(|s| s.len()).sum()
    }

    pub fn all_positions(&self) -> Vec<f64> {
        self.snapshots.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub tag: ProblemTag,
    pub time_dependent: bool,
    /// Coordinate inputs of the operator network (x; x,t; or x,phi).
    pub n_coords: usize,
    /// Parameter inputs of the operator network in bilevel mode.
    pub n_params: usize,
    pub transform: OutputTransform,
    pub unknown: UnknownKind,
    /// Embedding rescale per parameter (0.01 for the birth rate lambda).
    pub param_scale: Vec<f64>,
    /// Gene site for the singular problem.
    pub gene_site: f64,
    /// Snapshot count M for the point process.
    pub snapshots: usize,
    /// Reference solver resolution (stationary: nodes-1; time-dependent: per axis).
    pub ref_resolution: usize,
}

impl ProblemSpec {
    pub fn new(tag: ProblemTag) -> Self {
        use ProblemTag::*;
        match tag {
            ModelPoisson => ProblemSpec {
                tag,
                time_dependent: false,
                n_coords: 1,
                n_params: 1,
                transform: OutputTransform::DirichletUnit,
                unknown: UnknownKind::Scalars {
                    names: vec!["theta"],
                    ground_truth: vec![2.0],
                    initial_guess: vec![1.0],
                },
                param_scale: vec![1.0],
                gene_site: 0.0,
                snapshots: 0,
                ref_resolution: 400,
            },
            FisherKpp => ProblemSpec {
                tag,
                time_dependent: true,
                n_coords: 2,
                n_params: 2,
                transform: OutputTransform::FisherKpp,
                unknown: UnknownKind::Scalars {
                    names: vec!["D", "rho"],
                    ground_truth: vec![2.0, 2.0],
                    initial_guess: vec![1.0, 1.0],
                },
                param_scale: vec![1.0, 1.0],
                gene_site: 0.0,
                snapshots: 0,
                ref_resolution: 400,
            },
            PoissonVarDiff => ProblemSpec {
                tag,
                time_dependent: false,
                n_coords: 1,
                n_params: 1,
                transform: OutputTransform::DirichletUnit,
                unknown: UnknownKind::Function { transform: FnTransform::UnitEndpoints, width: 64 },
                param_scale: vec![1.0],
                gene_site: 0.0,
                snapshots: 0,
                ref_resolution: 400,
            },
            HeatIc => ProblemSpec {
                tag,
                time_dependent: true,
                n_coords: 2,
                n_params: 1,
                transform: OutputTransform::TimeDirichletPlusIc,
                unknown: UnknownKind::Function { transform: FnTransform::PositiveBump, width: 64 },
                param_scale: vec![1.0],
                gene_site: 0.0,
                snapshots: 0,
                ref_resolution: 400,
            },
            BurgersIc => ProblemSpec {
                tag,
                time_dependent: true,
                n_coords: 2,
                n_params: 1,
                transform: OutputTransform::TimeDirichletPlusIc,
                unknown: UnknownKind::Function { transform: FnTransform::ZeroEndpoints, width: 64 },
                param_scale: vec![1.0],
                gene_site: 0.0,
                snapshots: 0,
                ref_resolution: 400,
            },
            SingularElliptic => ProblemSpec {
                tag,
                time_dependent: false,
                n_coords: 2, // (x, phi)
                n_params: 2,
                transform: OutputTransform::DirichletUnit,
                unknown: UnknownKind::Scalars {
                    names: vec!["lambda", "mu"],
                    ground_truth: vec![250.0, 5.0],
                    initial_guess: vec![500.0, 2.5],
                },
                param_scale: vec![0.01, 1.0],
                gene_site: 0.5,
                snapshots: 100,
                ref_resolution: 400,
            },
        }
    }

    pub fn is_function_problem(&self) -> bool {
        matches!(self.unknown, UnknownKind::Function { .. })
    }

    pub fn scalar_names(&self) -> &[&'static str] {
        match &self.unknown {
            UnknownKind::Scalars { names, .. } => names,
            UnknownKind::Function { .. } => &[],
        }
    }

    pub fn ground_truth_scalars(&self) -> Option<&[f64]> {
        match &self.unknown {
            UnknownKind::Scalars { ground_truth, .. } => Some(ground_truth),
            _ => None,
        }
    }

    pub fn initial_guess_scalars(&self) -> Option<&[f64]> {
        match &self.unknown {
            UnknownKind::Scalars { initial_guess, .. } => Some(initial_guess),
            _ => None,
        }
    }

    /// Ground-truth unknown function (hat profiles, sin(2 pi x) for Burgers).
    pub fn ground_truth_fn(&self, x: f64) -> f64 {
        match self.tag {
            ProblemTag::PoissonVarDiff => {
                if x < 0.5 {
                    1.0 + 0.5 * x
                } else {
                    1.5 - 0.5 * x
                }
            }
            ProblemTag::HeatIc => {
                if x < 0.5 {
                    2.0 * x
                } else {
                    2.0 - 2.0 * x
                }
            }
            ProblemTag::BurgersIc => (2.0 * core::f64::consts::PI * x).sin(),
            _ => 0.0,
        }
    }

    /// Initial guess for the unknown function.
    pub fn initial_guess_fn(&self, x: f64) -> f64 {
        match self.tag {
            ProblemTag::PoissonVarDiff => 1.0,
            ProblemTag::HeatIc => (core::f64::consts::PI * x).sin(),
            ProblemTag::BurgersIc => 1.0 - (2.0 * core::f64::consts::PI * x).cos(),
            _ => 0.0,
        }
    }

    // ---- seed configurations ----------------------------------------------

    /// Carried partials for the residual pass with parameter directions
    /// (bilevel mode). `with_params = false` drops them (soft-constraint
    /// mode, where parameter gradients flow through the reverse sweep).
    pub fn residual_seed_config(&self, with_params: bool) -> Arc<SeedConfig> {
        use ProblemTag::*;
        let n_params = if with_params { self.n_params } else { 0 };
        let mut tops: Vec<Label> = Vec::new();
        let coord_tops: Vec<Label> = match self.tag {
            ModelPoisson | PoissonVarDiff => vec![Label::c2(0, 0)],
            FisherKpp | HeatIc => vec![Label::c2(0, 0), Label::c1(1)],
            BurgersIc => vec![Label::c1(0), Label::c1(1)],
            SingularElliptic => vec![Label::c2(0, 0), Label::c2(0, 1), Label::c2(1, 1)],
        };
        if with_params {
            for t in &coord_tops {
                for k in 0..self.n_params {
                    tops.push(t.with_param(k as u8));
                }
            }
        } else {
            tops.extend(coord_tops);
        }
        SeedConfig::new(self.n_coords, n_params, &tops)
    }

    /// Reduced configuration for residual jets: value plus first-order
    /// parameter partials.
    pub fn residual_sub_config(&self, with_params: bool) -> Arc<SeedConfig> {
        if with_params {
            let tops: Vec<Label> = (0..self.n_params).map(|k| Label::p1(k as u8)).collect();
            SeedConfig::new(0, self.n_params, &tops)
        } else {
            SeedConfig::value_only(0, 0)
        }
    }

    /// Value-only configuration for data-loss passes.
    pub fn value_seed_config(&self, with_params: bool) -> Arc<SeedConfig> {
        SeedConfig::value_only(self.n_coords, if with_params { self.n_params } else { 0 })
    }

    // ---- collocation --------------------------------------------------------

    /// Fine-tuning collocation sets, grid sizes as fixed per problem.
    pub fn build_collocation(&self) -> CollocationSets {
        use ProblemTag::*;
        let uniform = |n: usize| -> Vec<f64> { (0..n).map(|i| i as f64 / (n - 1) as f64).collect() };
        match self.tag {
            ModelPoisson => CollocationSets {
                res: Points { xs: uniform(51), ts: None },
                dat: Points { xs: uniform(11), ts: None },
                reg: Vec::new(),
                quad: Vec::new(),
            },
            FisherKpp | HeatIc | BurgersIc => {
                let nx = 51;
                let grid = uniform(nx);
                let mut xs = Vec::with_capacity(nx * nx);
                let mut ts = Vec::with_capacity(nx * nx);
                for t in &grid {
                    for x in &grid {
                        xs.push(*x);
                        ts.push(*t);
                    }
                }
                let nd = if self.tag == BurgersIc { 51 } else { 11 };
                let dat_x = uniform(nd);
                let dat_t = vec![1.0; nd];
                CollocationSets {
                    res: Points { xs, ts: Some(ts) },
                    dat: Points { xs: dat_x, ts: Some(dat_t) },
                    reg: if self.tag == FisherKpp { Vec::new() } else { uniform(101) },
                    quad: Vec::new(),
                }
            }
            PoissonVarDiff => CollocationSets {
                res: Points { xs: uniform(101), ts: None },
                dat: Points { xs: uniform(51), ts: None },
                reg: uniform(101),
                quad: Vec::new(),
            },
            SingularElliptic => {
                let all = uniform(101);
                let res: Vec<f64> = all
                    .iter()
                    .copied()
                    .filter(|x| (x - self.gene_site).abs() > 1e-12)
                    .collect();
                CollocationSets {
                    res: Points { xs: res, ts: None },
                    dat: Points::default(),
                    reg: Vec::new(),
                    quad: all,
                }
            }
        }
    }

    // ---- reference solutions and data --------------------------------------

    /// High-accuracy reference solution for scalar unknowns `theta` or a
    /// nodal unknown function `f` on the reference grid.
    pub fn reference_solution(&self, theta: &[f64], f_nodes: Option<&[f64]>) -> Result<FieldOnGrid> {
        use ProblemTag::*;
        let n = self.ref_resolution;
        match self.tag {
            ModelPoisson => {
                let th = theta[0];
                let grid = fdm::Grid1D::new(n)?;
                let pi = core::f64::consts::PI;
                let vals = (0..=n)
                    .map(|i| (pi * grid.node(i)).sin() / (th * pi * pi))
                    .collect();
                Ok(FieldOnGrid::stationary(grid, vals))
            }
            FisherKpp => Ok(fdm::solve_fisher_kpp(theta[0], theta[1], n, n)?),
            PoissonVarDiff => {
                let d: Vec<f64> = match f_nodes {
                    Some(d) => d.to_vec(),
                    None => {
                        let grid = fdm::Grid1D::new(n)?;
                        (0..=n).map(|i| self.ground_truth_fn(grid.node(i))).collect()
                    }
                };
                let pi = core::f64::consts::PI;
                Ok(fdm::solve_poisson_vardiff(&d, move |x| pi * pi * (pi * x).sin(), n)?)
            }
            HeatIc => {
                let f0: Vec<f64> = match f_nodes {
                    Some(f) => f.to_vec(),
                    None => {
                        let grid = fdm::Grid1D::new(n)?;
                        (0..=n).map(|i| self.ground_truth_fn(grid.node(i))).collect()
                    }
                };
                Ok(fdm::solve_heat(0.01, &f0, n, n)?)
            }
            BurgersIc => {
                let f0: Vec<f64> = match f_nodes {
                    Some(f) => f.to_vec(),
                    None => {
                        let grid = fdm::Grid1D::new(n)?;
                        (0..=n).map(|i| self.ground_truth_fn(grid.node(i))).collect()
                    }
                };
                Ok(fdm::solve_burgers_godunov(0.2, &f0, n, n)?)
            }
            SingularElliptic => {
                let (field, _) = fdm::solve_singular_elliptic(theta[0], theta[1], self.gene_site, n)?;
                Ok(field)
            }
        }
    }

    /// Clean solution values at the data collocation points.
    pub fn clean_data(&self, field: &FieldOnGrid, dat: &Points) -> Vec<f64> {
        match &dat.ts {
            Some(ts) => dat
                .xs
                .iter()
                .zip(ts)
                .map(|(x, t)| field.interp_xt(*x, *t))
                .collect(),
            None => dat.xs.iter().map(|x| field.interp(*x)).collect(),
        }
    }
}

// ---- residual evaluation -----------------------------------------------------

/// Inputs to the residual functional beyond the solution jet itself.
pub struct ResidualArgs<'a> {
    /// Transformed solution jet over the full residual seed configuration.
    pub u: &'a Jet,
    /// Raw x coordinate values (width = number of residual points).
    pub x_values: Var,
    /// Parameter jets over the reduced configuration (physical units), or the
    /// auxiliary-variable jet for function problems. Soft-constraint mode
    /// passes constants here.
    pub theta: &'a [Jet],
    /// d/dx of the unknown function along the residual points (variable
    /// diffusion only), as a reduced-configuration jet.
    pub fn_dx: Option<&'a Jet>,
    /// sgn(x - z) values (cusp problem only).
    pub sgn: Option<Var>,
}

/// Residual jet over the reduced configuration: value component is r, and
/// the parameter components are d r / d theta_k (or d r / d z).
pub fn evaluate_residual(
    tape: &mut Tape,
    spec: &ProblemSpec,
    sub: &Arc<SeedConfig>,
    args: &ResidualArgs,
) -> Result<Jet> {
    use ProblemTag::*;
    let dj = |l: Label, t: &mut Tape| -> Result<Jet> {
        let _ = t;
        Ok(args.u.derivative_jet(&l, sub)?)
    };
    match spec.tag {
        ModelPoisson => {
            // r = -theta u_xx - sin(pi x)
            let uxx = dj(Label::c2(0, 0), tape)?;
            let th = &args.theta[0];
            let tu = jet::mul(tape, th, &uxx)?;
            let pix = tape.affine(core::f64::consts::PI, args.x_values, 0.0)?;
            let s = tape.unary(UnaryOp::Sin, pix)?;
            let sj = Jet::constant(sub, s);
            let neg = jet::neg(tape, &tu)?;
            Ok(jet::sub(tape, &neg, &sj)?)
        }
        FisherKpp => {
            // r = u_t - 0.01 D u_xx - rho u (1 - u)
            let ut = dj(Label::c1(1), tape)?;
            let uxx = dj(Label::c2(0, 0), tape)?;
            let u = dj(Label::value(), tape)?;
            let d = &args.theta[0];
            let rho = &args.theta[1];
            let duxx = jet::mul(tape, d, &uxx)?;
            let duxx = jet::affine(tape, 0.01, &duxx, 0.0)?;
            let omu = jet::affine(tape, -1.0, &u, 1.0)?;
            let uu = jet::mul(tape, &u, &omu)?;
            let ruu = jet::mul(tape, rho, &uu)?;
            let r = jet::sub(tape, &ut, &duxx)?;
            Ok(jet::sub(tape, &r, &ruu)?)
        }
        PoissonVarDiff => {
            // r = -(z u_xx + f'(x) u_x) - pi^2 sin(pi x)
            let uxx = dj(Label::c2(0, 0), tape)?;
            let ux = dj(Label::c1(0), tape)?;
            let z = &args.theta[0];
            let fdx = args.fn_dx.ok_or(ProblemError::Unsupported(spec.tag, "fn_dx"))?;
            let zuxx = jet::mul(tape, z, &uxx)?;
            let fux = jet::mul(tape, fdx, &ux)?;
            let sum = jet::add(tape, &zuxx, &fux)?;
            let pi = core::f64::consts::PI;
            let pix = tape.affine(pi, args.x_values, 0.0)?;
            let s = tape.unary(UnaryOp::Sin, pix)?;
            let src = tape.affine(pi * pi, s, 0.0)?;
            let srcj = Jet::constant(sub, src);
            let neg = jet::neg(tape, &sum)?;
            Ok(jet::sub(tape, &neg, &srcj)?)
        }
        HeatIc => {
            // r = u_t - 0.01 u_xx
            let ut = dj(Label::c1(1), tape)?;
            let uxx = dj(Label::c2(0, 0), tape)?;
            let d_uxx = jet::affine(tape, 0.01, &uxx, 0.0)?;
            Ok(jet::sub(tape, &ut, &d_uxx)?)
        }
        BurgersIc => {
            // r = u_t + 0.2 u u_x
            let ut = dj(Label::c1(1), tape)?;
            let ux = dj(Label::c1(0), tape)?;
            let u = dj(Label::value(), tape)?;
            let uux = jet::mul(tape, &u, &ux)?;
            let a_uux = jet::affine(tape, 0.2, &uux, 0.0)?;
            Ok(jet::add(tape, &ut, &a_uux)?)
        }
        SingularElliptic => {
            // u(x) = U(x, |x - z|):
            // u_xx = U_xx + 2 sgn U_xphi + U_phiphi, r = u_xx - mu u
            let uxx = dj(Label::c2(0, 0), tape)?;
            let uxp = dj(Label::c2(0, 1), tape)?;
            let upp = dj(Label::c2(1, 1), tape)?;
            let u = dj(Label::value(), tape)?;
            let sgn = args.sgn.ok_or(ProblemError::Unsupported(spec.tag, "sgn"))?;
            let sgnj = Jet::constant(sub, sgn);
            let cross = jet::mul(tape, &sgnj, &uxp)?;
            let cross2 = jet::affine(tape, 2.0, &cross, 0.0)?;
            let lap = jet::add(tape, &uxx, &cross2)?;
            let lap = jet::add(tape, &lap, &upp)?;
            let mu = &args.theta[1];
            let mu_u = jet::mul(tape, mu, &u)?;
            Ok(jet::sub(tape, &lap, &mu_u)?)
        }
    }
}

// ---- synthetic data ------------------------------------------------------------

/// Observations u_hat = clean + sigma * eps with seeded Gaussian noise.
pub fn generate_observations(
    points: &Points,
    clean: &[f64],
    sigma: f64,
    seed: u64,
) -> ObservationSet {
    assert_eq!(points.len(), clean.len());
    let mut rng = Rng::stream(seed, "obs-noise");
    let values = clean
        .iter()
        .map(|c| if sigma == 0.0 { *c } else { c + sigma * rng.normal() })
        .collect();
    ObservationSet { points: points.clone(), values, sigma, seed }
}

/// Sample M snapshots of an inhomogeneous Poisson point process whose
/// intensity is the piecewise-linear interpolant of `u` on the uniform grid.
/// Counts are Poisson(integral of u); positions are drawn by inverse-CDF
/// sampling of the normalized density.
pub fn sample_particles(u: &[f64], m: usize, seed: u64) -> Result<ParticleSnapshots> {
    let n = u.len() - 1;
    let h = 1.0 / n as f64;
    for (i, v) in u.iter().enumerate() {
        if *v < 0.0 {
            return Err(ProblemError::NegativeIntensity { node: i, value: *v });
        }
    }
    // cumulative mass via trapezoid on each cell
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + 0.5 * h * (u[i] + u[i + 1]);
    }
    let total = cum[n];
    let mut rng = Rng::stream(seed, "particles");
    let mut snapshots = Vec::with_capacity(m);
    for _ in 0..m {
        let count = if total > 0.0 { rng.poisson(total) } else { 0 };
        let mut pts = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let target = rng.uniform() * total;
            // segment search
            let mut i = match cum.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
                Ok(k) => k,
                Err(k) => k.saturating_sub(1),
            };
            if i >= n {
                i = n - 1;
            }
            let m0 = target - cum[i];
            let (a, b) = (u[i], u[i + 1]);
            let slope = (b - a) / h;
            // solve a t + slope t^2 / 2 = m0 for t in [0, h]
            let t = if slope.abs() < 1e-12 * a.abs().max(1.0) {
                if a > 0.0 {
                    m0 / a
                } else {
                    0.5 * h
                }
            } else {
                let disc = (a * a + 2.0 * slope * m0).max(0.0);
                (disc.sqrt() - a) / slope
            };
            pts.push((i as f64 * h + t.clamp(0.0, h)).clamp(0.0, 1.0));
        }
        snapshots.push(pts);
    }
    Ok(ParticleSnapshots { snapshots, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Dir;

    fn lift_theta(tape: &mut Tape, sub: &Arc<SeedConfig>, vals: &[f64]) -> Vec<Jet> {
        vals.iter()
            .enumerate()
            .map(|(k, v)| {
                let leaf = tape.leaf(&[*v]);
                Jet::lift(tape, sub, leaf, Dir::Param(k as u8), 1.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn collocation_sizes_match_protocol() {
        let fk = ProblemSpec::new(ProblemTag::FisherKpp).build_collocation();
        assert_eq!(fk.res.len(), 51 * 51);
        assert_eq!(fk.dat.len(), 11);
        assert!(fk.dat.ts.as_ref().unwrap().iter().all(|t| *t == 1.0));

        let vp = ProblemSpec::new(ProblemTag::PoissonVarDiff).build_collocation();
        assert_eq!(vp.res.len(), 101);
        assert_eq!(vp.reg.len(), 101);
        assert_eq!(vp.dat.len(), 51);

        let heat = ProblemSpec::new(ProblemTag::HeatIc).build_collocation();
        assert_eq!(heat.dat.len(), 11);
        assert_eq!(heat.reg.len(), 101);

        let se = ProblemSpec::new(ProblemTag::SingularElliptic).build_collocation();
        assert_eq!(se.quad.len(), 101);
        assert_eq!(se.res.len(), 100); // gene site excluded
    }

    #[test]
    fn fisher_residual_zero_for_zero_u() {
        let spec = ProblemSpec::new(ProblemTag::FisherKpp);
        let sub = spec.residual_sub_config(true);
        let full = spec.residual_seed_config(true);
        let mut tape = Tape::new();
        let zero = tape.input(&[0.0, 0.0, 0.0]);
        let mut comps = vec![None; full.len()];
        comps[0] = Some(zero);
        // all derivative components structurally zero
        let u = Jet::from_comps(&full, comps);
        let x = tape.input(&[0.1, 0.5, 0.9]);
        let theta = lift_theta(&mut tape, &sub, &[2.0, 2.0]);
        let r = evaluate_residual(
            &mut tape,
            &spec,
            &sub,
            &ResidualArgs { u: &u, x_values: x, theta: &theta, fn_dx: None, sgn: None },
        )
        .unwrap();
        assert!(tape.values(r.value()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn varpoiss_manufactured_solution() {
        // u = sin(pi x), D = 1, f = pi^2 sin(pi x): r = 0
        let spec = ProblemSpec::new(ProblemTag::PoissonVarDiff);
        let sub = spec.residual_sub_config(true);
        let full = spec.residual_seed_config(true);
        let mut tape = Tape::new();
        let xs = [0.13, 0.41, 0.77];
        let xv = tape.input(&xs);
        let x = Jet::lift(&mut tape, &full, xv, Dir::Coord(0), 1.0).unwrap();
        let pix = jet::affine(&mut tape, core::f64::consts::PI, &x, 0.0).unwrap();
        let u = jet::unary(&mut tape, UnaryOp::Sin, &pix).unwrap();
        let zleaf = tape.input(&[1.0]);
        let z = Jet::lift(&mut tape, &sub, zleaf, Dir::Param(0), 1.0).unwrap();
        let dzero = tape.constant(0.0);
        let fdx = Jet::constant(&sub, dzero);
        let r = evaluate_residual(
            &mut tape,
            &spec,
            &sub,
            &ResidualArgs { u: &u, x_values: xv, theta: &[z], fn_dx: Some(&fdx), sgn: None },
        )
        .unwrap();
        for v in tape.values(r.value()) {
            assert!(v.abs() < 1e-12, "residual {v}");
        }
        // dr/dz = -u_xx = pi^2 sin(pi x) at these points
        let drdz = r.comp(&Label::p1(0)).unwrap();
        for (v, x) in tape.values(drdz).iter().zip(xs.iter()) {
            let pi = core::f64::consts::PI;
            let expect = pi * pi * (pi * x).sin();
            assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
        }
    }

    #[test]
    fn model_poisson_exact_operator_residual() {
        // u(x, theta) = sin(pi x) / (theta pi^2): r = 0 and dr/dtheta = 0
        let spec = ProblemSpec::new(ProblemTag::ModelPoisson);
        let sub = spec.residual_sub_config(true);
        let full = spec.residual_seed_config(true);
        let mut tape = Tape::new();
        let xs = [0.2, 0.5, 0.8];
        let xv = tape.input(&xs);
        let x = Jet::lift(&mut tape, &full, xv, Dir::Coord(0), 1.0).unwrap();
        let thleaf = tape.leaf(&[1.7]);
        let th_full = Jet::lift(&mut tape, &full, thleaf, Dir::Param(0), 1.0).unwrap();
        let pi = core::f64::consts::PI;
        let pix = jet::affine(&mut tape, pi, &x, 0.0).unwrap();
        let s = jet::unary(&mut tape, UnaryOp::Sin, &pix).unwrap();
        let scaled_th = jet::affine(&mut tape, pi * pi, &th_full, 0.0).unwrap();
        let u = jet::div(&mut tape, &s, &scaled_th).unwrap();
        let th_sub = th_full.derivative_jet(&Label::value(), &sub).unwrap();
        let r = evaluate_residual(
            &mut tape,
            &spec,
            &sub,
            &ResidualArgs { u: &u, x_values: xv, theta: &[th_sub], fn_dx: None, sgn: None },
        )
        .unwrap();
        for v in tape.values(r.value()) {
            assert!(v.abs() < 1e-12, "r {v}");
        }
        let drdth = r.comp(&Label::p1(0)).unwrap();
        for v in tape.values(drdth) {
            assert!(v.abs() < 1e-12, "dr/dtheta {v}");
        }
    }

    #[test]
    fn burgers_constant_state_residual_zero() {
        let spec = ProblemSpec::new(ProblemTag::BurgersIc);
        let sub = spec.residual_sub_config(false);
        let full = spec.residual_seed_config(false);
        let mut tape = Tape::new();
        let c = tape.input(&[0.37, 0.37]);
        let mut comps = vec![None; full.len()];
        comps[0] = Some(c);
        let u = Jet::from_comps(&full, comps);
        let xv = tape.input(&[0.3, 0.6]);
        let r = evaluate_residual(
            &mut tape,
            &spec,
            &sub,
            &ResidualArgs { u: &u, x_values: xv, theta: &[], fn_dx: None, sgn: None },
        )
        .unwrap();
        assert!(tape.values(r.value()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn observations_are_deterministic_and_clean_at_sigma_zero() {
        let points = Points { xs: vec![0.1, 0.5, 0.9], ts: None };
        let clean = vec![1.0, 2.0, 3.0];
        let a = generate_observations(&points, &clean, 0.0, 7);
        assert_eq!(a.values, clean);
        let b = generate_observations(&points, &clean, 0.01, 7);
        let c = generate_observations(&points, &clean, 0.01, 7);
        assert_eq!(b, c);
        assert_ne!(b.values, clean);
    }

    #[test]
    fn observation_noise_std_matches_sigma() {
        let n = 10_000;
        let points = Points { xs: vec![0.5; n], ts: None };
        let clean = vec![0.0; n];
        let obs = generate_observations(&points, &clean, 0.01, 3);
        let mean: f64 = obs.values.iter().sum::<f64>() / n as f64;
        let var: f64 = obs.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((0.0097..=0.0103).contains(&std), "std {std}");
    }

    #[test]
    fn particles_empty_for_zero_intensity() {
        let u = vec![0.0; 101];
        let p = sample_particles(&u, 10, 1).unwrap();
        assert_eq!(p.total_count(), 0);
    }

    #[test]
    fn particles_mean_count_matches_intensity_mass() {
        // u = c on [0,1]: Poisson mean c per snapshot
        let c = 7.3;
        let u = vec![c; 101];
        let p = sample_particles(&u, 10_000, 11).unwrap();
        let mean = p.total_count() as f64 / 10_000.0;
        let tol = 3.0 * (c / 10_000.0f64).sqrt();
        assert!((mean - c).abs() < tol, "mean {mean}");
    }

    #[test]
    fn particles_negative_intensity_rejected() {
        let mut u = vec![1.0; 101];
        u[50] = -0.1;
        assert!(matches!(
            sample_particles(&u, 1, 1),
            Err(ProblemError::NegativeIntensity { node: 50, .. })
        ));
    }

    #[test]
    fn particle_positions_follow_intensity_cdf() {
        // Kolmogorov-Smirnov distance between empirical and target CDF
        let spec = ProblemSpec::new(ProblemTag::SingularElliptic);
        let gt = spec.ground_truth_scalars().unwrap().to_vec();
        let exact = fdm::singular_elliptic_exact(gt[0], gt[1], 0.5).unwrap();
        let n = 400;
        let u: Vec<f64> = (0..=n).map(|i| exact(i as f64 / n as f64)).collect();
        let p = sample_particles(&u, 500, 5).unwrap();
        let mut pos = p.all_positions();
        assert!(pos.len() > 5_000, "need a healthy sample, got {}", pos.len());
        pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // target CDF by trapezoid
        let h = 1.0 / n as f64;
        let mut cum = vec![0.0; n + 1];
        for i in 0..n {
            cum[i + 1] = cum[i] + 0.5 * h * (u[i] + u[i + 1]);
        }
        let total = cum[n];
        let cdf = |x: f64| {
            let i = ((x / h).floor() as usize).min(n - 1);
            let t = x - i as f64 * h;
            (cum[i] + u[i] * t + 0.5 * (u[i + 1] - u[i]) * t * t / h) / total
        };
        let m = pos.len() as f64;
        let mut ks = 0.0f64;
        for (i, x) in pos.iter().enumerate() {
            let e = (i + 1) as f64 / m;
            ks = ks.max((cdf(*x) - e).abs());
            ks = ks.max((cdf(*x) - i as f64 / m).abs());
        }
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn reference_solutions_exist_for_all_problems() {
        for tag in [
            ProblemTag::ModelPoisson,
            ProblemTag::FisherKpp,
            ProblemTag::PoissonVarDiff,
            ProblemTag::HeatIc,
            ProblemTag::BurgersIc,
            ProblemTag::SingularElliptic,
        ] {
            let spec = ProblemSpec::new(tag);
            let theta = spec.ground_truth_scalars().map(|s| s.to_vec()).unwrap_or_default();
            let field = spec.reference_solution(&theta, None).unwrap();
            assert!(field.values.iter().all(|v| v.is_finite()));
        }
    }
}
