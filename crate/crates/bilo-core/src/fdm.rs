//! Classical finite-difference reference solvers.
//!
//! These synthesize observations, provide the u_FDM side of every
//! u_NN-vs-u_FDM metric, and serve as oracles in tests. Schemes are standard
//! second-order methods (conservative differencing for variable diffusion,
//! Crank-Nicolson in time, Godunov finite volumes for the hyperbolic case)
//! so convergence order itself is testable.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdmError {
    #[error("diffusion coefficient must be positive (node {node}: {value})")]
    NonPositiveDiffusion { node: usize, value: f64 },
    #[error("decay rate mu must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("grid too coarse: need at least {need} intervals, got {got}")]
    GridTooCoarse { need: usize, got: usize },
    #[error("singular tridiagonal system at row {0}")]
    SingularSystem(usize),
}

pub type Result<T> = core::result::Result<T, FdmError>;

/// Uniform grid on [0, 1] with `n` intervals and nodes x_i = i/n.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub n: usize,
}

impl Grid1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(FdmError::GridTooCoarse { need: 4, got: n });
        }
        Ok(Grid1D { n })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.node(i)).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.n + 1
    }
}

/// Values on a spatial grid, or on a space-time grid stored time-major
/// (`values[j * (nx+1) + i]` is u(x_i, t_j)).
#[derive(Debug, Clone)]
pub struct FieldOnGrid {
    pub grid: Grid1D,
    /// Number of time levels (1 for stationary fields).
    pub nt_levels: usize,
    pub values: Vec<f64>,
}

impl FieldOnGrid {
    pub fn stationary(grid: Grid1D, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.num_nodes());
        FieldOnGrid { grid, nt_levels: 1, values }
    }

    pub fn at(&self, i: usize) -> f64 {
        debug_assert_eq!(self.nt_levels, 1);
        self.values[i]
    }

    pub fn at_xt(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.num_nodes() + i]
    }

    /// Time level `j` as a slice.
    pub fn level(&self, j: usize) -> &[f64] {
        let n = self.grid.num_nodes();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn final_level(&self) -> &[f64] {
        self.level(self.nt_levels - 1)
    }

    /// Piecewise-linear interpolation of a stationary field.
    pub fn interp(&self, x: f64) -> f64 {
        debug_assert_eq!(self.nt_levels, 1);
        interp_slice(&self.values, self.grid.n, x)
    }

    /// Bilinear interpolation on the space-time grid; `t` in [0, 1].
    pub fn interp_xt(&self, x: f64, t: f64) -> f64 {
        let nt = self.nt_levels - 1;
        let tt = (t.clamp(0.0, 1.0)) * nt as f64;
        let j0 = (tt.floor() as usize).min(nt.saturating_sub(1));
        let frac = tt - j0 as f64;
        let a = interp_slice(self.level(j0), self.grid.n, x);
        let b = interp_slice(self.level((j0 + 1).min(nt)), self.grid.n, x);
        a + frac * (b - a)
    }
}

fn interp_slice(vals: &[f64], n: usize, x: f64) -> f64 {
    let xx = x.clamp(0.0, 1.0) * n as f64;
    let i0 = (xx.floor() as usize).min(n - 1);
    let frac = xx - i0 as f64;
    vals[i0] + frac * (vals[i0 + 1] - vals[i0])
}

/// Thomas algorithm for a tridiagonal system; `a` sub-, `b` main, `c` super-
/// diagonal (a[0] and c[n-1] unused). Overwrites nothing; returns x.
pub fn thomas_solve(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let n = d.len();
    assert!(n > 0 && a.len() == n && b.len() == n && c.len() == n);
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    if b[0] == 0.0 {
        return Err(FdmError::SingularSystem(0));
    }
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let den = b[i] - a[i] * cp[i - 1];
        if den == 0.0 {
            return Err(FdmError::SingularSystem(i));
        }
        if i < n - 1 {
            cp[i] = c[i] / den;
        }
        dp[i] = (d[i] - a[i] * dp[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

/// -(D(x) u')' = f with u(0) = u(1) = 0, conservative second-order scheme
/// with arithmetic-mean face values and a Thomas solve.
pub fn solve_poisson_vardiff(
    d_nodes: &[f64],
    f: impl Fn(f64) -> f64,
    n: usize,
) -> Result<FieldOnGrid> {
    let grid = Grid1D::new(n)?;
    assert_eq!(d_nodes.len(), grid.num_nodes(), "D must be given on all nodes");
    for (i, d) in d_nodes.iter().enumerate() {
        if *d <= 0.0 {
            return Err(FdmError::NonPositiveDiffusion { node: i, value: *d });
        }
    }
    let h = grid.h();
    let m = n - 1; // interior nodes
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for i in 1..n {
        let dw = 0.5 * (d_nodes[i - 1] + d_nodes[i]);
        let de = 0.5 * (d_nodes[i] + d_nodes[i + 1]);
        let k = i - 1;
        sub[k] = -dw;
        diag[k] = dw + de;
        sup[k] = -de;
        rhs[k] = h * h * f(grid.node(i));
    }
    let u_int = thomas_solve(&sub, &diag, &sup, &rhs)?;
    let mut u = vec![0.0; grid.num_nodes()];
    u[1..n].copy_from_slice(&u_int);
    Ok(FieldOnGrid::stationary(grid, u))
}

/// Crank-Nicolson step matrices for u_t = nu u_xx on interior nodes.
fn crank_nicolson_sweep(
    u: &mut [f64],
    nu: f64,
    h: f64,
    dt: f64,
    extra_rhs: Option<&[f64]>,
) -> Result<()> {
    let n = u.len() - 1;
    let m = n - 1;
    let r = 0.5 * nu * dt / (h * h);
    let sub = vec![-r; m];
    let diag = vec![1.0 + 2.0 * r; m];
    let sup = vec![-r; m];
    let mut rhs = vec![0.0; m];
    for i in 1..n {
        rhs[i - 1] = u[i] + r * (u[i - 1] - 2.0 * u[i] + u[i + 1]);
        if let Some(e) = extra_rhs {
            rhs[i - 1] += e[i - 1];
        }
    }
    let sol = thomas_solve(&sub, &diag, &sup, &rhs)?;
    u[1..n].copy_from_slice(&sol);
    u[0] = 0.0;
    u[n] = 0.0;
    Ok(())
}

/// u_t = 0.01 D u_xx + rho u (1 - u) on [0,1] x [0,1], u(x,0) = sin^2(pi x)/2,
/// homogeneous Dirichlet. Crank-Nicolson diffusion with an explicit-midpoint
/// reaction term (second order in time).
pub fn solve_fisher_kpp(d: f64, rho: f64, nx: usize, nt: usize) -> Result<FieldOnGrid> {
    if nx < 50 || nt < 50 {
        return Err(FdmError::GridTooCoarse { need: 50, got: nx.min(nt) });
    }
    let grid = Grid1D::new(nx)?;
    let h = grid.h();
    let dt = 1.0 / nt as f64;
    let nu = 0.01 * d;
    let nn = grid.num_nodes();
    let mut values = Vec::with_capacity((nt + 1) * nn);
    let mut u: Vec<f64> = (0..=nx)
        .map(|i| {
            let s = (core::f64::consts::PI * grid.node(i)).sin();
            0.5 * s * s
        })
        .collect();
    u[0] = 0.0;
    u[nx] = 0.0;
    values.extend_from_slice(&u);
    let react = |v: f64| rho * v * (1.0 - v);
    let lap = |u: &[f64], i: usize| (u[i - 1] - 2.0 * u[i] + u[i + 1]) / (h * h);
    for _ in 0..nt {
        // half-step predictor for the reaction at midpoint
        let mut mid = u.clone();
        for i in 1..nx {
            mid[i] = u[i] + 0.5 * dt * (nu * lap(&u, i) + react(u[i]));
        }
        let extra: Vec<f64> = (1..nx).map(|i| dt * react(mid[i])).collect();
        crank_nicolson_sweep(&mut u, nu, h, dt, Some(&extra))?;
        values.extend_from_slice(&u);
    }
    Ok(FieldOnGrid { grid, nt_levels: nt + 1, values })
}

/// u_t = D u_xx with u(x,0) given and homogeneous Dirichlet; Crank-Nicolson.
pub fn solve_heat(d: f64, f0: &[f64], nx: usize, nt: usize) -> Result<FieldOnGrid> {
    if nx < 50 || nt < 50 {
        return Err(FdmError::GridTooCoarse { need: 50, got: nx.min(nt) });
    }
    let grid = Grid1D::new(nx)?;
    assert_eq!(f0.len(), grid.num_nodes());
    let h = grid.h();
    let dt = 1.0 / nt as f64;
    let nn = grid.num_nodes();
    let mut values = Vec::with_capacity((nt + 1) * nn);
    let mut u = f0.to_vec();
    u[0] = 0.0;
    u[nx] = 0.0;
    values.extend_from_slice(&u);
    for _ in 0..nt {
        crank_nicolson_sweep(&mut u, d, h, dt, None)?;
        values.extend_from_slice(&u);
    }
    Ok(FieldOnGrid { grid, nt_levels: nt + 1, values })
}

/// Godunov flux for g(u) = a u^2 / 2 with a > 0 (convex, minimum at 0).
fn godunov_flux(a: f64, ul: f64, ur: f64) -> f64 {
    let g = |v: f64| 0.5 * a * v * v;
    g(ul.max(0.0)).max(g(ur.min(0.0)))
}

/// u_t + a u u_x = 0 (finite-volume Godunov on cell averages), Dirichlet 0
/// via ghost cells. The time step honors the CFL condition; if `nt` is too
/// coarse the step count is increased internally and the solution is sampled
/// back onto the requested `nt + 1` levels.
pub fn solve_burgers_godunov(a: f64, f0: &[f64], nx: usize, nt: usize) -> Result<FieldOnGrid> {
    if nx < 50 || nt < 1 {
        return Err(FdmError::GridTooCoarse { need: 50, got: nx });
    }
    let grid = Grid1D::new(nx)?;
    assert_eq!(f0.len(), grid.num_nodes());
    let h = grid.h();
    // cell averages from nodal initial data (trapezoid within each cell)
    let mut cells: Vec<f64> = (0..nx).map(|i| 0.5 * (f0[i] + f0[i + 1])).collect();
    let max_speed = |c: &[f64]| c.iter().fold(0.0f64, |m, v| m.max((a * v).abs()));
    // choose a CFL-safe number of substeps per output level
    let dt_out = 1.0 / nt as f64;
    let nn = grid.num_nodes();
    let mut values = Vec::with_capacity((nt + 1) * nn);
    let nodal = |cells: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; nn];
        for i in 1..nx {
            v[i] = 0.5 * (cells[i - 1] + cells[i]);
        }
        v[0] = 0.0;
        v[nx] = 0.0;
        v
    };
    values.extend_from_slice(&nodal(&cells));
    for _ in 0..nt {
        let mut remaining = dt_out;
        while remaining > 1e-14 {
            let s = max_speed(&cells);
            let dt = if s == 0.0 { remaining } else { (0.9 * h / s).min(remaining) };
            let mut flux = vec![0.0; nx + 1];
            for e in 1..nx {
                flux[e] = godunov_flux(a, cells[e - 1], cells[e]);
            }
            // ghost cells carry the boundary value 0
            flux[0] = godunov_flux(a, 0.0, cells[0]);
            flux[nx] = godunov_flux(a, cells[nx - 1], 0.0);
            for i in 0..nx {
                cells[i] -= dt / h * (flux[i + 1] - flux[i]);
            }
            remaining -= dt;
        }
        values.extend_from_slice(&nodal(&cells));
    }
    Ok(FieldOnGrid { grid, nt_levels: nt + 1, values })
}

/// Closed-form solution of u'' - mu u = 0 with u(0)=u(1)=0, continuity at z
/// and derivative jump u_x(z+) - u_x(z-) = -lambda: matched sinh pieces.
pub fn singular_elliptic_exact(lambda: f64, mu: f64, z: f64) -> Result<impl Fn(f64) -> f64> {
    if mu <= 0.0 {
        return Err(FdmError::NonPositiveMu(mu));
    }
    assert!(z > 0.0 && z < 1.0, "gene site must be interior");
    let s = mu.sqrt();
    // u(x) = cl sinh(s x) on [0,z], cr sinh(s (1-x)) on [z,1]
    // continuity: cl sinh(s z) = cr sinh(s (1-z))
    // jump: -cr s cosh(s(1-z)) - cl s cosh(s z) = -lambda
    let (shz, chz) = (((s * z).exp() - (-s * z).exp()) / 2.0, ((s * z).exp() + (-s * z).exp()) / 2.0);
    let s1z = s * (1.0 - z);
    let (sh1z, ch1z) = ((s1z.exp() - (-s1z).exp()) / 2.0, (s1z.exp() + (-s1z).exp()) / 2.0);
    let denom = s * (sh1z * chz + shz * ch1z);
    let cl = lambda * sh1z / denom;
    let cr = lambda * shz / denom;
    Ok(move |x: f64| {
        if x <= z {
            cl * (s * x).sinh()
        } else {
            cr * (s * (1.0 - x)).sinh()
        }
    })
}

/// Evaluate the closed form on a grid and cross-check it against a
/// second-order FDM discretization with the delta forcing folded into the
/// z-adjacent row. The fold carries the Taylor correction for the kink
/// (-h^3 mu lambda / 6), so the scaled row residual of the closed form is
/// O(h^4) everywhere. Returns the field together with the max |row residual|
/// of the closed form in the scaled discrete system
/// (u_{i-1} - 2u_i + u_{i+1}) - mu h^2 u_i = rhs_i.
pub fn solve_singular_elliptic(lambda: f64, mu: f64, z: f64, n: usize) -> Result<(FieldOnGrid, f64)> {
    let exact = singular_elliptic_exact(lambda, mu, z)?;
    let grid = Grid1D::new(n)?;
    let h = grid.h();
    let u: Vec<f64> = (0..=n).map(|i| exact(grid.node(i))).collect();
    let zi = (z / h).round() as usize;
    let rhs_at = |i: usize| -> f64 {
        if i == zi {
            -lambda * h - h * h * h * mu * lambda / 6.0
        } else {
            0.0
        }
    };
    let mut worst = 0.0f64;
    for i in 1..n {
        let row = (u[i - 1] - 2.0 * u[i] + u[i + 1]) - mu * h * h * u[i] - rhs_at(i);
        worst = worst.max(row.abs());
    }
    Ok((FieldOnGrid::stationary(grid, u), worst))
}

/// Solve the jump-folded discrete system directly (used to sanity-check the
/// closed form end to end): returns max nodal |u_fdm - u_exact|.
pub fn singular_elliptic_fdm_error(lambda: f64, mu: f64, z: f64, n: usize) -> Result<f64> {
    let exact = singular_elliptic_exact(lambda, mu, z)?;
    let grid = Grid1D::new(n)?;
    let h = grid.h();
    let zi = (z / h).round() as usize;
    let m = n - 1;
    let sub = vec![1.0; m];
    let diag = vec![-2.0 - mu * h * h; m];
    let sup = vec![1.0; m];
    let mut rhs = vec![0.0; m];
    rhs[zi - 1] = -lambda * h - h * h * h * mu * lambda / 6.0;
    let uh = thomas_solve(&sub, &diag, &sup, &rhs)?;
    let mut worst = 0.0f64;
    for i in 1..n {
        worst = worst.max((uh[i - 1] - exact(grid.node(i))).abs());
    }
    Ok(worst)
}
