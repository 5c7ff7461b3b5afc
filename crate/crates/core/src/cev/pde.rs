//! Backward parabolic solver for
//!
//! ```text
//! u_τ = r y u_y + ½ ν² y^{2β} u_yy − q u,   y ∈ [0, y_max],  τ ∈ [0, T]
//! ```
//!
//! on a sinh-stretched grid, Crank-Nicolson in time with fully implicit
//! startup steps. Central differences are used for the convection term
//! except where they would break the M-matrix property (near the origin
//! when β > 1/2), where the scheme switches to one-sided upwinding.

/// Coefficients of a single solve, in scaled units.
pub(crate) struct Problem<'a> {
    pub rate: f64,
    pub discount: f64,
    pub vol_scale: f64,
    pub beta: f64,
    pub horizon: f64,
    pub payoff: &'a dyn Fn(f64) -> f64,
    pub lower: &'a dyn Fn(f64) -> f64,
    pub upper: &'a dyn Fn(f64) -> f64,
}

/// Node placement: `n` nodes on [0, y_max] clustered around `center`, with
/// `center` falling exactly on the midpoint (in the stretched coordinate)
/// between two nodes. `y_max` may grow slightly to achieve the alignment.
#[derive(Debug, Clone)]
pub(crate) struct Nodes {
    pub y: Vec<f64>,
}

impl Nodes {
    pub fn stretched(n: usize, y_max: f64, center: f64, width: f64) -> Self {
        debug_assert!(n >= 3 && y_max > center && center > 0.0 && width > 0.0);
        let c1 = (-center / width).asinh();
        let c2 = ((y_max - center) / width).asinh();
        let last = (n - 1) as f64;
        // stretched coordinate of the center, then snap it down onto a face
        let xi = -c1 / (c2 - c1);
        let k = (xi * last - 0.5).floor().max(0.0);
        let xi_face = ((k + 0.5) / last).min(1.0 - 0.5 / last);
        let c2 = c1 * (1.0 - 1.0 / xi_face);
        let y = (0..n)
            .map(|j| {
                let s = j as f64 / last;
                center + width * (c2 * s + c1 * (1.0 - s)).sinh()
            })
            .collect::<Vec<_>>();
        let mut y = y;
        y[0] = 0.0;
        Self { y }
    }

    pub fn y_max(&self) -> f64 {
        *self.y.last().unwrap()
    }

    /// Cubic Lagrange interpolation of nodal values at `x`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let n = self.y.len();
        let j = match self.y.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(j) => return values[j],
            Err(j) => j.saturating_sub(1),
        };
        let start = j.saturating_sub(1).min(n.saturating_sub(4));
        let idx = start..(start + 4).min(n);
        let pts: Vec<usize> = idx.collect();
        let mut acc = 0.0;
        for &a in &pts {
            let mut w = 1.0;
            for &b in &pts {
                if a != b {
                    w *= (x - self.y[b]) / (self.y[a] - self.y[b]);
                }
            }
            acc += w * values[a];
        }
        acc
    }
}

/// Solves the terminal-value problem and returns nodal values at τ = T.
pub(crate) fn solve(
    problem: &Problem<'_>,
    nodes: &Nodes,
    num_time: usize,
    implicit_steps: usize,
) -> Vec<f64> {
    let y = &nodes.y;
    let n = y.len();
    let m = n - 2;

    // spatial operator rows for interior nodes: L u_i = lo u_{i-1} + di u_i + up u_{i+1}
    let mut lo = vec![0.0; m];
    let mut di = vec![0.0; m];
    let mut up = vec![0.0; m];
    let nu2 = problem.vol_scale * problem.vol_scale;
    for k in 0..m {
        let i = k + 1;
        let hm = y[i] - y[i - 1];
        let hp = y[i + 1] - y[i];
        let diff = 0.5 * nu2 * y[i].powf(2.0 * problem.beta);
        let drift = problem.rate * y[i];

        let dl = 2.0 * diff / (hm * (hm + hp));
        let du = 2.0 * diff / (hp * (hm + hp));
        let cl = -drift * hp / (hm * (hm + hp));
        let cu = drift * hm / (hp * (hm + hp));
        let (l, u) = if dl + cl >= 0.0 && du + cu >= 0.0 {
            (dl + cl, du + cu)
        } else if drift >= 0.0 {
            (dl, du + drift / hp)
        } else {
            (dl - drift / hm, du)
        };
        lo[k] = l;
        up[k] = u;
        di[k] = -(l + u) - problem.discount;
    }

    let mut u: Vec<f64> = y.iter().map(|&v| (problem.payoff)(v)).collect();
    u[0] = (problem.lower)(0.0);
    u[n - 1] = (problem.upper)(0.0);

    let dt = problem.horizon / num_time as f64;
    let implicit_euler = Factored::new(&lo, &di, &up, dt);
    let crank_nicolson = Factored::new(&lo, &di, &up, 0.5 * dt);
    let mut rhs = vec![0.0; m];

    for step in 0..num_time {
        let (factored, explicit) = if step < implicit_steps {
            (&implicit_euler, 0.0)
        } else {
            (&crank_nicolson, 0.5 * dt)
        };
        let tau_new = (step + 1) as f64 * dt;
        let left = (problem.lower)(tau_new);
        let right = (problem.upper)(tau_new);

        for k in 0..m {
            let i = k + 1;
            let lu = lo[k] * u[i - 1] + di[k] * u[i] + up[k] * u[i + 1];
            rhs[k] = u[i] + explicit * lu;
        }
        rhs[0] += factored.weight * lo[0] * left;
        rhs[m - 1] += factored.weight * up[m - 1] * right;

        factored.solve(&mut rhs);
        u[0] = left;
        u[n - 1] = right;
        u[1..(m + 1)].copy_from_slice(&rhs);
    }
    u
}

/// LU factors of the tridiagonal matrix I − w·L, reused across time steps.
struct Factored {
    weight: f64,
    sub: Vec<f64>,
    inv_pivot: Vec<f64>,
    sup: Vec<f64>,
}

impl Factored {
    fn new(lo: &[f64], di: &[f64], up: &[f64], weight: f64) -> Self {
        let m = di.len();
        let sub: Vec<f64> = lo.iter().map(|l| -weight * l).collect();
        let sup: Vec<f64> = up.iter().map(|u| -weight * u).collect();
        let mut inv_pivot = vec![0.0; m];
        let mut prev = 1.0 - weight * di[0];
        inv_pivot[0] = 1.0 / prev;
        for i in 1..m {
            let pivot = (1.0 - weight * di[i]) - sub[i] * sup[i - 1] / prev;
            inv_pivot[i] = 1.0 / pivot;
            prev = pivot;
        }
        Self {
            weight,
            sub,
            inv_pivot,
            sup,
        }
    }

    /// Forward elimination and back substitution; overwrites `d`.
    fn solve(&self, d: &mut [f64]) {
        let m = d.len();
        d[0] *= self.inv_pivot[0];
        for i in 1..m {
            d[i] = (d[i] - self.sub[i] * d[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..m - 1).rev() {
            d[i] -= self.sup[i] * self.inv_pivot[i] * d[i + 1];
        }
    }
}
