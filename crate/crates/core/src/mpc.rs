//! Constrained model-predictive control over the glucose output.
//!
//! The horizon cost is condensed into a dense quadratic program in the input
//! sequence: predicted outputs are `Y = F x0 + G U + G_w W`, where `W` is the
//! disturbance preview supplied by the learner (zeros when nothing is
//! known). The cost penalizes output deviation from baseline and input
//! deviation from the stage-wise steady-state target, the input is boxed to
//! the pump range, and the final predicted output is pinned to baseline by a
//! terminal equality. When the terminal equality is unreachable inside the
//! box, it degrades to a large quadratic penalty instead of failing.
//!
//! The QP is solved with a primal active-set method: a feasible start from
//! exact projection onto the equality within the box, then equality-
//! constrained subproblems via a KKT solve, adding blocking bounds and
//! releasing bounds with wrong-signed multipliers until the KKT conditions
//! hold.

use crate::error::{Error, Result};
use crate::model::{state, ModelSet, StateVector, STATE_DIM};
use crate::numerics::{dot, solve_linear, Matrix};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MpcParams {
    /// Prediction horizon [samples].
    pub horizon: usize,
    /// Output deviation weight.
    pub q: f64,
    /// Input deviation weight (from the stage steady-state target).
    pub r: f64,
    /// Pump capacity [U per sample]; inputs live in [0, u_max].
    pub u_max: f64,
    /// Quadratic weight replacing the terminal equality when it is
    /// unreachable inside the input box.
    pub terminal_penalty: f64,
}

impl Default for MpcParams {
    fn default() -> MpcParams {
        MpcParams {
            horizon: 30,
            q: 1.0,
            r: 4.0e4,
            u_max: 0.5,
            terminal_penalty: 1e6,
        }
    }
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Parameter("mpc horizon must be at least 1".into()));
        }
        for (name, v) in [
            ("q", self.q),
            ("r", self.r),
            ("u_max", self.u_max),
            ("terminal_penalty", self.terminal_penalty),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "mpc parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Box-constrained QP with one optional linear equality:
/// minimize `x' H x / 2 + f' x` subject to `lower <= x <= upper` and
/// `a . x = b` when `equality` is present. `H` must be symmetric positive
/// definite.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: Matrix,
    pub gradient: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub equality: Option<(Vec<f64>, f64)>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Scale-normalized KKT violation (stationarity plus equality residual).
    pub kkt_residual: f64,
    /// Bounds active at the solution.
    pub active_bounds: usize,
    pub iterations: usize,
}

const MAX_QP_ITERATIONS: usize = 200;

/// Range of `a . x` over the box.
fn equality_range(a: &[f64], lower: &[f64], upper: &[f64]) -> (f64, f64) {
    let mut min = 0.0;
    let mut max = 0.0;
    for i in 0..a.len() {
        if a[i] >= 0.0 {
            min += a[i] * lower[i];
            max += a[i] * upper[i];
        } else {
            min += a[i] * upper[i];
            max += a[i] * lower[i];
        }
    }
    (min, max)
}

/// Exact projection of the box midpoint onto `{a . x = b}` within the box,
/// moving along `a`. The map `lambda -> a . clamp(mid + lambda a)` is
/// piecewise linear and nondecreasing; the crossing segment is solved in
/// closed form. Returns None when the equality misses the box entirely.
fn project_onto_equality(
    a: &[f64],
    b: f64,
    lower: &[f64],
    upper: &[f64],
) -> Option<Vec<f64>> {
    let n = a.len();
    let (lo_val, hi_val) = equality_range(a, lower, upper);
    if b < lo_val || b > hi_val {
        return None;
    }
    let mid: Vec<f64> = (0..n).map(|i| 0.5 * (lower[i] + upper[i])).collect();
    // Breakpoints where a coordinate saturates.
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * n);
    for i in 0..n {
        if a[i] != 0.0 {
            breaks.push((lower[i] - mid[i]) / a[i]);
            breaks.push((upper[i] - mid[i]) / a[i]);
        }
    }
    breaks.push(0.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let value_at = |lambda: f64| -> f64 {
        (0..n)
            .map(|i| a[i] * (mid[i] + lambda * a[i]).clamp(lower[i], upper[i]))
            .sum()
    };
    // Find the segment whose endpoint values straddle b, then interpolate:
    // within a segment the slope is the sum of a_i^2 over unsaturated
    // coordinates, constant by construction.
    let lambda = 'found: {
        if value_at(breaks[0]) >= b {
            break 'found breaks[0];
        }
        for w in breaks.windows(2) {
            let (v0, v1) = (value_at(w[0]), value_at(w[1]));
            if v0 <= b && b <= v1 {
                let slope: f64 = (0..n)
                    .filter(|&i| {
                        let x = mid[i] + 0.5 * (w[0] + w[1]) * a[i];
                        x > lower[i] && x < upper[i]
                    })
                    .map(|i| a[i] * a[i])
                    .sum();
                break 'found if slope > 0.0 { w[0] + (b - v0) / slope } else { w[0] };
            }
        }
        *breaks.last().unwrap()
    };
    let mut x: Vec<f64> = (0..n)
        .map(|i| (mid[i] + lambda * a[i]).clamp(lower[i], upper[i]))
        .collect();
    // Absorb the last round-off into one strictly interior coordinate so the
    // equality holds to machine precision.
    let residual = b - dot(a, &x);
    if residual != 0.0 {
        if let Some(j) = (0..n)
            .filter(|&i| a[i] != 0.0 && x[i] > lower[i] && x[i] < upper[i])
            .max_by(|&p, &q| a[p].abs().total_cmp(&a[q].abs()))
        {
            x[j] = (x[j] + residual / a[j]).clamp(lower[j], upper[j]);
        }
    }
    Some(x)
}

/// Scale-normalized KKT residual of a candidate solution.
fn kkt_residual(p: &QpProblem, x: &[f64], nu: f64) -> f64 {
    let n = x.len();
    let hx = p.hessian.mul_vec(x).expect("dimension checked");
    let scale = hx
        .iter()
        .chain(p.gradient.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let bound_tol = 1e-12;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut grad = hx[i] + p.gradient[i];
        if let Some((a, _)) = &p.equality {
            grad += nu * a[i];
        }
        let span = (p.upper[i] - p.lower[i]).max(1e-300);
        let at_lower = (x[i] - p.lower[i]).abs() <= bound_tol * span.max(1.0);
        let at_upper = (p.upper[i] - x[i]).abs() <= bound_tol * span.max(1.0);
        let viol = if at_lower && at_upper {
            0.0 // degenerate box pin
        } else if at_lower {
            (-grad).max(0.0)
        } else if at_upper {
            grad.max(0.0)
        } else {
            grad.abs()
        };
        worst = worst.max(viol / scale);
    }
    if let Some((a, b)) = &p.equality {
        let eq = (dot(a, x) - b).abs() / b.abs().max(1.0);
        worst = worst.max(eq);
    }
    worst
}

/// Primal active-set solve. The working set starts from the bounds touched
/// by the feasible start; each iteration solves the equality-constrained
/// subproblem on the free variables through its KKT system.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    let n = p.gradient.len();
    if p.hessian.rows() != n || p.hessian.cols() != n || p.lower.len() != n || p.upper.len() != n {
        return Err(Error::Dimension("qp dimensions disagree".into()));
    }
    if let Some((a, _)) = &p.equality {
        if a.len() != n {
            return Err(Error::Dimension("qp equality length mismatch".into()));
        }
    }
    for i in 0..n {
        if !(p.lower[i] <= p.upper[i]) {
            return Err(Error::Parameter(format!("qp bound {i} inverted")));
        }
    }

    // Feasible start.
    let mut x: Vec<f64> = match &p.equality {
        Some((a, b)) => project_onto_equality(a, *b, &p.lower, &p.upper).ok_or_else(|| {
            Error::Solver {
                message: "terminal equality misses the input box".into(),
                dump: format!("b={b}, range={:?}", equality_range(a, &p.lower, &p.upper)),
            }
        })?,
        None => (0..n)
            .map(|i| (0.5 * (p.lower[i] + p.upper[i])).clamp(p.lower[i], p.upper[i]))
            .collect(),
    };

    let span = |i: usize| (p.upper[i] - p.lower[i]).max(1e-300);
    let mut at_bound: Vec<Option<bool>> = (0..n)
        .map(|i| {
            if x[i] <= p.lower[i] {
                Some(false) // pinned low
            } else if x[i] >= p.upper[i] {
                Some(true) // pinned high
            } else {
                None
            }
        })
        .collect();

    let mut nu = 0.0;
    for iteration in 1..=MAX_QP_ITERATIONS {
        let free: Vec<usize> = (0..n).filter(|&i| at_bound[i].is_none()).collect();
        let nf = free.len();
        let eq = p.equality.as_ref();
        // Include the equality row only when free variables can still move
        // it; otherwise it is already fixed by the pinned coordinates.
        let eq_live = eq
            .map(|(a, _)| free.iter().any(|&i| a[i] != 0.0))
            .unwrap_or(false);
        let dim = nf + usize::from(eq_live);

        // KKT system for the subproblem.
        let mut target = x.clone();
        if dim > 0 {
            let mut kkt = Matrix::zeros(dim, dim);
            let mut rhs = vec![0.0; dim];
            for (r, &i) in free.iter().enumerate() {
                for (c, &j) in free.iter().enumerate() {
                    kkt.set(r, c, p.hessian.get(i, j));
                }
                let mut b = -p.gradient[i];
                for j in 0..n {
                    if at_bound[j].is_some() {
                        b -= p.hessian.get(i, j) * x[j];
                    }
                }
                rhs[r] = b;
            }
            if eq_live {
                let (a, b) = eq.expect("eq_live implies equality");
                for (r, &i) in free.iter().enumerate() {
                    kkt.set(r, nf, a[i]);
                    kkt.set(nf, r, a[i]);
                }
                let mut fixed = 0.0;
                for j in 0..n {
                    if at_bound[j].is_some() {
                        fixed += a[j] * x[j];
                    }
                }
                rhs[nf] = b - fixed;
            }
            let sol = solve_linear(&kkt, &rhs)?;
            for (r, &i) in free.iter().enumerate() {
                target[i] = sol[r];
            }
            nu = if eq_live { sol[nf] } else { 0.0 };
        }

        // Longest feasible step toward the subproblem optimum.
        let mut alpha = 1.0f64;
        let mut blocking: Option<(usize, bool)> = None;
        for &i in &free {
            let d = target[i] - x[i];
            if d > 0.0 && target[i] > p.upper[i] {
                let a = (p.upper[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, true));
                }
            } else if d < 0.0 && target[i] < p.lower[i] {
                let a = (p.lower[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, false));
                }
            }
        }

        if let Some((idx, high)) = blocking {
            for &i in &free {
                x[i] += alpha * (target[i] - x[i]);
            }
            x[idx] = if high { p.upper[idx] } else { p.lower[idx] };
            at_bound[idx] = Some(high);
            continue;
        }

        // Full step accepted: check bound multipliers.
        for &i in &free {
            x[i] = target[i];
        }
        let hx = p.hessian.mul_vec(&x)?;
        let scale = hx
            .iter()
            .chain(p.gradient.iter())
            .fold(1.0f64, |m, v| m.max(v.abs()));
        let mut release: Option<(usize, f64)> = None;
        for i in 0..n {
            if let Some(high) = at_bound[i] {
                let mut grad = hx[i] + p.gradient[i];
                if let Some((a, _)) = eq {
                    grad += nu * a[i];
                }
                // Multiplier sign: at an upper bound the gradient must push
                // up (grad <= 0 violates), at a lower bound down.
                let violation = if high { grad } else { -grad };
                if violation > 1e-11 * scale {
                    let worse = release.map(|(_, v)| violation > v).unwrap_or(true);
                    if worse && span(i) > 0.0 {
                        release = Some((i, violation));
                    }
                }
            }
        }
        match release {
            Some((i, _)) => {
                at_bound[i] = None;
            }
            None => {
                let active_bounds = at_bound.iter().filter(|b| b.is_some()).count();
                return Ok(QpSolution {
                    kkt_residual: kkt_residual(p, &x, nu),
                    x,
                    active_bounds,
                    iterations: iteration,
                });
            }
        }
    }
    Err(Error::Solver {
        message: format!("active set did not settle in {MAX_QP_ITERATIONS} iterations"),
        dump: format!(
            "n={n}, f={:?}, lower={:?}, upper={:?}, eq={:?}",
            p.gradient, p.lower, p.upper, p.equality
        ),
    })
}

/// How the terminal condition was enforced in a solved step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalMode {
    /// Hard equality on the final predicted output.
    Equality,
    /// Quadratic penalty fallback (equality unreachable in the box).
    Penalty,
}

impl std::fmt::Display for TerminalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TerminalMode::Equality => write!(f, "equality"),
            TerminalMode::Penalty => write!(f, "penalty"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcStepInfo {
    pub kkt_residual: f64,
    pub active_bounds: usize,
    pub iterations: usize,
    pub terminal_mode: TerminalMode,
}

pub struct MpcController {
    params: MpcParams,
    u_basal: f64,
    /// Output prediction rows: y_j = F[j-1] x0 + sum G[j-1][i] u_i + ...
    f_mat: Matrix,
    g_mat: Matrix,
    gw_mat: Matrix,
    /// Constant part of the Hessian: 2 (G' Q G + R).
    h_base: Matrix,
    /// Steady-state input per unit disturbance.
    u_ss_per_w: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl MpcController {
    pub fn new(model: &ModelSet, params: MpcParams) -> Result<MpcController> {
        params.validate()?;
        let u_basal = model.u_basal;
        if !(u_basal > 0.0 && u_basal < params.u_max) {
            return Err(Error::Parameter(format!(
                "basal rate {u_basal} must sit inside (0, u_max = {})",
                params.u_max
            )));
        }
        let n = params.horizon;

        // Impulse-response coefficients c A^d B and c A^d Bk, plus the free
        // response rows c A^j, built by repeated row-vector propagation.
        let mut row = vec![0.0; STATE_DIM];
        row[state::PLASMA_GLUCOSE] = 1.0; // output row
        let mut cab = Vec::with_capacity(n);
        let mut cabk = Vec::with_capacity(n);
        let mut f_mat = Matrix::zeros(n, STATE_DIM);
        for j in 0..n {
            cab.push(dot(&row, &column(&model.b_d)));
            cabk.push(dot(&row, &column(&model.b_kis_d)));
            // row <- row * A
            let mut next = vec![0.0; STATE_DIM];
            for c in 0..STATE_DIM {
                let mut s = 0.0;
                for r in 0..STATE_DIM {
                    s += row[r] * model.a_hat_d.get(r, c);
                }
                next[c] = s;
            }
            row = next;
            for c in 0..STATE_DIM {
                f_mat.set(j, c, row[c]);
            }
        }
        let mut g_mat = Matrix::zeros(n, n);
        let mut gw_mat = Matrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                g_mat.set(j, i, cab[j - i]);
                gw_mat.set(j, i, cabk[j - i]);
            }
        }

        // H = 2 (q G'G + r I).
        let mut h_base = g_mat.transpose().mul(&g_mat)?;
        h_base = h_base.scale(2.0 * params.q);
        for i in 0..n {
            h_base.set(i, i, h_base.get(i, i) + 2.0 * params.r);
        }

        // Steady-state target per unit disturbance: solve the equilibrium
        // conditions (A - I) x + B u = -Bk, C x = 0 once; everything scales
        // linearly with the disturbance.
        let mut block = Matrix::zeros(STATE_DIM + 1, STATE_DIM + 1);
        for r in 0..STATE_DIM {
            for c in 0..STATE_DIM {
                let v = model.a_hat_d.get(r, c) - if r == c { 1.0 } else { 0.0 };
                block.set(r, c, v);
            }
            block.set(r, STATE_DIM, model.b_d.get(r, 0));
        }
        block.set(STATE_DIM, state::PLASMA_GLUCOSE, 1.0);
        let mut rhs = vec![0.0; STATE_DIM + 1];
        for r in 0..STATE_DIM {
            rhs[r] = -model.b_kis_d.get(r, 0);
        }
        let base = solve_linear(&block, &rhs)?;
        let u_ss_per_w = base[STATE_DIM];

        Ok(MpcController {
            lower: vec![-u_basal; n],
            upper: vec![params.u_max - u_basal; n],
            params,
            u_basal,
            f_mat,
            g_mat,
            gw_mat,
            h_base,
            u_ss_per_w,
        })
    }

    pub fn params(&self) -> &MpcParams {
        &self.params
    }

    pub fn u_basal(&self) -> f64 {
        self.u_basal
    }

    /// Steady-state input deviation holding the output at baseline under a
    /// constant disturbance `w`.
    pub fn steady_state_input(&self, w: f64) -> f64 {
        self.u_ss_per_w * w
    }

    /// One controller step. `preview` holds predicted disturbance values for
    /// each horizon stage (empty slices mean no preview; shorter slices are
    /// extended with their last value, longer ones truncated). Returns the
    /// absolute insulin command for the coming interval.
    pub fn mpc_step(&self, x_hat: &StateVector, preview: &[f64]) -> Result<(f64, MpcStepInfo)> {
        let n = self.params.horizon;
        let mut w = vec![0.0; n];
        for k in 0..n {
            w[k] = match preview.get(k) {
                Some(&v) => v,
                None => preview.last().copied().unwrap_or(0.0),
            };
        }

        // Free response plus disturbance feed-through: c = F x0 + Gw W.
        let mut c_vec = self.f_mat.mul_vec(x_hat.as_slice())?;
        let gw_w = self.gw_mat.mul_vec(&w)?;
        for j in 0..n {
            c_vec[j] += gw_w[j];
        }
        let u_ss: Vec<f64> = w.iter().map(|&wk| self.u_ss_per_w * wk).collect();

        // f_i = 2 q sum_j G[j][i] c[j] - 2 r u_ss[i].
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in i..n {
                s += self.g_mat.get(j, i) * c_vec[j];
            }
            grad[i] = 2.0 * self.params.q * s - 2.0 * self.params.r * u_ss[i];
        }

        // Terminal condition: g_N . U = -c_N.
        let g_n: Vec<f64> = (0..n).map(|i| self.g_mat.get(n - 1, i)).collect();
        let c_n = c_vec[n - 1];
        let (lo_val, hi_val) = equality_range(&g_n, &self.lower, &self.upper);
        let reachable = -c_n >= lo_val && -c_n <= hi_val;

        let problem = if reachable {
            QpProblem {
                hessian: self.h_base.clone(),
                gradient: grad,
                lower: self.lower.clone(),
                upper: self.upper.clone(),
                equality: Some((g_n, -c_n)),
            }
        } else {
            // Penalty mode: mu (g.U + c_N)^2 folded into H and f.
            let mu = self.params.terminal_penalty;
            let mut h = self.h_base.clone();
            for i in 0..n {
                for j in 0..n {
                    h.set(i, j, h.get(i, j) + 2.0 * mu * g_n[i] * g_n[j]);
                }
            }
            for i in 0..n {
                grad[i] += 2.0 * mu * c_n * g_n[i];
            }
            QpProblem {
                hessian: h,
                gradient: grad,
                lower: self.lower.clone(),
                upper: self.upper.clone(),
                equality: None,
            }
        };

        let sol = solve_qp(&problem)?;
        let u_abs = (self.u_basal + sol.x[0]).clamp(0.0, self.params.u_max);
        Ok((
            u_abs,
            MpcStepInfo {
                kkt_residual: sol.kkt_residual,
                active_bounds: sol.active_bounds,
                iterations: sol.iterations,
                terminal_mode: if reachable {
                    TerminalMode::Equality
                } else {
                    TerminalMode::Penalty
                },
            },
        ))
    }
}

fn column(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, 0)).collect()
}
