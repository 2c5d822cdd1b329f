//! Derivative-free minimization with the Nelder-Mead simplex.
//!
//! Box constraints are enforced by projecting every trial point onto the
//! bounds, which keeps the objective from ever being evaluated outside its
//! valid domain (the Gaussian-process likelihood is undefined for
//! non-positive hyperparameters, so the caller optimizes in log space and
//! still passes finite bounds).

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Hard cap on objective evaluations.
    pub max_evals: usize,
    /// Stop when the value spread across the simplex falls below this.
    pub f_tol: f64,
    /// Stop when the largest vertex distance from the best falls below this.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> NelderMeadOptions {
        NelderMeadOptions {
            max_evals: 400,
            f_tol: 1e-10,
            x_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// True when a tolerance triggered the stop, false on the eval cap.
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::Parameter("empty start point".into()));
    }
    if lower.len() != n || upper.len() != n {
        return Err(Error::Dimension(format!(
            "bounds length {}/{} vs point length {n}",
            lower.len(),
            upper.len()
        )));
    }
    for i in 0..n {
        if !(lower[i] <= upper[i]) {
            return Err(Error::Parameter(format!(
                "bound {i} inverted: [{}, {}]",
                lower[i], upper[i]
            )));
        }
    }

    // Reflection, expansion, contraction, shrink.
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Initial simplex: start point plus a nudge along each coordinate,
    // flipped inward when it would leave the box.
    let mut start = x0.to_vec();
    clamp_into(&mut start, lower, upper);
    let mut vertices: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let span = upper[i] - lower[i];
        let mut step = if span.is_finite() && span > 0.0 {
            0.05 * span
        } else {
            0.1 * start[i].abs().max(1.0)
        };
        if start[i] + step > upper[i] {
            step = -step;
        }
        let mut v = start.clone();
        v[i] = (v[i] + step).clamp(lower[i], upper[i]);
        if v[i] == start[i] {
            // Degenerate axis (upper == lower): keep the vertex anyway; the
            // simplex is flat along it and the algorithm leaves it untouched.
            v[i] = start[i];
        }
        vertices.push(v);
    }
    let mut values: Vec<f64> = vertices.iter().map(|v| eval(v, &mut evals)).collect();

    loop {
        // Sort vertices by objective value, best first.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let sorted: Vec<Vec<f64>> = order.iter().map(|&i| vertices[i].clone()).collect();
        let sorted_vals: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        vertices = sorted;
        values = sorted_vals;

        let f_spread = values[n] - values[0];
        let x_spread = vertices[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&vertices[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if f_spread <= opts.f_tol || x_spread <= opts.x_tol {
            return Ok(NelderMeadResult {
                x: vertices[0].clone(),
                f: values[0],
                evals,
                converged: true,
            });
        }
        if evals >= opts.max_evals {
            return Ok(NelderMeadResult {
                x: vertices[0].clone(),
                f: values[0],
                evals,
                converged: false,
            });
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for v in &vertices[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }

        let worst = vertices[n].clone();
        let mut reflected: Vec<f64> = (0..n)
            .map(|i| centroid[i] + alpha * (centroid[i] - worst[i]))
            .collect();
        clamp_into(&mut reflected, lower, upper);
        let f_r = eval(&reflected, &mut evals);

        if f_r < values[0] {
            // Try to expand further along the same direction.
            let mut expanded: Vec<f64> = (0..n)
                .map(|i| centroid[i] + gamma * (reflected[i] - centroid[i]))
                .collect();
            clamp_into(&mut expanded, lower, upper);
            let f_e = eval(&expanded, &mut evals);
            if f_e < f_r {
                vertices[n] = expanded;
                values[n] = f_e;
            } else {
                vertices[n] = reflected;
                values[n] = f_r;
            }
        } else if f_r < values[n - 1] {
            vertices[n] = reflected;
            values[n] = f_r;
        } else {
            // Contract toward the better of worst/reflected.
            let (anchor, f_anchor) = if f_r < values[n] {
                (reflected.clone(), f_r)
            } else {
                (worst.clone(), values[n])
            };
            let mut contracted: Vec<f64> = (0..n)
                .map(|i| centroid[i] + rho * (anchor[i] - centroid[i]))
                .collect();
            clamp_into(&mut contracted, lower, upper);
            let f_c = eval(&contracted, &mut evals);
            if f_c < f_anchor {
                vertices[n] = contracted;
                values[n] = f_c;
            } else {
                // Shrink everything toward the best vertex.
                for k in 1..=n {
                    for i in 0..n {
                        vertices[k][i] = vertices[0][i] + sigma * (vertices[k][i] - vertices[0][i]);
                    }
                    clamp_into(&mut vertices[k], lower, upper);
                    values[k] = eval(&vertices[k], &mut evals);
                }
            }
        }
    }
}
