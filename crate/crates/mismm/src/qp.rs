//! Dense convex quadratic programming by a primal-dual interior-point method.
//!
//! Solves `min ½xᵀQx + cᵀx` subject to `A_eq x = b_eq` and `A_in x ≤ b_in`
//! with Q symmetric positive semidefinite. One engine backs both the dual
//! sub-problem solver and the relaxations inside branch-and-bound, so both
//! inherit the same KKT-residual contract.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A convex QP in standard form.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Equality rows; may have zero rows.
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Inequality rows, `a_in x ≤ b_in`; must have at least one row.
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// KKT residual the iteration aims for.
    pub tol: f64,
    /// Hard failure threshold: the best iterate must reach at least this.
    pub accept: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-9, accept: 1e-9, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows.
    pub eq_mult: DVector<f64>,
    /// Multipliers of the inequality rows, nonnegative.
    pub in_mult: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    ineq: DVector<f64>,
}

fn residuals(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, lam: &DVector<f64>, s: &DVector<f64>) -> Residuals {
    let mut dual = &p.q * x + &p.c;
    if p.a_eq.nrows() > 0 {
        dual += p.a_eq.transpose() * y;
    }
    dual += p.a_in.transpose() * lam;
    let eq = if p.a_eq.nrows() > 0 { &p.a_eq * x - &p.b_eq } else { DVector::zeros(0) };
    let ineq = &p.a_in * x + s - &p.b_in;
    Residuals { dual, eq, ineq }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Largest step in [0, 1] keeping `v + step * dv` nonnegative, shrunk by the
/// fraction-to-boundary factor.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-tau * v[i] / dv[i]);
        }
    }
    alpha.min(1.0)
}

/// Measured optimality error of a candidate point: max of stationarity,
/// equality residual, inequality violation, and complementarity.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, lam: &DVector<f64>) -> f64 {
    let slack = &p.b_in - &p.a_in * x;
    let mut res = 0.0f64;
    let mut dual = &p.q * x + &p.c;
    if p.a_eq.nrows() > 0 {
        dual += p.a_eq.transpose() * y;
    }
    dual += p.a_in.transpose() * lam;
    res = res.max(inf_norm(&dual));
    if p.a_eq.nrows() > 0 {
        res = res.max(inf_norm(&(&p.a_eq * x - &p.b_eq)));
    }
    for i in 0..slack.len() {
        res = res.max(-slack[i]); // violation
        res = res.max((lam[i] * slack[i]).abs());
        res = res.max(-lam[i]);
    }
    res
}

/// Mehrotra-style predictor-corrector interior-point iteration.
pub fn solve(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let n = p.q.nrows();
    let m = p.a_in.nrows();
    let pe = p.a_eq.nrows();
    if p.q.ncols() != n || p.c.len() != n || p.a_in.ncols() != n || p.b_in.len() != m {
        return Err(Error::InvalidParameter("inconsistent QP dimensions".into()));
    }
    if pe > 0 && (p.a_eq.ncols() != n || p.b_eq.len() != pe) {
        return Err(Error::InvalidParameter("inconsistent equality dimensions".into()));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("QP needs at least one inequality".into()));
    }

    // Start at x = 0 (all callers use b_eq = 0 or none), unit slacks/multipliers.
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(pe);
    let mut lam = DVector::from_element(m, 1.0);
    let mut s = DVector::from_element(m, 1.0);
    for i in 0..m {
        let slack = p.b_in[i]; // b − A·0
        if slack > 1.0 {
            s[i] = slack;
        }
    }

    let tau = 0.995;
    let base_reg = 1e-13 * (1.0 + p.q.diagonal().amax());
    let dim = n + pe;
    let mut iterations = 0;

    // Track the iterate with the smallest measured optimality error; late
    // iterations can degrade numerically once the scaling matrix blows up.
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
    let mut stale = 0usize;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let r = residuals(p, &x, &y, &lam, &s);
        let mu = s.dot(&lam) / m as f64;
        let comp = (0..m).fold(0.0f64, |acc, i| acc.max((s[i] * lam[i]).abs()));
        let kkt = inf_norm(&r.dual).max(inf_norm(&r.eq)).max(inf_norm(&r.ineq)).max(comp);

        let measured = kkt_residual(p, &x, &y, &lam);
        if best.as_ref().map_or(true, |(b, ..)| measured < *b) {
            best = Some((measured, x.clone(), y.clone(), lam.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > 15 {
                break; // no progress for a while; settle for the best seen
            }
        }
        if kkt <= opts.tol {
            break;
        }

        // Base matrix  Q + AᵀDA  with D = Λ/S, the scaling ratios clamped so
        // a collapsed slack cannot inject infinities.
        let mut h = p.q.clone();
        for i in 0..m {
            let d = (lam[i] / s[i]).clamp(0.0, 1e16);
            let row = p.a_in.row(i);
            for a in 0..n {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..n {
                    let rb = row[b];
                    if rb != 0.0 {
                        h[(a, b)] += d * ra * rb;
                    }
                }
            }
        }

        // One factorization serves both predictor and corrector. When the
        // endgame drives the system numerically singular, escalate the
        // diagonal regularization and refactor instead of giving up.
        let mut step: Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        let mut reg = base_reg;
        'attempts: for _ in 0..5 {
            let mut kkt_mat = DMatrix::zeros(dim, dim);
            kkt_mat.view_mut((0, 0), (n, n)).copy_from(&h);
            for a in 0..n {
                kkt_mat[(a, a)] += reg;
            }
            if pe > 0 {
                kkt_mat.view_mut((n, 0), (pe, n)).copy_from(&p.a_eq);
                kkt_mat.view_mut((0, n), (n, pe)).copy_from(&p.a_eq.transpose());
                for a in 0..pe {
                    kkt_mat[(n + a, n + a)] = -reg;
                }
            }
            let lu = kkt_mat.lu();

            let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
            let solve_direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
                // rc is the complementarity residual target: SΛ1 − σμ1 (+ corrector).
                let mut rhs = DVector::zeros(dim);
                let mut top = -r.dual.clone();
                // − A_inᵀ S⁻¹ (Λ r_i − rc)
                let mut w = DVector::zeros(m);
                for i in 0..m {
                    w[i] = (lam[i] * r.ineq[i] - rc[i]) / s[i];
                }
                top -= p.a_in.transpose() * &w;
                rhs.rows_mut(0, n).copy_from(&top);
                if pe > 0 {
                    rhs.rows_mut(n, pe).copy_from(&(-r.eq.clone()));
                }
                let sol = lu.solve(&rhs)?;
                let dx = sol.rows(0, n).into_owned();
                let dy = if pe > 0 { sol.rows(n, pe).into_owned() } else { DVector::zeros(0) };
                let a_dx = &p.a_in * &dx;
                let mut dlam = DVector::zeros(m);
                let mut ds = DVector::zeros(m);
                for i in 0..m {
                    dlam[i] = (-rc[i] + lam[i] * r.ineq[i] + lam[i] * a_dx[i]) / s[i];
                    ds[i] = -r.ineq[i] - a_dx[i];
                }
                (finite(&dx) && finite(&dy) && finite(&dlam) && finite(&ds))
                    .then_some((dx, dy, dlam, ds))
            };

            // Predictor: aim at complementarity 0.
            let rc_aff = DVector::from_fn(m, |i, _| s[i] * lam[i]);
            let Some((_dx_a, _dy_a, dlam_a, ds_a)) = solve_direction(&rc_aff) else {
                reg *= 1e3;
                continue 'attempts;
            };
            let ap = max_step(&s, &ds_a, 1.0);
            let ad = max_step(&lam, &dlam_a, 1.0);
            let a_aff = ap.min(ad);
            let mut mu_aff = 0.0;
            for i in 0..m {
                mu_aff += (s[i] + a_aff * ds_a[i]) * (lam[i] + a_aff * dlam_a[i]);
            }
            mu_aff /= m as f64;
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };

            // Corrector with centering.
            let rc = DVector::from_fn(m, |i, _| s[i] * lam[i] + ds_a[i] * dlam_a[i] - sigma * mu);
            match solve_direction(&rc) {
                Some(dir) => {
                    step = Some(dir);
                    break 'attempts;
                }
                None => {
                    reg *= 1e3;
                    continue 'attempts;
                }
            }
        }

        let Some((dx, dy, dlam, ds)) = step else {
            break; // unsolvable even with heavy damping; keep the best iterate
        };
        let alpha_p = tau * max_step(&s, &ds, 1.0);
        let alpha_d = tau * max_step(&lam, &dlam, 1.0);
        if alpha_p < 1e-12 && alpha_d < 1e-12 {
            break; // stalled; final residual check below decides
        }
        x += alpha_p * &dx;
        s += alpha_p * &ds;
        if pe > 0 {
            y += alpha_d * &dy;
        }
        lam += alpha_d * &dlam;
    }

    let final_measured = kkt_residual(p, &x, &y, &lam);
    let (kkt, x, y, lam) = match best {
        Some((b, bx, by, blam)) if b < final_measured => (b, bx, by, blam),
        _ => (final_measured, x, y, lam),
    };
    if kkt > opts.accept {
        return Err(Error::NoConvergence(format!(
            "interior-point method stopped at KKT residual {kkt:.3e} after {iterations} iterations (acceptable {:.3e})",
            opts.accept
        )));
    }
    let objective = 0.5 * x.dot(&(&p.q * &x)) + p.c.dot(&x);
    Ok(QpSolution { x, eq_mult: y, in_mult: lam, objective, iterations, kkt_residual: kkt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn solve_box(q: DMatrix<f64>, c: DVector<f64>, lo: f64, hi: f64) -> QpSolution {
        let n = q.nrows();
        let mut a_in = DMatrix::zeros(2 * n, n);
        let mut b_in = DVector::zeros(2 * n);
        for i in 0..n {
            a_in[(i, i)] = -1.0;
            b_in[i] = -lo;
            a_in[(n + i, i)] = 1.0;
            b_in[n + i] = hi;
        }
        let p = QpProblem {
            q,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in,
            b_in,
        };
        solve(&p, &QpOptions::default()).unwrap()
    }

    #[test]
    fn scalar_with_active_bound() {
        // min ½x² − x s.t. x ≤ 0.5 → x = 0.5, multiplier 0.5
        let p = QpProblem {
            q: DMatrix::from_element(1, 1, 1.0),
            c: DVector::from_element(1, -1.0),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::from_element(1, 1, 1.0),
            b_in: DVector::from_element(1, 0.5),
        };
        let sol = solve(&p, &QpOptions::default()).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-8);
        assert!((sol.in_mult[0] - 0.5).abs() < 1e-7);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn equality_constrained_projection() {
        // min ½(x² + y²) s.t. x + y = 2 → (1, 1)
        let p = QpProblem {
            q: DMatrix::identity(2, 2),
            c: DVector::zeros(2),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_element(1, 2.0),
            a_in: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            b_in: DVector::from_element(2, 100.0),
        };
        let sol = solve(&p, &QpOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!((sol.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn box_projection_clamps() {
        // min ½‖x − a‖² over [0,1]³ → clamp(a)
        let a = [1.7, -0.3, 0.4];
        let sol = solve_box(
            DMatrix::identity(3, 3),
            DVector::from_row_slice(&[-a[0], -a[1], -a[2]]),
            0.0,
            1.0,
        );
        let expect = [1.0, 0.0, 0.4];
        for i in 0..3 {
            assert!((sol.x[i] - expect[i]).abs() < 1e-8, "coord {i}");
        }
    }

    #[test]
    fn random_box_qp_matches_projected_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..8 {
            let n = rng.gen_range(2..6);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
            let sol = solve_box(q.clone(), c.clone(), 0.0, 1.0);

            // slow projected-gradient oracle
            let lip = q.norm() + 1.0;
            let mut x = DVector::from_element(n, 0.5);
            for _ in 0..200_000 {
                let g = &q * &x + &c;
                x -= g / lip;
                for i in 0..n {
                    x[i] = x[i].clamp(0.0, 1.0);
                }
            }
            let obj_pg = 0.5 * x.dot(&(&q * &x)) + c.dot(&x);
            assert!(
                sol.objective <= obj_pg + 1e-6,
                "trial {trial}: ipm {} vs pg {}",
                sol.objective,
                obj_pg
            );
            assert!((sol.objective - obj_pg).abs() < 1e-5, "trial {trial}");
        }
    }
}
