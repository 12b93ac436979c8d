//! Small dense linear programs and a two-phase tableau simplex using Bland's
//! rule, which makes pivoting deterministic and cycle-free.

/// `minimize cost·x + constant` subject to `a_ub x <= b_ub`, `a_eq x = b_eq`
/// and `lower <= x <= upper`. Lower bounds must be finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub constant: f64,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Rows of `a_ub` that may be relaxed with a penalized slack.
    pub elastic_rows: Vec<usize>,
}

impl LinearProgram {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.constant + dot(&self.cost, x)
    }

    /// Largest violation of any constraint or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (row, b) in self.a_ub.iter().zip(&self.b_ub) {
            worst = worst.max(dot(row, x) - b);
        }
        for (row, b) in self.a_eq.iter().zip(&self.b_eq) {
            worst = worst.max((dot(row, x) - b).abs());
        }
        for (j, &xj) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - xj).max(xj - self.upper[j]);
        }
        worst
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

pub trait LpSolver {
    fn solve(&self, lp: &LinearProgram) -> LpSolution;
}

#[derive(Debug, Clone, Copy)]
pub struct DenseSimplex {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for DenseSimplex {
    fn default() -> Self {
        DenseSimplex {
            tolerance: 1e-9,
            max_iter: 100_000,
        }
    }
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    /// Reduced costs, last entry holds minus the objective value.
    obj: Vec<f64>,
    basis: Vec<usize>,
    n_cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    fn set_objective(&mut self, cost: &[f64]) {
        self.obj = cost.to_vec();
        self.obj.push(0.0);
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = self.obj[b];
            if cb != 0.0 {
                for (v, rv) in self.obj.iter_mut().zip(&self.rows[r]) {
                    *v -= cb * rv;
                }
            }
        }
    }

    /// Bland's rule iterations; `allowed` masks columns that may enter.
    fn run(
        &mut self,
        allowed: &[bool],
        tol: f64,
        max_iter: usize,
        iterations: &mut usize,
    ) -> LpStatus {
        let rhs = self.n_cols;
        loop {
            let entering = (0..self.n_cols).find(|&j| allowed[j] && self.obj[j] < -tol);
            let Some(c) = entering else {
                return LpStatus::Optimal;
            };
            let mut leave: Option<(usize, f64)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                let a = row[c];
                if a <= tol {
                    continue;
                }
                let ratio = row[rhs] / a;
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((br, best)) => {
                        if ratio < best - tol
                            || (ratio <= best + tol && self.basis[r] < self.basis[br])
                        {
                            Some((r, ratio))
                        } else {
                            Some((br, best))
                        }
                    }
                };
            }
            let Some((r, _)) = leave else {
                return LpStatus::Unbounded;
            };
            if *iterations >= max_iter {
                return LpStatus::IterationLimit;
            }
            *iterations += 1;
            self.pivot(r, c);
        }
    }
}

/// Drop `<=` rows that no point of the bounding box can violate.
fn presolve_rows(a: &[Vec<f64>], b: &[f64], lower: &[f64], upper: &[f64], tol: f64) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (row, &rhs))| {
            let max: f64 = row
                .iter()
                .enumerate()
                .map(|(j, &aj)| {
                    if aj > 0.0 {
                        aj * upper[j]
                    } else if aj < 0.0 {
                        aj * lower[j]
                    } else {
                        0.0
                    }
                })
                .sum();
            !(max <= rhs - tol)
        })
        .map(|(i, _)| i)
        .collect()
}

impl LpSolver for DenseSimplex {
    fn solve(&self, lp: &LinearProgram) -> LpSolution {
        let n = lp.n_vars();
        let tol = self.tolerance;
        assert_eq!(lp.lower.len(), n);
        assert_eq!(lp.upper.len(), n);
        assert!(
            lp.lower.iter().all(|l| l.is_finite()),
            "lower bounds must be finite"
        );
        let infeasible = |iterations| LpSolution {
            status: LpStatus::Infeasible,
            x: lp.lower.clone(),
            objective: f64::NAN,
            iterations,
        };
        if lp.lower.iter().zip(&lp.upper).any(|(l, u)| l > u) {
            return infeasible(0);
        }

        // Shift to y = x - lower >= 0 and collect rows as (coeffs, rhs, is_equality).
        let width: Vec<f64> = lp.upper.iter().zip(&lp.lower).map(|(u, l)| u - l).collect();
        let zeros = vec![0.0; n];
        let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
        for i in presolve_rows(&lp.a_ub, &lp.b_ub, &lp.lower, &lp.upper, tol) {
            let row = &lp.a_ub[i];
            rows.push((row.clone(), lp.b_ub[i] - dot(row, &lp.lower), false));
        }
        for (j, w) in width.iter().enumerate() {
            if w.is_finite() {
                let mut row = zeros.clone();
                row[j] = 1.0;
                rows.push((row, *w, false));
            }
        }
        for (row, b) in lp.a_eq.iter().zip(&lp.b_eq) {
            rows.push((row.clone(), b - dot(row, &lp.lower), true));
        }

        // Columns: n structural, one slack per inequality, one artificial per
        // row that lacks a feasible slack.
        let m = rows.len();
        let n_slack = rows.iter().filter(|r| !r.2).count();
        let needs_art: Vec<bool> = rows.iter().map(|(_, rhs, eq)| *eq || *rhs < 0.0).collect();
        let n_art = needs_art.iter().filter(|&&x| x).count();
        let n_cols = n + n_slack + n_art;
        let mut tab = Tableau {
            rows: Vec::with_capacity(m),
            obj: Vec::new(),
            basis: vec![0; m],
            n_cols,
        };
        let mut slack_col = n;
        let mut art_col = n + n_slack;
        for (r, (coeffs, rhs, eq)) in rows.iter().enumerate() {
            let mut row = vec![0.0; n_cols + 1];
            row[..n].copy_from_slice(coeffs);
            row[n_cols] = *rhs;
            let mut basic = None;
            if !eq {
                row[slack_col] = 1.0;
                if *rhs >= 0.0 {
                    basic = Some(slack_col);
                }
                slack_col += 1;
            }
            if *rhs < 0.0 {
                for v in row.iter_mut() {
                    *v = -*v;
                }
            }
            if needs_art[r] {
                row[art_col] = 1.0;
                basic = Some(art_col);
                art_col += 1;
            }
            tab.basis[r] = basic.expect("every row has a basic column");
            tab.rows.push(row);
        }

        let mut iterations = 0;
        let is_art = |j: usize| j >= n + n_slack;
        if n_art > 0 {
            let mut phase1 = vec![0.0; n_cols];
            for v in phase1.iter_mut().skip(n + n_slack) {
                *v = 1.0;
            }
            tab.set_objective(&phase1);
            let all = vec![true; n_cols];
            match tab.run(&all, tol, self.max_iter, &mut iterations) {
                LpStatus::Optimal => {}
                LpStatus::IterationLimit => {
                    return LpSolution {
                        status: LpStatus::IterationLimit,
                        x: lp.lower.clone(),
                        objective: f64::NAN,
                        iterations,
                    }
                }
                _ => return infeasible(iterations),
            }
            let scale = 1.0 + rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
            if -tab.obj[n_cols] > tol * scale {
                return infeasible(iterations);
            }
            // Drive zero-level artificials out of the basis; drop redundant rows.
            let mut r = 0;
            while r < tab.rows.len() {
                if is_art(tab.basis[r]) {
                    let col = (0..n + n_slack).find(|&j| tab.rows[r][j].abs() > tol);
                    match col {
                        Some(c) => {
                            tab.pivot(r, c);
                            r += 1;
                        }
                        None => {
                            tab.rows.remove(r);
                            tab.basis.remove(r);
                        }
                    }
                } else {
                    r += 1;
                }
            }
        }

        let mut cost = vec![0.0; n_cols];
        cost[..n].copy_from_slice(&lp.cost);
        tab.set_objective(&cost);
        let allowed: Vec<bool> = (0..n_cols).map(|j| !is_art(j)).collect();
        let status = tab.run(&allowed, tol, self.max_iter, &mut iterations);

        let mut y = vec![0.0; n];
        for (r, &b) in tab.basis.iter().enumerate() {
            if b < n {
                y[b] = tab.rows[r][n_cols];
            }
        }
        // Clamp round-off back into the box.
        let x: Vec<f64> = (0..n)
            .map(|j| (y[j] + lp.lower[j]).clamp(lp.lower[j], lp.upper[j]))
            .collect();
        let objective = lp.objective(&x);
        LpSolution {
            status,
            x,
            objective,
            iterations,
        }
    }
}

/// Solution of a possibly relaxed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticSolution {
    pub solution: LpSolution,
    pub relaxed: bool,
    /// Slack added to each elastic row (empty when not relaxed).
    pub slacks: Vec<f64>,
}

/// Solve `lp`; if it is infeasible and has elastic rows, re-solve with one
/// non-negative slack per elastic row penalized at `penalty` per unit.
pub fn solve_elastic(solver: &dyn LpSolver, lp: &LinearProgram, penalty: f64) -> ElasticSolution {
    let first = solver.solve(lp);
    if first.status != LpStatus::Infeasible || lp.elastic_rows.is_empty() {
        return ElasticSolution {
            solution: first,
            relaxed: false,
            slacks: Vec::new(),
        };
    }
    let n = lp.n_vars();
    let k = lp.elastic_rows.len();
    let mut relaxed = lp.clone();
    relaxed.cost.extend(std::iter::repeat_n(penalty, k));
    relaxed.lower.extend(std::iter::repeat_n(0.0, k));
    relaxed.upper.extend(std::iter::repeat_n(f64::INFINITY, k));
    for row in relaxed.a_ub.iter_mut().chain(relaxed.a_eq.iter_mut()) {
        row.extend(std::iter::repeat_n(0.0, k));
    }
    for (s, &r) in lp.elastic_rows.iter().enumerate() {
        relaxed.a_ub[r][n + s] = -1.0;
    }
    let mut sol = solver.solve(&relaxed);
    let slacks = sol.x.split_off(n);
    sol.objective = lp.objective(&sol.x);
    ElasticSolution {
        solution: sol,
        relaxed: true,
        slacks,
    }
}
