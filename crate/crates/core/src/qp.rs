//! Dense convex QP solver (primal-dual interior point, Mehrotra
//! predictor-corrector).
//!
//! Solves `min 1/2 z'Hz + g'z` subject to `lower <= z <= upper` and sparse
//! inequality rows `a'z <= b`. Box constraints are kept separate so that their
//! contribution to the normal equations stays diagonal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn dot(&self, z: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * z[i]).sum()
    }

    fn negated(&self) -> Self {
        Self { idx: self.idx.clone(), val: self.val.iter().map(|v| -v).collect(), rhs: -self.rhs }
    }
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<SparseRow>,
}

impl Qp {
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self { hessian, gradient, lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n], rows: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.gradient.len()
    }

    /// Adds `lo <= sum(val * z[idx]) <= hi`; infinite sides are skipped.
    pub fn add_range(&mut self, idx: Vec<usize>, val: Vec<f64>, lo: f64, hi: f64) {
        let row = SparseRow { idx, val, rhs: hi };
        if lo.is_finite() {
            let mut neg = row.negated();
            neg.rhs = -lo;
            self.rows.push(neg);
        }
        if hi.is_finite() {
            self.rows.push(row);
        }
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    /// Largest violation of any constraint at `z`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..z.len() {
            v = v.max(self.lower[i] - z[i]).max(z[i] - self.upper[i]);
        }
        for r in &self.rows {
            v = v.max(r.dot(z) - r.rhs);
        }
        v.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub status: QpStatus,
}

/// One inequality `sign * z[var] <= rhs` coming from the variable box.
#[derive(Clone, Copy)]
struct BoxRow {
    var: usize,
    sign: f64,
    rhs: f64,
}

struct Problem<'a> {
    qp: &'a Qp,
    boxes: Vec<BoxRow>,
    rows: Vec<SparseRow>,
}

impl Problem<'_> {
    fn m(&self) -> usize {
        self.boxes.len() + self.rows.len()
    }

    /// `G z`.
    fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for (k, b) in self.boxes.iter().enumerate() {
            out[k] = b.sign * z[b.var];
        }
        let off = self.boxes.len();
        for (k, r) in self.rows.iter().enumerate() {
            out[off + k] = r.dot(z);
        }
        out
    }

    /// `G' y`.
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.qp.n_vars());
        for (k, b) in self.boxes.iter().enumerate() {
            out[b.var] += b.sign * y[k];
        }
        let off = self.boxes.len();
        for (k, r) in self.rows.iter().enumerate() {
            let yk = y[off + k];
            for (&i, &v) in r.idx.iter().zip(&r.val) {
                out[i] += v * yk;
            }
        }
        out
    }

    fn rhs(&self) -> DVector<f64> {
        let off = self.boxes.len();
        DVector::from_fn(self.m(), |k, _| if k < off { self.boxes[k].rhs } else { self.rows[k - off].rhs })
    }

    /// `H + G' diag(d) G`.
    fn normal_matrix(&self, d: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.qp.hessian.clone();
        for (k, b) in self.boxes.iter().enumerate() {
            m[(b.var, b.var)] += d[k];
        }
        let off = self.boxes.len();
        for (k, r) in self.rows.iter().enumerate() {
            let dk = d[off + k];
            for (&i, &vi) in r.idx.iter().zip(&r.val) {
                let s = dk * vi;
                for (&j, &vj) in r.idx.iter().zip(&r.val) {
                    m[(i, j)] += s * vj;
                }
            }
        }
        m
    }
}

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut a: f64 = 1.0;
    for (xi, di) in x.iter().zip(dx.iter()) {
        if *di < 0.0 {
            a = a.min(-xi / di);
        }
    }
    a
}

fn factor(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let scale = m.diagonal().amax().max(1.0);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut mm = m.clone();
        if reg > 0.0 {
            for i in 0..n {
                mm[(i, i)] += reg;
            }
        }
        if let Some(c) = mm.cholesky() {
            return Ok(c);
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    Err(Error::Infeasible)
}

pub fn solve_qp(qp: &Qp, settings: &QpSettings) -> Result<QpSolution> {
    let n = qp.n_vars();
    if qp.hessian.nrows() != n || qp.hessian.ncols() != n || qp.lower.len() != n || qp.upper.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: qp.hessian.nrows() });
    }
    let mut boxes = Vec::new();
    for i in 0..n {
        if qp.lower[i] > qp.upper[i] {
            return Err(Error::InfeasibleBounds { what: format!("variable {i}") });
        }
        if qp.upper[i].is_finite() {
            boxes.push(BoxRow { var: i, sign: 1.0, rhs: qp.upper[i] });
        }
        if qp.lower[i].is_finite() {
            boxes.push(BoxRow { var: i, sign: -1.0, rhs: -qp.lower[i] });
        }
    }
    let prob = Problem { qp, boxes, rows: qp.rows.clone() };
    let m = prob.m();
    let h = prob.rhs();
    let tol = settings.tolerance;

    let mut z = DVector::from_fn(n, |i, _| {
        let (lo, hi) = (qp.lower[i], qp.upper[i]);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo.max(0.0),
            (false, true) => hi.min(0.0),
            _ => 0.0,
        }
    });
    if m == 0 {
        let chol = factor(qp.hessian.clone())?;
        z = chol.solve(&(-&qp.gradient));
        let r = &qp.hessian * &z + &qp.gradient;
        return Ok(QpSolution {
            objective: qp.objective(&z),
            z,
            iterations: 1,
            primal_residual: 0.0,
            dual_residual: r.amax(),
            status: QpStatus::Solved,
        });
    }
    let gz = prob.apply(&z);
    let mut s = DVector::from_fn(m, |k, _| (h[k] - gz[k]).max(1.0));
    let mut lam = DVector::from_element(m, 1.0);

    let g_scale = 1.0 + qp.gradient.amax();
    let h_scale = 1.0 + h.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs()));
    let mut best: Option<(f64, DVector<f64>, f64, f64)> = None;

    for iter in 1..=settings.max_iterations {
        let gz = prob.apply(&z);
        let r_d = &qp.hessian * &z + &qp.gradient + prob.apply_t(&lam);
        let r_p = &gz + &s - &h;
        let mu = s.dot(&lam) / m as f64;
        let rd_n = r_d.amax();
        let rp_n = r_p.amax();
        let merit = rd_n / g_scale + rp_n / h_scale + mu;
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, z.clone(), rp_n, rd_n));
        }
        if rd_n <= tol * g_scale && rp_n <= tol * h_scale && mu <= tol {
            return Ok(QpSolution {
                objective: qp.objective(&z),
                z,
                iterations: iter,
                primal_residual: rp_n,
                dual_residual: rd_n,
                status: QpStatus::Solved,
            });
        }
        if lam.amax() > 1e14 || s.amax() > 1e14 {
            return Err(Error::Infeasible);
        }

        let d = lam.component_div(&s);
        let chol = factor(prob.normal_matrix(&d))?;
        let solve_dir = |r_c: &DVector<f64>| {
            // dz from the reduced system, then ds and dlam.
            let t = (r_c - lam.component_mul(&r_p)).component_div(&s);
            let rhs = -&r_d + prob.apply_t(&t);
            let dz = chol.solve(&rhs);
            let ds = -&r_p - prob.apply(&dz);
            let dlam = (-r_c - lam.component_mul(&ds)).component_div(&s);
            (dz, ds, dlam)
        };

        // Predictor.
        let r_c = s.component_mul(&lam);
        let (_, ds_a, dl_a) = solve_dir(&r_c);
        let a_p = max_step(&s, &ds_a);
        let a_d = max_step(&lam, &dl_a);
        let mu_aff = (&s + a_p * &ds_a).dot(&(&lam + a_d * &dl_a)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let r_c = s.component_mul(&lam) + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
        let (dz, ds, dl) = solve_dir(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        z += alpha * dz;
        s += alpha * ds;
        lam += alpha * dl;
        for k in 0..m {
            s[k] = s[k].max(1e-300);
            lam[k] = lam[k].max(1e-300);
        }
    }

    let (_, z, rp, rd) = best.expect("at least one iteration");
    if rp > 1e-6 * h_scale {
        return Err(Error::Infeasible);
    }
    Ok(QpSolution {
        objective: qp.objective(&z),
        z,
        iterations: settings.max_iterations,
        primal_residual: rp,
        dual_residual: rd,
        status: QpStatus::MaxIterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(lo: f64, hi: f64) -> Qp {
        let mut qp = Qp::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -1.0));
        qp.lower[0] = lo;
        qp.upper[0] = hi;
        qp
    }

    #[test]
    fn interior_optimum() {
        let s = solve_qp(&scalar(0.0, 2.0), &QpSettings::default()).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-8);
        assert_eq!(s.status, QpStatus::Solved);
    }

    #[test]
    fn active_bound() {
        let s = solve_qp(&scalar(0.0, 0.5), &QpSettings::default()).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn unconstrained() {
        let qp = Qp::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])), DVector::from_vec(vec![-2.0, 4.0]));
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-12 && (s.z[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn general_row_active() {
        // min (x-1)^2 + (y-1)^2 s.t. x + y <= 1  ->  (0.5, 0.5)
        let mut qp = Qp::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-2.0, -2.0]));
        qp.add_range(vec![0, 1], vec![1.0, 1.0], f64::NEG_INFINITY, 1.0);
        let s = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-8 && (s.z[1] - 0.5).abs() < 1e-8);
        assert!(qp.max_violation(&s.z) < 1e-8);
    }

    #[test]
    fn infeasible_rows() {
        let mut qp = Qp::new(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.add_range(vec![0], vec![1.0], 2.0, f64::INFINITY);
        qp.add_range(vec![0], vec![1.0], f64::NEG_INFINITY, 1.0);
        assert!(solve_qp(&qp, &QpSettings::default()).is_err());
    }

    #[test]
    fn inverted_box_is_rejected() {
        let qp = scalar(1.0, 0.0);
        assert!(matches!(solve_qp(&qp, &QpSettings::default()), Err(Error::InfeasibleBounds { .. })));
    }
}
