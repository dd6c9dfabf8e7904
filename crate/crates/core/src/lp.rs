//! Dense linear programming.
//!
//! Two solvers live here:
//! - a two-phase revised simplex for standard-form problems
//!   (`min c'x  s.t.  A x = b, x >= 0`), used for feasibility checks,
//!   redundancy elimination and small 2-D optimizations;
//! - a specialized three-row solver for convex-combination ("envelope") LPs
//!   of the form `min J'lambda  s.t.  sum lambda_d x_d = x, sum lambda = 1,
//!   lambda >= 0`, with warm starts for repeated queries.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite coefficient in LP data")]
    NonFinite,
    #[error("simplex iteration limit exceeded")]
    IterationLimit,
}

/// Optimal solution of a standard-form LP.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub obj: f64,
    /// Row duals at the optimum.
    pub dual: Vec<f64>,
    pub basis: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    /// Primal infeasible; `farkas` are phase-1 row duals certifying
    /// `y'A <= 0, y'b > 0`.
    Infeasible { farkas: Vec<f64> },
    Unbounded,
}

const FEAS_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;

struct Simplex {
    m: usize,
    n: usize, // structural columns (artificials are n..n+m)
    a: Vec<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    pivots_since_refactor: usize,
}

impl Simplex {
    fn new(a: &[f64], b: &[f64], m: usize, n: usize) -> Self {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        // Flip rows so the artificial start basis is feasible.
        for i in 0..m {
            if b[i] < 0.0 {
                b[i] = -b[i];
                for j in 0..n {
                    a[i * n + j] = -a[i * n + j];
                }
            }
        }
        let basis: Vec<usize> = (n..n + m).collect();
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let xb = b.clone();
        Simplex {
            m,
            n,
            a,
            b,
            basis,
            binv,
            xb,
            pivots_since_refactor: 0,
        }
    }

    #[inline]
    fn column(&self, j: usize, out: &mut [f64]) {
        if j >= self.n {
            // artificial: identity column
            out.fill(0.0);
            out[j - self.n] = 1.0;
        } else {
            for i in 0..self.m {
                out[i] = self.a[i * self.n + j];
            }
        }
    }

    fn duals(&self, costs: &dyn Fn(usize) -> f64) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for i in 0..m {
            let cb = costs(self.basis[i]);
            if cb != 0.0 {
                for j in 0..m {
                    y[j] += cb * self.binv[i * m + j];
                }
            }
        }
        y
    }

    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        // Rebuild Binv by Gauss-Jordan on the basis matrix.
        let mut bmat = vec![0.0; m * m];
        let mut col = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for i in 0..m {
                bmat[i * m + k] = col[i];
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for k in 0..m {
            let mut pk = k;
            let mut best = bmat[k * m + k].abs();
            for i in (k + 1)..m {
                let v = bmat[i * m + k].abs();
                if v > best {
                    best = v;
                    pk = i;
                }
            }
            if best < 1e-280 {
                return Err(LpError::Dimension("singular basis".into()));
            }
            if pk != k {
                for j in 0..m {
                    bmat.swap(k * m + j, pk * m + j);
                    inv.swap(k * m + j, pk * m + j);
                }
            }
            let d = bmat[k * m + k];
            for j in 0..m {
                bmat[k * m + j] /= d;
                inv[k * m + j] /= d;
            }
            for i in 0..m {
                if i != k {
                    let f = bmat[i * m + k];
                    if f != 0.0 {
                        for j in 0..m {
                            bmat[i * m + j] -= f * bmat[k * m + j];
                            inv[i * m + j] -= f * inv[k * m + j];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        // Recompute basic values.
        let mut xb = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += self.binv[i * m + j] * self.b[j];
            }
            xb[i] = acc;
        }
        self.xb = xb;
        self.pivots_since_refactor = 0;
        Ok(())
    }

    /// One simplex phase. `costs` maps a column index (including artificials)
    /// to its cost; `allow` filters entering candidates.
    fn run_phase(
        &mut self,
        costs: &dyn Fn(usize) -> f64,
        allow: &dyn Fn(usize) -> bool,
        phase2_artificial_guard: bool,
    ) -> Result<PhaseEnd, LpError> {
        let m = self.m;
        let max_iters = 200 * (self.n + m + 10);
        let mut col = vec![0.0; m];
        let mut bland = false;
        let mut stall = 0usize;
        let mut last_obj = f64::INFINITY;
        for _ in 0..max_iters {
            let y = self.duals(costs);
            // Pricing.
            let mut enter: Option<usize> = None;
            let mut best_rc = -COST_TOL;
            'price: for j in 0..self.n {
                if !allow(j) || self.basis.contains(&j) {
                    continue;
                }
                let mut rc = costs(j);
                for i in 0..m {
                    rc -= y[i] * self.a[i * self.n + j];
                }
                if rc < best_rc {
                    enter = Some(j);
                    if bland {
                        break 'price;
                    }
                    best_rc = rc;
                }
            }
            let Some(e) = enter else {
                return Ok(PhaseEnd::Optimal);
            };
            // Direction d = Binv * A_e.
            self.column(e, &mut col);
            let mut d = vec![0.0; m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += self.binv[i * m + j] * col[j];
                }
                d[i] = acc;
            }
            // Ratio test.
            let mut leave: Option<usize> = None;
            let mut theta = f64::INFINITY;
            for i in 0..m {
                let di = d[i];
                let guard = phase2_artificial_guard
                    && self.basis[i] >= self.n
                    && di.abs() > PIVOT_TOL
                    && self.xb[i] <= FEAS_TOL;
                if guard {
                    // Keep artificials pinned at zero.
                    leave = Some(i);
                    theta = 0.0;
                    break;
                }
                if di > PIVOT_TOL {
                    let r = self.xb[i].max(0.0) / di;
                    if r < theta - 1e-12
                        || (r < theta + 1e-12
                            && leave.is_some_and(|l| self.basis[i] < self.basis[l]))
                    {
                        theta = r;
                        leave = Some(i);
                    }
                }
            }
            let Some(l) = leave else {
                return Ok(PhaseEnd::Unbounded);
            };
            // Pivot.
            let dl = d[l];
            for i in 0..m {
                if i != l {
                    self.xb[i] -= theta * d[i];
                }
            }
            self.xb[l] = theta;
            self.basis[l] = e;
            let inv_dl = 1.0 / dl;
            for j in 0..m {
                self.binv[l * m + j] *= inv_dl;
            }
            for i in 0..m {
                if i != l && d[i] != 0.0 {
                    let f = d[i];
                    for j in 0..m {
                        self.binv[i * m + j] -= f * self.binv[l * m + j];
                    }
                }
            }
            self.pivots_since_refactor += 1;
            if self.pivots_since_refactor >= 120 {
                self.refactor()?;
            }
            // Cycling guard: switch to Bland's rule on long stalls.
            let obj = self.objective(costs);
            if obj < last_obj - 1e-12 {
                stall = 0;
                last_obj = obj;
            } else {
                stall += 1;
                if stall > 2 * (m + 16) {
                    bland = true;
                }
            }
        }
        Err(LpError::IterationLimit)
    }

    fn objective(&self, costs: &dyn Fn(usize) -> f64) -> f64 {
        self.basis
            .iter()
            .zip(&self.xb)
            .map(|(&j, &v)| costs(j) * v)
            .sum()
    }

    fn extract(&self, costs: &dyn Fn(usize) -> f64) -> LpSolution {
        let mut x = vec![0.0; self.n];
        for (i, &j) in self.basis.iter().enumerate() {
            if j < self.n {
                x[j] = self.xb[i].max(0.0);
            }
        }
        LpSolution {
            obj: self.objective(costs),
            dual: self.duals(costs),
            basis: self.basis.clone(),
            x,
        }
    }
}

enum PhaseEnd {
    Optimal,
    Unbounded,
}

/// Solves `min c'x  s.t.  A x = b, x >= 0` with a two-phase revised simplex.
/// `a` is row-major `m`x`n`.
pub fn solve_standard(c: &[f64], a: &[f64], b: &[f64], m: usize, n: usize) -> Result<LpOutcome, LpError> {
    if c.len() != n || a.len() != m * n || b.len() != m {
        return Err(LpError::Dimension(format!(
            "c:{} a:{} b:{} vs m={m} n={n}",
            c.len(),
            a.len(),
            b.len()
        )));
    }
    if !c.iter().chain(a).chain(b).all(|v| v.is_finite()) {
        return Err(LpError::NonFinite);
    }
    if m == 0 {
        // Degenerate: feasible iff x = 0 works; min of c'x over x >= 0 is
        // 0 when c >= 0, unbounded otherwise.
        if c.iter().any(|&cj| cj < -COST_TOL) {
            return Ok(LpOutcome::Unbounded);
        }
        return Ok(LpOutcome::Optimal(LpSolution {
            x: vec![0.0; n],
            obj: 0.0,
            dual: vec![],
            basis: vec![],
        }));
    }
    let mut sx = Simplex::new(a, b, m, n);
    let nn = n;
    let phase1 = move |j: usize| if j >= nn { 1.0 } else { 0.0 };
    match sx.run_phase(&phase1, &|_| true, false)? {
        PhaseEnd::Unbounded => unreachable!("phase 1 objective is bounded below"),
        PhaseEnd::Optimal => {}
    }
    let p1_obj = sx.objective(&phase1);
    if p1_obj > 1e-7 {
        return Ok(LpOutcome::Infeasible {
            farkas: sx.duals(&phase1),
        });
    }
    let cc = c.to_vec();
    let phase2 = move |j: usize| if j < cc.len() { cc[j] } else { 0.0 };
    match sx.run_phase(&phase2, &|j| j < n, true)? {
        PhaseEnd::Unbounded => Ok(LpOutcome::Unbounded),
        PhaseEnd::Optimal => {
            // Rebuild the basis inverse once more so the reported solution is
            // free of multiplicative-update drift.
            sx.refactor()?;
            Ok(LpOutcome::Optimal(sx.extract(&phase2)))
        }
    }
}

/// Outcome of a 2-D linear maximization over halfplanes `a . x <= b`.
#[derive(Debug, Clone)]
pub enum Max2d {
    Infeasible,
    Unbounded,
    Value { max: f64, arg: [f64; 2] },
}

/// Maximizes `dir . x` over `{x in R^2 : rows[i].0 . x <= rows[i].1}`.
pub fn maximize_2d(dir: [f64; 2], rows: &[([f64; 2], f64)]) -> Result<Max2d, LpError> {
    let m = rows.len();
    // Variables: x = p - q (4 vars) plus one slack per row.
    let n = 4 + m;
    let mut a = vec![0.0; m * n];
    let mut b = vec![0.0; m];
    for (i, (ai, bi)) in rows.iter().enumerate() {
        a[i * n] = ai[0];
        a[i * n + 1] = -ai[0];
        a[i * n + 2] = ai[1];
        a[i * n + 3] = -ai[1];
        a[i * n + 4 + i] = 1.0;
        b[i] = *bi;
    }
    let c = {
        let mut c = vec![0.0; n];
        c[0] = -dir[0];
        c[1] = dir[0];
        c[2] = -dir[1];
        c[3] = dir[1];
        c
    };
    Ok(match solve_standard(&c, &a, &b, m, n)? {
        LpOutcome::Infeasible { .. } => Max2d::Infeasible,
        LpOutcome::Unbounded => Max2d::Unbounded,
        LpOutcome::Optimal(sol) => Max2d::Value {
            max: -sol.obj,
            arg: [sol.x[0] - sol.x[1], sol.x[2] - sol.x[3]],
        },
    })
}

/// Feasibility of `{x in R^2 : a . x <= b}`.
pub fn feasible_2d(rows: &[([f64; 2], f64)]) -> Result<bool, LpError> {
    Ok(!matches!(maximize_2d([0.0, 0.0], rows)?, Max2d::Infeasible))
}

// ---------------------------------------------------------------------------
// Envelope LP
// ---------------------------------------------------------------------------

/// Convex-combination LP over a fixed column set: `min cost'lambda` subject to
/// `sum lambda_d (s_d, v_d) = (s, v)`, `sum lambda_d = 1`, `lambda >= 0`.
///
/// Queries against the same columns reuse the optimal basis from a previous
/// solve; when only costs change the old basis stays primal feasible so a
/// warm solve typically prices once and exits.
#[derive(Debug, Clone)]
pub struct EnvelopeLp {
    s: Vec<f64>,
    v: Vec<f64>,
    cost: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum EnvelopeResult {
    Value {
        value: f64,
        /// Column indices of the optimal basis with their convex weights
        /// (degenerate slots carry weight zero).
        basis: [usize; 3],
        weights: [f64; 3],
    },
    /// The query point is outside the convex hull of the columns.
    Outside,
}

impl EnvelopeLp {
    pub fn new(s: Vec<f64>, v: Vec<f64>, cost: Vec<f64>) -> Self {
        debug_assert_eq!(s.len(), v.len());
        debug_assert_eq!(s.len(), cost.len());
        EnvelopeLp { s, v, cost }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    #[inline]
    fn col(&self, j: usize) -> [f64; 3] {
        [self.s[j], self.v[j], 1.0]
    }

    pub fn solve(&self, qs: f64, qv: f64, warm: Option<[usize; 3]>) -> Result<EnvelopeResult, LpError> {
        if self.s.is_empty() {
            return Ok(EnvelopeResult::Outside);
        }
        let b = [qs, qv, 1.0];
        let mut st = match warm.and_then(|w| EnvState::from_basis(self, w, b)) {
            Some(st) => st,
            None => match EnvState::phase1(self, b)? {
                Some(st) => st,
                None => return Ok(EnvelopeResult::Outside),
            },
        };
        st.optimize(self, |lp, j| lp.cost[j], false)?;
        st.refresh(self);
        let mut value = 0.0;
        let mut basis = [0usize; 3];
        let mut weights = [0.0f64; 3];
        for i in 0..3 {
            match st.basis[i] {
                EnvCol::Real(j) => {
                    let w = st.xb[i].max(0.0);
                    value += self.cost[j] * w;
                    basis[i] = j;
                    weights[i] = w;
                }
                EnvCol::Art(_) => {
                    // Degenerate artificial pinned at zero; substitute any
                    // basic real column (weight zero) for warm-start
                    // bookkeeping.
                    basis[i] = match st.basis.iter().find_map(|c| match c {
                        EnvCol::Real(j) => Some(*j),
                        _ => None,
                    }) {
                        Some(j) => j,
                        None => 0,
                    };
                    weights[i] = 0.0;
                }
            }
        }
        Ok(EnvelopeResult::Value {
            value,
            basis,
            weights,
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum EnvCol {
    Real(usize),
    Art(usize),
}

struct EnvState {
    basis: [EnvCol; 3],
    binv: [[f64; 3]; 3],
    xb: [f64; 3],
    b: [f64; 3],
    art_sign: [f64; 3],
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-250 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(inv)
}

impl EnvState {
    fn from_basis(lp: &EnvelopeLp, w: [usize; 3], b: [f64; 3]) -> Option<EnvState> {
        let n = lp.len();
        if w.iter().any(|&j| j >= n) || w[0] == w[1] || w[0] == w[2] || w[1] == w[2] {
            return None;
        }
        let mut bm = [[0.0; 3]; 3];
        for (k, &j) in w.iter().enumerate() {
            let col = lp.col(j);
            for i in 0..3 {
                bm[i][k] = col[i];
            }
        }
        let binv = invert3(&bm)?;
        let mut xb = [0.0; 3];
        for i in 0..3 {
            xb[i] = binv[i][0] * b[0] + binv[i][1] * b[1] + binv[i][2] * b[2];
        }
        if xb.iter().any(|&x| x < -1e-8) {
            return None;
        }
        Some(EnvState {
            basis: [EnvCol::Real(w[0]), EnvCol::Real(w[1]), EnvCol::Real(w[2])],
            binv,
            xb,
            b,
            art_sign: [1.0; 3],
        })
    }

    fn phase1(lp: &EnvelopeLp, b: [f64; 3]) -> Result<Option<EnvState>, LpError> {
        let mut st = EnvState {
            basis: [EnvCol::Art(0), EnvCol::Art(1), EnvCol::Art(2)],
            binv: [[0.0; 3]; 3],
            xb: [0.0; 3],
            b,
            art_sign: [1.0; 3],
        };
        for i in 0..3 {
            let sgn = if b[i] < 0.0 { -1.0 } else { 1.0 };
            st.binv[i][i] = sgn;
            st.xb[i] = b[i].abs();
            st.art_sign[i] = sgn;
        }
        st.optimize(lp, |_, _| 0.0, true)?;
        let resid: f64 = st
            .basis
            .iter()
            .zip(&st.xb)
            .filter(|(c, _)| matches!(c, EnvCol::Art(_)))
            .map(|(_, &x)| x.max(0.0))
            .sum();
        if resid > 1e-7 {
            return Ok(None);
        }
        Ok(Some(st))
    }

    /// Rebuilds the basis inverse and basic values from scratch, removing
    /// the drift the multiplicative pivot updates accumulate.
    fn refresh(&mut self, lp: &EnvelopeLp) {
        let mut bm = [[0.0; 3]; 3];
        for (k, c) in self.basis.iter().enumerate() {
            let col = match c {
                EnvCol::Real(j) => lp.col(*j),
                EnvCol::Art(i) => {
                    let mut e = [0.0; 3];
                    e[*i] = self.art_sign[*i];
                    e
                }
            };
            for i in 0..3 {
                bm[i][k] = col[i];
            }
        }
        if let Some(binv) = invert3(&bm) {
            self.binv = binv;
            for i in 0..3 {
                self.xb[i] = binv[i][0] * self.b[0]
                    + binv[i][1] * self.b[1]
                    + binv[i][2] * self.b[2];
            }
        }
    }

    /// Primal simplex with costs `cost(lp, j)` for real columns. In phase 1
    /// artificials cost 1; in phase 2 they cost 0 and are kept pinned at
    /// zero by the ratio-test guard.
    fn optimize(
        &mut self,
        lp: &EnvelopeLp,
        cost: impl Fn(&EnvelopeLp, usize) -> f64,
        phase1: bool,
    ) -> Result<(), LpError> {
        let n = lp.len();
        let art_cost = if phase1 { 1.0 } else { 0.0 };
        let max_iters = 40 * (n + 8);
        let mut bland = false;
        let mut stall = 0usize;
        let mut last_obj = f64::INFINITY;
        for _ in 0..max_iters {
            // Duals.
            let mut y = [0.0; 3];
            for i in 0..3 {
                let cb = match self.basis[i] {
                    EnvCol::Real(j) => cost(lp, j),
                    EnvCol::Art(_) => art_cost,
                };
                if cb != 0.0 {
                    for k in 0..3 {
                        y[k] += cb * self.binv[i][k];
                    }
                }
            }
            // Pricing over real columns.
            let mut enter: Option<usize> = None;
            let mut best = -COST_TOL;
            for j in 0..n {
                if self.basis.contains(&EnvCol::Real(j)) {
                    continue;
                }
                let rc = cost(lp, j) - (y[0] * lp.s[j] + y[1] * lp.v[j] + y[2]);
                if rc < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(e) = enter else {
                return Ok(());
            };
            let col = lp.col(e);
            let mut d = [0.0; 3];
            for i in 0..3 {
                d[i] = self.binv[i][0] * col[0] + self.binv[i][1] * col[1] + self.binv[i][2] * col[2];
            }
            let mut leave: Option<usize> = None;
            let mut theta = f64::INFINITY;
            for i in 0..3 {
                // Pin zero-valued artificials once real costs are active.
                if !phase1 {
                    if let EnvCol::Art(_) = self.basis[i] {
                        if d[i].abs() > PIVOT_TOL && self.xb[i] <= FEAS_TOL {
                            leave = Some(i);
                            theta = 0.0;
                            break;
                        }
                    }
                }
                if d[i] > PIVOT_TOL {
                    let r = self.xb[i].max(0.0) / d[i];
                    if r < theta - 1e-12 {
                        theta = r;
                        leave = Some(i);
                    }
                }
            }
            let Some(l) = leave else {
                // Mathematically impossible (the simplex is compact); treat as
                // numerical breakdown.
                return Err(LpError::IterationLimit);
            };
            for i in 0..3 {
                if i != l {
                    self.xb[i] -= theta * d[i];
                }
            }
            self.xb[l] = theta;
            self.basis[l] = EnvCol::Real(e);
            let inv_dl = 1.0 / d[l];
            for k in 0..3 {
                self.binv[l][k] *= inv_dl;
            }
            for i in 0..3 {
                if i != l && d[i] != 0.0 {
                    let f = d[i];
                    for k in 0..3 {
                        self.binv[i][k] -= f * self.binv[l][k];
                    }
                }
            }
            let obj: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .map(|(c, &x)| match c {
                    EnvCol::Real(j) => cost(lp, *j) * x,
                    EnvCol::Art(_) => art_cost * x,
                })
                .sum();
            if obj < last_obj - 1e-13 {
                stall = 0;
                last_obj = obj;
            } else {
                stall += 1;
                if stall > 24 {
                    bland = true;
                }
            }
            let _ = self.b;
        }
        Err(LpError::IterationLimit)
    }
}
