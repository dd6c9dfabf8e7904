//! Dense convex quadratic programming.
//!
//! A primal-dual interior-point method (Mehrotra predictor-corrector) over
//! problems `min 1/2 z'Qz + c'z  s.t.  A_eq z = b_eq, A_in z <= b_in` with
//! `Q` positive semidefinite. Two problem forms share the same iteration:
//!
//! - [`QpDense`]: explicit matrices, KKT solved by LU of the reduced
//!   augmented system. Used for small generic problems and as the reference
//!   in tests.
//! - [`MpcBlockQp`]: the receding-horizon problem shape with a small dense
//!   input block plus per-sample convex-weight blocks that only appear in
//!   equalities and nonnegativity bounds. The Newton solve eliminates each
//!   weight block against its diagonal, collapsing the KKT system to
//!   `n_u + 3 M` regardless of how many weight columns there are.

use crate::linalg::{lu_factor, lu_solve};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("kkt matrix numerically singular")]
    Singular,
    #[error("interior point did not converge (best residual {0:.3e})")]
    IterationLimit(f64),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Residual norms at the returned iterate.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub z: Vec<f64>,
    pub obj: f64,
    pub iters: usize,
    pub kkt: KktResidual,
    /// Equality duals and inequality duals at the solution.
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

/// Operations the interior-point iteration needs from a problem form.
trait QpOps {
    fn nz(&self) -> usize;
    fn me(&self) -> usize;
    fn mi(&self) -> usize;
    fn q_mul(&self, z: &[f64], out: &mut [f64]);
    fn lin_cost(&self) -> Vec<f64>;
    fn b_eq(&self) -> &[f64];
    fn b_in(&self) -> &[f64];
    fn eq_mul(&self, z: &[f64], out: &mut [f64]);
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]);
    fn in_mul(&self, z: &[f64], out: &mut [f64]);
    fn in_tmul_add(&self, w: &[f64], out: &mut [f64]);
    /// Prepares the Newton solve for scaling `d_i = w_i / s_i`.
    fn factor(&mut self, d: &[f64]) -> Result<(), QpError>;
    /// Solves `[Q + A_in' D A_in, A_eq'; A_eq, 0] [dz; dy] = [rz; ry]`.
    fn solve_kkt(&self, rz: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>);
}

// ---------------------------------------------------------------------------
// Dense form
// ---------------------------------------------------------------------------

/// Explicit dense convex QP. `q` is `n`x`n` row-major and must be symmetric
/// PSD; `a_eq` is `me`x`n`; `a_in` is `mi`x`n` with rows `a . z <= b`.
#[derive(Debug, Clone, Default)]
pub struct QpDense {
    pub n: usize,
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub a_eq: Vec<f64>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<f64>,
    pub b_in: Vec<f64>,
}

struct DenseOps<'a> {
    qp: &'a QpDense,
    kkt: Vec<f64>,
    piv: Vec<usize>,
    dim: usize,
}

impl QpDense {
    pub fn me(&self) -> usize {
        self.b_eq.len()
    }

    pub fn mi(&self) -> usize {
        self.b_in.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n;
        if self.q.len() != n * n
            || self.c.len() != n
            || self.a_eq.len() != self.b_eq.len() * n
            || self.a_in.len() != self.b_in.len() * n
        {
            return Err(QpError::Dimension("dense qp arrays".into()));
        }
        let finite = self
            .q
            .iter()
            .chain(&self.c)
            .chain(&self.a_eq)
            .chain(&self.b_eq)
            .chain(&self.a_in)
            .chain(&self.b_in)
            .all(|v| v.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let mut quad = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.q[i * n + j] * z[j];
            }
            quad += z[i] * acc;
        }
        0.5 * quad + self.c.iter().zip(z).map(|(c, z)| c * z).sum::<f64>()
    }

    /// Largest primal violation: equality residual and inequality excess.
    pub fn primal_violation(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for (i, b) in self.b_eq.iter().enumerate() {
            let ax: f64 = (0..n).map(|j| self.a_eq[i * n + j] * z[j]).sum();
            worst = worst.max((ax - b).abs());
        }
        for (i, b) in self.b_in.iter().enumerate() {
            let ax: f64 = (0..n).map(|j| self.a_in[i * n + j] * z[j]).sum();
            worst = worst.max(ax - b);
        }
        worst
    }
}

impl QpOps for DenseOps<'_> {
    fn nz(&self) -> usize {
        self.qp.n
    }
    fn me(&self) -> usize {
        self.qp.me()
    }
    fn mi(&self) -> usize {
        self.qp.mi()
    }
    fn q_mul(&self, z: &[f64], out: &mut [f64]) {
        let n = self.qp.n;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.qp.q[i * n + j] * z[j];
            }
            out[i] = acc;
        }
    }
    fn lin_cost(&self) -> Vec<f64> {
        self.qp.c.clone()
    }
    fn b_eq(&self) -> &[f64] {
        &self.qp.b_eq
    }
    fn b_in(&self) -> &[f64] {
        &self.qp.b_in
    }
    fn eq_mul(&self, z: &[f64], out: &mut [f64]) {
        let n = self.qp.n;
        for i in 0..self.qp.me() {
            out[i] = (0..n).map(|j| self.qp.a_eq[i * n + j] * z[j]).sum();
        }
    }
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        let n = self.qp.n;
        for i in 0..self.qp.me() {
            let yi = y[i];
            if yi != 0.0 {
                for j in 0..n {
                    out[j] += self.qp.a_eq[i * n + j] * yi;
                }
            }
        }
    }
    fn in_mul(&self, z: &[f64], out: &mut [f64]) {
        let n = self.qp.n;
        for i in 0..self.qp.mi() {
            out[i] = (0..n).map(|j| self.qp.a_in[i * n + j] * z[j]).sum();
        }
    }
    fn in_tmul_add(&self, w: &[f64], out: &mut [f64]) {
        let n = self.qp.n;
        for i in 0..self.qp.mi() {
            let wi = w[i];
            if wi != 0.0 {
                for j in 0..n {
                    out[j] += self.qp.a_in[i * n + j] * wi;
                }
            }
        }
    }
    fn factor(&mut self, d: &[f64]) -> Result<(), QpError> {
        let n = self.qp.n;
        let me = self.qp.me();
        let dim = n + me;
        self.dim = dim;
        self.kkt = vec![0.0; dim * dim];
        // H = Q + A_in' D A_in
        for i in 0..n {
            for j in 0..n {
                self.kkt[i * dim + j] = self.qp.q[i * n + j];
            }
        }
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let row = &self.qp.a_in[r * n..(r + 1) * n];
            for i in 0..n {
                let ri = row[i];
                if ri != 0.0 {
                    let f = dr * ri;
                    for j in 0..n {
                        self.kkt[i * dim + j] += f * row[j];
                    }
                }
            }
        }
        for i in 0..me {
            for j in 0..n {
                let a = self.qp.a_eq[i * n + j];
                self.kkt[(n + i) * dim + j] = a;
                self.kkt[j * dim + n + i] = a;
            }
        }
        self.piv = vec![0usize; dim];
        lu_factor(&mut self.kkt, dim, &mut self.piv).ok_or(QpError::Singular)?;
        Ok(())
    }
    fn solve_kkt(&self, rz: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.qp.n;
        let me = self.qp.me();
        let mut rhs = vec![0.0; self.dim];
        rhs[..n].copy_from_slice(rz);
        rhs[n..n + me].copy_from_slice(ry);
        lu_solve(&self.kkt, self.dim, &self.piv, &mut rhs);
        (rhs[..n].to_vec(), rhs[n..n + me].to_vec())
    }
}

/// Solves a dense convex QP. The caller is responsible for feasibility
/// screening when infeasible instances are possible; on an infeasible
/// problem this returns `Err(IterationLimit)` rather than a certificate.
pub fn solve_dense(qp: &QpDense, opts: &IpmOptions) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let mut ops = DenseOps {
        qp,
        kkt: Vec::new(),
        piv: Vec::new(),
        dim: 0,
    };
    let mut sol = ipm(&mut ops, opts)?;
    sol.obj = qp.objective(&sol.z);
    Ok(sol)
}

// ---------------------------------------------------------------------------
// Block (receding-horizon) form
// ---------------------------------------------------------------------------

/// QP with a dense input block `u` (quadratic cost, its own inequality rows)
/// plus `M` convex-weight blocks over shared columns `(pts_s, pts_v)`: for
/// each sample `m`,
///
/// ```text
///   sum_d lam[m][d] * pts_s[d] - eu_s . u = rhs_s[m]
///   sum_d lam[m][d] * pts_v[d] - eu_v . u = rhs_v
///   sum_d lam[m][d]                       = 1
///   lam[m] >= 0
/// ```
///
/// The variable layout is `z = [u, lam[0], ..., lam[M-1]]`.
#[derive(Debug, Clone, Default)]
pub struct MpcBlockQp {
    pub nu: usize,
    pub qu: Vec<f64>,
    pub cu: Vec<f64>,
    pub gu: Vec<f64>,
    pub hu: Vec<f64>,
    pub pts_s: Vec<f64>,
    pub pts_v: Vec<f64>,
    /// Linear cost per weight column (already divided by the sample count).
    pub lam_cost: Vec<f64>,
    pub eu_s: Vec<f64>,
    pub eu_v: Vec<f64>,
    pub rhs_s: Vec<f64>,
    pub rhs_v: f64,
    pub const_obj: f64,
}

impl MpcBlockQp {
    pub fn n_samples(&self) -> usize {
        self.rhs_s.len()
    }

    pub fn n_pts(&self) -> usize {
        self.pts_s.len()
    }

    pub fn nz(&self) -> usize {
        self.nu + self.n_samples() * self.n_pts()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let nu = self.nu;
        let mut quad = 0.0;
        for i in 0..nu {
            let mut acc = 0.0;
            for j in 0..nu {
                acc += self.qu[i * nu + j] * z[j];
            }
            quad += z[i] * acc;
        }
        let mut lin: f64 = self.cu.iter().zip(z).map(|(c, u)| c * u).sum();
        let d = self.n_pts();
        for m in 0..self.n_samples() {
            let lam = &z[nu + m * d..nu + (m + 1) * d];
            lin += self
                .lam_cost
                .iter()
                .zip(lam)
                .map(|(c, l)| c * l)
                .sum::<f64>();
        }
        0.5 * quad + lin + self.const_obj
    }

    /// Largest violation of the problem's own constraints at `z`.
    pub fn primal_violation(&self, z: &[f64]) -> f64 {
        let nu = self.nu;
        let d = self.n_pts();
        let mut worst: f64 = 0.0;
        for (i, h) in self.hu.iter().enumerate() {
            let gz: f64 = (0..nu).map(|j| self.gu[i * nu + j] * z[j]).sum();
            worst = worst.max(gz - h);
        }
        for m in 0..self.n_samples() {
            let lam = &z[nu + m * d..nu + (m + 1) * d];
            let mut ssum = 0.0;
            let mut vsum = 0.0;
            let mut tot = 0.0;
            for (k, &l) in lam.iter().enumerate() {
                worst = worst.max(-l);
                ssum += l * self.pts_s[k];
                vsum += l * self.pts_v[k];
                tot += l;
            }
            let eus: f64 = (0..nu).map(|j| self.eu_s[j] * z[j]).sum();
            let euv: f64 = (0..nu).map(|j| self.eu_v[j] * z[j]).sum();
            worst = worst.max((ssum - eus - self.rhs_s[m]).abs());
            worst = worst.max((vsum - euv - self.rhs_v).abs());
            worst = worst.max((tot - 1.0).abs());
        }
        worst
    }
}

struct BlockOps<'a> {
    qp: &'a MpcBlockQp,
    b_eq: Vec<f64>,
    b_in: Vec<f64>,
    dlam: Vec<f64>,
    kkt: Vec<f64>,
    piv: Vec<usize>,
    dim: usize,
}

impl<'a> BlockOps<'a> {
    fn new(qp: &'a MpcBlockQp) -> Self {
        let m = qp.n_samples();
        let mut b_eq = Vec::with_capacity(3 * m);
        for mm in 0..m {
            b_eq.push(qp.rhs_s[mm]);
            b_eq.push(qp.rhs_v);
            b_eq.push(1.0);
        }
        let mut b_in = qp.hu.clone();
        b_in.resize(qp.hu.len() + m * qp.n_pts(), 0.0);
        BlockOps {
            qp,
            b_eq,
            b_in,
            dlam: Vec::new(),
            kkt: Vec::new(),
            piv: Vec::new(),
            dim: 0,
        }
    }
}

impl QpOps for BlockOps<'_> {
    fn nz(&self) -> usize {
        self.qp.nz()
    }
    fn me(&self) -> usize {
        3 * self.qp.n_samples()
    }
    fn mi(&self) -> usize {
        self.qp.hu.len() + self.qp.n_samples() * self.qp.n_pts()
    }
    fn q_mul(&self, z: &[f64], out: &mut [f64]) {
        let nu = self.qp.nu;
        out.fill(0.0);
        for i in 0..nu {
            let mut acc = 0.0;
            for j in 0..nu {
                acc += self.qp.qu[i * nu + j] * z[j];
            }
            out[i] = acc;
        }
    }
    fn lin_cost(&self) -> Vec<f64> {
        let mut c = self.qp.cu.clone();
        for _ in 0..self.qp.n_samples() {
            c.extend_from_slice(&self.qp.lam_cost);
        }
        c
    }
    fn b_eq(&self) -> &[f64] {
        &self.b_eq
    }
    fn b_in(&self) -> &[f64] {
        &self.b_in
    }
    fn eq_mul(&self, z: &[f64], out: &mut [f64]) {
        let nu = self.qp.nu;
        let d = self.qp.n_pts();
        let eus: f64 = (0..nu).map(|j| self.qp.eu_s[j] * z[j]).sum();
        let euv: f64 = (0..nu).map(|j| self.qp.eu_v[j] * z[j]).sum();
        for m in 0..self.qp.n_samples() {
            let lam = &z[nu + m * d..nu + (m + 1) * d];
            let mut ssum = 0.0;
            let mut vsum = 0.0;
            let mut tot = 0.0;
            for (k, &l) in lam.iter().enumerate() {
                ssum += l * self.qp.pts_s[k];
                vsum += l * self.qp.pts_v[k];
                tot += l;
            }
            out[3 * m] = ssum - eus;
            out[3 * m + 1] = vsum - euv;
            out[3 * m + 2] = tot;
        }
    }
    fn eq_tmul_add(&self, y: &[f64], out: &mut [f64]) {
        let nu = self.qp.nu;
        let d = self.qp.n_pts();
        for m in 0..self.qp.n_samples() {
            let (ya, yb, yc) = (y[3 * m], y[3 * m + 1], y[3 * m + 2]);
            for j in 0..nu {
                out[j] -= self.qp.eu_s[j] * ya + self.qp.eu_v[j] * yb;
            }
            let lam_out = &mut out[nu + m * d..nu + (m + 1) * d];
            for (k, o) in lam_out.iter_mut().enumerate() {
                *o += self.qp.pts_s[k] * ya + self.qp.pts_v[k] * yb + yc;
            }
        }
    }
    fn in_mul(&self, z: &[f64], out: &mut [f64]) {
        let nu = self.qp.nu;
        let miu = self.qp.hu.len();
        for i in 0..miu {
            out[i] = (0..nu).map(|j| self.qp.gu[i * nu + j] * z[j]).sum();
        }
        let rest = self.mi() - miu;
        for k in 0..rest {
            out[miu + k] = -z[nu + k];
        }
    }
    fn in_tmul_add(&self, w: &[f64], out: &mut [f64]) {
        let nu = self.qp.nu;
        let miu = self.qp.hu.len();
        for i in 0..miu {
            let wi = w[i];
            if wi != 0.0 {
                for j in 0..nu {
                    out[j] += self.qp.gu[i * nu + j] * wi;
                }
            }
        }
        for k in 0..(self.mi() - miu) {
            out[nu + k] -= w[miu + k];
        }
    }
    fn factor(&mut self, dvals: &[f64]) -> Result<(), QpError> {
        let nu = self.qp.nu;
        let miu = self.qp.hu.len();
        let m = self.qp.n_samples();
        let d = self.qp.n_pts();
        let dim = nu + 3 * m;
        self.dim = dim;
        self.dlam = dvals[miu..].to_vec();
        self.kkt = vec![0.0; dim * dim];
        // H_u = Q_u + G_u' D_u G_u.
        for i in 0..nu {
            for j in 0..nu {
                self.kkt[i * dim + j] = self.qp.qu[i * nu + j];
            }
        }
        for r in 0..miu {
            let dr = dvals[r];
            if dr == 0.0 {
                continue;
            }
            let row = &self.qp.gu[r * nu..(r + 1) * nu];
            for i in 0..nu {
                if row[i] != 0.0 {
                    let f = dr * row[i];
                    for j in 0..nu {
                        self.kkt[i * dim + j] += f * row[j];
                    }
                }
            }
        }
        // Coupling blocks E_u (same for every sample) and Schur blocks
        // -T_m = -E_lam D_lam^-1 E_lam'.
        for mm in 0..m {
            let base = nu + 3 * mm;
            for j in 0..nu {
                self.kkt[base * dim + j] = -self.qp.eu_s[j];
                self.kkt[(base + 1) * dim + j] = -self.qp.eu_v[j];
                self.kkt[j * dim + base] = -self.qp.eu_s[j];
                self.kkt[j * dim + base + 1] = -self.qp.eu_v[j];
                // Row base+2 (the weight-sum row) has no u coefficients.
            }
            let dl = &self.dlam[mm * d..(mm + 1) * d];
            let mut t = [[0.0f64; 3]; 3];
            for k in 0..d {
                let inv = 1.0 / dl[k];
                let a = [self.qp.pts_s[k], self.qp.pts_v[k], 1.0];
                for r in 0..3 {
                    for cc in 0..3 {
                        t[r][cc] += inv * a[r] * a[cc];
                    }
                }
            }
            for r in 0..3 {
                for cc in 0..3 {
                    self.kkt[(base + r) * dim + base + cc] = -t[r][cc];
                }
            }
        }
        self.piv = vec![0usize; dim];
        lu_factor(&mut self.kkt, dim, &mut self.piv).ok_or(QpError::Singular)?;
        Ok(())
    }
    fn solve_kkt(&self, rz: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nu = self.qp.nu;
        let m = self.qp.n_samples();
        let d = self.qp.n_pts();
        let dim = self.dim;
        let mut rhs = vec![0.0; dim];
        rhs[..nu].copy_from_slice(&rz[..nu]);
        for mm in 0..m {
            let dl = &self.dlam[mm * d..(mm + 1) * d];
            let rl = &rz[nu + mm * d..nu + (mm + 1) * d];
            let mut corr = [0.0f64; 3];
            for k in 0..d {
                let f = rl[k] / dl[k];
                corr[0] += self.qp.pts_s[k] * f;
                corr[1] += self.qp.pts_v[k] * f;
                corr[2] += f;
            }
            for r in 0..3 {
                rhs[nu + 3 * mm + r] = ry[3 * mm + r] - corr[r];
            }
        }
        let mut sol = rhs;
        lu_solve(&self.kkt, dim, &self.piv, &mut sol);
        let mut dz = vec![0.0; self.nz()];
        dz[..nu].copy_from_slice(&sol[..nu]);
        let dy = sol[nu..].to_vec();
        for mm in 0..m {
            let dl = &self.dlam[mm * d..(mm + 1) * d];
            let rl = &rz[nu + mm * d..nu + (mm + 1) * d];
            let (ya, yb, yc) = (dy[3 * mm], dy[3 * mm + 1], dy[3 * mm + 2]);
            for k in 0..d {
                let et_y = self.qp.pts_s[k] * ya + self.qp.pts_v[k] * yb + yc;
                dz[nu + mm * d + k] = (rl[k] - et_y) / dl[k];
            }
        }
        (dz, dy)
    }
}

/// Solves the block-form QP; `z` layout is `[u, lam...]`.
pub fn solve_block(qp: &MpcBlockQp, opts: &IpmOptions) -> Result<QpSolution, QpError> {
    let nu = qp.nu;
    if qp.qu.len() != nu * nu
        || qp.cu.len() != nu
        || qp.gu.len() != qp.hu.len() * nu
        || qp.pts_v.len() != qp.pts_s.len()
        || qp.lam_cost.len() != qp.pts_s.len()
        || qp.eu_s.len() != nu
        || qp.eu_v.len() != nu
    {
        return Err(QpError::Dimension("block qp arrays".into()));
    }
    if qp.n_samples() > 0 && qp.n_pts() == 0 {
        return Err(QpError::Dimension("weight blocks without columns".into()));
    }
    let mut ops = BlockOps::new(qp);
    let mut sol = ipm(&mut ops, opts)?;
    sol.obj = qp.objective(&sol.z);
    Ok(sol)
}

// ---------------------------------------------------------------------------
// Interior-point core
// ---------------------------------------------------------------------------

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

fn ipm(ops: &mut impl QpOps, opts: &IpmOptions) -> Result<QpSolution, QpError> {
    let nz = ops.nz();
    let me = ops.me();
    let mi = ops.mi();
    let c = ops.lin_cost();
    let scale = 1.0 + inf_norm(&c) + inf_norm(ops.b_eq()) + inf_norm(ops.b_in());

    // Infeasible start: z = 0 with slacks pushed off their bounds.
    let mut z = vec![0.0; nz];
    let mut y = vec![0.0; me];
    let mut s = vec![1.0; mi];
    let mut w = vec![1.0; mi];
    {
        let mut az = vec![0.0; mi];
        ops.in_mul(&z, &mut az);
        for i in 0..mi {
            s[i] = (ops.b_in()[i] - az[i]).max(1.0);
        }
    }

    let mut best_resid = f64::INFINITY;
    let mut r_d = vec![0.0; nz];
    let mut r_p = vec![0.0; me];
    let mut r_g = vec![0.0; mi];
    let mut scratch_eq = vec![0.0; me];
    let mut scratch_in = vec![0.0; mi];

    for iter in 0..=opts.max_iter {
        let resid = compute_residuals(
            ops,
            &c,
            &z,
            &y,
            &w,
            &s,
            &mut r_d,
            &mut r_p,
            &mut r_g,
            &mut scratch_eq,
            &mut scratch_in,
        );
        best_resid = best_resid.min(resid);
        let mu = if mi == 0 {
            0.0
        } else {
            s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / mi as f64
        };
        let tight = resid <= opts.tol * scale;
        let loose_done = iter == opts.max_iter && resid <= 1e-6 * scale;
        if tight || loose_done {
            return Ok(QpSolution {
                status: QpStatus::Optimal,
                z,
                obj: 0.0,
                iters: iter,
                kkt: KktResidual {
                    stationarity: inf_norm(&r_d),
                    primal_eq: inf_norm(&r_p),
                    primal_in: inf_norm(&r_g),
                    complementarity: mu,
                },
                y,
                w,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        let d: Vec<f64> = (0..mi).map(|i| w[i] / s[i]).collect();
        ops.factor(&d)?;

        // Affine predictor.
        let (_, _, dw_a, ds_a) = newton_step(ops, &d, &r_d, &r_p, &r_g, &s, &w, None);
        let (ap_a, ad_a) = step_lengths(&s, &ds_a, &w, &dw_a, 1.0);
        let mu_aff = if mi == 0 {
            0.0
        } else {
            (0..mi)
                .map(|i| (s[i] + ap_a * ds_a[i]) * (w[i] + ad_a * dw_a[i]))
                .sum::<f64>()
                / mi as f64
        };
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // Corrector with centering.
        let corr: Vec<f64> = (0..mi).map(|i| ds_a[i] * dw_a[i] - sigma * mu).collect();
        let (dz, dy, dw, ds) = newton_step(ops, &d, &r_d, &r_p, &r_g, &s, &w, Some(&corr));
        let (ap, ad) = step_lengths(&s, &ds, &w, &dw, 0.995);

        for i in 0..nz {
            z[i] += ap * dz[i];
        }
        for i in 0..me {
            y[i] += ad * dy[i];
        }
        for i in 0..mi {
            s[i] = (s[i] + ap * ds[i]).max(1e-300);
            w[i] = (w[i] + ad * dw[i]).max(1e-300);
        }
    }
    Err(QpError::IterationLimit(best_resid))
}

#[allow(clippy::too_many_arguments)]
fn compute_residuals(
    ops: &impl QpOps,
    c: &[f64],
    z: &[f64],
    y: &[f64],
    w: &[f64],
    s: &[f64],
    r_d: &mut [f64],
    r_p: &mut [f64],
    r_g: &mut [f64],
    scratch_eq: &mut [f64],
    scratch_in: &mut [f64],
) -> f64 {
    ops.q_mul(z, r_d);
    for i in 0..r_d.len() {
        r_d[i] += c[i];
    }
    ops.eq_tmul_add(y, r_d);
    ops.in_tmul_add(w, r_d);
    ops.eq_mul(z, scratch_eq);
    for i in 0..r_p.len() {
        r_p[i] = scratch_eq[i] - ops.b_eq()[i];
    }
    ops.in_mul(z, scratch_in);
    for i in 0..r_g.len() {
        r_g[i] = scratch_in[i] + s[i] - ops.b_in()[i];
    }
    let mu = if s.is_empty() {
        0.0
    } else {
        s.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / s.len() as f64
    };
    inf_norm(r_d).max(inf_norm(r_p)).max(inf_norm(r_g)).max(mu)
}

#[allow(clippy::too_many_arguments)]
fn newton_step(
    ops: &impl QpOps,
    d: &[f64],
    r_d: &[f64],
    r_p: &[f64],
    r_g: &[f64],
    s: &[f64],
    w: &[f64],
    corr: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let nz = ops.nz();
    let mi = ops.mi();
    // rc_i = s_i w_i (+ corrector terms)
    let rc: Vec<f64> = (0..mi)
        .map(|i| s[i] * w[i] + corr.map_or(0.0, |c| c[i]))
        .collect();
    // rhs_z = -r_d - A_in' (d o r_g - rc / s)
    let tmp: Vec<f64> = (0..mi).map(|i| d[i] * r_g[i] - rc[i] / s[i]).collect();
    let mut rhs_z = vec![0.0; nz];
    ops.in_tmul_add(&tmp, &mut rhs_z);
    for i in 0..nz {
        rhs_z[i] = -r_d[i] - rhs_z[i];
    }
    let rhs_y: Vec<f64> = r_p.iter().map(|r| -r).collect();
    let (dz, dy) = ops.solve_kkt(&rhs_z, &rhs_y);
    // Recover dw, ds.
    let mut ainz = vec![0.0; mi];
    ops.in_mul(&dz, &mut ainz);
    let mut dw = vec![0.0; mi];
    let mut ds = vec![0.0; mi];
    for i in 0..mi {
        dw[i] = d[i] * (ainz[i] + r_g[i]) - rc[i] / s[i];
        ds[i] = -(rc[i] + s[i] * dw[i]) / w[i];
    }
    (dz, dy, dw, ds)
}

fn step_lengths(s: &[f64], ds: &[f64], w: &[f64], dw: &[f64], frac: f64) -> (f64, f64) {
    let mut ap = 1.0f64;
    let mut ad = 1.0f64;
    for i in 0..s.len() {
        if ds[i] < 0.0 {
            ap = ap.min(-s[i] / ds[i]);
        }
        if dw[i] < 0.0 {
            ad = ad.min(-w[i] / dw[i]);
        }
    }
    ((frac * ap).min(1.0), (frac * ad).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> IpmOptions {
        IpmOptions::default()
    }

    #[test]
    fn box_constrained_projection() {
        // min 1/2 ||z - p||^2 with z in [0, 1]^2, p = (2, -1) -> z = (1, 0).
        let qp = QpDense {
            n: 2,
            q: vec![1.0, 0.0, 0.0, 1.0],
            c: vec![-2.0, 1.0],
            a_eq: vec![],
            b_eq: vec![],
            a_in: vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            b_in: vec![1.0, 0.0, 1.0, 0.0],
        };
        let sol = solve_dense(&qp, &opts()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "{:?}", sol.z);
        assert!(sol.z[1].abs() < 1e-7);
        assert!(sol.kkt.max() < 1e-6);
    }

    #[test]
    fn equality_constrained_matches_closed_form() {
        // min 1/2 z'Qz + c'z s.t. 1'z = 1. KKT: [Q 1; 1' 0][z; y] = [-c; 1].
        let q = vec![3.0, 0.5, 0.5, 2.0];
        let c = vec![-1.0, 0.3];
        let qp = QpDense {
            n: 2,
            q: q.clone(),
            c: c.clone(),
            a_eq: vec![1.0, 1.0],
            b_eq: vec![1.0],
            a_in: vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
            b_in: vec![10.0, 10.0, 10.0, 10.0],
        };
        let kkt = [3.0, 0.5, 1.0, 0.5, 2.0, 1.0, 1.0, 1.0, 0.0];
        let rhs = [1.0, -0.3, 1.0];
        let expect = crate::linalg::solve_dense(&kkt, 3, &rhs).unwrap();
        let sol = solve_dense(&qp, &opts()).unwrap();
        assert!((sol.z[0] - expect[0]).abs() < 1e-7);
        assert!((sol.z[1] - expect[1]).abs() < 1e-7);
    }

    #[test]
    fn unconstrained_interior_matches_least_squares() {
        // All constraints slack at the minimizer: z* = -Q^{-1} c.
        let q = vec![4.0, 1.0, 1.0, 3.0];
        let c = vec![-8.0, -6.0];
        let expect = crate::linalg::solve_dense(&q, 2, &[8.0, 6.0]).unwrap();
        let qp = QpDense {
            n: 2,
            q,
            c,
            a_eq: vec![],
            b_eq: vec![],
            a_in: vec![1.0, 0.0, 0.0, 1.0],
            b_in: vec![100.0, 100.0],
        };
        let sol = solve_dense(&qp, &opts()).unwrap();
        assert!((sol.z[0] - expect[0]).abs() < 1e-8);
        assert!((sol.z[1] - expect[1]).abs() < 1e-8);
    }

    /// Block backend agrees with the dense backend on an instance with two
    /// weight blocks.
    #[test]
    fn block_matches_dense() {
        let nu = 2;
        let pts_s = vec![0.0, 4.0, 2.0];
        let pts_v = vec![0.0, 0.0, 3.0];
        let lam_cost = vec![1.0, 2.0, 0.5];
        let block = MpcBlockQp {
            nu,
            qu: vec![2.0, 0.0, 0.0, 2.0],
            cu: vec![-1.0, -1.0],
            gu: vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            hu: vec![3.0, 3.0, 3.0, 3.0],
            pts_s: pts_s.clone(),
            pts_v: pts_v.clone(),
            lam_cost: lam_cost.clone(),
            eu_s: vec![1.0, 0.0],
            eu_v: vec![0.0, 1.0],
            rhs_s: vec![1.0, 1.5],
            rhs_v: 0.5,
            const_obj: 0.0,
        };
        let bsol = solve_block(&block, &opts()).unwrap();

        // Same problem in dense form.
        let m = 2;
        let dpts = 3;
        let n = nu + m * dpts;
        let mut q = vec![0.0; n * n];
        q[0] = 2.0;
        q[n + 1] = 2.0;
        let mut c = vec![-1.0, -1.0];
        for _ in 0..m {
            c.extend_from_slice(&lam_cost);
        }
        let mut a_eq = vec![0.0; (3 * m) * n];
        let mut b_eq = vec![0.0; 3 * m];
        for mm in 0..m {
            let r0 = 3 * mm;
            a_eq[r0 * n] = -1.0;
            a_eq[(r0 + 1) * n + 1] = -1.0;
            for k in 0..dpts {
                a_eq[r0 * n + nu + mm * dpts + k] = pts_s[k];
                a_eq[(r0 + 1) * n + nu + mm * dpts + k] = pts_v[k];
                a_eq[(r0 + 2) * n + nu + mm * dpts + k] = 1.0;
            }
            b_eq[r0] = block.rhs_s[mm];
            b_eq[r0 + 1] = block.rhs_v;
            b_eq[r0 + 2] = 1.0;
        }
        let mi = 4 + m * dpts;
        let mut a_in = vec![0.0; mi * n];
        let mut b_in = vec![0.0; mi];
        let gu_rows = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        for (i, row) in gu_rows.iter().enumerate() {
            a_in[i * n] = row[0];
            a_in[i * n + 1] = row[1];
            b_in[i] = 3.0;
        }
        for k in 0..(m * dpts) {
            a_in[(4 + k) * n + nu + k] = -1.0;
        }
        let dense = QpDense {
            n,
            q,
            c,
            a_eq,
            b_eq,
            a_in,
            b_in,
        };
        let dsol = solve_dense(&dense, &opts()).unwrap();
        assert!(
            (bsol.obj - dsol.obj).abs() < 1e-6,
            "block {} vs dense {}",
            bsol.obj,
            dsol.obj
        );
        for j in 0..nu {
            assert!((bsol.z[j] - dsol.z[j]).abs() < 1e-5, "u[{j}]");
        }
        assert!(block.primal_violation(&bsol.z) < 1e-7);
    }

    #[test]
    fn block_without_samples_is_plain_qp() {
        let block = MpcBlockQp {
            nu: 1,
            qu: vec![2.0],
            cu: vec![-4.0],
            gu: vec![1.0, -1.0],
            hu: vec![1.0, 1.0],
            pts_s: vec![],
            pts_v: vec![],
            lam_cost: vec![],
            eu_s: vec![0.0],
            eu_v: vec![0.0],
            rhs_s: vec![],
            rhs_v: 0.0,
            const_obj: 1.0,
        };
        let sol = solve_block(&block, &opts()).unwrap();
        // min z^2 - 4z + 1 on [-1, 1] -> z = 1, obj = -2.
        assert!((sol.z[0] - 1.0).abs() < 1e-7);
        assert!((sol.obj - (-2.0)).abs() < 1e-6);
    }
}
