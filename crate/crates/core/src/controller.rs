//! The receding-horizon eco-driving controller: convex QP assembly with
//! tightened red-light and terminal constraints plus a sample-mean terminal
//! cost, and the constraint-satisfying backup cruise controller that keeps
//! the loop feasible when the learned sets cannot.
//!
//! With observer gain `L`, horizon `N` and noise half-width `w`, the
//! nominal-state tightenings are `(2L+1) w` for the one-step red-light
//! constraint and `(2LN+1) w` for the terminal sets.

use crate::energy::EnergyModel;
use crate::geometry::{self, ConvexRegion2};
use crate::learning::{CostToGoTable, Ladder, TargetKind};
use crate::lp::{solve_standard, LpOutcome};
use crate::plant::Estimate;
use crate::qp::{solve_block, IpmOptions, MpcBlockQp, QpError};
use crate::traffic::{signal_at, Signal, TrafficLight, Windows};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtrlError {
    #[error("artifact frames disagree: {0}")]
    FrameMismatch(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("geometry failure: {0}")]
    Geometry(#[from] geometry::GeometryError),
    #[error("lp failure: {0}")]
    Lp(#[from] crate::lp::LpError),
    #[error("qp breakdown: {0}")]
    Qp(#[from] QpError),
}

/// Horizon, sampling and box parameters of the MPC.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MpcConfig {
    pub n_horizon: usize,
    pub m_samples: usize,
    pub gain: f64,
    pub w_max: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub qp_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        // L = 1/(4N) at N = 5.
        MpcConfig {
            n_horizon: 5,
            m_samples: 10,
            gain: 0.05,
            w_max: 3.0,
            v_max: 14.0,
            a_min: -3.0,
            a_max: 2.0,
            qp_tol: 1e-9,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), CtrlError> {
        if self.n_horizon < 1 || self.m_samples < 1 {
            return Err(CtrlError::BadConfig("need N >= 1 and M >= 1".into()));
        }
        if !(self.gain > 0.0 && self.gain < 1.0) {
            return Err(CtrlError::BadConfig(format!(
                "observer gain {} outside (0, 1)",
                self.gain
            )));
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0 && self.v_max > 0.0 && self.w_max >= 0.0) {
            return Err(CtrlError::BadConfig("bad box".into()));
        }
        Ok(())
    }

    /// `(2L + 1) w`: offset of the one-step red-light row.
    pub fn red_tightening(&self) -> f64 {
        (2.0 * self.gain + 1.0) * self.w_max
    }

    /// `(2LN + 1) w`: erosion of both terminal sets.
    pub fn terminal_tightening(&self) -> f64 {
        (2.0 * self.gain * self.n_horizon as f64 + 1.0) * self.w_max
    }
}

/// Per-segment learned artifacts in the segment's own frame. `sn` holds the
/// fixed terminal-noise sums (drawn once per segment, common random numbers
/// across steps). The heavy pieces are shared behind `Arc` so Monte Carlo
/// runs and multi-light routes reuse one copy; the tightened stages are
/// precomputed per depth because erosion re-derives vertices.
#[derive(Debug, Clone)]
pub struct SegmentArtifacts {
    pub ladder_before: std::sync::Arc<Ladder>,
    pub ladder_after: std::sync::Arc<Ladder>,
    pub table: std::sync::Arc<CostToGoTable>,
    eroded_before: std::sync::Arc<Vec<ConvexRegion2>>,
    eroded_after: std::sync::Arc<Vec<ConvexRegion2>>,
    term_tightening: f64,
    pub sn: Vec<f64>,
}

impl SegmentArtifacts {
    pub fn new(
        ladder_before: Ladder,
        ladder_after: Ladder,
        table: CostToGoTable,
        sn: Vec<f64>,
        cfg: &MpcConfig,
    ) -> Self {
        let tight = cfg.terminal_tightening();
        let erode_all = |ladder: &Ladder| -> Vec<ConvexRegion2> {
            (0..=ladder.depth()).map(|t| ladder.stage(t).erode_s(tight)).collect()
        };
        SegmentArtifacts {
            eroded_before: std::sync::Arc::new(erode_all(&ladder_before)),
            eroded_after: std::sync::Arc::new(erode_all(&ladder_after)),
            ladder_before: std::sync::Arc::new(ladder_before),
            ladder_after: std::sync::Arc::new(ladder_after),
            table: std::sync::Arc::new(table),
            term_tightening: tight,
            sn,
        }
    }

    /// Cheap copy with fresh per-segment terminal-noise samples.
    pub fn with_noise_samples(&self, sn: Vec<f64>) -> Self {
        let mut out = self.clone();
        out.sn = sn;
        out
    }

    pub fn s_tl(&self) -> f64 {
        self.table.s_tl
    }

    fn eroded_stage<'a>(
        ladder: &Ladder,
        cache: &'a [ConvexRegion2],
        t: usize,
    ) -> &'a ConvexRegion2 {
        let idx = match ladder.converged_at() {
            Some(c) if t > c => c,
            _ => t,
        };
        &cache[idx.min(cache.len() - 1)]
    }

    pub fn eroded_before(&self, t: usize) -> &ConvexRegion2 {
        assert!(
            t <= self.ladder_before.depth() || self.ladder_before.converged_at().is_some(),
            "stay-behind ladder too shallow for t = {t}"
        );
        Self::eroded_stage(&self.ladder_before, &self.eroded_before, t)
    }

    pub fn eroded_after(&self, t: usize) -> &ConvexRegion2 {
        assert!(
            t <= self.ladder_after.depth() || self.ladder_after.converged_at().is_some(),
            "pass-by ladder too shallow for t = {t}"
        );
        Self::eroded_stage(&self.ladder_after, &self.eroded_after, t)
    }

    fn check_frames(&self, cfg: &MpcConfig) -> Result<(), CtrlError> {
        if self.ladder_before.target_kind != TargetKind::BeforeLight
            || self.ladder_after.target_kind != TargetKind::AfterLight
        {
            return Err(CtrlError::FrameMismatch("ladder target kinds".into()));
        }
        if (self.ladder_before.s_tl - self.table.s_tl).abs() > 1e-9
            || (self.ladder_after.s_tl - self.table.s_tl).abs() > 1e-9
        {
            return Err(CtrlError::FrameMismatch(format!(
                "s_tl: before {} after {} table {}",
                self.ladder_before.s_tl, self.ladder_after.s_tl, self.table.s_tl
            )));
        }
        if (self.term_tightening - cfg.terminal_tightening()).abs() > 1e-12 {
            return Err(CtrlError::FrameMismatch(format!(
                "artifacts tightened for {} but config wants {}",
                self.term_tightening,
                cfg.terminal_tightening()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    Infeasible,
}

/// Assembled per-step problem, ready for [`solve_mpc`].
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: MpcBlockQp,
    /// u-only inequality rows used for the exact feasibility pre-check
    /// (includes the per-sample value-domain rows folded to their tightest
    /// offsets).
    feas_rows: Vec<(Vec<f64>, f64)>,
    pub pre_infeasible: Option<String>,
    pub n_horizon: usize,
    pub x0: Estimate,
    pub s_tl: f64,
    pub red_row_active: bool,
    pub terminal_value_active: bool,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub status: MpcStatus,
    pub u: Vec<f64>,
    /// Nominal states `x_bar_0..x_bar_N` (same frame as the problem).
    pub predicted: Vec<Estimate>,
    pub objective: f64,
    pub solve_time: std::time::Duration,
    pub kkt_residual: f64,
    pub infeasible_reason: Option<String>,
}

/// Position coefficient of input `u_j` in `s_bar_i` under the double
/// integrator: applied for `i - j` steps, contributing `i - j - 1/2`.
#[inline]
fn s_coeff(i: usize, j: usize) -> f64 {
    if j < i {
        (i - j) as f64 - 0.5
    } else {
        0.0
    }
}

/// Builds the tractable convex problem for one control step. All quantities
/// (`x_hat`, the artifacts, the returned problem) share the artifact frame;
/// callers translate route coordinates before calling.
pub fn build_mpc(
    x_hat: Estimate,
    signal: Signal,
    windows: Windows,
    art: &SegmentArtifacts,
    energy: &EnergyModel,
    cfg: &MpcConfig,
) -> Result<MpcProblem, CtrlError> {
    cfg.validate()?;
    art.check_frames(cfg)?;
    let n = cfg.n_horizon;
    let s_tl = art.s_tl();

    let mut pre_infeasible: Option<String> = None;

    // Terminal sets: always the pass-by set, plus the stay-behind set when a
    // red window is active. Both come pre-eroded from the artifact cache.
    let p_tight = art.eroded_after(windows.t_green as usize);
    if p_tight.is_empty() {
        pre_infeasible = Some(format!(
            "tightened pass-by set empty at t_green={}",
            windows.t_green
        ));
    }
    let s_tight = match windows.t_red {
        Some(t_red) => {
            let eroded = art.eroded_before(t_red as usize);
            if eroded.is_empty() && pre_infeasible.is_none() {
                pre_infeasible = Some(format!(
                    "tightened stay-behind set empty at t_red={t_red}"
                ));
            }
            Some(eroded)
        }
        None => None,
    };

    // Emptiness and the value-branch decision on the terminal intersection
    // (with the speed band), via two small LPs on the pooled halfplanes.
    let mut terminal_value_active = true;
    if pre_infeasible.is_none() {
        let mut pooled: Vec<([f64; 2], f64)> = p_tight
            .halfplanes()
            .iter()
            .map(|h| (h.a, h.b))
            .collect();
        pooled.push(([0.0, 1.0], cfg.v_max));
        pooled.push(([0.0, -1.0], 0.0));
        if let Some(s) = s_tight {
            pooled.extend(s.halfplanes().iter().map(|h| (h.a, h.b)));
        }
        match crate::lp::maximize_2d([-1.0, 0.0], &pooled)? {
            crate::lp::Max2d::Infeasible => {
                pre_infeasible = Some("tightened terminal intersection empty".into());
            }
            crate::lp::Max2d::Value { max, .. } => {
                // Segment-exit case: the whole terminal set sits past the
                // light, every sampled terminal query lands where V = 0.
                if -max >= s_tl - 1e-9 {
                    terminal_value_active = false;
                }
            }
            crate::lp::Max2d::Unbounded => {}
        }
    }

    // Objective: sum of stage costs along the nominal prediction.
    let (pvv, pvu, puu, pv, pu, pc) = energy.expanded();
    let v0 = x_hat.v;
    let mut qu = vec![0.0; n * n];
    let mut cu = vec![0.0; n];
    let mut const_obj = 0.0;
    for i in 0..n {
        // v_bar_i = v0 + sum_{j<i} u_j; stage i uses input u_i.
        for j in 0..i {
            for k in 0..i {
                qu[j * n + k] += 2.0 * pvv;
            }
            qu[j * n + i] += pvu;
            qu[i * n + j] += pvu;
            cu[j] += 2.0 * pvv * v0 + pv;
        }
        qu[i * n + i] += 2.0 * puu;
        cu[i] += pvu * v0 + pu;
        const_obj += pvv * v0 * v0 + pv * v0 + pc;
    }

    // Inequality rows over u.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..n {
        let mut up = vec![0.0; n];
        up[i] = 1.0;
        rows.push((up.clone(), cfg.a_max));
        let mut lo = up;
        lo[i] = -1.0;
        rows.push((lo, -cfg.a_min));
    }
    for i in 1..=n {
        let mut hi = vec![0.0; n];
        let mut lo = vec![0.0; n];
        for j in 0..i {
            hi[j] = 1.0;
            lo[j] = -1.0;
        }
        rows.push((hi, cfg.v_max - v0));
        rows.push((lo, v0));
    }
    let red_row_active = signal == Signal::Red;
    if red_row_active {
        let mut row = vec![0.0; n];
        row[0] = s_coeff(1, 0);
        rows.push((row, s_tl - cfg.red_tightening() - (x_hat.s + v0)));
    }
    // Terminal halfplanes on (s_bar_N, v_bar_N).
    let push_region_rows = |region: &ConvexRegion2, rows: &mut Vec<(Vec<f64>, f64)>| {
        for h in region.halfplanes() {
            let mut row = vec![0.0; n];
            for (j, r) in row.iter_mut().enumerate() {
                *r = h.a[0] * s_coeff(n, j) + h.a[1];
            }
            let rhs = h.b - h.a[0] * (x_hat.s + n as f64 * v0) - h.a[1] * v0;
            rows.push((row, rhs));
        }
    };
    push_region_rows(p_tight, &mut rows);
    if let Some(s) = s_tight {
        push_region_rows(s, &mut rows);
    }

    let qp_rows = rows.clone();

    // Terminal-cost blocks: convex weights over the pruned finite-value
    // points, one block per noise sample, coupled to the terminal state.
    let mut pts_s = Vec::new();
    let mut pts_v = Vec::new();
    let mut lam_cost = Vec::new();
    let mut rhs_s = Vec::new();
    let mut eu_s = vec![0.0; n];
    let mut eu_v = vec![0.0; n];
    if terminal_value_active && pre_infeasible.is_none() {
        if art.table.finite_count() == 0 {
            pre_infeasible = Some("value table has no finite entries".into());
        } else {
            for (p, j) in art.table.finite_points() {
                pts_s.push(p.s);
                pts_v.push(p.v);
                lam_cost.push(j / cfg.m_samples as f64);
            }
            for m in 0..cfg.m_samples {
                let sn = art.sn.get(m).copied().unwrap_or(0.0);
                rhs_s.push(x_hat.s + n as f64 * v0 + sn);
            }
            for (j, (es, ev)) in eu_s.iter_mut().zip(eu_v.iter_mut()).enumerate() {
                *es = s_coeff(n, j);
                *ev = 1.0;
            }
            // Feasibility rows: the terminal queries must stay inside the
            // value domain; fold per-sample offsets to their tightest bound.
            let sn_max = art.sn.iter().cloned().fold(0.0f64, f64::max);
            let sn_min = art.sn.iter().cloned().fold(0.0f64, f64::min);
            if let Some(hull) = art.table.domain_hull() {
                for h in hull.halfplanes() {
                    let mut row = vec![0.0; n];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = h.a[0] * s_coeff(n, j) + h.a[1];
                    }
                    let worst_sn = if h.a[0] >= 0.0 { sn_max } else { sn_min };
                    let rhs = h.b
                        - h.a[0] * (x_hat.s + n as f64 * v0 + worst_sn)
                        - h.a[1] * v0;
                    rows.push((row, rhs));
                }
            } else {
                pre_infeasible = Some("value table has no domain hull".into());
            }
        }
    }

    let qp = MpcBlockQp {
        nu: n,
        qu,
        cu,
        gu: qp_rows.iter().flat_map(|(r, _)| r.clone()).collect(),
        hu: qp_rows.iter().map(|(_, h)| *h).collect(),
        pts_s,
        pts_v,
        lam_cost,
        eu_s,
        eu_v,
        rhs_s,
        rhs_v: v0,
        const_obj,
    };
    Ok(MpcProblem {
        qp,
        feas_rows: rows,
        pre_infeasible,
        n_horizon: n,
        x0: x_hat,
        s_tl,
        red_row_active,
        terminal_value_active,
    })
}

/// Solves an assembled problem: exact feasibility screen by LP first, then
/// the interior-point solve with a KKT self-check.
pub fn solve_mpc(problem: &MpcProblem, cfg: &MpcConfig) -> Result<MpcSolution, CtrlError> {
    let start = std::time::Instant::now();
    let n = problem.n_horizon;
    if let Some(reason) = &problem.pre_infeasible {
        return Ok(MpcSolution {
            status: MpcStatus::Infeasible,
            u: Vec::new(),
            predicted: Vec::new(),
            objective: f64::INFINITY,
            solve_time: start.elapsed(),
            kkt_residual: 0.0,
            infeasible_reason: Some(reason.clone()),
        });
    }

    // Phase-1 feasibility over u alone (substituting u = a_min + u_hat with
    // u_hat >= 0). The weight blocks are feasible iff every terminal query
    // lies in the value-domain hull, and those rows are included.
    let m_rows = problem.feas_rows.len();
    let n_lp = n + m_rows;
    let mut a = vec![0.0; m_rows * n_lp];
    let mut b = vec![0.0; m_rows];
    for (i, (g, h)) in problem.feas_rows.iter().enumerate() {
        let gsum: f64 = g.iter().sum();
        for j in 0..n {
            a[i * n_lp + j] = g[j];
        }
        a[i * n_lp + n + i] = 1.0;
        b[i] = h - cfg.a_min * gsum;
    }
    let c = vec![0.0; n_lp];
    match solve_standard(&c, &a, &b, m_rows, n_lp)? {
        LpOutcome::Infeasible { .. } => {
            return Ok(MpcSolution {
                status: MpcStatus::Infeasible,
                u: Vec::new(),
                predicted: Vec::new(),
                objective: f64::INFINITY,
                solve_time: start.elapsed(),
                kkt_residual: 0.0,
                infeasible_reason: Some("terminal constraints unreachable in N steps".into()),
            });
        }
        LpOutcome::Unbounded => unreachable!("feasibility objective is constant"),
        LpOutcome::Optimal(_) => {}
    }

    let sol = solve_block(
        &problem.qp,
        &IpmOptions {
            tol: cfg.qp_tol,
            max_iter: 100,
        },
    )?;
    let u: Vec<f64> = sol.z[..n].to_vec();
    let mut predicted = Vec::with_capacity(n + 1);
    let mut x = problem.x0;
    predicted.push(x);
    for &ui in &u {
        x = crate::plant::SystemMatrices::default().step(x, ui);
        predicted.push(x);
    }
    Ok(MpcSolution {
        status: MpcStatus::Optimal,
        u,
        predicted,
        objective: sol.obj,
        solve_time: start.elapsed(),
        kkt_residual: sol.kkt.max().max(problem.qp.primal_violation(&sol.z)),
        infeasible_reason: None,
    })
}

// ---------------------------------------------------------------------------
// Backup cruise controller
// ---------------------------------------------------------------------------

/// Speed-tracking backup with a robust stopping rule.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CruiseConfig {
    pub v_ref: f64,
    pub k_p: f64,
    pub stop_margin: f64,
}

impl Default for CruiseConfig {
    fn default() -> Self {
        CruiseConfig {
            v_ref: 5.0,
            k_p: 0.6,
            stop_margin: 1.0,
        }
    }
}

/// Proportional speed tracking, overridden by a stopping rule whenever the
/// signal at the estimated arrival is not green: once the distance to the
/// light minus the worst-case position error and stop margin shrinks to the
/// braking distance (with a one-step lookahead), command the deceleration
/// that stops exactly at the robust stop line. The returned input always
/// keeps `0 <= v` and stays inside the input box.
pub fn cruise_control(
    x_hat: Estimate,
    light: Option<(&TrafficLight, u32)>,
    cfg: &CruiseConfig,
    mpc: &MpcConfig,
) -> f64 {
    let v = x_hat.v;
    let clamp_box = |u: f64| u.max(-v).clamp(mpc.a_min, mpc.a_max).min(mpc.v_max - v);
    let mut u = clamp_box(cfg.k_p * (cfg.v_ref - v));
    if let Some((light, now)) = light {
        let dist = light.s_tl - x_hat.s;
        if dist > -mpc.w_max {
            let k_arr = (dist.max(0.0) / v.max(1.0)).ceil() as u32;
            let arrival_signal = signal_at(light, (now + k_arr) as f64);
            if arrival_signal != Signal::Green {
                let dist_avail = dist - mpc.w_max - cfg.stop_margin;
                // Stoppability must survive applying `u` for one step:
                // remaining room after the step must cover the resulting
                // braking distance. Otherwise command the constant
                // deceleration that stops exactly at the robust stop line.
                let v_next = (v + u).clamp(0.0, mpc.v_max);
                let d_next = dist_avail - (v + 0.5 * u);
                if d_next < v_next * v_next / (2.0 * mpc.a_min.abs()) {
                    u = if dist_avail > 1e-9 {
                        clamp_box(-v * v / (2.0 * dist_avail))
                    } else {
                        clamp_box(mpc.a_min)
                    };
                }
            }
        }
    }
    // Never command negative speed or leave the input box.
    clamp_box(u)
}

// ---------------------------------------------------------------------------
// Per-step decision
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub u: f64,
    pub used_fallback: bool,
    pub mpc: Option<MpcSolution>,
    /// Diagnostic only: a nominal plan crossed the light at an intermediate
    /// step while the signal was not green.
    pub warning: Option<String>,
}

/// One receding-horizon step: build and solve the MPC; on infeasibility fall
/// back to the cruise law. Only the first planned input is returned.
///
/// `x_hat` and `light` live in route coordinates; the artifacts carry their
/// own frame and the query is translated by the difference.
#[allow(clippy::too_many_arguments)]
pub fn control_step(
    x_hat: Estimate,
    light: &TrafficLight,
    now: u32,
    signal: Signal,
    windows: Windows,
    art: &SegmentArtifacts,
    energy: &EnergyModel,
    cfg: &MpcConfig,
    cruise: &CruiseConfig,
) -> Result<ControlDecision, CtrlError> {
    let offset = light.s_tl - art.s_tl();
    let x_local = Estimate::new(x_hat.s - offset, x_hat.v);
    let problem = build_mpc(x_local, signal, windows, art, energy, cfg)?;
    let sol = solve_mpc(&problem, cfg)?;
    match sol.status {
        MpcStatus::Optimal => {
            let mut warning = None;
            for (i, st) in sol.predicted.iter().enumerate().skip(1) {
                if i < problem.n_horizon
                    && st.s > problem.s_tl + 1e-6
                    && signal_at(light, (now + i as u32) as f64) != Signal::Green
                {
                    warning = Some(format!(
                        "nominal plan crosses the light at step +{i} during {}",
                        signal_at(light, (now + i as u32) as f64)
                    ));
                    break;
                }
            }
            let u = sol.u[0];
            Ok(ControlDecision {
                u,
                used_fallback: false,
                mpc: Some(sol),
                warning,
            })
        }
        MpcStatus::Infeasible => {
            let u = cruise_control(x_hat, Some((light, now)), cruise, cfg);
            Ok(ControlDecision {
                u,
                used_fallback: true,
                mpc: Some(sol),
                warning: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{cost_to_go, prune_value_points, Dataset, LearnParams};
    use crate::plant::{sample_terminal_noise, NoiseModel, SystemMatrices, VehicleState};
    use crate::traffic::table1_light;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> MpcConfig {
        MpcConfig::default()
    }

    #[test]
    fn tightening_amounts() {
        let c = cfg();
        assert!((c.red_tightening() - 3.3).abs() < 1e-12);
        assert!((c.terminal_tightening() - 4.5).abs() < 1e-12);
    }

    fn params() -> LearnParams {
        LearnParams {
            sys: SystemMatrices::default(),
            gain: 0.05,
            w_max: 3.0,
        }
    }

    /// Synthetic artifacts from a fan of rollouts covering the approach to a
    /// light at 0: constant-acceleration sweeps (re-accelerating instead of
    /// parking when speed hits zero, so every run reaches the target) plus a
    /// few stop-wait-launch runs that give the stay-behind sets their
    /// holding witnesses.
    fn build_artifacts() -> (Dataset, SegmentArtifacts) {
        let mut d = Dataset::new(14.0, -3.0, 2.0);
        let sys = SystemMatrices::default();
        for (k, v0) in [3.0f64, 5.0, 7.0, 9.0, 11.0].iter().enumerate() {
            for (r, u_acc) in [0.0f64, 0.5, -0.5].iter().enumerate() {
                let mut x = VehicleState::new(-200.0, *v0);
                let mut traj = Vec::new();
                for _ in 0..220 {
                    let u = if x.v + u_acc < 0.0 {
                        1.0
                    } else if x.v + u_acc > 14.0 {
                        0.0
                    } else {
                        *u_acc
                    };
                    traj.push((Point2::new(x.s, x.v), u));
                    x = sys.step(x, u);
                    if x.s > 40.0 {
                        break;
                    }
                }
                d.augment(&traj, k as u32, r as u32).unwrap();
            }
        }
        // Stop, hold, launch at several positions.
        for (r, stop_at) in [-70.0f64, -55.0, -40.0, -10.0].iter().enumerate() {
            let mut x = VehicleState::new(stop_at - 40.0, 6.0);
            let mut traj = Vec::new();
            for step in 0..80 {
                let dist = stop_at - x.s;
                let u = if x.v > 0.0 && dist <= x.v * x.v / 4.0 + x.v {
                    (-x.v * x.v / (2.0 * dist.max(0.5))).max(-x.v).max(-3.0)
                } else if x.v < 0.05 && step < 40 {
                    0.0
                } else if x.v < 6.0 && x.s < 5.0 {
                    1.0
                } else {
                    0.0
                };
                traj.push((Point2::new(x.s, x.v), u));
                x = sys.step(x, u);
                if x.s > 30.0 {
                    break;
                }
            }
            d.augment(&traj, 9, r as u32).unwrap();
        }
        let p = params();
        let energy = EnergyModel::default_ground_truth();
        let table = cost_to_go(&d, 0.0, &p, &energy, 4, 7).unwrap();
        let table = prune_value_points(&table);
        let mut ladder_before = Ladder::new(TargetKind::BeforeLight, 0.0);
        ladder_before.ensure_depth(&d, &p, 60).unwrap();
        let mut ladder_after = Ladder::new(TargetKind::AfterLight, 0.0);
        ladder_after.ensure_depth(&d, &p, 60).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let sn = sample_terminal_noise(&mut rng, 10, 5, 0.05, &NoiseModel::uniform(3.0));
        let art = SegmentArtifacts::new(ladder_before, ladder_after, table, sn, &cfg());
        (d, art)
    }

    fn artifacts(_seed: u64) -> &'static (Dataset, SegmentArtifacts) {
        static CELL: std::sync::OnceLock<(Dataset, SegmentArtifacts)> = std::sync::OnceLock::new();
        CELL.get_or_init(build_artifacts)
    }

    #[test]
    fn mpc_solves_and_respects_constraints() {
        let art = &artifacts(7).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        // 150 m before the light, 30 s to the deadline.
        let x = Estimate::new(-150.0, 5.0);
        let windows = Windows {
            t_red: None,
            t_green: 25,
        };
        let p = build_mpc(x, Signal::Green, windows, art, &energy, &c).unwrap();
        assert!(p.pre_infeasible.is_none());
        let sol = solve_mpc(&p, &c).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal, "{:?}", sol.infeasible_reason);
        assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
        assert_eq!(sol.u.len(), 5);
        for &u in &sol.u {
            assert!((-3.0 - 1e-7..=2.0 + 1e-7).contains(&u));
        }
        for st in &sol.predicted {
            assert!(st.v >= -1e-7 && st.v <= 14.0 + 1e-7);
        }
        // Terminal state inside the tightened pass-by region.
        let xn = sol.predicted[5];
        let p_t = art.ladder_after.stage(25).erode_s(c.terminal_tightening());
        assert!(p_t.contains(Point2::new(xn.s, xn.v), 1e-5));
    }

    #[test]
    fn red_row_keeps_first_step_behind() {
        let art = &artifacts(8).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        // 6 m before the light at speed, signal red, green in 10 steps.
        let x = Estimate::new(-6.0, 3.0);
        let windows = Windows {
            t_red: Some(10),
            t_green: 20,
        };
        let p = build_mpc(x, Signal::Red, windows, art, &energy, &c).unwrap();
        let sol = solve_mpc(&p, &c).unwrap();
        if sol.status == MpcStatus::Optimal {
            assert!(sol.predicted[1].s <= -3.3 + 1e-6);
        }
    }

    #[test]
    fn zero_noise_single_sample_terminal_cost_matches_table() {
        let art = &artifacts(9).1;
        let energy = EnergyModel::default_ground_truth();
        let mut c = cfg();
        c.m_samples = 1;
        let mut art1 = art.clone();
        art1.sn = vec![0.0];
        let x = Estimate::new(-120.0, 6.0);
        let windows = Windows {
            t_red: None,
            t_green: 18,
        };
        let p = build_mpc(x, Signal::Green, windows, &art1, &energy, &c).unwrap();
        let sol = solve_mpc(&p, &c).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        // Reconstruct the objective independently: stage costs plus V at the
        // terminal state.
        let mut stage_sum = 0.0;
        for (i, &u) in sol.u.iter().enumerate() {
            stage_sum += energy.stage_cost(sol.predicted[i].v, u);
        }
        let xn = sol.predicted[5];
        let v_term = art1.table.evaluate(Point2::new(xn.s, xn.v));
        assert!(
            (sol.objective - (stage_sum + v_term)).abs() < 1e-4,
            "objective {} vs {}",
            sol.objective,
            stage_sum + v_term
        );
    }

    #[test]
    fn pre_flagged_infeasible_returns_immediately() {
        let art = &artifacts(10).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        // Deep red window forces the stay-behind set; a state far past any
        // reachable stay-behind region cannot satisfy it.
        let x = Estimate::new(-2.0, 13.0);
        let windows = Windows {
            t_red: Some(40),
            t_green: 50,
        };
        let p = build_mpc(x, Signal::Red, windows, art, &energy, &c).unwrap();
        let sol = solve_mpc(&p, &c).unwrap();
        assert_eq!(sol.status, MpcStatus::Infeasible);
        assert!(sol.infeasible_reason.is_some());
    }

    #[test]
    fn segment_exit_case_drops_value_blocks() {
        let art = &artifacts(11).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        let x = Estimate::new(-10.0, 6.0);
        // t_green = 0: the pass-by stage is the raw after-light halfspace,
        // whose tightened version lies entirely past the light.
        let windows = Windows {
            t_red: None,
            t_green: 0,
        };
        let p = build_mpc(x, Signal::Green, windows, art, &energy, &c).unwrap();
        assert!(!p.terminal_value_active);
        assert_eq!(p.qp.n_samples(), 0);
        let sol = solve_mpc(&p, &c).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        // Terminal nominal position must clear the 4.5 m tightening.
        assert!(sol.predicted[5].s >= 4.5 - 1e-6);
    }

    #[test]
    fn cruise_examples() {
        let c = CruiseConfig {
            v_ref: 5.0,
            k_p: 0.6,
            stop_margin: 1.0,
        };
        let m = cfg();
        // At reference speed, green, far away: no input.
        let light = table1_light();
        let u = cruise_control(Estimate::new(0.0, 5.0), Some((&light, 0)), &c, &m);
        assert!(u.abs() < 1e-12);
        // Red at arrival and inside braking distance: strong braking.
        let red_light = TrafficLight {
            s_tl: 10.0,
            green_dur: 5.0,
            yellow_dur: 0.0,
            red_dur: 1000.0,
            phase_offset: 5.0,
        };
        let u = cruise_control(Estimate::new(4.0, 5.0), Some((&red_light, 0)), &c, &m);
        assert!(u < -1.0, "expected braking, got {u}");
        // Stopped before a red light: hold.
        let u = cruise_control(Estimate::new(5.0, 0.0), Some((&red_light, 0)), &c, &m);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn cruise_never_crosses_red() {
        // Closed-loop: drive toward a light that is red forever.
        let c = CruiseConfig {
            v_ref: 10.0,
            k_p: 0.6,
            stop_margin: 1.0,
        };
        let m = cfg();
        let light = TrafficLight {
            s_tl: 80.0,
            green_dur: 1.0,
            yellow_dur: 0.0,
            red_dur: 10000.0,
            phase_offset: 1.0,
        };
        let sys = SystemMatrices::default();
        let mut x = VehicleState::new(0.0, 0.0);
        for k in 0..120 {
            // Worst-case estimate bias toward "further back" (s_hat = s - 3
            // makes the controller think it is 3 m behind truth).
            let xh = Estimate::new(x.s - 3.0, x.v);
            let u = cruise_control(xh, Some((&light, k)), &c, &m);
            x = sys.step(x, u);
            assert!(x.v >= -1e-9);
            assert!(x.s < 80.0, "crossed red at step {k}: s = {}", x.s);
        }
        // Also with the bias the other way.
        let mut x = VehicleState::new(0.0, 0.0);
        for k in 0..120 {
            let xh = Estimate::new(x.s + 3.0, x.v);
            let u = cruise_control(xh, Some((&light, k)), &c, &m);
            x = sys.step(x, u);
            assert!(x.s < 80.0, "crossed red at step {k}: s = {}", x.s);
        }
    }

    #[test]
    fn control_step_applies_first_input_or_falls_back() {
        let art = &artifacts(12).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        let cruise = CruiseConfig::default();
        // The artifacts sit in the light frame (s_tl = 0); the route light is
        // at 200, so route position 50 maps to -150.
        let light = table1_light();
        let windows = Windows {
            t_red: None,
            t_green: 25,
        };
        let dec = control_step(
            Estimate::new(50.0, 5.0),
            &light,
            0,
            Signal::Green,
            windows,
            art,
            &energy,
            &c,
            &cruise,
        )
        .unwrap();
        assert!(!dec.used_fallback);
        let sol = dec.mpc.unwrap();
        assert_eq!(dec.u, sol.u[0]);

        // Empty-dataset artifacts: everything infeasible, cruise takes over.
        let d = Dataset::new(14.0, -3.0, 2.0);
        let mut lb = Ladder::new(TargetKind::BeforeLight, 0.0);
        lb.ensure_depth(&d, &params(), 60).unwrap();
        let mut la = Ladder::new(TargetKind::AfterLight, 0.0);
        la.ensure_depth(&d, &params(), 60).unwrap();
        let empty = SegmentArtifacts::new(
            lb,
            la,
            CostToGoTable::from_points(0.0, Vec::new()),
            vec![0.0; 10],
            &c,
        );
        let dec = control_step(
            Estimate::new(50.0, 5.0),
            &light,
            0,
            Signal::Green,
            windows,
            &empty,
            &energy,
            &c,
            &cruise,
        )
        .unwrap();
        assert!(dec.used_fallback);
    }

    #[test]
    fn determinism_bit_identical() {
        let art = &artifacts(13).1;
        let energy = EnergyModel::default_ground_truth();
        let c = cfg();
        let x = Estimate::new(-100.0, 4.0);
        let windows = Windows {
            t_red: Some(5),
            t_green: 22,
        };
        let p1 = build_mpc(x, Signal::Green, windows, art, &energy, &c).unwrap();
        let p2 = build_mpc(x, Signal::Green, windows, art, &energy, &c).unwrap();
        let s1 = solve_mpc(&p1, &c).unwrap();
        let s2 = solve_mpc(&p2, &c).unwrap();
        assert_eq!(s1.u, s2.u);
    }
}
