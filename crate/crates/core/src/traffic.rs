//! Route segmentation, deterministic traffic-light timelines, the
//! (t_red, t_green) window computation and a greedy green-wave scheduler.
//!
//! Time is integer steps of 1 s throughout the control stack; light phases
//! are specified in whole seconds. Yellow is treated as not crossable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid light parameters: {0}")]
    InvalidLight(String),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("deadline inside horizon (k={k}, N={n}, k_pass={k_pass})")]
    DeadlineInsideHorizon { k: u32, n: u32, k_pass: u32 },
    #[error("infeasible schedule: no usable green window before k_pass={0}")]
    InfeasibleSchedule(u32),
    #[error("no green wave reachable for light at {0} m")]
    NoGreenWave(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signal {
    Green,
    Yellow,
    Red,
}

impl std::fmt::Display for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Signal::Green => write!(f, "G"),
            Signal::Yellow => write!(f, "Y"),
            Signal::Red => write!(f, "R"),
        }
    }
}

/// One traffic light: position plus a periodic green -> yellow -> red cycle.
/// `phase_offset` is the time already elapsed within the cycle at t = 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrafficLight {
    pub s_tl: f64,
    #[serde(rename = "green")]
    pub green_dur: f64,
    #[serde(rename = "yellow")]
    pub yellow_dur: f64,
    #[serde(rename = "red")]
    pub red_dur: f64,
    #[serde(rename = "offset")]
    pub phase_offset: f64,
}

impl TrafficLight {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if !(self.green_dur > 0.0 && self.red_dur > 0.0 && self.yellow_dur >= 0.0) {
            return Err(TrafficError::InvalidLight(
                "durations must be positive (yellow may be zero)".into(),
            ));
        }
        let cycle = self.cycle();
        if !(0.0..cycle).contains(&self.phase_offset) {
            return Err(TrafficError::InvalidLight(format!(
                "phase offset {} outside [0, {})",
                self.phase_offset, cycle
            )));
        }
        Ok(())
    }

    pub fn cycle(&self) -> f64 {
        self.green_dur + self.yellow_dur + self.red_dur
    }
}

/// Signal shown at time `t >= 0`.
pub fn signal_at(light: &TrafficLight, t: f64) -> Signal {
    let cycle = light.cycle();
    let phase = (light.phase_offset + t).rem_euclid(cycle);
    if phase < light.green_dur {
        Signal::Green
    } else if phase < light.green_dur + light.yellow_dur {
        Signal::Yellow
    } else {
        Signal::Red
    }
}

/// Remaining time of the current phase at time `t`.
pub fn remaining_phase(light: &TrafficLight, t: f64) -> f64 {
    let cycle = light.cycle();
    let phase = (light.phase_offset + t).rem_euclid(cycle);
    if phase < light.green_dur {
        light.green_dur - phase
    } else if phase < light.green_dur + light.yellow_dur {
        light.green_dur + light.yellow_dur - phase
    } else {
        cycle - phase
    }
}

/// A route: ordered traffic lights, goal position and the vehicle's
/// state/input box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSpec {
    pub lights: Vec<TrafficLight>,
    pub goal_s: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl RouteSpec {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.goal_s <= 0.0 {
            return Err(TrafficError::InvalidRoute("goal_s must be positive".into()));
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0 && self.v_max > 0.0) {
            return Err(TrafficError::InvalidRoute(
                "need a_min < 0 < a_max and v_max > 0".into(),
            ));
        }
        let mut prev = f64::NEG_INFINITY;
        for l in &self.lights {
            l.validate()?;
            if l.s_tl <= prev {
                return Err(TrafficError::InvalidRoute(
                    "light positions must be strictly increasing".into(),
                ));
            }
            prev = l.s_tl;
        }
        Ok(())
    }
}

/// High-level crossing deadlines, one step index per light.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PassSchedule {
    pub k_pass: Vec<u32>,
}

/// Horizon-relative terminal windows. `t_red` is `None` when the whole
/// `[k+N, k_pass]` window is already crossable green.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windows {
    pub t_red: Option<u32>,
    pub t_green: u32,
}

/// Computes `t_green = k_pass - (k + N)` and, if a non-green step intervenes,
/// the first step offset `t_red` from which the signal stays green through
/// `k_pass`. Yellow counts as not crossable.
pub fn compute_windows(
    k: u32,
    n: u32,
    light: &TrafficLight,
    k_pass: u32,
) -> Result<Windows, TrafficError> {
    if k + n > k_pass {
        return Err(TrafficError::DeadlineInsideHorizon { k, n, k_pass });
    }
    let t_green = k_pass - (k + n);
    if signal_at(light, k_pass as f64) != Signal::Green {
        return Err(TrafficError::InfeasibleSchedule(k_pass));
    }
    // Scan back from k_pass for the start of its contiguous green run.
    let mut g = k_pass;
    while g > k + n && signal_at(light, (g - 1) as f64) == Signal::Green {
        g -= 1;
    }
    if g == k + n {
        return Ok(Windows { t_red: None, t_green });
    }
    let t_red = g - (k + n);
    if t_red >= t_green {
        // Only the deadline step itself is green; the stay-behind and
        // pass-by sets would degenerate.
        return Err(TrafficError::InfeasibleSchedule(k_pass));
    }
    Ok(Windows {
        t_red: Some(t_red),
        t_green,
    })
}

/// Greedy earliest-window green-wave scheduler.
///
/// For each light in order: bound the arrival interval from the previous
/// pass (time-optimal acceleration to `v_max` on the near end, a crawl on
/// the far end), then pick the earliest integer instant inside that interval
/// that is green with a 2 s margin from both phase boundaries.
pub fn green_wave(
    route: &RouteSpec,
    t0: f64,
    v_cruise_hint: f64,
) -> Result<PassSchedule, TrafficError> {
    route.validate()?;
    const MARGIN: f64 = 2.0;
    const V_CRAWL: f64 = 0.5;
    let hint = v_cruise_hint.clamp(0.0, route.v_max);
    let mut k_pass = Vec::with_capacity(route.lights.len());
    let mut t_prev = t0;
    let mut s_prev = 0.0;
    for light in &route.lights {
        let dist = light.s_tl - s_prev;
        let earliest = t_prev + min_travel_time(dist, hint, route.v_max, route.a_max);
        let latest = t_prev + dist / V_CRAWL;
        let mut chosen: Option<u32> = None;
        let start = (earliest + MARGIN).ceil() as u32;
        let end = latest.ceil() as u32;
        for t in start..=end {
            if green_with_margin(light, t, MARGIN) {
                chosen = Some(t);
                break;
            }
        }
        let t_pass = chosen.ok_or(TrafficError::NoGreenWave(light.s_tl))?;
        k_pass.push(t_pass);
        t_prev = t_pass as f64;
        s_prev = light.s_tl;
    }
    Ok(PassSchedule { k_pass })
}

fn green_with_margin(light: &TrafficLight, t: u32, margin: f64) -> bool {
    let t = t as f64;
    if signal_at(light, t) != Signal::Green {
        return false;
    }
    let cycle = light.cycle();
    let phase = (light.phase_offset + t).rem_euclid(cycle);
    phase >= margin && light.green_dur - phase >= margin
}

/// Time-optimal travel time over `dist` starting at speed `v0`, accelerating
/// at `a_max` up to `v_max`.
fn min_travel_time(dist: f64, v0: f64, v_max: f64, a_max: f64) -> f64 {
    if dist <= 0.0 {
        return 0.0;
    }
    let t_acc = (v_max - v0).max(0.0) / a_max;
    let d_acc = v0 * t_acc + 0.5 * a_max * t_acc * t_acc;
    if d_acc >= dist {
        // Stays in the acceleration phase.
        ((v0 * v0 + 2.0 * a_max * dist).sqrt() - v0) / a_max
    } else {
        t_acc + (dist - d_acc) / v_max
    }
}

/// Per-step situational bundle for the segment containing the current light.
#[derive(Debug, Clone)]
pub struct SegmentContext {
    pub light_index: usize,
    pub signal: Signal,
    pub remaining: f64,
    pub distance_to_light: f64,
    pub s_tl: f64,
    pub k_pass: u32,
    pub windows: Windows,
}

/// Robust segment-transition rule: advance only once the estimated position
/// exceeds the light by the worst-case position error, so the true position
/// is guaranteed past the light.
pub fn should_advance(s_tl: f64, s_hat: f64, w_max: f64) -> bool {
    s_hat - w_max >= s_tl
}

/// Builds the context for light `light_index` at step `k`; the caller tracks
/// the index and applies [`should_advance`].
pub fn segment_context(
    route: &RouteSpec,
    schedule: &PassSchedule,
    light_index: usize,
    k: u32,
    n: u32,
    s_hat: f64,
) -> Result<SegmentContext, TrafficError> {
    let light = &route.lights[light_index];
    let windows = compute_windows(k, n, light, schedule.k_pass[light_index])?;
    Ok(SegmentContext {
        light_index,
        signal: signal_at(light, k as f64),
        remaining: remaining_phase(light, k as f64),
        distance_to_light: light.s_tl - s_hat,
        s_tl: light.s_tl,
        k_pass: schedule.k_pass[light_index],
        windows,
    })
}

/// The fixed single-segment training scenario: one light 200 m out,
/// currently green with 25 s remaining (cycle 30/5/25), 20 s to pass.
pub fn table1_light() -> TrafficLight {
    TrafficLight {
        s_tl: 200.0,
        green_dur: 30.0,
        yellow_dur: 5.0,
        red_dur: 25.0,
        phase_offset: 5.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn always_green() -> TrafficLight {
        TrafficLight {
            s_tl: 100.0,
            green_dur: 1000.0,
            yellow_dur: 0.0,
            red_dur: 1e-9,
            phase_offset: 0.0,
        }
    }

    #[test]
    fn table1_signal_timeline() {
        let l = table1_light();
        assert_eq!(signal_at(&l, 0.0), Signal::Green);
        assert_eq!(signal_at(&l, 24.0), Signal::Green);
        assert_eq!(signal_at(&l, 27.0), Signal::Yellow);
        assert_eq!(signal_at(&l, 40.0), Signal::Red);
        assert_eq!(signal_at(&l, 55.0), Signal::Green);
        // Periodicity.
        for t in [0.0, 13.0, 27.5, 41.0] {
            assert_eq!(signal_at(&l, t), signal_at(&l, t + l.cycle()));
        }
    }

    #[test]
    fn zero_yellow_never_yellow() {
        let l = TrafficLight {
            s_tl: 50.0,
            green_dur: 10.0,
            yellow_dur: 0.0,
            red_dur: 10.0,
            phase_offset: 0.0,
        };
        for t in 0..60 {
            assert_ne!(signal_at(&l, t as f64), Signal::Yellow);
        }
    }

    #[test]
    fn windows_table1() {
        let l = table1_light();
        let w = compute_windows(0, 5, &l, 20).unwrap();
        assert_eq!(w, Windows { t_red: None, t_green: 15 });
    }

    #[test]
    fn windows_red_until_thirty() {
        // Red until t=30 then green: offset into the red phase so that the
        // cycle turns green exactly at 30.
        let l = TrafficLight {
            s_tl: 100.0,
            green_dur: 40.0,
            yellow_dur: 5.0,
            red_dur: 30.0,
            phase_offset: 45.0,
        };
        assert_eq!(signal_at(&l, 29.0), Signal::Red);
        assert_eq!(signal_at(&l, 30.0), Signal::Green);
        let w = compute_windows(0, 5, &l, 40).unwrap();
        assert_eq!(w, Windows { t_red: Some(25), t_green: 35 });
        // t_red boundary semantics: green from k+N+t_red, not green before.
        assert_eq!(signal_at(&l, (5 + 25) as f64), Signal::Green);
        assert_ne!(signal_at(&l, (5 + 24) as f64), Signal::Green);
    }

    #[test]
    fn windows_deadline_inside_horizon() {
        let l = table1_light();
        assert!(matches!(
            compute_windows(16, 5, &l, 20),
            Err(TrafficError::DeadlineInsideHorizon { .. })
        ));
    }

    #[test]
    fn windows_red_deadline_is_infeasible() {
        let l = table1_light();
        // t=40 is red.
        assert!(matches!(
            compute_windows(0, 5, &l, 40),
            Err(TrafficError::InfeasibleSchedule(40))
        ));
    }

    fn four_light_route() -> RouteSpec {
        RouteSpec {
            lights: vec![
                TrafficLight { s_tl: 189.0, green_dur: 30.0, yellow_dur: 5.0, red_dur: 25.0, phase_offset: 40.0 },
                TrafficLight { s_tl: 378.0, green_dur: 30.0, yellow_dur: 5.0, red_dur: 25.0, phase_offset: 50.0 },
                TrafficLight { s_tl: 490.0, green_dur: 30.0, yellow_dur: 5.0, red_dur: 25.0, phase_offset: 26.0 },
                TrafficLight { s_tl: 553.0, green_dur: 30.0, yellow_dur: 5.0, red_dur: 25.0, phase_offset: 14.0 },
            ],
            goal_s: 575.0,
            v_max: 14.0,
            a_min: -3.0,
            a_max: 2.0,
        }
    }

    #[test]
    fn four_light_cycles_pass_at_constant_five() {
        // The route is designed so a constant 5 m/s run crosses every light
        // on green; verify the synthesized cycles do that.
        let route = four_light_route();
        for light in &route.lights {
            let arrival = light.s_tl / 5.0;
            assert_eq!(
                signal_at(light, arrival),
                Signal::Green,
                "light at {} m, arrival {arrival}",
                light.s_tl
            );
        }
        // And the reference deadlines are themselves green.
        for (light, k) in route.lights.iter().zip([43u32, 81, 103, 116]) {
            assert_eq!(signal_at(light, k as f64), Signal::Green);
        }
    }

    #[test]
    fn green_wave_four_lights_leq_reference() {
        let route = four_light_route();
        let schedule = green_wave(&route, 0.0, 5.0).unwrap();
        let reference = [43u32, 81, 103, 116];
        for (i, (&k, &r)) in schedule.k_pass.iter().zip(&reference).enumerate() {
            assert!(k <= r, "light {i}: scheduled {k} > reference {r}");
            assert_eq!(signal_at(&route.lights[i], k as f64), Signal::Green);
        }
        let mut prev = 0;
        for &k in &schedule.k_pass {
            assert!(k > prev);
            prev = k;
        }
    }

    #[test]
    fn green_wave_always_green_is_earliest_plus_margin() {
        let route = RouteSpec {
            lights: vec![always_green()],
            goal_s: 120.0,
            v_max: 14.0,
            a_min: -3.0,
            a_max: 2.0,
        };
        let schedule = green_wave(&route, 0.0, 5.0).unwrap();
        let earliest = super::min_travel_time(100.0, 5.0, 14.0, 2.0);
        assert_eq!(schedule.k_pass[0], (earliest + 2.0).ceil() as u32);
    }

    #[test]
    fn green_wave_red_forever_fails() {
        let route = RouteSpec {
            lights: vec![TrafficLight {
                s_tl: 100.0,
                green_dur: 1e-6,
                yellow_dur: 0.0,
                red_dur: 1000.0,
                phase_offset: 1.0,
            }],
            goal_s: 120.0,
            v_max: 14.0,
            a_min: -3.0,
            a_max: 2.0,
        };
        assert!(matches!(
            green_wave(&route, 0.0, 5.0),
            Err(TrafficError::NoGreenWave(_))
        ));
    }

    #[test]
    fn transition_rule_uses_worst_case_error() {
        assert!(should_advance(189.0, 193.0, 3.0));
        assert!(!should_advance(189.0, 191.0, 3.0));
    }
}
