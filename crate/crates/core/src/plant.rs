//! Longitudinal plant, noisy position measurement and the state observer.
//!
//! The discrete dynamics are the exact zero-order hold of a double
//! integrator at Ts = 1 s: `A = [[1, 1], [0, 1]]`, `B = [0.5, 1]`. Position
//! noise enters through the measurement only; speed is measured exactly.

use crate::geometry::SInterval;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("noise outside support")]
    NoiseOutsideSupport,
    #[error("observer gain must satisfy 0 < L < 1, got {0}")]
    BadGain(f64),
}

/// True vehicle state: position [m] and speed [m/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub s: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(s: f64, v: f64) -> Self {
        VehicleState { s, v }
    }
}

/// Observer output; same coordinates as [`VehicleState`].
pub type Estimate = VehicleState;

/// Sensor reading: noisy position, exact speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub s_meas: f64,
    pub v_meas: f64,
}

/// Bounded localization noise `w ~ U(W)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub bound: SInterval,
}

impl NoiseModel {
    pub fn uniform(half_width: f64) -> Self {
        NoiseModel {
            bound: SInterval::symmetric(half_width),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.bound.lo == self.bound.hi {
            return self.bound.lo;
        }
        rng.random_range(self.bound.lo..=self.bound.hi)
    }
}

/// Discretized system matrices. `A^i F = F` for all i >= 0 because the noise
/// channel `F = [1, 0]'` is the position axis, which `A` leaves fixed.
#[derive(Debug, Clone, Copy)]
pub struct SystemMatrices {
    pub ts: f64,
}

impl Default for SystemMatrices {
    fn default() -> Self {
        SystemMatrices { ts: 1.0 }
    }
}

impl SystemMatrices {
    pub fn a(&self) -> [[f64; 2]; 2] {
        [[1.0, self.ts], [0.0, 1.0]]
    }

    pub fn b(&self) -> [f64; 2] {
        [0.5 * self.ts * self.ts, self.ts]
    }

    /// Nominal one-step map `x+ = A x + B u`.
    #[inline]
    pub fn step(&self, x: VehicleState, u: f64) -> VehicleState {
        VehicleState {
            s: x.s + self.ts * x.v + 0.5 * self.ts * self.ts * u,
            v: x.v + self.ts * u,
        }
    }
}

/// True plant update (noise-free dynamics; noise lives in the measurement).
pub fn step_true(sys: &SystemMatrices, x: VehicleState, u: f64) -> VehicleState {
    sys.step(x, u)
}

/// Measurement `y = (s + w, v)`; errs if `w` violates its support.
pub fn measure(x: VehicleState, w: f64, noise: &NoiseModel) -> Result<Measurement, PlantError> {
    if !noise.bound.contains(w) {
        return Err(PlantError::NoiseOutsideSupport);
    }
    Ok(Measurement {
        s_meas: x.s + w,
        v_meas: x.v,
    })
}

/// Luenberger-style observer with scalar position gain `L`. The speed
/// estimate is pinned to the exact speed measurement at every step.
#[derive(Debug, Clone, Copy)]
pub struct Observer {
    pub estimate: Estimate,
    pub gain: f64,
}

impl Observer {
    /// Initialization from the first measurement (`x_hat_0 = y_0`).
    pub fn init(gain: f64, y0: Measurement) -> Result<Self, PlantError> {
        if !(gain > 0.0 && gain < 1.0) {
            return Err(PlantError::BadGain(gain));
        }
        Ok(Observer {
            estimate: VehicleState::new(y0.s_meas, y0.v_meas),
            gain,
        })
    }

    /// Predictor-corrector update with the next measurement:
    /// position gets `L` times the innovation, speed snaps to the
    /// measurement.
    pub fn update(&self, sys: &SystemMatrices, u: f64, y_next: Measurement) -> Observer {
        let pred = sys.step(self.estimate, u);
        Observer {
            estimate: VehicleState {
                s: pred.s + self.gain * (y_next.s_meas - pred.s),
                v: y_next.v_meas,
            },
            gain: self.gain,
        }
    }
}

/// Stationary chain for the estimation-error recursion
/// `ds+ = (1 - L) ds - L w+` with the lumped noise `n = L (ds + w+)`.
pub struct LumpedNoiseChain {
    gain: f64,
    noise: NoiseModel,
    delta_s: f64,
}

impl LumpedNoiseChain {
    /// Burn in long enough that the initial condition is forgotten
    /// ((1-L)^1000 is ~5e-23 at L = 0.05).
    pub fn stationary<R: Rng>(rng: &mut R, gain: f64, noise: NoiseModel) -> Self {
        let mut chain = LumpedNoiseChain {
            gain,
            noise,
            delta_s: -noise.sample(rng),
        };
        for _ in 0..1000 {
            chain.next_lumped(rng);
        }
        chain
    }

    /// Advances one step and returns `n_k`.
    pub fn next_lumped<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let w_next = self.noise.sample(rng);
        let n = self.gain * (self.delta_s + w_next);
        self.delta_s = (1.0 - self.gain) * self.delta_s - self.gain * w_next;
        n
    }
}

/// Draws `m` empirical samples of the N-step lumped-noise sum
/// `sum_{i=0}^{N-1} n_i` from the stationary regime. Every sample lies in
/// `[-2LN w_max, 2LN w_max]`.
pub fn sample_terminal_noise<R: Rng>(
    rng: &mut R,
    m: usize,
    n_horizon: usize,
    gain: f64,
    noise: &NoiseModel,
) -> Vec<f64> {
    if gain == 0.0 {
        return vec![0.0; m];
    }
    let mut chain = LumpedNoiseChain::stationary(rng, gain, *noise);
    (0..m)
        .map(|_| (0..n_horizon).map(|_| chain.next_lumped(rng)).sum())
        .collect()
}

/// Draws `count` empirical samples of the single-step lumped noise from the
/// stationary regime (used by the cost-to-go expectation).
pub fn sample_step_noise<R: Rng>(
    rng: &mut R,
    count: usize,
    gain: f64,
    noise: &NoiseModel,
) -> Vec<f64> {
    if gain == 0.0 {
        return vec![0.0; count];
    }
    let mut chain = LumpedNoiseChain::stationary(rng, gain, *noise);
    (0..count).map(|_| chain.next_lumped(rng)).collect()
}
