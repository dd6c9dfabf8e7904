//! Nonnegative quadratic energy stage cost and its PSD-constrained
//! regression from (v, u, dE) samples.
//!
//! The stage cost is `[v u 1] P [v; u; 1]` with `P >= 0` (positive
//! semidefinite), so it never charges negative energy. The cost is
//! position-independent by construction, which is what lets the controller
//! evaluate it on estimated states.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("insufficient excitation; weak monomial directions: {0}")]
    InsufficientExcitation(String),
    #[error("negative energy sample at row {0}")]
    NegativeSample(usize),
    #[error("matrix is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("projection did not converge")]
    NoConvergence,
}

/// Symmetric 3x3 PSD matrix over the basis `[v, u, 1]`, in kJ per 1 s step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Row-major symmetric matrix.
    pub p: [[f64; 3]; 3],
}

/// One regression sample: speed, acceleration, measured energy drop.
#[derive(Debug, Clone, Copy)]
pub struct EnergySample {
    pub v: f64,
    pub u: f64,
    pub de: f64,
}

impl EnergyModel {
    pub fn new(p: [[f64; 3]; 3]) -> Result<Self, EnergyError> {
        let m = EnergyModel { p };
        let min_eig = m.min_eigenvalue();
        if min_eig < -PSD_TOL {
            return Err(EnergyError::NotPsd(min_eig));
        }
        Ok(m)
    }

    pub fn zero() -> Self {
        EnergyModel { p: [[0.0; 3]; 3] }
    }

    /// Ground-truth default, calibrated so that cruising near 5 m/s for
    /// ~115 s lands in the few-hundred-kJ range.
    pub fn default_ground_truth() -> Self {
        EnergyModel {
            p: [
                [0.08, 0.10, 0.0],
                [0.10, 1.50, 0.0],
                [0.0, 0.0, 0.20],
            ],
        }
    }

    /// Stage cost `[v u 1] P [v; u; 1]` in kJ.
    #[inline]
    pub fn stage_cost(&self, v: f64, u: f64) -> f64 {
        let p = &self.p;
        p[0][0] * v * v
            + 2.0 * p[0][1] * v * u
            + p[1][1] * u * u
            + 2.0 * p[0][2] * v
            + 2.0 * p[1][2] * u
            + p[2][2]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = Matrix3::from_fn(|i, j| self.p[i][j]);
        m.symmetric_eigenvalues().min()
    }

    /// Quadratic coefficients for the cost as a function of (v, u):
    /// `(pvv, pvu, puu, pv, pu, const)` with the cross/linear factors of two
    /// already folded in.
    pub fn expanded(&self) -> (f64, f64, f64, f64, f64, f64) {
        let p = &self.p;
        (
            p[0][0],
            2.0 * p[0][1],
            p[1][1],
            2.0 * p[0][2],
            2.0 * p[1][2],
            p[2][2],
        )
    }
}

/// Ground-truth per-step energy drop used by the simulator in place of the
/// physical sensors.
pub fn true_energy(model: &EnergyModel, v: f64, u: f64) -> f64 {
    model.stage_cost(v, u)
}

/// Residual statistics reported with a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub samples: usize,
    pub rmse: f64,
    pub max_abs_err: f64,
    /// |sum predicted - sum measured| / sum measured.
    pub total_energy_rel_err: f64,
    /// Whether the PSD projection had to adjust the unconstrained fit.
    pub projected: bool,
    pub projection_iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedEnergyModel {
    pub model: EnergyModel,
    pub report: FitReport,
}

const MONOMIALS: [&str; 6] = ["v^2", "v*u", "u^2", "v", "u", "1"];

fn design_row(v: f64, u: f64) -> [f64; 6] {
    [v * v, 2.0 * v * u, u * u, 2.0 * v, 2.0 * u, 1.0]
}

fn theta_to_matrix(t: &[f64; 6]) -> [[f64; 3]; 3] {
    [
        [t[0], t[1], t[3]],
        [t[1], t[2], t[4]],
        [t[3], t[4], t[5]],
    ]
}

fn matrix_to_theta(p: &[[f64; 3]; 3]) -> [f64; 6] {
    [p[0][0], p[0][1], p[1][1], p[0][2], p[1][2], p[2][2]]
}

fn clip_psd(p: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let m = Matrix3::from_fn(|i, j| p[i][j]);
    let eig = m.symmetric_eigen();
    let mut out = Matrix3::zeros();
    for k in 0..3 {
        let lam = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        out += lam * v * v.transpose();
    }
    let mut arr = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Symmetrize away rounding noise.
            arr[i][j] = 0.5 * (out[(i, j)] + out[(j, i)]);
        }
    }
    arr
}

/// PSD-constrained least squares of the stage cost.
///
/// Solves the unconstrained normal equations first; when the result is
/// already PSD it is returned as-is (exact recovery on noiseless data).
/// Otherwise the fit alternates the least-squares solve with eigenvalue
/// clipping, carrying a dual correction between the two projections, until
/// successive iterates agree to 1e-10.
pub fn fit_energy_model(samples: &[EnergySample]) -> Result<FittedEnergyModel, EnergyError> {
    for (i, s) in samples.iter().enumerate() {
        if s.de < 0.0 {
            return Err(EnergyError::NegativeSample(i));
        }
    }
    // Normal equations over the 6 free entries.
    let mut gram = [[0.0; 6]; 6];
    let mut rhs = [0.0; 6];
    for s in samples {
        let row = design_row(s.v, s.u);
        for i in 0..6 {
            rhs[i] += row[i] * s.de;
            for j in 0..6 {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    check_excitation(&gram, samples.len())?;

    let gram_na = nalgebra::Matrix6::from_fn(|i, j| gram[i][j]);
    let rhs_na = nalgebra::Vector6::from_fn(|i, _| rhs[i]);
    let chol = gram_na
        .cholesky()
        .ok_or_else(|| EnergyError::InsufficientExcitation("singular gram matrix".into()))?;
    let theta_ls = chol.solve(&rhs_na);
    let p_ls = theta_to_matrix(&[
        theta_ls[0], theta_ls[1], theta_ls[2], theta_ls[3], theta_ls[4], theta_ls[5],
    ]);

    let ls_model = EnergyModel { p: p_ls };
    let (model, projected, iters) = if ls_model.min_eigenvalue() >= -PSD_TOL {
        (ls_model, false, 0)
    } else {
        // Alternating solve/clip with a scaled dual correction (ADMM form of
        // the Dykstra-style alternation). The quadratic coupling uses the
        // Frobenius weights of the symmetric parameterization.
        let weights = [1.0, 2.0, 1.0, 2.0, 2.0, 1.0];
        let rho = (0..6).map(|i| gram[i][i]).sum::<f64>() / 6.0;
        let mut z = clip_psd(&p_ls);
        let mut dual = [0.0f64; 6];
        let mut theta = matrix_to_theta(&p_ls);
        let mut iters = 0usize;
        let aug = nalgebra::Matrix6::from_fn(|i, j| {
            gram[i][j] + if i == j { rho * weights[i] } else { 0.0 }
        });
        let chol_aug = aug.cholesky().ok_or(EnergyError::NoConvergence)?;
        for k in 0..20_000 {
            iters = k + 1;
            let zt = matrix_to_theta(&z);
            let mut b = nalgebra::Vector6::zeros();
            for i in 0..6 {
                b[i] = rhs[i] + rho * weights[i] * (zt[i] - dual[i]);
            }
            let t = chol_aug.solve(&b);
            theta = [t[0], t[1], t[2], t[3], t[4], t[5]];
            let mut primal = [0.0; 6];
            for i in 0..6 {
                primal[i] = theta[i] + dual[i];
            }
            let z_new = clip_psd(&theta_to_matrix(&primal));
            let zt_new = matrix_to_theta(&z_new);
            let mut delta: f64 = 0.0;
            for i in 0..6 {
                dual[i] += theta[i] - zt_new[i];
                delta = delta.max((zt_new[i] - matrix_to_theta(&z)[i]).abs());
                delta = delta.max((theta[i] - zt_new[i]).abs());
            }
            z = z_new;
            if delta <= 1e-10 {
                break;
            }
        }
        let _ = theta;
        (EnergyModel { p: clip_psd(&z) }, true, iters)
    };

    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut tot_pred = 0.0;
    let mut tot_meas = 0.0;
    for s in samples {
        let pred = model.stage_cost(s.v, s.u);
        let err = pred - s.de;
        sq += err * err;
        max_abs = max_abs.max(err.abs());
        tot_pred += pred;
        tot_meas += s.de;
    }
    let report = FitReport {
        samples: samples.len(),
        rmse: (sq / samples.len().max(1) as f64).sqrt(),
        max_abs_err: max_abs,
        total_energy_rel_err: if tot_meas > 0.0 {
            (tot_pred - tot_meas).abs() / tot_meas
        } else {
            0.0
        },
        projected,
        projection_iters: iters,
    };
    Ok(FittedEnergyModel { model, report })
}

fn check_excitation(gram: &[[f64; 6]; 6], count: usize) -> Result<(), EnergyError> {
    if count < 6 {
        return Err(EnergyError::InsufficientExcitation(format!(
            "{count} samples, need at least 6 spanning {}",
            MONOMIALS.join(", ")
        )));
    }
    let g = nalgebra::Matrix6::from_fn(|i, j| gram[i][j]);
    let eig = g.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let weak: Vec<String> = (0..6)
        .filter(|&k| eig.eigenvalues[k] <= 1e-10 * max_eig.max(1.0))
        .map(|k| {
            // Name the dominant monomials of the null direction.
            let v = eig.eigenvectors.column(k);
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
            idx.iter()
                .take(2)
                .map(|&i| MONOMIALS[i])
                .collect::<Vec<_>>()
                .join("/")
        })
        .collect();
    if !weak.is_empty() {
        return Err(EnergyError::InsufficientExcitation(weak.join(", ")));
    }
    Ok(())
}

/// Reads regression samples from CSV with the required header `v,u,dE`.
pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<Vec<EnergySample>, EnergyError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| EnergyError::Csv(e.to_string()))?;
        let cols: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if cols != ["v", "u", "dE"] {
            return Err(EnergyError::Csv(format!(
                "expected header v,u,dE got {cols:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EnergyError::Csv(e.to_string()))?;
        let parse = |i: usize| -> Result<f64, EnergyError> {
            rec.get(i)
                .ok_or_else(|| EnergyError::Csv("short row".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| EnergyError::Csv(e.to_string()))
        };
        out.push(EnergySample {
            v: parse(0)?,
            u: parse(1)?,
            de: parse(2)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn stage_cost_examples() {
        assert_eq!(EnergyModel::zero().stage_cost(3.0, -1.0), 0.0);
        let identity = EnergyModel::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(identity.stage_cost(2.0, 1.0), 6.0);
        let p = EnergyModel::default_ground_truth();
        assert!((p.stage_cost(5.0, 0.0) - 2.2).abs() < 1e-12);
        assert!((p.stage_cost(0.0, 0.0) - 0.2).abs() < 1e-12);
        assert!(p.min_eigenvalue() >= 0.0);
    }

    fn synth_samples(model: &EnergyModel, noise: f64, seed: u64) -> Vec<EnergySample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..400 {
            let v: f64 = rng.random_range(0.0..14.0);
            let u: f64 = rng.random_range(-3.0..2.0);
            let de = model.stage_cost(v, u) * (1.0 + noise * rng.random_range(-1.0..1.0));
            out.push(EnergySample { v, u, de: de.max(0.0) });
        }
        out
    }

    fn frob(p: &[[f64; 3]; 3]) -> f64 {
        p.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn noiseless_recovery() {
        let truth = EnergyModel::default_ground_truth();
        let fit = fit_energy_model(&synth_samples(&truth, 0.0, 3)).unwrap();
        let mut diff = truth.p;
        for i in 0..3 {
            for j in 0..3 {
                diff[i][j] -= fit.model.p[i][j];
            }
        }
        assert!(frob(&diff) / frob(&truth.p) <= 1e-6);
        assert!(!fit.report.projected);
    }

    #[test]
    fn noisy_total_energy_within_one_percent() {
        let truth = EnergyModel::default_ground_truth();
        let fit = fit_energy_model(&synth_samples(&truth, 0.02, 4)).unwrap();
        assert!(
            fit.report.total_energy_rel_err <= 0.01,
            "rel err {}",
            fit.report.total_energy_rel_err
        );
    }

    #[test]
    fn random_psd_recovery() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..10 {
            let mut a = [[0.0f64; 3]; 3];
            for row in a.iter_mut() {
                for x in row.iter_mut() {
                    *x = rng.random_range(-1.0..1.0);
                }
            }
            // P = A'A is PSD.
            let mut p = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    p[i][j] = (0..3).map(|k| a[k][i] * a[k][j]).sum();
                }
            }
            let truth = EnergyModel { p };
            let fit = fit_energy_model(&synth_samples(&truth, 0.0, 7)).unwrap();
            let mut diff = truth.p;
            for i in 0..3 {
                for j in 0..3 {
                    diff[i][j] -= fit.model.p[i][j];
                }
            }
            assert!(frob(&diff) <= 1e-6 * frob(&truth.p).max(1.0));
        }
    }

    #[test]
    fn insufficient_excitation() {
        let samples = vec![
            EnergySample { v: 1.0, u: 0.0, de: 1.0 },
            EnergySample { v: 2.0, u: 0.0, de: 2.0 },
            EnergySample { v: 3.0, u: 0.0, de: 3.0 },
        ];
        assert!(matches!(
            fit_energy_model(&samples),
            Err(EnergyError::InsufficientExcitation(_))
        ));
        // Many samples but u never excited: still rank deficient.
        let samples: Vec<EnergySample> = (0..20)
            .map(|i| EnergySample { v: i as f64 * 0.5, u: 0.0, de: i as f64 })
            .collect();
        match fit_energy_model(&samples) {
            Err(EnergyError::InsufficientExcitation(msg)) => {
                assert!(msg.contains('u'), "message should name u-directions: {msg}");
            }
            other => panic!("expected excitation error, got {other:?}"),
        }
    }

    #[test]
    fn projection_restores_psd() {
        // Samples from an indefinite "model" force the projection path.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for _ in 0..200 {
            let v: f64 = rng.random_range(0.0..10.0);
            let u: f64 = rng.random_range(-3.0..2.0);
            let de = (1.0 * v * v - 4.0 * v * u + 0.5).max(0.0);
            samples.push(EnergySample { v, u, de });
        }
        let fit = fit_energy_model(&samples).unwrap();
        assert!(fit.model.min_eigenvalue() >= -1e-9);
        let mut r = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let v: f64 = r.random_range(0.0..14.0);
            let u: f64 = r.random_range(-3.0..2.0);
            assert!(fit.model.stage_cost(v, u) >= -1e-9);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let data = "v,u,dE\n1.0,0.5,2.5\n2.0,-1.0,1.25\n";
        let samples = read_samples_csv(data.as_bytes()).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].u, -1.0);
        assert!(read_samples_csv("a,b,c\n1,2,3\n".as_bytes()).is_err());
    }
}
