use nalgebra::Cholesky;

use crate::dynamics::{ControlInput, SpeedMeasurement};
use crate::error::{FtcError, Result};

use super::{
    check_psd, symmetrize, FilterModel, GaussianBelief, InnovationRecord, NoiseConfig, StateMatrix, StateVector,
    STATE_DIM,
};

pub const DEFAULT_KAPPA: f64 = 0.001;

const CHOLESKY_JITTER: f64 = 1e-12;

/// Sigma points and their weights. Ordering is `[mean, mean + L_i..., mean - L_i...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSet {
    pub points: Vec<StateVector>,
    pub weights: Vec<f64>,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> StateVector {
        self.points
            .iter()
            .zip(&self.weights)
            .fold(StateVector::zeros(), |acc, (p, w)| acc + p * *w)
    }

    pub fn covariance_about(&self, mean: &StateVector) -> StateMatrix {
        self.points.iter().zip(&self.weights).fold(StateMatrix::zeros(), |acc, (p, w)| {
            let d = p - mean;
            acc + d * d.transpose() * *w
        })
    }
}

/// Unscented transform of `belief` with scaling `kappa`.
///
/// `W0 = kappa / (n + kappa)`, `W_i = 1 / (2 (n + kappa))`, spread from the
/// lower-triangular Cholesky factor of `(n + kappa) P`. One jitter retry of
/// `1e-12 I` is attempted before reporting divergence.
pub fn sigma_points(belief: &GaussianBelief, kappa: f64) -> Result<SigmaSet> {
    let n = STATE_DIM as f64;
    let scale = n + kappa;
    if !(scale > 0.0) {
        return Err(FtcError::InvalidArgument(format!("n + kappa must be positive, got {scale}")));
    }
    let scaled = belief.cov * scale;
    let l = match Cholesky::new(scaled) {
        Some(c) => c.l(),
        None => Cholesky::new(scaled + StateMatrix::identity() * CHOLESKY_JITTER)
            .map(|c| c.l())
            .ok_or_else(|| FtcError::FilterDivergence("covariance Cholesky factorisation failed".into()))?,
    };

    let mut points = Vec::with_capacity(2 * STATE_DIM + 1);
    let mut weights = Vec::with_capacity(2 * STATE_DIM + 1);
    points.push(belief.mean);
    weights.push(kappa / scale);
    for sign in [1.0, -1.0] {
        for i in 0..STATE_DIM {
            points.push(belief.mean + l.column(i) * sign);
            weights.push(0.5 / scale);
        }
    }
    Ok(SigmaSet { points, weights })
}

/// Propagate sigma points through the process model and add `Q`.
///
/// The returned set represents the predicted density `N(x, P)` including `Q`
/// and is consumed by [`ukf_update`]. It is redrawn from the predicted
/// moments because the raw propagated points carry `P - Q`.
pub fn ukf_predict<M: FilterModel>(
    belief: &GaussianBelief,
    u: &ControlInput,
    noise: &NoiseConfig,
    model: &M,
    kappa: f64,
) -> Result<(GaussianBelief, SigmaSet)> {
    let prior = sigma_points(belief, kappa)?;
    let propagated = SigmaSet {
        points: prior.points.iter().map(|p| model.propagate(p, u)).collect(),
        weights: prior.weights,
    };
    let mean = propagated.mean();
    let cov = symmetrize(&(noise.q + propagated.covariance_about(&mean)));
    check_psd(&cov)?;
    let predicted = GaussianBelief { mean, cov };
    let points = sigma_points(&predicted, kappa)?;
    Ok((predicted, points))
}

/// Speed update from the propagated sigma points.
pub fn ukf_update<M: FilterModel>(
    belief: &GaussianBelief,
    points: &SigmaSet,
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
    model: &M,
) -> Result<(GaussianBelief, InnovationRecord)> {
    if points.is_empty() {
        return Err(FtcError::InvalidArgument("empty sigma set".into()));
    }
    let predicted: Vec<f64> = points.points.iter().map(|p| model.observe(p, u)).collect();
    let z_hat: f64 = predicted.iter().zip(&points.weights).map(|(h, w)| h * w).sum();

    let mut p_zz = 0.0;
    let mut p_xz = StateVector::zeros();
    for ((p, h), w) in points.points.iter().zip(&predicted).zip(&points.weights) {
        let dz = h - z_hat;
        p_zz += w * dz * dz;
        p_xz += (p - belief.mean) * (w * dz);
    }
    let s = noise.r + p_zz;
    if !(s > 0.0) || !s.is_finite() {
        return Err(FtcError::FilterDivergence(format!("innovation variance {s} is not positive")));
    }
    let nu = z.z - z_hat;
    let k = p_xz / s;
    let mean = belief.mean + k * nu;
    let cov = symmetrize(&(belief.cov - k * k.transpose() * s));
    check_psd(&cov)?;
    Ok((GaussianBelief { mean, cov }, InnovationRecord { nu, s, t: z.t }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ekf_predict, ekf_update, initial_covariance, RobotModel};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_psd(rng: &mut ChaCha8Rng) -> StateMatrix {
        let a = StateMatrix::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + StateMatrix::identity() * 1e-3
    }

    #[test]
    fn weights_for_default_kappa() {
        let b = GaussianBelief::initial(&Default::default(), 2.0, 2.0);
        let set = sigma_points(&b, DEFAULT_KAPPA).unwrap();
        assert_eq!(set.len(), 11);
        assert_abs_diff_eq!(set.weights[0], 0.001 / 5.001, epsilon = 1e-15);
        assert_abs_diff_eq!(set.weights[0], 1.99960e-4, epsilon = 1e-9);
        for w in &set.weights[1..] {
            assert_abs_diff_eq!(*w, 9.99800e-2, epsilon = 1e-7);
        }
        assert_abs_diff_eq!(set.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_covariance_is_jittered() {
        let b = GaussianBelief {
            mean: StateVector::new(1.0, 2.0, 3.0, 2.0, 2.0),
            cov: StateMatrix::zeros(),
        };
        let set = sigma_points(&b, DEFAULT_KAPPA).unwrap();
        for p in &set.points {
            assert!((p - b.mean).amax() < 1e-5);
        }
    }

    #[test]
    fn sigma_set_reconstructs_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let cov = random_psd(&mut rng);
            let mean = StateVector::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let set = sigma_points(&GaussianBelief { mean, cov }, DEFAULT_KAPPA).unwrap();
            assert!((set.mean() - mean).amax() < 1e-9);
            assert!((set.covariance_about(&mean) - cov).amax() < 1e-9);
        }
    }

    #[test]
    fn stationary_prediction_matches_ekf() {
        let model = RobotModel::new(0.01);
        let noise = NoiseConfig::standard(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = GaussianBelief {
            mean: StateVector::new(1.0, -1.0, 0.5, 2.0, 1.5),
            cov: random_psd(&mut rng),
        };
        let u = ControlInput::default();
        let (ukf, _) = ukf_predict(&b, &u, &noise, &model, DEFAULT_KAPPA).unwrap();
        let ekf = ekf_predict(&b, &u, &noise, &model).unwrap();
        assert!((ukf.mean - ekf.mean).amax() < 1e-9);
        assert!((ukf.cov - ekf.cov).amax() < 1e-9);
    }

    #[test]
    fn stationary_cycle_matches_ekf_with_process_noise() {
        let model = RobotModel::new(0.01);
        let noise = NoiseConfig::standard(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ukf = GaussianBelief::initial(&Default::default(), 2.0, 1.5);
        let mut ekf = ukf.clone();
        let u = ControlInput::default();
        for k in 0..50 {
            let z = SpeedMeasurement {
                z: rng.random_range(-1.0..1.0),
                t: k as f64 * 0.01,
            };
            let (pred, set) = ukf_predict(&ukf, &u, &noise, &model, DEFAULT_KAPPA).unwrap();
            ukf = ukf_update(&pred, &set, &z, &u, &noise, &model).unwrap().0;
            let pred = ekf_predict(&ekf, &u, &noise, &model).unwrap();
            ekf = ekf_update(&pred, &z, &u, &noise, &model).unwrap().0;
        }
        assert!((ukf.mean - ekf.mean).amax() < 1e-9);
        assert!((ukf.cov - ekf.cov).amax() < 1e-9);
    }

    #[test]
    fn tiny_step_without_noise_keeps_belief() {
        let model = RobotModel::new(1e-9);
        let noise = NoiseConfig {
            q: StateMatrix::zeros(),
            r: 0.25,
        };
        let b = GaussianBelief::initial(&Default::default(), 2.0, 2.0);
        let (out, _) = ukf_predict(&b, &ControlInput::new(5.0, 5.0), &noise, &model, DEFAULT_KAPPA).unwrap();
        assert!((out.mean - b.mean).amax() < 1e-6);
        assert!((out.cov - b.cov).amax() < 1e-6);
    }

    #[test]
    fn update_matches_ekf_for_linear_measurement() {
        let model = RobotModel::new(0.01);
        let noise = NoiseConfig::standard(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let b = GaussianBelief {
                mean: StateVector::new(0.0, 0.0, 0.2, rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)),
                cov: random_psd(&mut rng),
            };
            let u = ControlInput::new(rng.random_range(-17.0..17.0), rng.random_range(-17.0..17.0));
            let z = SpeedMeasurement {
                z: rng.random_range(-10.0..10.0),
                t: 0.0,
            };
            let set = sigma_points(&b, DEFAULT_KAPPA).unwrap();
            let (ukf, ukf_rec) = ukf_update(&b, &set, &z, &u, &noise, &model).unwrap();
            let (ekf, ekf_rec) = ekf_update(&b, &z, &u, &noise, &model).unwrap();
            assert!((ukf.mean - ekf.mean).amax() < 1e-9);
            assert!((ukf.cov - ekf.cov).amax() < 1e-9);
            assert!((ukf_rec.s - ekf_rec.s).abs() < 1e-9);
            assert!(ukf.cov.trace() <= b.cov.trace() + 1e-12);
        }
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let model = RobotModel::new(0.01);
        let noise = NoiseConfig::standard(0.01);
        let b = GaussianBelief::initial(&Default::default(), 2.0, 1.7);
        let u = ControlInput::new(3.0, 7.0);
        let set = sigma_points(&b, DEFAULT_KAPPA).unwrap();
        let z = SpeedMeasurement {
            z: set.points.iter().zip(&set.weights).map(|(p, w)| w * model.observe(p, &u)).sum(),
            t: 0.0,
        };
        let (out, rec) = ukf_update(&b, &set, &z, &u, &noise, &model).unwrap();
        assert!(rec.nu.abs() < 1e-14);
        assert!((out.mean - b.mean).amax() < 1e-12);
    }

    /// Compare the unscented prediction with moments of a large sample pushed
    /// through the same process model.
    #[test]
    fn prediction_matches_monte_carlo_moments() {
        let model = RobotModel::new(0.01);
        let noise = NoiseConfig {
            q: StateMatrix::zeros(),
            r: 0.25,
        };
        let mut cov = initial_covariance();
        cov[(2, 2)] = 0.2 * 0.2;
        let b = GaussianBelief {
            mean: StateVector::new(0.0, 0.0, 0.7, 2.0, 1.5),
            cov,
        };
        let u = ControlInput::new(6.0, 4.0);
        let (ukf, _) = ukf_predict(&b, &u, &noise, &model, DEFAULT_KAPPA).unwrap();

        let l = Cholesky::new(cov).unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let samples: Vec<StateVector> = (0..n)
            .map(|_| {
                let e = StateVector::from_fn(|_, _| rng.sample(StandardNormal));
                model.propagate(&(b.mean + l * e), &u)
            })
            .collect();
        let nf = n as f64;
        let mean = samples.iter().fold(StateVector::zeros(), |a, s| a + s) / nf;
        for i in 0..STATE_DIM {
            let var = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / nf;
            let se = (var / nf).sqrt();
            assert!((ukf.mean[i] - mean[i]).abs() <= 3.0 * se, "mean[{i}]");
            for j in 0..=i {
                let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
                let c = prods.iter().sum::<f64>() / nf;
                let c_var = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / nf;
                let se = (c_var / nf).sqrt();
                assert!((ukf.cov[(i, j)] - c).abs() <= 3.0 * se, "cov[{i},{j}] {} vs {c} (se {se})", ukf.cov[(i, j)]);
            }
        }
    }
}
