use crate::dynamics::{ControlInput, SpeedMeasurement};
use crate::error::{FtcError, Result};

use super::{check_psd, symmetrize, FilterModel, GaussianBelief, InnovationRecord, NoiseConfig, StateMatrix};

/// `x = f(x)`, `P = Q + F P F^T` with `F` the analytic Jacobian at the prior mean.
pub fn ekf_predict<M: FilterModel>(
    belief: &GaussianBelief,
    u: &ControlInput,
    noise: &NoiseConfig,
    model: &M,
) -> Result<GaussianBelief> {
    let f = model.process_jacobian(&belief.mean, u);
    let mean = model.propagate(&belief.mean, u);
    let cov = symmetrize(&(noise.q + f * belief.cov * f.transpose()));
    check_psd(&cov)?;
    Ok(GaussianBelief { mean, cov })
}

/// Scalar speed update with a Joseph-form covariance correction.
pub fn ekf_update<M: FilterModel>(
    belief: &GaussianBelief,
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
    model: &M,
) -> Result<(GaussianBelief, InnovationRecord)> {
    let h = model.observation_jacobian(&belief.mean, u);
    let nu = z.z - model.observe(&belief.mean, u);
    let ph = belief.cov * h.transpose();
    let s = (h * ph)[0] + noise.r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(FtcError::FilterDivergence(format!("innovation variance {s} is not positive")));
    }
    let k = ph / s;
    let mean = belief.mean + k * nu;
    let a = StateMatrix::identity() - k * h;
    let cov = symmetrize(&(a * belief.cov * a.transpose() + k * k.transpose() * noise.r));
    check_psd(&cov)?;
    Ok((GaussianBelief { mean, cov }, InnovationRecord { nu, s, t: z.t }))
}
