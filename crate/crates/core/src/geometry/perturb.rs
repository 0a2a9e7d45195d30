//! Synthetic SE(3) registration noise.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::pose::Pose;
use crate::error::{invalid_param, Result};
use crate::rng::{self, Rng};

/// Noise level, covariances and hard bounds for [`perturb_pose`].
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    /// Scales both standard deviations; 0 disables the perturbation.
    pub level: f64,
    /// Translation covariance, m².
    pub sigma_t: Matrix3<f64>,
    /// Rotation-vector covariance, rad².
    pub sigma_r: Matrix3<f64>,
    /// Per-axis translation bound, m.
    pub max_translation: f64,
    pub max_roll_pitch: f64,
    pub max_yaw: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        let st = 0.025f64;
        let srp = 0.5f64.to_radians();
        let sy = 1.0f64.to_radians();
        Self {
            level: 0.0,
            sigma_t: Matrix3::from_diagonal(&Vector3::new(st * st, st * st, st * st)),
            sigma_r: Matrix3::from_diagonal(&Vector3::new(srp * srp, srp * srp, sy * sy)),
            max_translation: 0.05,
            max_roll_pitch: 1.0f64.to_radians(),
            max_yaw: 2.0f64.to_radians(),
            seed: 0,
        }
    }
}

fn psd_factor(m: &Matrix3<f64>, what: &str) -> Result<Matrix3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(invalid_param(format!("{what} has non-finite entries")));
    }
    if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(invalid_param(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new(*m);
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(invalid_param(format!("{what} is not positive semidefinite")));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&sqrt))
}

impl PerturbationSpec {
    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0 && self.level.is_finite()) {
            return Err(invalid_param("perturbation level must be a non-negative number"));
        }
        for (b, name) in [
            (self.max_translation, "translation bound"),
            (self.max_roll_pitch, "roll/pitch bound"),
            (self.max_yaw, "yaw bound"),
        ] {
            if !(b >= 0.0) {
                return Err(invalid_param(format!("{name} must be non-negative")));
            }
        }
        psd_factor(&self.sigma_t, "translation covariance")?;
        psd_factor(&self.sigma_r, "rotation covariance")?;
        Ok(())
    }

    /// Draws one clamped `(omega, t)` sample.
    pub fn sample(&self, rng: &mut Rng) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let ft = psd_factor(&self.sigma_t, "translation covariance")?;
        let fr = psd_factor(&self.sigma_r, "rotation covariance")?;
        let mut normal3 = || Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let t = ft * normal3() * self.level;
        let w = fr * normal3() * self.level;
        let t = t.map(|v| v.clamp(-self.max_translation, self.max_translation));
        let w = Vector3::new(
            w.x.clamp(-self.max_roll_pitch, self.max_roll_pitch),
            w.y.clamp(-self.max_roll_pitch, self.max_roll_pitch),
            w.z.clamp(-self.max_yaw, self.max_yaw),
        );
        Ok((w, t))
    }
}

/// `G' = exp(hat(omega)) * G` with `t` added to the translation, where
/// `t ~ N(0, L² Σ_T)` and `omega ~ N(0, L² Σ_R)`, each component clamped to
/// the bounds in `spec`.
pub fn perturb_pose(pose: &Pose, spec: &PerturbationSpec) -> Result<Pose> {
    perturb_pose_stream(pose, spec, 0)
}

/// Like [`perturb_pose`], drawing from stream `stream` of `spec.seed` so
/// that each frame of a sequence gets independent noise.
pub fn perturb_pose_stream(pose: &Pose, spec: &PerturbationSpec, stream: u64) -> Result<Pose> {
    spec.validate()?;
    if spec.level == 0.0 {
        return Ok(*pose);
    }
    let mut rng = rng::substream(spec.seed, stream);
    let (w, t) = spec.sample(&mut rng)?;
    Ok(pose.perturbed(&w, &t))
}
