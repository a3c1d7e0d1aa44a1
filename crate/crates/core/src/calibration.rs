//! Hand-eye and scale calibration from an exploration dataset.
//!
//! The dataset pairs visual-odometry camera poses `c0 <- ci` (odometry
//! units) with end-effector poses `b <- ei` (meters). Calibration recovers
//! the base-from-first-camera transform `b <- c0`, the per-axis factor `D`
//! that converts odometry units into meters, and the camera-to-end-effector
//! rotation `c <- e`.
//!
//! Translations are fitted as a relaxed orthogonal Procrustes problem
//! (rotation plus diagonal scale) solved by alternating minimization; the
//! hand-eye rotation is a plain orthogonal Procrustes problem on the
//! orientation pairs.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{geodesic_distance, project_to_so3, Pose, Rotation};

pub mod io;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("insufficient data: {got} samples, at least {need} required")]
    InsufficientData { got: usize, need: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("source axis {axis} carries no energy")]
    DegenerateAxis { axis: usize },
    #[error("scale on axis {axis} converged to non-positive value {value}")]
    SignDegenerate { axis: usize, value: f64 },
    #[error("non-finite value in calibration input")]
    NonFinite,
}

pub const MIN_SAMPLES: usize = 3;

/// One exploration keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// `c0 <- ci`, odometry units.
    pub cam_in_c0: Pose,
    /// `b <- ei`, meters.
    pub ee_in_base: Pose,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationDataset {
    samples: Vec<CalibrationSample>,
}

impl CalibrationDataset {
    pub fn new(samples: Vec<CalibrationSample>) -> Result<Self, CalibrationError> {
        if samples.len() < MIN_SAMPLES {
            return Err(CalibrationError::InsufficientData { got: samples.len(), need: MIN_SAMPLES });
        }
        let finite = samples.iter().all(|s| {
            [s.cam_in_c0, s.ee_in_base]
                .iter()
                .all(|p| p.translation.iter().chain(p.rotation.matrix().iter()).all(|x| x.is_finite()))
        });
        if !finite {
            return Err(CalibrationError::NonFinite);
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[CalibrationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `D = diag(αx, αy, αz)`, meters per odometry unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMatrix {
    pub alpha: Vector3<f64>,
}

impl ScaleMatrix {
    pub fn new(alpha: Vector3<f64>) -> Self {
        Self { alpha }
    }

    pub fn isotropic(s: f64) -> Self {
        Self::new(Vector3::repeat(s))
    }

    pub fn identity() -> Self {
        Self::isotropic(1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.alpha.iter().all(|a| a.is_finite() && *a > 0.0)
    }

    /// Odometry units to meters.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.alpha.component_mul(v)
    }

    /// Meters to odometry units.
    pub fn apply_inverse(&self, v: &Vector3<f64>) -> Vector3<f64> {
        v.component_div(&self.alpha)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.alpha)
    }
}

/// Rotation minimizing `Σ‖targetᵢ − R·sourceᵢ‖²` over SO(3).
///
/// The pairs are used as given; callers that fit an affine alignment must
/// center them first.
pub fn solve_orthogonal_procrustes(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Rotation, CalibrationError> {
    if pairs.len() < 2 {
        return Err(CalibrationError::InsufficientData { got: pairs.len(), need: 2 });
    }
    // H = Σ target·sourceᵀ; R = U·diag(1, 1, det(U·Vᵀ))·Vᵀ
    let h: Matrix3<f64> = pairs.iter().map(|(s, t)| t * s.transpose()).sum();
    if !h.iter().all(|x| x.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    let sv = h.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= f64::MIN_POSITIVE || sorted[1] <= 1e-12 * sorted[0] {
        return Err(CalibrationError::DegenerateData("cross-covariance has rank < 2 (collinear points)".into()));
    }
    Ok(project_to_so3(&h))
}

/// Result of [`solve_relaxed_procrustes`].
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedFit {
    pub rotation: Rotation,
    pub scale: ScaleMatrix,
    pub iterations: usize,
    /// Cost after each completed iteration.
    pub cost_history: Vec<f64>,
}

impl RelaxedFit {
    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

pub const DEFAULT_TANDEM_TOL: f64 = 1e-10;
pub const DEFAULT_TANDEM_MAX_ITERS: usize = 100;

fn relaxed_cost(pairs: &[(Vector3<f64>, Vector3<f64>)], r: &Rotation, d: &ScaleMatrix) -> f64 {
    pairs.iter().map(|(s, t)| (t - r * d.apply(s)).norm_squared()).sum()
}

/// Rotation and diagonal scale minimizing `Σ‖targetᵢ − R·D·sourceᵢ‖²`.
///
/// Alternates two exact half-steps until the relative cost decrease drops
/// below `tol` or `max_iters` is reached: with `D` fixed, `R` is the
/// orthogonal Procrustes solution on `(D·sourceᵢ, targetᵢ)`; with `R` fixed
/// each `dₖ = Σᵢ (Rᵀ·targetᵢ)ₖ·sourceᵢₖ / Σᵢ sourceᵢₖ²`. `D` starts at the
/// isotropic ratio `Σ‖target‖ / Σ‖source‖`. Both half-steps are exact
/// minimizers, so the cost never increases.
pub fn solve_relaxed_procrustes(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    tol: f64,
    max_iters: usize,
) -> Result<RelaxedFit, CalibrationError> {
    if pairs.len() < MIN_SAMPLES {
        return Err(CalibrationError::InsufficientData { got: pairs.len(), need: MIN_SAMPLES });
    }
    let mut energy = Vector3::zeros();
    for (s, _) in pairs {
        energy += s.component_mul(s);
    }
    let total_energy: f64 = energy.sum();
    for axis in 0..3 {
        if !(energy[axis] > 1e-24 * total_energy.max(f64::MIN_POSITIVE)) {
            return Err(CalibrationError::DegenerateAxis { axis });
        }
    }

    let source_norm: f64 = pairs.iter().map(|(s, _)| s.norm()).sum();
    let target_norm: f64 = pairs.iter().map(|(_, t)| t.norm()).sum();
    let target_energy: f64 = pairs.iter().map(|(_, t)| t.norm_squared()).sum();
    let mut scale = ScaleMatrix::isotropic(target_norm / source_norm);
    let mut rotation = Rotation::identity();
    let mut history = Vec::new();
    let mut prev_cost = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let scaled: Vec<_> = pairs.iter().map(|(s, t)| (scale.apply(s), *t)).collect();
        rotation = solve_orthogonal_procrustes(&scaled)?;

        let mut num = Vector3::zeros();
        for (s, t) in pairs {
            num += (rotation.inverse() * t).component_mul(s);
        }
        scale = ScaleMatrix::new(num.component_div(&energy));

        let cost = relaxed_cost(pairs, &rotation, &scale);
        history.push(cost);
        // exact fit: nothing left to reduce
        if cost <= 1e-30 * target_energy {
            break;
        }
        if prev_cost.is_finite() && (prev_cost - cost) <= tol * prev_cost {
            break;
        }
        prev_cost = cost;
    }

    for axis in 0..3 {
        if !(scale.alpha[axis] > 0.0) {
            return Err(CalibrationError::SignDegenerate { axis, value: scale.alpha[axis] });
        }
    }
    Ok(RelaxedFit { rotation, scale, iterations, cost_history: history })
}

/// Options for [`calibrate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Also estimate the camera-to-end-effector offset `t0` by linear least
    /// squares, alternating with the rotation/scale fit. Off by default:
    /// `t0` is then fixed to zero.
    pub refine_t0: bool,
    /// Outer alternation rounds when `refine_t0` is set.
    pub t0_rounds: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TANDEM_TOL, max_iters: DEFAULT_TANDEM_MAX_ITERS, refine_t0: false, t0_rounds: 200 }
    }
}

/// RMS residuals of the two calibration objectives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    /// RMS of `‖b tei − (b Rc0·D·(c0 tci + c0 Rci·t0) + b tc0)‖`, meters.
    pub translation_rms_m: f64,
    /// RMS geodesic angle between `b Rei` and `b Rc0·c0 Rci·c Re`, radians.
    pub rotation_rms_rad: f64,
    pub tandem_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandEyeResult {
    /// `b <- c0`; translation in meters.
    pub base_from_c0: Pose,
    /// `c <- e` rotation.
    pub cam_from_ee_rotation: Rotation,
    /// `c te`, odometry units. Zero unless `t0` refinement was requested.
    pub t0: Vector3<f64>,
    pub scale: ScaleMatrix,
    pub residual_stats: ResidualStats,
}

impl HandEyeResult {
    /// Maps an odometry point in `{c0}` to meters in `{b}`.
    pub fn c0_point_to_base(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.base_from_c0.rotation * self.scale.apply(p) + self.base_from_c0.translation
    }

    /// `e <- c` rotation.
    pub fn ee_from_cam_rotation(&self) -> Rotation {
        self.cam_from_ee_rotation.inverse()
    }
}

fn mean(points: impl Iterator<Item = Vector3<f64>>) -> Vector3<f64> {
    let mut n = 0usize;
    let mut acc = Vector3::zeros();
    for p in points {
        acc += p;
        n += 1;
    }
    acc / n.max(1) as f64
}

fn check_spread(points: &[Vector3<f64>]) -> Result<(), CalibrationError> {
    let c = mean(points.iter().copied());
    let cov: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut sv: Vec<f64> = cov.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let scale = points.iter().map(|p| p.norm_squared()).sum::<f64>().max(f64::MIN_POSITIVE);
    if sv[0] <= 1e-20 * scale {
        return Err(CalibrationError::DegenerateData("camera positions do not move".into()));
    }
    if sv[1] <= 1e-12 * sv[0] {
        return Err(CalibrationError::DegenerateData("camera positions are collinear".into()));
    }
    Ok(())
}

/// Fits `b Rc0`, `D` and `b tc0` to `b tei = b Rc0·D·(c0 tci + c0 Rci·t0) + b tc0`
/// for a fixed `t0`. Both point sets are centered, the relaxed Procrustes
/// problem is solved on the centered sets and the translation is the mean
/// residual over all samples.
fn fit_translation_model(
    dataset: &CalibrationDataset,
    t0: &Vector3<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(RelaxedFit, Vector3<f64>), CalibrationError> {
    let sources: Vec<Vector3<f64>> = dataset
        .samples()
        .iter()
        .map(|s| s.cam_in_c0.translation + s.cam_in_c0.rotation * t0)
        .collect();
    let targets: Vec<Vector3<f64>> = dataset.samples().iter().map(|s| s.ee_in_base.translation).collect();
    check_spread(&sources)?;
    let ms = mean(sources.iter().copied());
    let mt = mean(targets.iter().copied());
    let pairs: Vec<_> = sources.iter().zip(&targets).map(|(s, t)| (s - ms, t - mt)).collect();
    let fit = solve_relaxed_procrustes(&pairs, tol, max_iters)?;
    let translation = mean(sources.iter().zip(&targets).map(|(s, t)| t - fit.rotation * fit.scale.apply(s)));
    Ok((fit, translation))
}

/// Estimates `b Rc0`, `D` and `b tc0` with `t0 = 0`.
pub fn estimate_base_from_c0(dataset: &CalibrationDataset) -> Result<(Rotation, ScaleMatrix, Vector3<f64>), CalibrationError> {
    let (fit, t) = fit_translation_model(dataset, &Vector3::zeros(), DEFAULT_TANDEM_TOL, DEFAULT_TANDEM_MAX_ITERS)?;
    Ok((fit.rotation, fit.scale, t))
}

/// Solves `b Rei = b Rc0·c0 Rci·X` for `X = c Re` in the least-squares sense:
/// `X` is the SO(3) projection of `Σᵢ (b Rc0·c0 Rci)ᵀ·b Rei`.
pub fn estimate_hand_eye_rotation(dataset: &CalibrationDataset, base_from_c0_rot: &Rotation) -> Result<Rotation, CalibrationError> {
    if dataset.len() < MIN_SAMPLES {
        return Err(CalibrationError::InsufficientData { got: dataset.len(), need: MIN_SAMPLES });
    }
    let m: Matrix3<f64> = dataset
        .samples()
        .iter()
        .map(|s| {
            let a = base_from_c0_rot * s.cam_in_c0.rotation;
            a.matrix().transpose() * s.ee_in_base.rotation.matrix()
        })
        .sum();
    Ok(project_to_so3(&m))
}

/// Linear least squares for `t0` with rotation and scale fixed.
fn solve_t0(dataset: &CalibrationDataset, r: &Rotation, d: &ScaleMatrix) -> Option<Vector3<f64>> {
    let samples = dataset.samples();
    let rd = r.matrix() * d.matrix();
    let mc = mean(samples.iter().map(|s| s.cam_in_c0.translation));
    let mb = mean(samples.iter().map(|s| s.ee_in_base.translation));
    let n = samples.len() as f64;
    let mean_rot: Matrix3<f64> = samples.iter().map(|s| *s.cam_in_c0.rotation.matrix()).sum::<Matrix3<f64>>() / n;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for s in samples {
        let a = rd * (s.cam_in_c0.rotation.matrix() - mean_rot);
        let b = (s.ee_in_base.translation - mb) - rd * (s.cam_in_c0.translation - mc);
        ata += a.transpose() * a;
        atb += a.transpose() * b;
    }
    ata.try_inverse().map(|inv| inv * atb)
}

fn translation_cost(dataset: &CalibrationDataset, r: &Rotation, d: &ScaleMatrix, t: &Vector3<f64>, t0: &Vector3<f64>) -> f64 {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let src = s.cam_in_c0.translation + s.cam_in_c0.rotation * t0;
            (s.ee_in_base.translation - (r * d.apply(&src) + t)).norm_squared()
        })
        .sum()
}

/// Joint Gauss-Newton over rotation, scale, translation and `t0`, started
/// from the alternation result. The alternation converges linearly when
/// `t0` and `D` are coupled; this finishes the job in a few steps. Steps
/// that do not reduce the cost are rejected.
fn polish_joint(dataset: &CalibrationDataset, r: &mut Rotation, d: &mut ScaleMatrix, t: &mut Vector3<f64>, t0: &mut Vector3<f64>) {
    let mut cost = translation_cost(dataset, r, d, t, t0);
    for _ in 0..50 {
        let mut jtj = SMatrix::<f64, 12, 12>::zeros();
        let mut jtr = SVector::<f64, 12>::zeros();
        for s in dataset.samples() {
            let w = s.cam_in_c0.translation + s.cam_in_c0.rotation * *t0;
            let v = d.apply(&w);
            let res = s.ee_in_base.translation - (*r * v + *t);
            let mut j = SMatrix::<f64, 3, 12>::zeros();
            let rm = r.matrix();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rm * v.cross_matrix()));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rm * Matrix3::from_diagonal(&w)));
            j.fixed_view_mut::<3, 3>(0, 6).copy_from(&Matrix3::identity());
            j.fixed_view_mut::<3, 3>(0, 9).copy_from(&(rm * d.matrix() * s.cam_in_c0.rotation.matrix()));
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Ok(step) = jtj.svd(true, true).solve(&jtr, 1e-12 * jtj.norm()) else { return };
        let nr = *r * Rotation::new(step.fixed_rows::<3>(0).into_owned());
        let nd = ScaleMatrix::new(d.alpha + step.fixed_rows::<3>(3));
        let nt = *t + step.fixed_rows::<3>(6);
        let nt0 = *t0 + step.fixed_rows::<3>(9);
        if !nd.is_valid() {
            return;
        }
        let next = translation_cost(dataset, &nr, &nd, &nt, &nt0);
        if !(next < cost) {
            return;
        }
        (*r, *d, *t, *t0) = (nr, nd, nt, nt0);
        let done = cost - next <= 1e-14 * cost.max(f64::MIN_POSITIVE);
        cost = next;
        if done {
            return;
        }
    }
}

fn residuals(dataset: &CalibrationDataset, result: &HandEyeResult) -> (f64, f64) {
    let n = dataset.len() as f64;
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    let rbc0 = result.base_from_c0.rotation;
    for s in dataset.samples() {
        let src = s.cam_in_c0.translation + s.cam_in_c0.rotation * result.t0;
        let pred = rbc0 * result.scale.apply(&src) + result.base_from_c0.translation;
        t_sq += (s.ee_in_base.translation - pred).norm_squared();
        let pred_r = rbc0 * s.cam_in_c0.rotation * result.cam_from_ee_rotation;
        r_sq += geodesic_distance(&pred_r, &s.ee_in_base.rotation).powi(2);
    }
    ((t_sq / n).sqrt(), (r_sq / n).sqrt())
}

/// Full pipeline with default options (`t0 = 0`).
pub fn calibrate(dataset: &CalibrationDataset) -> Result<HandEyeResult, CalibrationError> {
    calibrate_with(dataset, &CalibrationOptions::default())
}

pub fn calibrate_with(dataset: &CalibrationDataset, opts: &CalibrationOptions) -> Result<HandEyeResult, CalibrationError> {
    if dataset.len() < MIN_SAMPLES {
        return Err(CalibrationError::InsufficientData { got: dataset.len(), need: MIN_SAMPLES });
    }
    let mut t0 = Vector3::zeros();
    let (mut fit, mut translation) = fit_translation_model(dataset, &t0, opts.tol, opts.max_iters)?;
    let mut iterations = fit.iterations;
    if opts.refine_t0 {
        // t0 convention: re-estimated once per outer round, then R and D are
        // refitted on the shifted camera positions.
        let mut prev_cost = fit.final_cost();
        for _ in 0..opts.t0_rounds {
            let Some(next) = solve_t0(dataset, &fit.rotation, &fit.scale) else { break };
            t0 = next;
            let (f, t) = fit_translation_model(dataset, &t0, opts.tol, opts.max_iters)?;
            iterations += f.iterations;
            let cost = f.final_cost();
            fit = f;
            translation = t;
            if (prev_cost - cost).abs() <= opts.tol * prev_cost.max(f64::MIN_POSITIVE) {
                break;
            }
            prev_cost = cost;
        }
    }
    if opts.refine_t0 {
        polish_joint(dataset, &mut fit.rotation, &mut fit.scale, &mut translation, &mut t0);
    }
    let cam_from_ee_rotation = estimate_hand_eye_rotation(dataset, &fit.rotation)?;
    let mut result = HandEyeResult {
        base_from_c0: Pose::new(fit.rotation, translation),
        cam_from_ee_rotation,
        t0,
        scale: fit.scale,
        residual_stats: ResidualStats { tandem_iterations: iterations, ..Default::default() },
    };
    let (t_rms, r_rms) = residuals(dataset, &result);
    result.residual_stats.translation_rms_m = t_rms;
    result.residual_stats.rotation_rms_rad = r_rms;
    Ok(result)
}
