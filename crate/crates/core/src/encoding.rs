//! Ray-time conditioning of visual tokens.
//!
//! Each token feature is shifted by a learned projection of its 6-D Plücker
//! descriptor and a learned projection of a Fourier embedding of its
//! timestamp: `f̃ = f + (W_r [d; m] + b_r) + (W_t γ(τ) + b_t)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraView, PluckerRay};
use crate::linalg::{add_into, Matrix};
use crate::{Error, Result};

/// Default number of Fourier frequencies.
pub const DEFAULT_NUM_FREQUENCIES: usize = 8;

/// Timestamps within this distance address the same calibration.
pub const TIMESTAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FourierTimeConfig {
    frequencies: Vec<f64>,
}

impl FourierTimeConfig {
    /// Frequencies in rad/s; must be positive and strictly increasing.
    pub fn new(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::input("at least one Fourier frequency is required"));
        }
        if frequencies.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::input("Fourier frequencies must be finite and positive"));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("Fourier frequencies must be strictly increasing"));
        }
        Ok(Self { frequencies })
    }

    /// `ω_i = (2π / duration) · 2^(i−1)` for `i = 1..=count`.
    pub fn geometric(count: usize, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::input(format!("clip duration must be positive, got {duration}")));
        }
        let base = 2.0 * core::f64::consts::PI / duration;
        Self::new((0..count).map(|i| base * (1u64 << i) as f64).collect())
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn num_frequencies(&self) -> usize {
        self.frequencies.len()
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.frequencies.len()
    }
}

impl TryFrom<Vec<f64>> for FourierTimeConfig {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FourierTimeConfig> for Vec<f64> {
    fn from(c: FourierTimeConfig) -> Self {
        c.frequencies
    }
}

/// `[sin(ω_1 τ), cos(ω_1 τ), …, sin(ω_m τ), cos(ω_m τ)]`
pub fn fourier_time_embedding(tau: f64, cfg: &FourierTimeConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.embedding_dim());
    for &w in cfg.frequencies() {
        let (s, c) = (w * tau).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Learnable ray and time projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtgeParams {
    /// `d × 6`
    pub ray_projection: Matrix,
    pub ray_bias: Vec<f64>,
    /// `d × 2m`
    pub time_projection: Matrix,
    pub time_bias: Vec<f64>,
    /// When set, the moment is divided by this length (meters) before
    /// projection. Off by default: raw meters are fed.
    #[serde(default)]
    pub moment_scale: Option<f64>,
}

impl RtgeParams {
    pub fn zeros(token_dim: usize, num_frequencies: usize) -> Self {
        Self {
            ray_projection: Matrix::zeros(token_dim, 6),
            ray_bias: alloc::vec![0.0; token_dim],
            time_projection: Matrix::zeros(token_dim, 2 * num_frequencies),
            time_bias: alloc::vec![0.0; token_dim],
            moment_scale: None,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.ray_bias.len()
    }

    pub fn validate(&self, cfg: &FourierTimeConfig) -> Result<()> {
        let d = self.token_dim();
        if self.ray_projection.rows != d || self.ray_projection.cols != 6 {
            return Err(Error::dim("ray projection rows", d, self.ray_projection.rows));
        }
        if self.time_projection.rows != d {
            return Err(Error::dim("time projection rows", d, self.time_projection.rows));
        }
        if self.time_projection.cols != cfg.embedding_dim() {
            return Err(Error::dim(
                "time projection columns",
                cfg.embedding_dim(),
                self.time_projection.cols,
            ));
        }
        if self.time_bias.len() != d {
            return Err(Error::dim("time bias", d, self.time_bias.len()));
        }
        Ok(())
    }

    /// Ray descriptor as fed to the projection.
    pub fn ray_input(&self, ray: &PluckerRay) -> [f64; 6] {
        let mut r = ray.descriptor();
        if let Some(scale) = self.moment_scale {
            r[3..].iter_mut().for_each(|m| *m /= scale);
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualToken {
    pub feature: Vec<f64>,
    pub ray: PluckerRay,
    pub timestamp: f64,
    pub view_id: String,
    pub patch_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedToken {
    pub feature: Vec<f64>,
    pub ray: PluckerRay,
    pub timestamp: f64,
    pub view_id: String,
    pub patch_id: u32,
}

/// A patch before lifting: the pixel it was cut around plus its feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchObservation {
    pub view_id: String,
    pub patch_id: u32,
    #[serde(rename = "t")]
    pub timestamp: f64,
    /// `(u, v)` pixel coordinates
    pub pixel: [f64; 2],
    pub feature: Vec<f64>,
}

pub fn condition_token(
    tok: &VisualToken,
    params: &RtgeParams,
    cfg: &FourierTimeConfig,
) -> Result<ConditionedToken> {
    params.validate(cfg)?;
    if tok.feature.len() != params.token_dim() {
        return Err(Error::dim("token feature", params.token_dim(), tok.feature.len()));
    }
    if !tok.timestamp.is_finite() {
        return Err(Error::input("token timestamp must be finite"));
    }
    Ok(ConditionedToken {
        feature: conditioned_feature(&tok.feature, &tok.ray, tok.timestamp, params, cfg),
        ray: tok.ray,
        timestamp: tok.timestamp,
        view_id: tok.view_id.clone(),
        patch_id: tok.patch_id,
    })
}

/// Unchecked core of [`condition_token`].
pub(crate) fn conditioned_feature(
    feature: &[f64],
    ray: &PluckerRay,
    timestamp: f64,
    params: &RtgeParams,
    cfg: &FourierTimeConfig,
) -> Vec<f64> {
    let mut out = feature.to_vec();
    add_into(&mut out, &params.ray_projection.mul_vec(&params.ray_input(ray)));
    add_into(&mut out, &params.ray_bias);
    let gamma = fourier_time_embedding(timestamp, cfg);
    add_into(&mut out, &params.time_projection.mul_vec(&gamma));
    add_into(&mut out, &params.time_bias);
    out
}

/// Accumulates parameter gradients given `∂L/∂f̃` for one token.
pub(crate) fn accumulate_gradients(
    grad_feature: &[f64],
    ray: &PluckerRay,
    timestamp: f64,
    params: &RtgeParams,
    cfg: &FourierTimeConfig,
    grads: &mut RtgeParams,
) {
    grads.ray_projection.add_outer(grad_feature, &params.ray_input(ray));
    add_into(&mut grads.ray_bias, grad_feature);
    grads
        .time_projection
        .add_outer(grad_feature, &fourier_time_embedding(timestamp, cfg));
    add_into(&mut grads.time_bias, grad_feature);
}

/// Looks up the calibration of `(view_id, timestamp)`.
pub fn find_view<'a>(views: &'a [CameraView], view_id: &str, timestamp: f64) -> Option<&'a CameraView> {
    views
        .iter()
        .find(|v| v.view_id == view_id && (v.timestamp - timestamp).abs() <= TIMESTAMP_TOLERANCE)
}

/// Casts each observation's pixel through its camera.
pub fn lift_observations(views: &[CameraView], observations: &[PatchObservation]) -> Result<Vec<VisualToken>> {
    observations
        .iter()
        .map(|obs| {
            let view = find_view(views, &obs.view_id, obs.timestamp).ok_or_else(|| {
                Error::MissingCalibration {
                    view_id: obs.view_id.clone(),
                    timestamp: obs.timestamp,
                }
            })?;
            Ok(VisualToken {
                feature: obs.feature.clone(),
                ray: view.pixel_to_ray(obs.pixel[0], obs.pixel[1])?,
                timestamp: obs.timestamp,
                view_id: obs.view_id.clone(),
                patch_id: obs.patch_id,
            })
        })
        .collect()
}

/// Lifts and conditions every observation of a clip, preserving order.
pub fn encode_clip(
    views: &[CameraView],
    observations: &[PatchObservation],
    params: &RtgeParams,
    cfg: &FourierTimeConfig,
) -> Result<Vec<ConditionedToken>> {
    lift_observations(views, observations)?
        .iter()
        .map(|t| condition_token(t, params, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_plucker, CameraIntrinsics, CameraPose};
    use crate::linalg::Vec3;
    use alloc::vec;
    use core::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, m: usize) -> RtgeParams {
        let mut p = RtgeParams::zeros(d, m);
        for v in p
            .ray_projection
            .data
            .iter_mut()
            .chain(p.ray_bias.iter_mut())
            .chain(p.time_projection.data.iter_mut())
            .chain(p.time_bias.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn token(feature: Vec<f64>, ray: PluckerRay, t: f64) -> VisualToken {
        VisualToken {
            feature,
            ray,
            timestamp: t,
            view_id: "cam0".into(),
            patch_id: 0,
        }
    }

    #[test]
    fn embedding_at_zero() {
        let cfg = FourierTimeConfig::geometric(3, 2.0).unwrap();
        assert_eq!(fourier_time_embedding(0.0, &cfg), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_on_unit_circle() {
        let cfg = FourierTimeConfig::new(vec![1.0, 2.0]).unwrap();
        let g = fourier_time_embedding(PI / 2.0, &cfg);
        let want = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_norm_is_frequency_count() {
        let cfg = FourierTimeConfig::geometric(8, 3.0).unwrap();
        for tau in [-4.2, 0.0, 0.37, 1.5, 123.456] {
            let g = fourier_time_embedding(tau, &cfg);
            let n2: f64 = g.iter().map(|x| x * x).sum();
            assert!((n2 - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frequency_validation() {
        assert!(FourierTimeConfig::new(vec![]).is_err());
        assert!(FourierTimeConfig::new(vec![1.0, 1.0]).is_err());
        assert!(FourierTimeConfig::new(vec![-1.0, 1.0]).is_err());
        assert!(FourierTimeConfig::geometric(4, 0.0).is_err());
        let g = FourierTimeConfig::geometric(3, 2.0).unwrap();
        assert_eq!(g.frequencies(), &[PI, 2.0 * PI, 4.0 * PI]);
    }

    #[test]
    fn zero_projection_is_identity() {
        let cfg = FourierTimeConfig::geometric(2, 1.0).unwrap();
        let p = RtgeParams::zeros(3, 2);
        let ray = make_plucker(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let out = condition_token(&token(vec![0.5, -1.0, 2.0], ray, 0.3), &p, &cfg).unwrap();
        assert_eq!(out.feature, vec![0.5, -1.0, 2.0]);
        assert_eq!(out.ray, ray);
        assert_eq!(out.timestamp, 0.3);
    }

    #[test]
    fn hand_matrix_multiply() {
        // d = 2; row 0 reads direction.x, row 1 reads direction.z + moment.y
        let cfg = FourierTimeConfig::new(vec![1.0]).unwrap();
        let mut p = RtgeParams::zeros(2, 1);
        p.ray_projection = Matrix::from_vec(2, 6, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let ray = make_plucker(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        // descriptor [0, 0, 1, 0, -1, 0]
        let out = condition_token(&token(vec![0.0, 0.0], ray, 0.7), &p, &cfg).unwrap();
        let r = ray.descriptor();
        let oracle: Vec<f64> = (0..2)
            .map(|i| (0..6).map(|j| p.ray_projection.get(i, j) * r[j]).sum())
            .collect();
        assert_eq!(oracle, vec![0.0, 0.0]);
        assert_eq!(out.feature, oracle);

        let ray = make_plucker(Vec3::new(0.0, 0.0, 2.0), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        // descriptor [1, 0, 0, 0, 2, 0]
        let out = condition_token(&token(vec![0.0, 0.0], ray, 0.7), &p, &cfg).unwrap();
        assert_eq!(out.feature, vec![1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = FourierTimeConfig::geometric(2, 1.0).unwrap();
        let p = RtgeParams::zeros(3, 2);
        let ray = make_plucker(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            condition_token(&token(vec![0.0; 4], ray, 0.0), &p, &cfg),
            Err(Error::Dimension { .. })
        ));
        let wrong_cfg = FourierTimeConfig::geometric(3, 1.0).unwrap();
        assert!(condition_token(&token(vec![0.0; 3], ray, 0.0), &p, &wrong_cfg).is_err());
    }

    #[test]
    fn affine_in_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FourierTimeConfig::geometric(4, 2.0).unwrap();
        let p = random_params(&mut rng, 5, 4);
        for _ in 0..20 {
            let ray = make_plucker(
                Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0),
                Vec3::new(rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            let t = rng.random_range(0.0..2.0);
            let f1: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f2: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
            let a = condition_token(&token(sum, ray, t), &p, &cfg).unwrap();
            let b = condition_token(&token(f2, ray, t), &p, &cfg).unwrap();
            for i in 0..5 {
                assert!((a.feature[i] - b.feature[i] - f1[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identifiers_do_not_affect_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FourierTimeConfig::geometric(2, 1.0).unwrap();
        let p = random_params(&mut rng, 4, 2);
        let ray = make_plucker(Vec3::new(1.0, 2.0, 0.0), Vec3::new(0.0, 1.0, 1.0)).unwrap();
        let a = token(vec![0.1, 0.2, 0.3, 0.4], ray, 0.25);
        let mut b = a.clone();
        b.view_id = "other".into();
        b.patch_id = 99;
        assert_eq!(
            condition_token(&a, &p, &cfg).unwrap().feature,
            condition_token(&b, &p, &cfg).unwrap().feature
        );
    }

    #[test]
    fn ray_projection_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FourierTimeConfig::geometric(2, 1.5).unwrap();
        let p = random_params(&mut rng, 3, 2);
        let ray = make_plucker(Vec3::new(2.0, -1.0, 0.5), Vec3::new(0.2, 0.9, -0.4)).unwrap();
        let f = vec![0.3, -0.2, 0.9];
        let w = vec![0.7, -1.3, 0.4];
        // scalar objective: w · f̃
        let objective = |p: &RtgeParams| -> f64 {
            let out = conditioned_feature(&f, &ray, 0.6, p, &cfg);
            out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut grads = RtgeParams::zeros(3, 2);
        accumulate_gradients(&w, &ray, 0.6, &p, &cfg, &mut grads);
        let h = 1e-5;
        for k in 0..p.ray_projection.data.len() {
            let mut plus = p.clone();
            plus.ray_projection.data[k] += h;
            let mut minus = p.clone();
            minus.ray_projection.data[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.ray_projection.data[k];
            assert!((fd - an).abs() / an.abs().max(1.0) < 1e-6, "entry {k}: {fd} vs {an}");
        }
    }

    fn sample_views() -> Vec<CameraView> {
        let k = CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap();
        let mut views = Vec::new();
        for (i, c) in [Vec3::new(6.0, 0.0, 2.0), Vec3::new(0.0, 6.0, 2.0)].iter().enumerate() {
            for t in [0.0, 0.5] {
                views.push(CameraView {
                    view_id: format!("cam{i}"),
                    timestamp: t,
                    intrinsics: k,
                    pose: CameraPose::look_at(*c, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap(),
                });
            }
        }
        views
    }

    fn obs(view: &str, t: f64, patch: u32, u: f64) -> PatchObservation {
        PatchObservation {
            view_id: view.into(),
            patch_id: patch,
            timestamp: t,
            pixel: [u, 200.0],
            feature: vec![u / 100.0, t, patch as f64],
        }
    }

    #[test]
    fn encode_clip_order_and_errors() {
        let views = sample_views();
        let cfg = FourierTimeConfig::geometric(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 3, 2);
        assert!(encode_clip(&views, &[], &p, &cfg).unwrap().is_empty());

        let single = [obs("cam1", 0.5, 3, 100.0)];
        let out = encode_clip(&views, &single, &p, &cfg).unwrap();
        let lifted = lift_observations(&views, &single).unwrap();
        assert_eq!(out, vec![condition_token(&lifted[0], &p, &cfg).unwrap()]);

        let missing = [obs("cam0", 0.0, 0, 1.0), obs("cam2", 0.5, 1, 2.0)];
        match encode_clip(&views, &missing, &p, &cfg) {
            Err(Error::MissingCalibration { view_id, timestamp }) => {
                assert_eq!(view_id, "cam2");
                assert_eq!(timestamp, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_clip_commutes_with_permutation() {
        let views = sample_views();
        let cfg = FourierTimeConfig::geometric(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 3, 2);
        for _ in 0..10 {
            let list: Vec<_> = (0..12)
                .map(|i| {
                    let view = if rng.random_bool(0.5) { "cam0" } else { "cam1" };
                    let t = if rng.random_bool(0.5) { 0.0 } else { 0.5 };
                    obs(view, t, i, rng.random_range(0.0..640.0))
                })
                .collect();
            let mut perm: Vec<usize> = (0..list.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<_> = perm.iter().map(|&i| list[i].clone()).collect();
            let a = encode_clip(&views, &list, &p, &cfg).unwrap();
            let b = encode_clip(&views, &shuffled, &p, &cfg).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(b[k], a[i]);
            }
        }
    }
}
