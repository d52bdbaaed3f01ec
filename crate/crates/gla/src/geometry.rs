//! Epipolar geometry: essential-matrix estimation, residuals, a RANSAC
//! baseline and the model-deviation metric.
//!
//! Coordinates are camera-normalized (intrinsics removed), so the epipolar
//! model is an essential matrix: a 3×3 rank-2 matrix with x′ᵀEx = 0, defined
//! up to scale and sign. Matrices are stored unit-Frobenius with the rank-2
//! constraint enforced.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Denominator floor in the symmetric epipolar residual; keeps degenerate
/// epipolar lines from producing infinities.
pub const RESIDUAL_DENOM_FLOOR: f64 = 1e-15;

/// Rank-2, unit-Frobenius 3×3 epipolar model, defined up to global sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    m: Matrix3<f64>,
}

impl EssentialMatrix {
    /// Project an arbitrary 3×3 matrix onto the constraint set: zero the
    /// smallest singular value and scale to unit Frobenius norm.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("essential matrix".into()));
        }
        if m.norm() < 1e-300 {
            return Err(Error::Geometry("zero essential matrix".into()));
        }
        let svd = m.svd(true, true);
        let u = svd.u.ok_or_else(|| Error::Geometry("svd failed".into()))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Geometry("svd failed".into()))?;
        let s = svd.singular_values;
        let rank2 = u * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0)) * v_t;
        let norm = rank2.norm();
        if norm < 1e-300 {
            return Err(Error::Geometry(
                "rank-2 projection collapsed to zero".into(),
            ));
        }
        Ok(EssentialMatrix { m: rank2 / norm })
    }

    /// E = skew(t)·R from a relative pose, normalized.
    pub fn from_pose(rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        let t = translation;
        let skew = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        EssentialMatrix::from_matrix(skew * rotation.matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }
}

/// One putative match in normalized coordinates: (u, v) in the first image,
/// (u′, v′) in the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub u: f64,
    pub v: f64,
    pub u_prime: f64,
    pub v_prime: f64,
}

impl Correspondence {
    pub fn new(u: f64, v: f64, u_prime: f64, v_prime: f64) -> Self {
        Correspondence {
            u,
            v,
            u_prime,
            v_prime,
        }
    }

    pub fn from_f32_row(row: &[f32; 4]) -> Self {
        Correspondence {
            u: row[0] as f64,
            v: row[1] as f64,
            u_prime: row[2] as f64,
            v_prime: row[3] as f64,
        }
    }
}

/// Symmetric squared epipolar distance of a correspondence under E:
/// e²·(1/‖(Ex)₁₂‖² + 1/‖(Eᵀx′)₁₂‖²) with e = x′ᵀEx and both denominators
/// floored at [`RESIDUAL_DENOM_FLOOR`].
pub fn epipolar_residual(c: &Correspondence, e: &EssentialMatrix) -> f64 {
    let x = Vector3::new(c.u, c.v, 1.0);
    let xp = Vector3::new(c.u_prime, c.v_prime, 1.0);
    let line = e.m * x;
    let line_p = e.m.transpose() * xp;
    let val = xp.dot(&line);
    let d1 = (line.x * line.x + line.y * line.y).max(RESIDUAL_DENOM_FLOOR);
    let d2 = (line_p.x * line_p.x + line_p.y * line_p.y).max(RESIDUAL_DENOM_FLOOR);
    val * val * (1.0 / d1 + 1.0 / d2)
}

/// Isotropic coordinate normalization for one image: centroid to origin,
/// mean distance √2.
fn hartley_transform(points: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::Geometry("all points coincident".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Estimate an essential matrix from ≥ 8 correspondences: Hartley-normalized
/// linear system from x′ᵀEx = 0, null-space direction of the 9×9 normal
/// matrix, de-normalization, rank-2 projection, unit-norm scaling.
pub fn eight_point(corrs: &[Correspondence]) -> Result<EssentialMatrix> {
    if corrs.len() < 8 {
        return Err(Error::Geometry(format!(
            "eight_point needs at least 8 correspondences, got {}",
            corrs.len()
        )));
    }
    let first: Vec<(f64, f64)> = corrs.iter().map(|c| (c.u, c.v)).collect();
    let second: Vec<(f64, f64)> = corrs.iter().map(|c| (c.u_prime, c.v_prime)).collect();
    let t1 = hartley_transform(&first)?;
    let t2 = hartley_transform(&second)?;

    // Normal matrix AᵀA of the n×9 design; its eigenvectors carry the full
    // right singular basis even for exactly 8 rows.
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for c in corrs {
        let p = t1 * Vector3::new(c.u, c.v, 1.0);
        let q = t2 * Vector3::new(c.u_prime, c.v_prime, 1.0);
        let (u, v) = (p.x / p.z, p.y / p.z);
        let (up, vp) = (q.x / q.z, q.y / q.z);
        let row =
            SVector::<f64, 9>::from_row_slice(&[up * u, up * v, up, vp * u, vp * v, vp, u, v, 1.0]);
        ata += row * row.transpose();
    }

    let eigen = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let smallest = order[0];
    let second_smallest = order[1];
    let largest = order[8];
    // Eigenvalues of AᵀA are squared singular values of A; a vanishing
    // second-smallest one means the null space is not unique (collinear or
    // otherwise degenerate configuration).
    let scale = eigen.eigenvalues[largest].max(1e-300);
    if (eigen.eigenvalues[second_smallest].max(0.0) / scale).sqrt() < 1e-10 {
        return Err(Error::Geometry(
            "degenerate configuration: epipolar null space is not unique".into(),
        ));
    }
    let f = eigen.eigenvectors.column(smallest);
    let e_hat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let denorm = t2.transpose() * e_hat * t1;
    EssentialMatrix::from_matrix(denorm)
}

/// RANSAC settings; sampling for hypothesis k is derived from (seed, k), so
/// results do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
    pub support: usize,
    /// Set when no hypothesis reached 8 consensus points; the model is
    /// best-effort only.
    pub degraded: bool,
}

fn count_support(corrs: &[Correspondence], e: &EssentialMatrix, threshold: f64) -> usize {
    corrs
        .iter()
        .filter(|c| epipolar_residual(c, e) < threshold)
        .count()
}

/// Hypothesize-and-verify: repeatedly fit [`eight_point`] on 8 random
/// distinct correspondences, keep the model with the largest consensus,
/// refit on that consensus set and return its inlier mask.
pub fn ransac(corrs: &[Correspondence], config: &RansacConfig) -> Result<RansacResult> {
    if config.iterations == 0 {
        return Err(Error::contract("ransac needs at least one iteration"));
    }
    if corrs.len() < 8 {
        return Err(Error::Geometry(format!(
            "ransac needs at least 8 correspondences, got {}",
            corrs.len()
        )));
    }
    if !(config.threshold > 0.0) {
        return Err(Error::contract("ransac threshold must be positive"));
    }

    let mut best: Option<(usize, EssentialMatrix)> = None;
    let mut sample = [Correspondence::new(0.0, 0.0, 0.0, 0.0); 8];
    for k in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64 + 1);
        let picks = rand::seq::index::sample(&mut rng, corrs.len(), 8);
        for (slot, idx) in sample.iter_mut().zip(picks.iter()) {
            *slot = corrs[idx];
        }
        let Ok(model) = eight_point(&sample) else {
            continue;
        };
        let support = count_support(corrs, &model, config.threshold);
        let better = match &best {
            Some((best_support, _)) => support > *best_support,
            None => true,
        };
        if better {
            best = Some((support, model));
        }
    }

    let (support, model) =
        best.ok_or_else(|| Error::Geometry("ransac: every minimal sample was degenerate".into()))?;

    if support >= 8 {
        let consensus: Vec<Correspondence> = corrs
            .iter()
            .filter(|c| epipolar_residual(c, &model) < config.threshold)
            .copied()
            .collect();
        // Refit on the consensus set; fall back to the hypothesis model if
        // the consensus happens to be degenerate.
        let refit = eight_point(&consensus).unwrap_or(model);
        let inliers: Vec<bool> = corrs
            .iter()
            .map(|c| epipolar_residual(c, &refit) < config.threshold)
            .collect();
        let support = inliers.iter().filter(|&&b| b).count();
        Ok(RansacResult {
            essential: refit,
            inliers,
            support,
            degraded: false,
        })
    } else {
        let inliers: Vec<bool> = corrs
            .iter()
            .map(|c| epipolar_residual(c, &model) < config.threshold)
            .collect();
        Ok(RansacResult {
            essential: model,
            inliers,
            support,
            degraded: true,
        })
    }
}

/// Sign-resolved squared Frobenius distance between two unit-normalized
/// models: min(‖Ê − E‖²_F, ‖Ê + E‖²_F), in [0, 4].
pub fn e_deviation(e_hat: &EssentialMatrix, e_gt: &EssentialMatrix) -> f64 {
    let diff = (e_hat.m - e_gt.m).norm_squared();
    let sum = (e_hat.m + e_gt.m).norm_squared();
    diff.min(sum)
}

/// Sentinel deviation reported when a model cannot be estimated (fewer than
/// 8 predicted inliers): the metric's maximum.
pub const E_DEVIATION_SENTINEL: f64 = 4.0;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Minimal projective scene for oracle data: points in front of both
    /// cameras, exact projections, no noise.
    fn project_scene(
        rotation: &Rotation3<f64>,
        translation: &Vector3<f64>,
        n: usize,
        seed: u64,
    ) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let z = rng.gen_range(4.0..8.0);
            let x = rng.gen_range(-0.5..0.5) * z;
            let y = rng.gen_range(-0.5..0.5) * z;
            let p = Vector3::new(x, y, z);
            let q = rotation * p + translation;
            if q.z < 0.5 {
                continue;
            }
            out.push(Correspondence::new(
                p.x / p.z,
                p.y / p.z,
                q.x / q.z,
                q.y / q.z,
            ));
        }
        out
    }

    fn demo_pose(seed: u64) -> (Rotation3<f64>, Vector3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        let angle = rng.gen_range(0.05..0.4);
        let t = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.3..0.3),
        )
        .normalize();
        (Rotation3::from_axis_angle(&axis, angle), t)
    }

    #[test]
    fn residual_is_zero_on_model_and_sign_invariant() {
        let (r, t) = demo_pose(1);
        let e = EssentialMatrix::from_pose(&r, &t).unwrap();
        let e_neg = EssentialMatrix::from_matrix(-e.matrix()).unwrap();
        for c in project_scene(&r, &t, 10, 2) {
            let res = epipolar_residual(&c, &e);
            assert!(res < 1e-24, "on-model residual {res}");
            let res_neg = epipolar_residual(&c, &e_neg);
            assert!((res - res_neg).abs() <= f64::EPSILON.max(res * 1e-12));
        }
    }

    #[test]
    fn residual_floors_degenerate_epipolar_lines() {
        // Rank-1 model whose first-image epipolar line has no (u, v) part:
        // Ex = (0, 0, u), so the first denominator hits the floor.
        let e =
            EssentialMatrix::from_matrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0))
                .unwrap();
        let c = Correspondence::new(0.5, 0.3, 0.2, -0.4);
        let res = epipolar_residual(&c, &e);
        // e = 0.5, second denominator is 1, first floored at 1e-15.
        let expected = 0.25 * (1e15 + 1.0);
        assert!((res - expected).abs() / expected < 1e-9, "residual {res}");
    }

    #[test]
    fn eight_point_recovers_pure_translation_model() {
        let r = Rotation3::identity();
        let t = Vector3::new(1.0, 0.0, 0.0);
        let corrs = project_scene(&r, &t, 16, 3);
        let estimated = eight_point(&corrs).unwrap();
        let expected = EssentialMatrix::from_pose(&r, &t).unwrap();
        let dev = e_deviation(&estimated, &expected);
        assert!(dev < 1e-8, "deviation {dev}");
        // skew(1,0,0) has exactly this shape.
        let m = expected.matrix();
        assert!(m[(1, 2)] * m[(2, 1)] < 0.0);
    }

    #[test]
    fn eight_point_interpolates_exactly_eight_points() {
        let (r, t) = demo_pose(4);
        let corrs = project_scene(&r, &t, 8, 5);
        let e = eight_point(&corrs).unwrap();
        for c in &corrs {
            let res = epipolar_residual(c, &e);
            assert!(res < 1e-12, "residual {res}");
        }
    }

    #[test]
    fn eight_point_ignores_duplication() {
        let (r, t) = demo_pose(6);
        let base = project_scene(&r, &t, 8, 7);
        let mut doubled = base.clone();
        doubled.extend_from_slice(&base);
        let e_base = eight_point(&base).unwrap();
        let e_doubled = eight_point(&doubled).unwrap();
        let m1 = e_base.matrix();
        let m2 = e_doubled.matrix();
        let direct = (m1 - m2).abs().max();
        let flipped = (m1 + m2).abs().max();
        assert!(direct.min(flipped) < 1e-10);
    }

    #[test]
    fn eight_point_rejects_few_or_collinear_points() {
        let (r, t) = demo_pose(8);
        let corrs = project_scene(&r, &t, 7, 9);
        assert!(matches!(eight_point(&corrs), Err(Error::Geometry(_))));

        // All first-image points on a line, matched to themselves.
        let collinear: Vec<Correspondence> = (0..10)
            .map(|i| {
                let u = i as f64 * 0.1;
                Correspondence::new(u, 2.0 * u + 0.1, u, 2.0 * u + 0.1)
            })
            .collect();
        assert!(matches!(eight_point(&collinear), Err(Error::Geometry(_))));

        let coincident: Vec<Correspondence> = vec![Correspondence::new(0.1, 0.2, 0.3, 0.4); 9];
        assert!(matches!(eight_point(&coincident), Err(Error::Geometry(_))));
    }

    #[test]
    fn eight_point_max_residual_on_its_own_data() {
        for seed in 0..5 {
            let (r, t) = demo_pose(seed + 10);
            let corrs = project_scene(&r, &t, 24, seed + 20);
            let e = eight_point(&corrs).unwrap();
            let worst = corrs
                .iter()
                .map(|c| epipolar_residual(c, &e))
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "seed {seed}: worst residual {worst}");
        }
    }

    fn scene_with_outliers(
        seed: u64,
        n: usize,
        outlier_ratio: f64,
    ) -> (Vec<Correspondence>, Vec<bool>, EssentialMatrix) {
        let (r, t) = demo_pose(seed);
        let e = EssentialMatrix::from_pose(&r, &t).unwrap();
        let inliers = project_scene(&r, &t, n, seed.wrapping_add(100));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200));
        let mut corrs = Vec::new();
        let mut labels = Vec::new();
        for c in inliers {
            if rng.gen_bool(outlier_ratio) {
                // uniform garbage, rejected if accidentally on-model
                loop {
                    let o = Correspondence::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    if epipolar_residual(&o, &e) > 1e-4 {
                        corrs.push(o);
                        labels.push(false);
                        break;
                    }
                }
            } else {
                corrs.push(c);
                labels.push(true);
            }
        }
        (corrs, labels, e)
    }

    #[test]
    fn ransac_recovers_exact_mask_on_noise_free_data() {
        for seed in 0..3 {
            let (corrs, labels, _) = scene_with_outliers(seed, 64, 0.5);
            let result = ransac(
                &corrs,
                &RansacConfig {
                    iterations: 500,
                    threshold: 1e-6,
                    seed: 77 + seed,
                },
            )
            .unwrap();
            assert!(!result.degraded);
            assert_eq!(result.inliers, labels, "seed {seed}");
        }
    }

    #[test]
    fn ransac_is_deterministic_in_seed() {
        let (corrs, _, _) = scene_with_outliers(5, 48, 0.4);
        let cfg = RansacConfig {
            iterations: 200,
            threshold: 1e-6,
            seed: 9,
        };
        let a = ransac(&corrs, &cfg).unwrap();
        let b = ransac(&corrs, &cfg).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.essential.matrix(), b.essential.matrix());
    }

    #[test]
    fn ransac_rejects_bad_arguments() {
        let (corrs, _, _) = scene_with_outliers(6, 16, 0.2);
        assert!(ransac(
            &corrs,
            &RansacConfig {
                iterations: 0,
                threshold: 1e-6,
                seed: 1
            }
        )
        .is_err());
        assert!(ransac(
            &corrs[..7],
            &RansacConfig {
                iterations: 10,
                threshold: 1e-6,
                seed: 1
            }
        )
        .is_err());
    }

    #[test]
    fn e_deviation_is_a_sign_resolved_pseudometric() {
        let (r, t) = demo_pose(12);
        let e = EssentialMatrix::from_pose(&r, &t).unwrap();
        assert_eq!(e_deviation(&e, &e), 0.0);

        let neg = EssentialMatrix::from_matrix(-e.matrix()).unwrap();
        assert!(e_deviation(&e, &neg) < 1e-30);

        let scaled = EssentialMatrix::from_matrix(e.matrix() * 7.0).unwrap();
        assert!(e_deviation(&e, &scaled) < 1e-30);

        // Symmetry and triangle inequality (on the square-root distance)
        // across a few random triples.
        for seed in 0..5u64 {
            let (r1, t1) = demo_pose(20 + seed);
            let (r2, t2) = demo_pose(40 + seed);
            let (r3, t3) = demo_pose(60 + seed);
            let a = EssentialMatrix::from_pose(&r1, &t1).unwrap();
            let b = EssentialMatrix::from_pose(&r2, &t2).unwrap();
            let c = EssentialMatrix::from_pose(&r3, &t3).unwrap();
            assert!((e_deviation(&a, &b) - e_deviation(&b, &a)).abs() < 1e-15);
            let dab = e_deviation(&a, &b).sqrt();
            let dbc = e_deviation(&b, &c).sqrt();
            let dac = e_deviation(&a, &c).sqrt();
            assert!(dac <= dab + dbc + 1e-12);
            assert!(e_deviation(&a, &b) <= 4.0 + 1e-12);
        }
    }

    #[test]
    fn zero_matrix_is_rejected() {
        assert!(EssentialMatrix::from_matrix(Matrix3::zeros()).is_err());
    }
}
