use proptest::prelude::*;

use track4d_core::geometry::{
    make_plucker, pixel_to_ray, point_to_ray_distance, weighted_ray_intersection, weighted_ray_objective,
    CameraIntrinsics, CameraPose, PluckerRay, WorldPoint,
};
use track4d_core::linalg::{Mat3, Vec3};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (vec3(1.0), vec3(1.0))
        .prop_filter("independent rows", |(a, b)| a.norm() > 0.1 && a.cross(*b).norm() > 0.1)
        .prop_map(|(a, b)| Mat3([a.to_array(), b.to_array(), a.cross(b).to_array()]).orthonormalized())
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Rays through `p` from scattered origins, with positive weights.
fn bundle() -> impl Strategy<Value = (WorldPoint, Vec<PluckerRay>, Vec<f64>)> {
    (vec3(2.0), prop::collection::vec((vec3(8.0), 0.05f64..1.0), 2..7))
        .prop_filter_map("degenerate origin", |(p, rays)| {
            let mut out = Vec::new();
            let mut w = Vec::new();
            for (o, wi) in rays {
                out.push(make_plucker(o, p - o).ok()?);
                w.push(wi);
            }
            Some((p, out, normalized(&w)))
        })
        .prop_filter("well conditioned", |(_, rays, w)| {
            weighted_ray_intersection(rays, w).is_ok_and(|hit| hit.condition > 1e-3)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pixel_rays_satisfy_plucker_constraints(
        r in rotation(),
        c in vec3(20.0),
        f in 100.0f64..2000.0,
        u in -500.0f64..2500.0,
        v in -500.0f64..1500.0,
    ) {
        let k = CameraIntrinsics::new(f, f * 1.1, 640.0, 360.0).unwrap();
        let ray = pixel_to_ray(&k, &CameraPose::new(r, c).unwrap(), u, v).unwrap();
        prop_assert!(ray.direction().dot(ray.moment()).abs() < 1e-9);
        prop_assert!((ray.direction().norm() - 1.0).abs() < 1e-9);
        prop_assert!(point_to_ray_distance(c, &ray) < 1e-9);
    }

    #[test]
    fn bundles_through_a_point_recover_it((p, rays, w) in bundle()) {
        let hit = weighted_ray_intersection(&rays, &w).unwrap();
        prop_assert!((hit.point - p).norm() < 1e-6);
    }

    #[test]
    fn intersection_is_the_objective_minimum(
        (_, rays, w) in bundle(),
        jitter in prop::collection::vec(vec3(0.3), 6),
        probe in vec3(0.5),
    ) {
        // perturb the rays so the minimum is not zero
        let rays: Vec<PluckerRay> = rays
            .iter()
            .zip(&jitter)
            .map(|(r, j)| make_plucker(r.origin() + *j, r.direction()).unwrap())
            .collect();
        let hit = weighted_ray_intersection(&rays, &w).unwrap();
        let best = weighted_ray_objective(hit.point, &rays, &w);
        prop_assert!(best <= weighted_ray_objective(hit.point + probe, &rays, &w) + 1e-8);
        let brute = (-10..=10)
            .flat_map(|i| (-10..=10).map(move |j| (i, j)))
            .map(|(i, j)| weighted_ray_objective(hit.point + Vec3::new(i as f64, j as f64, 0.5) * 0.05, &rays, &w))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(best <= brute + 1e-8);
    }

    #[test]
    fn intersection_moves_with_rigid_motions((_, rays, w) in bundle(), r in rotation(), t in vec3(5.0)) {
        let hit = weighted_ray_intersection(&rays, &w).unwrap();
        let moved: Vec<PluckerRay> = rays.iter().map(|ray| ray.transformed(&r, t).unwrap()).collect();
        let moved_hit = weighted_ray_intersection(&moved, &w).unwrap();
        prop_assert!((moved_hit.point - (r.mul_vec(hit.point) + t)).norm() < 1e-6);
    }

    #[test]
    fn weight_scale_leaves_the_argmin((_, rays, w) in bundle(), c in 0.01f64..100.0) {
        let a = weighted_ray_intersection(&rays, &w).unwrap().point;
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let b = weighted_ray_intersection(&rays, &normalized(&scaled)).unwrap().point;
        prop_assert!((a - b).norm() < 1e-9);
    }
}
