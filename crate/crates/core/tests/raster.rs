mod common;

use autosplat_core::gaussian::GaussianCloud;
use autosplat_core::raster::{composite, project, render, RenderScene, Splat2D};
use autosplat_core::ClassTag;
use common::*;

fn single(mu: [f64; 3], scale: f64, opacity: f64) -> GaussianCloud {
    let mut c = GaussianCloud::new(0);
    c.push(gaussian(mu, scale, opacity, 0));
    c
}

#[test]
fn projection_examples() {
    let cam = axis_camera(64, 64, 100.0);
    let (splats, _) = project(&RenderScene::from_cloud(&single([0.0, 0.0, 10.0], 1.0, 0.5)), &cam);
    let s = &splats[0];
    assert_eq!(s.center, [32.0, 32.0]);
    // oracle: J Σ Jᵀ with J = diag(fx/z, fy/z) on axis, Σ = I
    assert!((s.cov2d[0] - 100.3).abs() < 1e-9);
    assert!((s.cov2d[2] - 100.3).abs() < 1e-9);
    assert!(s.cov2d[1].abs() < 1e-12);

    let (behind, stats) = project(&RenderScene::from_cloud(&single([0.0, 0.0, -1.0], 1.0, 0.5)), &cam);
    assert!(behind.is_empty());
    assert_eq!(stats.culled, 1);

    // doubling depth halves the projected standard deviation before the low-pass floor
    let cov_at = |z: f64| {
        let (s, _) = project(&RenderScene::from_cloud(&single([0.3, -0.2, z], 0.2, 0.5)), &cam);
        (s[0].cov2d[0] - 0.3, s[0].cov2d[2] - 0.3)
    };
    let (a, b) = (cov_at(4.0), cov_at(8.0));
    // oracle: explicit J·Σ·Jᵀ for an isotropic Σ = s² I
    let oracle = |z: f64, x: f64, y: f64| {
        let s2 = 0.04;
        let j0 = [100.0 / z, 0.0, -100.0 * x / (z * z)];
        let j1 = [0.0, 100.0 / z, -100.0 * y / (z * z)];
        (s2 * j0.iter().map(|v| v * v).sum::<f64>(), s2 * j1.iter().map(|v| v * v).sum::<f64>())
    };
    let (o4, o8) = (oracle(4.0, 0.3, -0.2), oracle(8.0, 0.3, -0.2));
    assert!((a.0 - o4.0).abs() < 1e-9 && (a.1 - o4.1).abs() < 1e-9);
    assert!((b.0 - o8.0).abs() < 1e-9 && (b.1 - o8.1).abs() < 1e-9);
    let ratio = (a.0 / b.0).sqrt();
    assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
}

fn splat(color: [f64; 3], opacity: f64, depth: f64) -> Splat2D {
    Splat2D {
        center: [0.5, 0.5],
        cov2d: [1.0, 0.0, 1.0],
        conic: [1.0, 0.0, 1.0],
        depth,
        color,
        opacity,
        source: 0,
        bbox: [0, 0, 0, 0],
    }
}

#[test]
fn compositing_examples() {
    let (c, a) = composite(&[splat([1.0, 0.5, 0.2], 0.7, 1.0)], 0.5, 0.5);
    assert!((c[0] - 0.7).abs() < 1e-15 && (c[1] - 0.35).abs() < 1e-15 && (a - 0.7).abs() < 1e-15);
    let c1 = [1.0, 0.0, 0.0];
    let c2 = [0.0, 1.0, 0.0];
    let (c, _) = composite(&[splat(c1, 0.5, 1.0), splat(c2, 0.5, 2.0)], 0.5, 0.5);
    assert_eq!(c, [0.5, 0.25, 0.0]);
}

#[test]
fn tiled_render_matches_direct_compositing() {
    let cloud = random_cloud(40, 2, 9);
    let cam = axis_camera(40, 36, 30.0);
    let scene = RenderScene::from_cloud(&cloud);
    let out = render(&scene, &cam);
    let (splats, _) = project(&scene, &cam);
    // oracle: every splat, in depth order, at every pixel
    for y in 0..36 {
        for x in 0..40 {
            let (c, a) = composite(&splats, x as f64 + 0.5, y as f64 + 0.5);
            let got = out.image.get(x, y);
            for ch in 0..3 {
                assert!((got[ch] - c[ch].clamp(0.0, 1.0)).abs() < 1e-6);
            }
            assert!((out.alpha[y * 40 + x] - a).abs() < 1e-6);
        }
    }
}

#[test]
fn empty_cloud_renders_black() {
    let out = render(&RenderScene::new(2), &axis_camera(20, 20, 20.0));
    assert!(out.image.data.iter().all(|&v| v == 0.0));
    assert!(out.alpha.iter().all(|&v| v == 0.0));
}

#[test]
fn centered_blob_is_radially_symmetric() {
    let mut cloud = single([0.0, 0.0, 5.0], 0.4, 0.99);
    cloud.sh[0] = 1.7; // red
    cloud.sh[1] = -2.0;
    cloud.sh[2] = -2.0;
    let out = render(&RenderScene::from_cloud(&cloud), &axis_camera(32, 32, 40.0));
    let px = |x: usize, y: usize| out.image.get(x, y)[0];
    assert!(px(16, 16) > 0.5);
    assert!(out.image.get(16, 16)[1] < 1e-12);
    for y in 0..32 {
        for x in 0..32 {
            let (mx, my) = (31 - x, 31 - y);
            assert!((px(x, y) - px(mx, y)).abs() < 1e-5);
            assert!((px(x, y) - px(x, my)).abs() < 1e-5);
            assert!((px(x, y) - px(y, x)).abs() < 1e-5);
        }
    }
}

#[test]
fn output_is_identical_across_thread_counts() {
    let cloud = random_cloud(64, 2, 4);
    let cam = axis_camera(48, 40, 35.0);
    let scene = RenderScene::from_cloud(&cloud);
    let weights: Vec<f64> = (0..48 * 40 * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = render(&scene, &cam);
            let g = autosplat_core::raster::render_backward(&scene, &cam, &out, &weights);
            (out.image.data, out.alpha, g)
        })
    };
    let one = run(1);
    for t in [4, 8] {
        let other = run(t);
        assert_eq!(one.0, other.0);
        assert_eq!(one.1, other.1);
        assert_eq!(one.2, other.2);
    }
}

#[test]
fn alpha_is_bounded_and_monotone_in_opacity() {
    let cloud = random_cloud(30, 1, 5);
    let cam = axis_camera(32, 32, 25.0);
    let base = render(&RenderScene::from_cloud(&cloud), &cam);
    assert!(base.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    for i in [0, 7, 19] {
        let mut bumped = cloud.clone();
        bumped.opacity_logit[i] += 0.8;
        let out = render(&RenderScene::from_cloud(&bumped), &cam);
        for (a, b) in base.alpha.iter().zip(&out.alpha) {
            assert!(*b >= *a - 1e-12);
        }
    }
}

#[test]
fn pixel_color_is_bounded_by_brightest_splat() {
    let cloud = random_cloud(30, 0, 6);
    let cam = axis_camera(32, 32, 25.0);
    let scene = RenderScene::from_cloud(&cloud);
    let (splats, _) = project(&scene, &cam);
    let max_c = splats.iter().flat_map(|s| s.color).fold(0.0, f64::max);
    let out = render(&scene, &cam);
    for (p, a) in out.alpha.iter().enumerate() {
        for ch in 0..3 {
            assert!(out.image.data[3 * p + ch] <= max_c * a + 1e-12);
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cloud = random_cloud(10, 2, 1);
    let cam = axis_camera(24, 24, 20.0);
    let (_, g) = weighted_loss(&cloud, &cam, &vec![0.0; 24 * 24 * 3]);
    assert!(g.mu.iter().flatten().chain(g.sh.iter()).chain(g.opacity_logit.iter()).all(|&v| v == 0.0));
}

#[test]
fn single_gaussian_opacity_gradient_matches_finite_difference() {
    let mut cloud = single([0.1, -0.05, 4.0], 0.3, 0.4);
    cloud.sh[0] = 0.8;
    cloud.class[0] = ClassTag::Other;
    let cam = axis_camera(24, 24, 30.0);
    let p = 12 * 24 + 13;
    let mut w = vec![0.0; 24 * 24 * 3];
    w[3 * p] = 1.0;
    let (_, g) = weighted_loss(&cloud, &cam, &w);
    let num = central_difference(
        |v| {
            let mut c = cloud.clone();
            c.opacity_logit[0] = v;
            loss_only(&c, &cam, &w)
        },
        cloud.opacity_logit[0],
        1e-4,
    );
    let check = Check { analytic: g.opacity_logit[0], numeric: num };
    assert!(check.rel_err() <= 1e-3, "{check:?}");
}

#[test]
fn fifty_gaussian_gradient_sweep() {
    let checks = common::checks::raster_checks();
    let (rate, n) = pass_rate(&checks, 1e-3);
    assert!(n > 500, "only {n} informative coordinates");
    assert!(rate >= 0.95, "pass rate {rate} over {n}");
}
