use std::f64::consts::PI;

use sglight::brdf::{render, render_monte_carlo, GBuffer, Quadrature, RenderConfig};
use sglight::envmap::{decode_env, tile_envmaps, untile_envmaps};
use sglight::multiview::{Camera, Intrinsics, Pose};
use sglight::scene::Scene;
use sglight::sg::{SgEnvironment, SphericalGaussian};
use sglight::sgfit::{fit_sg, FitConfig};
use sglight::vsg::{trace, Aabb, Interpolation, Order, VoxelRecord, VsgVolume};
use sglight::{Rgb, Vec3};

fn lobe(theta: f64, phi: f64, lambda: f64, eta: [f64; 3]) -> SphericalGaussian {
    SphericalGaussian::from_angles(theta, phi, lambda, Rgb::from(eta)).unwrap()
}

#[test]
fn decode_then_fit_reproduces_every_cell() {
    let truth = SgEnvironment::new(vec![lobe(0.8, 1.0, 18.0, [3.0, 2.0, 1.0]), lobe(2.3, 4.0, 9.0, [0.5, 1.0, 2.0])]).unwrap();
    let target = decode_env(&truth, 32, 64, None).unwrap();
    let fit = fit_sg(&target, &FitConfig::with_lobes(2)).unwrap();
    let back = decode_env(&fit.env, 32, 64, None).unwrap();
    for (a, b) in back.data().iter().zip(target.data()) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() <= 1e-2 * b[c].max(1e-12), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn per_pixel_envmaps_survive_tiling() {
    let maps: Vec<_> = (0..6)
        .map(|k| {
            let env = SgEnvironment::new(vec![lobe(0.3 + 0.4 * k as f64, k as f64, 5.0, [1.0, 2.0, 3.0])]).unwrap();
            decode_env(&env, 4, 8, None).unwrap()
        })
        .collect();
    let img = tile_envmaps(&maps, 3, 2).unwrap();
    assert_eq!((img.width(), img.height()), (24, 8));
    let (w, h, back) = untile_envmaps(&img, 4, 8).unwrap();
    assert_eq!((w, h), (3, 2));
    for (a, b) in back.iter().zip(&maps) {
        for (x, y) in a.data().iter().zip(b.data()) {
            // tiles are stored as f32
            assert!((x - y).amax() <= 1e-6 * y.amax());
        }
    }
}

#[test]
fn volume_file_round_trip_preserves_traces() {
    let dir = tempfile::tempdir().unwrap();
    let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
    let vol = VsgVolume::from_fn([5, 4, 3], bbox, |x, y, z| {
        let a = 0.1 * (1 + x + y + z) as f64 / 10.0;
        VoxelRecord::new(a, Rgb::new(x as f64, y as f64, z as f64 + 0.5), Vec3::new(0.0, 1.0, 0.0), 2.0 + x as f64).unwrap()
    })
    .unwrap();
    let path = dir.path().join("v.vsg");
    vol.write(&path).unwrap();
    let back = VsgVolume::read(&path).unwrap();
    let (o, d) = (Vec3::new(-3.0, 0.1, 0.2), Vec3::new(1.0, -0.05, 0.02));
    for order in [Order::Before, Order::After] {
        let a = trace(&vol, o, d, 32, order, Interpolation::Trilinear).unwrap();
        let b = trace(&back, o, d, 32, order, Interpolation::Trilinear).unwrap();
        assert!((a - b).amax() <= 1e-6 * a.amax().max(1.0));
    }
}

#[test]
fn scene_text_round_trips() {
    let text = "sglight-scene 1\n# comment\n[camera.0]\nintrinsics 10 10 4.5 3.5\nsize 10 8\ndepth d.pfm\n\
        [camera.2]\nintrinsics 12 11 5 4\nsize 10 8\npose 0 -1 0 0.5\npose 1 0 0 0\npose 0 0 1 1\n\
        [lighting]\nlobe 0 0 1 10 1 2 3\n[render]\nquadrature 8 16\nnr 32\ninterp nearest\nlog_base 10\nmask_threshold 0.1\n";
    let scene = Scene::parse(text, "/tmp").unwrap();
    let again = Scene::parse(&scene.to_text(), "/tmp").unwrap();
    assert_eq!(scene, again);
    assert_eq!(scene.cameras.len(), 2);
    assert_eq!(scene.render.n_r, 32);
}

#[test]
fn quadrature_render_agrees_with_monte_carlo() {
    let (w, h) = (4, 3);
    let n = w * h;
    let normals: Vec<Vec3> = (0..n).map(|p| Vec3::new(0.2 * (p % w) as f64 - 0.3, 0.1 * (p / w) as f64, -1.0).normalize()).collect();
    let g = GBuffer::new(w, h, vec![Rgb::new(0.8, 0.5, 0.3); n], vec![0.6; n], normals, vec![3.0; n]).unwrap();
    let cam = Camera::new(Intrinsics::new(4.0, 4.0, 1.5, 1.0).unwrap(), Pose::identity(), w, h).unwrap();
    let env = SgEnvironment::new(vec![lobe(PI - 0.4, 1.0, 4.0, [2.0, 2.0, 2.0]), lobe(1.5, 3.0, 2.0, [0.4, 0.6, 0.8])]).unwrap();
    let cfg = RenderConfig { diffuse: Quadrature::new(64, 128).unwrap(), specular: Quadrature::new(128, 256).unwrap() };
    let q = render(&g, &env, &cam, &cfg).unwrap();
    let (md, ms) = render_monte_carlo(&g, &env, &cam, 200_000, 3).unwrap();
    for (a, b) in q.diffuse.data().iter().zip(md.data()).chain(q.specular.data().iter().zip(ms.data())) {
        assert!((a - b).abs() <= 0.03 * b.abs(), "{a} vs {b}");
    }
}
