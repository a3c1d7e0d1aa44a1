use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use teleop_core::calibration::io::{parse_dataset, parse_samples, write_dataset};
use teleop_core::calibration::{calibrate, CalibrationDataset, CalibrationSample};
use teleop_core::controllers::{
    run_coarse_phase, run_fine_phase, spread_features, CoarseTask, DepthMode, FeaturePair, FineTask, GainConfig, DEFAULT_STANDOFF,
};
use teleop_core::geometry::{geodesic_distance, rot_x, rot_y, Pose, Rotation};
use teleop_core::simworld::{exploration_trajectory, render_image, ExplorationConfig, Scene, VoConfig, World, WorldConfig};

fn explored(scene: Scene, target: &str, vo: VoConfig, seed: u64) -> (World, Vec<CalibrationSample>, Vector3<f64>) {
    let target = scene.target(target).unwrap();
    let cfg = WorldConfig { rng_seed: seed, ..Default::default() };
    let explore = ExplorationConfig { rng_seed: seed, ..ExplorationConfig::around(target) };
    let poses = exploration_trajectory(&explore, &cfg.ee_from_cam, &scene.workspace).unwrap();
    let mut world = World::new(scene, cfg, poses[0]);
    let samples = world.explore(&poses, vo.with_seed(seed), 0.1, |_, _, _| {}).unwrap();
    (world, samples, target)
}

#[test]
fn dataset_file_round_trip_gives_the_same_calibration() {
    let (_, samples, _) = explored(Scene::button(), "button_center", VoConfig::default(), 2);
    let dataset = CalibrationDataset::new(samples).unwrap();
    let text = write_dataset(&dataset);
    let reparsed = parse_dataset(&text).unwrap();
    // rotations pass through quaternions, so agreement is to rounding
    for (a, b) in reparsed.samples().iter().zip(dataset.samples()) {
        assert_eq!(a.cam_in_c0.translation, b.cam_in_c0.translation);
        assert!(geodesic_distance(&a.ee_in_base.rotation, &b.ee_in_base.rotation) < 1e-12);
    }
    let (a, b) = (calibrate(&reparsed).unwrap(), calibrate(&dataset).unwrap());
    assert!(geodesic_distance(&a.base_from_c0.rotation, &b.base_from_c0.rotation) < 1e-9);
    assert!((a.base_from_c0.translation - b.base_from_c0.translation).norm() < 1e-9);
    assert!((a.scale.alpha - b.scale.alpha).norm() < 1e-9);
}

fn explored_with_mount(mount_offset: bool, seed: u64) -> (World, Vec<CalibrationSample>, Vector3<f64>) {
    let scene = Scene::handle();
    let target = scene.target("handle_grasp").unwrap();
    let mut cfg = WorldConfig { rng_seed: seed, ..Default::default() };
    if !mount_offset {
        cfg.ee_from_cam.translation = Vector3::zeros();
    }
    let explore = ExplorationConfig { rng_seed: seed, ..ExplorationConfig::around(target) };
    let poses = exploration_trajectory(&explore, &cfg.ee_from_cam, &scene.workspace).unwrap();
    let mut world = World::new(scene, cfg, poses[0]);
    let samples = world.explore(&poses, VoConfig::default().with_seed(seed), 0.1, |_, _, _| {}).unwrap();
    (world, samples, target)
}

#[test]
fn noisy_odometry_calibration_is_close() {
    let (world, samples, target) = explored_with_mount(false, 3);
    let r = calibrate(&CalibrationDataset::new(samples).unwrap()).unwrap();
    let vo = world.vo().unwrap();
    assert!(geodesic_distance(&r.ee_from_cam_rotation(), &world.cfg.ee_from_cam.rotation) < 0.01);
    assert!(geodesic_distance(&r.base_from_c0.rotation, &vo.true_base_from_c0().rotation) < 0.01);
    for (d, s) in r.scale.alpha.iter().zip(vo.config().scale_per_axis.iter()) {
        assert!((d * s - 1.0).abs() < 0.02, "D {d} vs 1/{s}");
    }
    let mapped = r.c0_point_to_base(&vo.point_to_c0(&target));
    assert!((mapped - target).norm() < 0.005);
}

#[test]
fn camera_offset_biases_depth_only() {
    // with t0 assumed zero, the mount offset lands in the poorly conditioned
    // depth direction of the exploration cap; the lateral position survives
    let (world, samples, target) = explored_with_mount(true, 3);
    let r = calibrate(&CalibrationDataset::new(samples).unwrap()).unwrap();
    let vo = world.vo().unwrap();
    let err = r.c0_point_to_base(&vo.point_to_c0(&target)) - target;
    assert!(err.xy().norm() < 0.01, "lateral {err:?}");
    assert!(err.z.abs() < 0.25, "depth {err:?}");
    assert!(geodesic_distance(&r.ee_from_cam_rotation(), &world.cfg.ee_from_cam.rotation) < 0.02);
}

fn goal_view_task(world: &World, target: &Vector3<f64>, ee_rotation: &Rotation, tag: &str) -> FineTask {
    let now = world.render();
    let goal = render_image(&world.scene, &world.goal_camera_pose(target, ee_rotation), world.intrinsics());
    let candidates: Vec<(u32, Vector2<f64>)> = goal
        .feature_annotations
        .iter()
        .filter(|a| world.scene.landmark(a.id).unwrap().tag == tag && now.annotation(a.id).is_some())
        .map(|a| (a.id, a.pixel()))
        .collect();
    let ids = spread_features(&candidates, 4);
    let pairs = ids
        .iter()
        .map(|&id| FeaturePair { id, current: now.annotation(id).unwrap().pixel(), desired: goal.annotation(id).unwrap().pixel() })
        .collect();
    FineTask::new(pairs, ids.iter().map(|&id| world.depth(id).unwrap()).collect()).unwrap()
}

#[test]
fn full_pipeline_with_noise_reaches_both_targets() {
    for (scene, name, tag, preset, seed) in
        [(Scene::button(), "button_center", "button", rot_x(PI), 4), (Scene::handle(), "handle_grasp", "handle", rot_y(FRAC_PI_2), 5)]
    {
        let (mut world, samples, target) = explored(scene, name, VoConfig::default(), seed);
        world.cfg.pixel_noise_sigma = 0.5;
        let calib = calibrate(&CalibrationDataset::new(samples).unwrap()).unwrap();
        let task = CoarseTask::new(world.vo().unwrap().point_to_c0(&target), preset, DEFAULT_STANDOFF).unwrap();
        let coarse = run_coarse_phase(&mut world, &task, &calib, &GainConfig::default()).unwrap();
        assert!(coarse.target_in_central_half, "{name}");
        let fine = goal_view_task(&world, &target, &preset, tag);
        let r = run_fine_phase(&mut world, &fine, &GainConfig::default(), DepthMode::GroundTruth, Some(&target)).unwrap();
        let err = r.final_error_mm.unwrap();
        assert!(err <= 10.0, "{name}: {err} mm");
    }
}

#[test]
fn scene_json_round_trip_renders_identically() {
    let scene = Scene::handle();
    let back = Scene::from_json(&scene.to_json()).unwrap();
    assert_eq!(back, scene);
    let world = World::new(scene.clone(), WorldConfig::default(), Pose::identity());
    let target = scene.target("handle_grasp").unwrap();
    let cam = world.goal_camera_pose(&target, &rot_y(FRAC_PI_2));
    let k = world.intrinsics();
    assert_eq!(render_image(&scene, &cam, k), render_image(&back, &cam, k));
}

proptest! {
    #[test]
    fn dataset_text_round_trips(
        raw in proptest::collection::vec((prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(-PI..PI),
                                          prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(-PI..PI)), 3..12)
    ) {
        let pose = |t: [f64; 3], r: [f64; 3]| Pose::new(Rotation::from_scaled_axis(Vector3::from(r)), Vector3::from(t));
        let samples: Vec<CalibrationSample> =
            raw.iter().map(|(t, r, tt, rr)| CalibrationSample { cam_in_c0: pose(*t, *r), ee_in_base: pose(*tt, *rr) }).collect();
        let text = write_dataset(&CalibrationDataset::new(samples.clone()).unwrap());
        let back = parse_samples(&text).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            prop_assert_eq!(a.cam_in_c0.translation, b.cam_in_c0.translation);
            prop_assert!(geodesic_distance(&a.cam_in_c0.rotation, &b.cam_in_c0.rotation) < 1e-12);
            prop_assert!(geodesic_distance(&a.ee_in_base.rotation, &b.ee_in_base.rotation) < 1e-12);
        }
    }
}
