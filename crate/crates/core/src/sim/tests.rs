use super::*;
use crate::phantom::{write_phantom_scene, PhantomOptions};
use crate::plugin::Params;
use crate::scene::{load_scene_file, PluginSpec};
use tempfile::TempDir;

fn scene(size: usize) -> (TempDir, SceneDescription) {
    let d = TempDir::new().unwrap();
    let opts = PhantomOptions {
        size,
        width: 32,
        height: 24,
        ..Default::default()
    };
    let launch = write_phantom_scene(d.path(), &opts).unwrap();
    let s = load_scene_file(&launch).unwrap();
    (d, s)
}

fn run(sim: &mut Simulation, traj: &Trajectory, ticks: u64) -> Vec<TickRecord> {
    let mut out = Vec::new();
    run_trajectory::<SimError>(sim, traj, ticks, |r| {
        out.push(r);
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn empty_trajectory_hundred_ticks() {
    let (_d, s) = scene(16);
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let recs = run(&mut sim, &Trajectory::default(), 100);
    assert_eq!(recs.len(), 100);
    let frames: Vec<u64> = recs.iter().filter_map(|r| r.frame.as_ref().map(|f| f.tick)).collect();
    assert_eq!(frames, vec![33, 66, 99]);
    assert!(recs.iter().all(|r| r.edit.is_none()));
    assert!(recs.windows(2).all(|w| w[1].tick == w[0].tick + 1));
    assert_eq!(recs[0].tick, 1);
}

#[test]
fn frame_index_matches_tick() {
    let (_d, s) = scene(16);
    let cfg = SimConfig {
        render_every: 7,
        ..Default::default()
    };
    let mut sim = Simulation::new(s, cfg).unwrap();
    for r in run(&mut sim, &Trajectory::default(), 50) {
        if let Some(f) = r.frame {
            assert_eq!(f.tick, f.index * 7);
            assert_eq!(f.timestamp_ns, f.tick * 1_000_000);
        }
    }
    assert_eq!(sim.frames_emitted(), 7);
}

#[test]
fn same_seed_same_records() {
    let go = |seed| {
        let (_d, s) = scene(16);
        let mut sim = Simulation::new(s, SimConfig { seed, ..Default::default() }).unwrap();
        let t = builtin_trajectory(BuiltinTrajectory::MovingDrill, 3, &sim);
        run(&mut sim, &t, 99)
    };
    let a = go(7);
    assert_eq!(a, go(7));
    assert_ne!(a, go(8));
}

#[test]
fn moving_drill_keeps_camera_and_drills() {
    let (_d, s) = scene(32);
    let mut sim = Simulation::new(s, SimConfig { tremor: 0.0, ..Default::default() }).unwrap();
    let t = builtin_trajectory(BuiltinTrajectory::MovingDrill, 4, &sim);
    let recs = run(&mut sim, &t, ticks_for_frames(4, 33));
    let frames: Vec<_> = recs.iter().filter_map(|r| r.frame.as_ref()).collect();
    assert_eq!(frames.len(), 4);
    assert!(frames.iter().all(|f| f.poses["main_camera"] == frames[0].poses["main_camera"]));
    assert!(recs.iter().any(|r| r.edit.is_some()));
}

#[test]
fn moving_camera_single_frame_is_trajectory_start() {
    let (_d, s) = scene(16);
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let start = sim.camera_pose();
    let t = builtin_trajectory(BuiltinTrajectory::MovingCamera, 1, &sim);
    let recs = run(&mut sim, &t, ticks_for_frames(1, 33));
    let f = recs.iter().find_map(|r| r.frame.as_ref()).unwrap();
    assert_eq!(f.index, 1);
    assert_eq!(f.poses["main_camera"], start);
    assert!(recs.iter().all(|r| r.edit.is_none()));
}

#[test]
fn moving_camera_orbits_without_edits() {
    let (_d, s) = scene(16);
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let t = builtin_trajectory(BuiltinTrajectory::MovingCamera, 5, &sim);
    let recs = run(&mut sim, &t, ticks_for_frames(5, 33));
    let poses: Vec<Pose> = recs.iter().filter_map(|r| r.frame.as_ref().map(|f| f.poses["main_camera"])).collect();
    assert_eq!(poses.len(), 5);
    assert!((poses[0].angle_to(&poses[4]) - ORBIT_ANGLE).abs() < 1e-9);
    assert!(recs.iter().all(|r| r.edit.is_none()));
}

#[test]
fn input_is_held_between_messages() {
    let (_d, s) = scene(16);
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let target = Pose::from_translation(Vec3::new(0.0, 0.0, 0.05));
    let r = sim
        .step(&InputUpdate {
            drill_pose: Some(target),
            drilling: Some(true),
            camera_pose: None,
        })
        .unwrap();
    assert_eq!(r.input.drill_target, target);
    for _ in 0..10 {
        let r = sim.step(&InputUpdate::default()).unwrap();
        assert_eq!(r.input.drill_target, target);
        assert!(r.input.drilling);
    }
}

#[test]
fn failing_plugin_is_disabled_and_loop_continues() {
    let (_d, mut s) = scene(16);
    let params = Params::from([("object".to_string(), serde_yaml::Value::from("temporal_bone"))]);
    s.plugins.push(PluginSpec {
        name: "object_animator".into(),
        scope: ScopeKind::Object,
        target: Some("drill".into()),
        params,
    });
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let recs = run(&mut sim, &Trajectory::default(), 40);
    assert_eq!(recs.len(), 40);
    assert_eq!(recs[0].plugin_failures.len(), 1);
    assert!(matches!(recs[0].plugin_failures[0], PluginError::ScopeViolation { .. }));
    assert!(recs[1..].iter().all(|r| r.plugin_failures.is_empty()));
    assert_eq!(sim.plugin_failures().len(), 1);
    let recorder = sim.plugin_summaries().into_iter().find(|(n, _)| n == "data_recorder").unwrap();
    assert_eq!(recorder.1, "ticks=40 frames=1");
}

#[test]
fn world_plugin_can_disable_gravity_and_animator_moves_its_object() {
    let (_d, mut s) = scene(16);
    s.plugins.push(PluginSpec {
        name: "gravity".into(),
        scope: ScopeKind::World,
        target: None,
        params: Params::from([("enabled".to_string(), serde_yaml::Value::from(false))]),
    });
    s.plugins.push(PluginSpec {
        name: "object_animator".into(),
        scope: ScopeKind::Object,
        target: Some("temporal_bone".into()),
        params: Params::from([("speed".to_string(), serde_yaml::Value::from(0.01))]),
    });
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    assert_eq!(sim.gravity(), Vec3::zeros());
    let x0 = sim.volume().unwrap().origin().position.x;
    run(&mut sim, &Trajectory::default(), 100);
    let x1 = sim.volume().unwrap().origin().position.x;
    assert!((x1 - x0 - 0.001).abs() < 1e-9, "{x0} {x1}");
    assert!(sim.plugin_failures().is_empty());
}

#[test]
fn edits_replay_to_final_volume() {
    let (_d, s) = scene(32);
    let mut sim = Simulation::new(s, SimConfig::default()).unwrap();
    let initial = sim.volume().unwrap().clone();
    let t = builtin_trajectory(BuiltinTrajectory::MovingDrill, 4, &sim);
    let recs = run(&mut sim, &t, ticks_for_frames(4, 33));
    let edits: Vec<&VoxelEdit> = recs.iter().filter_map(|r| r.edit.as_ref()).collect();
    assert!(!edits.is_empty());
    let rebuilt = replay_edits(&initial, edits);
    assert_eq!(rebuilt.labels(), sim.volume().unwrap().labels());
    assert_eq!(rebuilt.intensities(), sim.volume().unwrap().intensities());
}

#[test]
fn trajectory_interpolation_modes() {
    let a = Pose::from_translation(Vec3::zeros());
    let b = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
    let samples = vec![
        TrajectorySample {
            t: 1.0,
            drill_pose: Some(a),
            drilling: Some(true),
            ..Default::default()
        },
        TrajectorySample {
            t: 2.0,
            drill_pose: Some(b),
            ..Default::default()
        },
    ];
    let lin = Trajectory::new(samples.clone(), Interpolation::Linear).unwrap();
    let hold = Trajectory::new(samples.clone(), Interpolation::Hold).unwrap();
    assert_eq!(lin.state_at(0.5), InputUpdate::default());
    assert!((lin.state_at(1.25).drill_pose.unwrap().position.x - 0.25).abs() < 1e-12);
    assert_eq!(hold.state_at(1.25).drill_pose, Some(a));
    assert_eq!(lin.state_at(5.0).drill_pose, Some(b));
    assert_eq!(lin.state_at(5.0).drilling, Some(true));

    let mut bad = samples;
    bad[1].t = 1.0;
    assert!(Trajectory::new(bad, Interpolation::Linear).is_err());
}

#[test]
fn trajectory_yaml_round_trip() {
    let t = Trajectory::new(
        vec![
            TrajectorySample {
                t: 0.1,
                camera_pose: Some(Pose::from_euler_xyz(Vec3::new(0.1, 0.2, 0.3), 0.1, 0.2, 0.3)),
                ..Default::default()
            },
            TrajectorySample {
                t: 0.5,
                drill_pose: Some(Pose::identity()),
                drilling: Some(false),
                ..Default::default()
            },
        ],
        Interpolation::Hold,
    )
    .unwrap();
    assert_eq!(parse_trajectory(&trajectory_to_yaml(&t)).unwrap(), t);
}
