use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::anyhow;
use drillsim::scene::{load_scene_file, parse_volume_descriptor, validate_scene, ObjectPayload, SceneDescription, Severity};
use drillsim::sim::{
    builtin_trajectory, load_trajectory, BuiltinTrajectory, SimConfig, SimError, Simulation, Trajectory,
};
use drillsim::streaming::{
    default_tracked, frame_decimation, PoseRate, PublishConfig, Publisher, RecordingWriter, Server,
};

use crate::{CliResult, Failure, PoseRateArg, SimArgs};

enum TrajectoryChoice {
    None,
    Builtin(BuiltinTrajectory),
    File(std::path::PathBuf),
}

fn bad_flag(msg: impl Into<String>) -> Failure {
    Failure::runtime(anyhow!(msg.into()))
}

/// Checks flag values and combinations before any file is read or written.
fn check_flags(a: &SimArgs, serving: bool) -> CliResult<TrajectoryChoice> {
    if a.frames == Some(0) {
        return Err(bad_flag("--frames must be at least 1"));
    }
    if a.render_every == 0 {
        return Err(bad_flag("--render-every must be at least 1"));
    }
    if !(a.physics_hz > 0.0 && a.physics_hz.is_finite()) {
        return Err(bad_flag("--physics-hz must be positive"));
    }
    if let Some(b) = a.baseline {
        if !(b > 0.0 && b.is_finite()) {
            return Err(bad_flag("--baseline must be positive"));
        }
    }
    if !(a.tremor >= 0.0 && a.tremor.is_finite()) {
        return Err(bad_flag("--tremor must be >= 0"));
    }
    if let Some(hz) = a.publish_hz {
        if !(hz > 0.0 && hz.is_finite()) {
            return Err(bad_flag("--publish-hz must be positive"));
        }
    }
    if a.threads == Some(0) {
        return Err(bad_flag("--threads must be at least 1"));
    }
    if a.force && a.record.is_none() {
        return Err(bad_flag("--force only applies together with --record"));
    }
    let choice = match a.trajectory.as_deref() {
        None => TrajectoryChoice::None,
        Some(s) => match s.parse::<BuiltinTrajectory>() {
            Ok(b) => {
                if a.frames.is_none() {
                    return Err(bad_flag(format!("--trajectory {s} needs --frames")));
                }
                TrajectoryChoice::Builtin(b)
            }
            Err(_) => TrajectoryChoice::File(s.into()),
        },
    };
    if !serving && a.frames.is_none() && !matches!(choice, TrajectoryChoice::File(_)) {
        return Err(bad_flag("nothing to run: pass --frames, --trajectory FILE or --serve"));
    }
    Ok(choice)
}

/// Loads and validates the scene, printing diagnostics.
pub fn load_checked_scene(launch: &Path, volume: Option<&Path>) -> CliResult<SceneDescription> {
    let mut scene = load_scene_file(launch).map_err(Failure::input)?;
    for w in &scene.warnings {
        eprintln!("{w}");
    }
    let diags = validate_scene(&scene);
    let mut errors = 0;
    for d in &diags {
        eprintln!("{d}");
        errors += (d.severity == Severity::Error) as usize;
    }
    if errors > 0 {
        return Err(Failure::input(anyhow!("{}: {errors} scene error(s)", launch.display())));
    }
    if let Some(desc) = volume {
        let src = parse_volume_descriptor(desc).map_err(Failure::input)?;
        let slot = scene
            .objects
            .values_mut()
            .find_map(|o| match &mut o.payload {
                ObjectPayload::Volume(s) => Some(s),
                _ => None,
            })
            .ok_or_else(|| Failure::input(anyhow!("--volume given but the scene has no volume object")))?;
        *slot = src;
    }
    Ok(scene)
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::NoCamera | SimError::Camera { .. } | SimError::Volume { .. } | SimError::MultipleVolumes(_) => {
            Failure::input(e)
        }
        _ => Failure::runtime(e),
    }
}

pub fn set_threads(threads: Option<usize>) -> CliResult {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::runtime)?;
    }
    Ok(())
}

pub fn cmd_run(launch: &Path, a: &SimArgs, serve: Option<&str>, realtime: bool) -> CliResult {
    let choice = check_flags(a, serve.is_some())?;
    if let Some(p) = &a.record {
        if p.exists() && !a.force {
            return Err(Failure::runtime(anyhow!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    set_threads(a.threads)?;

    let scene = load_checked_scene(launch, a.volume.as_deref())?;
    let tracked = if a.track.is_empty() {
        default_tracked(&scene)
    } else {
        for t in &a.track {
            if !scene.objects.contains_key(t) {
                return Err(Failure::input(anyhow!("--track {t}: no such object")));
            }
        }
        a.track.clone()
    };
    let config = SimConfig {
        physics_hz: a.physics_hz,
        render_every: a.render_every,
        size: a.size,
        baseline: a.baseline,
        seed: a.seed,
        tremor: a.tremor,
    };
    let mut sim = Simulation::new(scene, config).map_err(sim_failure)?;
    for (tick, e) in sim.plugin_failures() {
        eprintln!("warning: plugin disabled at tick {tick}: {e}");
    }

    let trajectory = match &choice {
        TrajectoryChoice::None => Trajectory::default(),
        TrajectoryChoice::Builtin(b) => builtin_trajectory(*b, a.frames.unwrap_or(1), &sim),
        TrajectoryChoice::File(p) => load_trajectory(p).map_err(Failure::runtime)?,
    };
    let max_ticks = match (a.frames, &choice) {
        (Some(f), _) => Some(f * a.render_every),
        (None, TrajectoryChoice::File(_)) => Some(((trajectory.duration() * a.physics_hz).ceil() as u64).max(1)),
        _ => None,
    };
    let publisher = Publisher::new(PublishConfig {
        frame_every: a.publish_hz.map_or(1, |hz| frame_decimation(a.physics_hz, a.render_every, hz)),
        pose_rate: match a.pose_rate {
            PoseRateArg::Render => PoseRate::Render,
            PoseRateArg::Physics => PoseRate::Physics,
        },
        tracked,
    });

    let mut server = match serve {
        Some(addr) => {
            let s = Server::bind(addr).map_err(Failure::runtime)?;
            eprintln!("serving on {}", s.local_addr());
            Some(s)
        }
        None => None,
    };
    let mut writer = match &a.record {
        Some(p) => Some(RecordingWriter::create(p, a.force).map_err(Failure::runtime)?),
        None => None,
    };

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        // a second handler in the same process is not an error worth failing on
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }

    let pace = realtime || serve.is_some();
    let start = Instant::now();
    let mut removed = 0usize;
    let mut messages = 0u64;
    let mut published_frames = 0u64;
    while !stop.load(Ordering::SeqCst) && max_ticks.map_or(true, |m| sim.tick() < m) {
        let t = (sim.tick() + 1) as f64 / a.physics_hz;
        let mut update = trajectory.state_at(t);
        if let Some(s) = &server {
            update.merge(&s.poll_controls());
        }
        let rec = sim.step(&update).map_err(Failure::runtime)?;
        for f in &rec.plugin_failures {
            eprintln!("warning: plugin disabled at tick {}: {f}", rec.tick);
        }
        removed += rec.edit.as_ref().map_or(0, |e| e.removed.len());
        let msgs = publisher.messages(&rec);
        if rec.frame.as_deref().is_some_and(|f| publisher.publishes_frame(f.index)) {
            published_frames += 1;
        }
        for m in &msgs {
            if let Some(w) = writer.as_mut() {
                w.write(m).map_err(Failure::runtime)?;
            }
            if let Some(s) = &server {
                s.publish(m);
            }
        }
        messages += msgs.len() as u64;
        if pace {
            let due = start + Duration::from_secs_f64(sim.tick() as f64 / a.physics_hz);
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        if rec.stop_requested {
            break;
        }
    }
    sim.shutdown();

    println!("ticks: {}", sim.tick());
    println!("frames: {}", sim.frames_emitted());
    println!("published frames: {published_frames}");
    println!("voxels removed: {removed}");
    println!("messages: {messages}");
    for (name, summary) in sim.plugin_summaries() {
        if !summary.is_empty() {
            println!("plugin {name}: {summary}");
        }
    }
    if let Some(w) = writer {
        let bytes = w.bytes_written();
        w.finish().map_err(Failure::runtime)?;
        if let Some(p) = &a.record {
            println!("recording: {} ({bytes} bytes)", p.display());
        }
    }
    if let Some(s) = server.as_mut() {
        if s.dropped() > 0 {
            eprintln!("slow subscribers missed {} messages", s.dropped());
        }
        s.shutdown();
    }
    Ok(())
}
