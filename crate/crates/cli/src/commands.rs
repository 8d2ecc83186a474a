use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use drillsim::evalkit::{
    depth_series_error, ground_truth, load_depth_estimates, load_estimates, pose_error, recorded_depth, Alignment,
    EvalError,
};
use drillsim::phantom::{write_phantom_scene, PhantomOptions};
use drillsim::scene::{parse_volume_descriptor, write_volume_descriptor};
use drillsim::sim::replay_edits;
use drillsim::streaming::{replay, RecordingReader, RecordingWriter, Server, Topic};
use drillsim::volume::nrrd::{nrrd_to_volume, read_nrrd, write_nrrd, write_slice_stack, NrrdVolume};
use drillsim::volume::{load_volume, VoxelEdit};
use serde::Serialize;

use crate::run::load_checked_scene;
use crate::{AlignArg, CliResult, ConvertArgs, EvalArgs, EvalMode, Failure, PhantomArgs, ReplayArgs};

fn has_ext(p: &Path, ext: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| ext.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

pub fn cmd_convert(a: &ConvertArgs) -> CliResult {
    if has_ext(&a.input, &["nrrd", "nhdr"]) {
        let descriptor = a.output.join("volume.yaml");
        if descriptor.exists() && !a.force {
            return Err(Failure::runtime(anyhow!("{} exists; pass --force to overwrite", descriptor.display())));
        }
        let n = read_nrrd(&a.input).map_err(|e| Failure::input(anyhow!("{}: {e}", a.input.display())))?;
        let v = nrrd_to_volume(&n).map_err(Failure::input)?;
        let src = write_slice_stack(&v, &a.output.join("slices"), &a.prefix).map_err(Failure::runtime)?;
        write_volume_descriptor(&descriptor, &src).map_err(Failure::runtime)?;
        println!("slices: {}", src.count);
        println!("labels: {}", v.label_table().len());
        println!("descriptor: {}", descriptor.display());
    } else {
        if a.output.exists() && !a.force {
            return Err(Failure::runtime(anyhow!("{} exists; pass --force to overwrite", a.output.display())));
        }
        let src = parse_volume_descriptor(&a.input).map_err(Failure::input)?;
        let v = load_volume(&src).map_err(|e| Failure::input(anyhow!("{}: {e}", a.input.display())))?;
        write_nrrd(&a.output, &NrrdVolume::from_volume(&v), true).map_err(Failure::runtime)?;
        println!("nrrd: {}", a.output.display());
    }
    Ok(())
}

pub fn cmd_phantom(a: &PhantomArgs) -> CliResult {
    let opts = PhantomOptions {
        size: a.voxels,
        width: a.size.0,
        height: a.size.1,
        baseline: a.baseline,
        ..Default::default()
    };
    let launch = write_phantom_scene(&a.out, &opts).map_err(Failure::runtime)?;
    println!("launch: {}", launch.display());
    Ok(())
}

pub fn cmd_replay(a: &ReplayArgs) -> CliResult {
    if !(a.speed >= 0.0 && a.speed.is_finite()) {
        return Err(Failure::runtime(anyhow!("--speed must be >= 0")));
    }
    if a.force && a.record.is_none() {
        return Err(Failure::runtime(anyhow!("--force only applies together with --record")));
    }
    if let Some(p) = &a.record {
        if p.exists() && !a.force {
            return Err(Failure::runtime(anyhow!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let reader = RecordingReader::open(&a.recording).map_err(Failure::runtime)?;
    let initial = match &a.scene {
        Some(launch) => {
            let scene = load_checked_scene(launch, None)?;
            let (_, src) = scene
                .volumes()
                .next()
                .ok_or_else(|| Failure::input(anyhow!("{}: scene has no volume", launch.display())))?;
            Some(load_volume(src).map_err(Failure::input)?)
        }
        None => None,
    };
    let mut writer = match &a.record {
        Some(p) => Some(RecordingWriter::create(p, a.force).map_err(Failure::runtime)?),
        None => None,
    };
    let server = match &a.serve {
        Some(addr) => {
            let s = Server::bind(addr.as_str()).map_err(Failure::runtime)?;
            eprintln!("serving on {}", s.local_addr());
            Some(s)
        }
        None => None,
    };
    let mut edits = Vec::new();
    let summary = replay(reader, a.speed, |m| {
        if let Some(w) = writer.as_mut() {
            w.write(m)?;
        }
        if let Some(s) = &server {
            s.publish(m);
        }
        if initial.is_some() && m.topic == Topic::VoxelEdit {
            edits.push(VoxelEdit::decode(&m.payload).map_err(|e| anyhow!("voxel edit: {e}"))?);
        }
        anyhow::Ok(())
    })
    .map_err(Failure::runtime)?;
    if let Some(w) = writer {
        w.finish().map_err(Failure::runtime)?;
    }
    println!("messages: {}", summary.messages);
    if let (Some(v0), Some(dir)) = (&initial, &a.volume_out) {
        let v = replay_edits(v0, &edits);
        let src = write_slice_stack(&v, &dir.join("slices"), "slice_").map_err(Failure::runtime)?;
        write_volume_descriptor(&dir.join("volume.yaml"), &src).map_err(Failure::runtime)?;
        println!("edits applied: {}", edits.len());
        println!("volume: {}", dir.join("volume.yaml").display());
    }
    match summary.error {
        Some(e) => Err(Failure::runtime(anyhow!("replayed {} messages, then: {e}", summary.messages))),
        None => Ok(()),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Io { .. } | EvalError::Recording(_) => Failure::runtime(e),
        _ => Failure::input(e),
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> CliResult {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
        fs::write(p, text + "\n")
            .with_context(|| p.display().to_string())
            .map_err(Failure::runtime)?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    match a.mode {
        EvalMode::Pose => {
            let gt = ground_truth(&a.recording, &a.object, a.relative_to.as_deref()).map_err(eval_failure)?;
            let est = load_estimates(&a.estimates).map_err(eval_failure)?;
            let align = match a.align {
                AlignArg::None => Alignment::None,
                AlignArg::FirstFrame => Alignment::FirstFrame,
            };
            let report = pose_error(&gt, &est, align).map_err(eval_failure)?;
            print!("{report}");
            write_json(a.json.as_deref(), &report)
        }
        EvalMode::Depth => {
            let gt = recorded_depth(&a.recording).map_err(eval_failure)?;
            let est = load_depth_estimates(&a.estimates, a.frame).map_err(eval_failure)?;
            let report = depth_series_error(&gt, &est).map_err(eval_failure)?;
            print!("{report}");
            write_json(a.json.as_deref(), &report)
        }
    }
}
