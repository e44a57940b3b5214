use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use flowdepth::eval::{compute_metrics, evaluate, evaluation_mask, EvalOptions};
use flowdepth::experiment::{recover, scene_problem, RecoveryConfig};
use flowdepth::features::extract_keypoints;
use flowdepth::geometry::rigid_flow;
use flowdepth::gradcheck::{check_all, check_term, GradCheckConfig, GradTerm};
use flowdepth::imaging::ImagePlane;
use flowdepth::io;
use flowdepth::losses::{total_flow_loss, FrontEndConfig, LossConfig};
use flowdepth::synth::{render, SceneSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{read_scene, sha256_hex, ExperimentManifest, FileHashes, OutputPaths, Provenance, SceneRef};
use crate::{Cli, Command, EvalDepthArgs, FlowCheckArgs, GradcheckArgs, LossEvalArgs, OptimizeArgs, Preset, SynthArgs};

/// Runs the selected command. `Ok(false)` means it ran but its check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::LossEval(a) => loss_eval(a, cli.seed),
        Command::Optimize(a) => optimize(a, cli.seed),
        Command::EvalDepth(a) => eval_depth(a),
        Command::FlowCheck(a) => flow_check(a, cli.seed),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
    }
}

fn emit(command: &str, result: impl Serialize, provenance: &Provenance) -> Result<()> {
    let doc = json!({ "command": command, "result": result, "provenance": provenance });
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(&doc)?) {
        // a closed pipe (`| head`) is not a failure of the command
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_report(path: &Path, result: &impl Serialize, provenance: &Provenance) -> Result<()> {
    let doc = json!({ "result": result, "provenance": provenance });
    io::write_json(path, &doc).with_context(|| format!("writing {}", path.display()))
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(T::default()),
    }
}

/// Reads a grayscale image; colour inputs are converted to luminance.
fn read_image(path: &Path) -> Result<ImagePlane> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let img = match ext.as_str() {
        "pfm" => io::read_pfm(path),
        "pgm" | "ppm" | "pnm" => io::read_pnm(path),
        _ => bail!("{}: unsupported image extension (expected pfm, pgm or ppm)", path.display()),
    }
    .with_context(|| format!("reading {}", path.display()))?;
    Ok(if img.channels == 1 { img } else { img.to_gray() })
}

/// Serialises `spec` until the JSON text is a fixed point of parse and
/// serialise, so that rendering from the written file repeats this run
/// bit for bit. Pose rotations pass through axis-angle, which is not exact.
fn canonical_spec(spec: SceneSpec) -> Result<(SceneSpec, String)> {
    let mut text = serde_json::to_string_pretty(&spec)?;
    for _ in 0..8 {
        let parsed: SceneSpec = serde_json::from_str(&text)?;
        let again = serde_json::to_string_pretty(&parsed)?;
        if again == text {
            return Ok((parsed, text));
        }
        text = again;
    }
    bail!("scene description does not serialise stably")
}

fn seeded_spec(mut spec: SceneSpec, seed: Option<u64>) -> SceneSpec {
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> Result<bool> {
    let spec = match (&a.source.spec, a.source.preset) {
        (Some(p), _) => read_scene(p)?,
        (None, Some(Preset::TexturedTwoPlane)) => SceneSpec::textured_two_plane(0),
        (None, Some(Preset::LowTexture)) => SceneSpec::low_texture(0),
        (None, None) => unreachable!("clap requires a scene source"),
    };
    let (spec, text) = canonical_spec(seeded_spec(spec, seed))?;
    let scene = render(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = |name: &str| a.out.join(name);
    fs::write(out("scene.json"), format!("{text}\n")).context("writing scene.json")?;
    io::write_pnm(out("target.pgm"), &scene.target)?;
    io::write_pnm(out("source.pgm"), &scene.source)?;
    io::write_pfm(out("target.pfm"), &scene.target)?;
    io::write_pfm(out("source.pfm"), &scene.source)?;
    io::write_depth_pfm(out("depth.pfm"), &scene.depth)?;
    io::write_depth_pfm(out("source_depth.pfm"), &scene.source_depth)?;
    io::write_flo(out("flow.flo"), &scene.flow)?;
    io::write_flo(out("backward_flow.flo"), &scene.backward_flow)?;
    io::write_mask(out("occlusion.pgm"), &scene.occlusion)?;
    io::write_mask(out("textured.pgm"), &scene.textured)?;
    io::write_segments(out("segments.pgm"), &scene.segments)?;

    let mut files = FileHashes::new();
    for name in [
        "scene.json",
        "target.pgm",
        "source.pgm",
        "target.pfm",
        "source.pfm",
        "depth.pfm",
        "source_depth.pfm",
        "flow.flo",
        "backward_flow.flo",
        "occlusion.pgm",
        "textured.pgm",
        "segments.pgm",
    ] {
        let bytes = fs::read(out(name)).with_context(|| format!("reading back {name}"))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let provenance = Provenance::new("synth", &serde_json::to_value(&spec)?, Some(spec.seed))?;
    let result = json!({
        "scene": "scene.json",
        "mean_depth": scene.mean_depth(),
        "occluded_pixels": scene.occlusion.count(),
        "textured_pixels": scene.textured.count(),
        "files": files,
    });
    io::write_json(out("manifest.json"), &json!({ "result": &result, "provenance": &provenance }))?;
    emit("synth", result, &provenance)?;
    Ok(true)
}

fn loss_eval(a: &LossEvalArgs, seed: Option<u64>) -> Result<bool> {
    let loss: LossConfig = read_config(a.loss_config.as_ref())?;
    let front_end: FrontEndConfig = read_config(a.front_end.as_ref())?;
    let (breakdown, config) = if let Some(scene_path) = &a.scene {
        let spec = seeded_spec(read_scene(scene_path)?, seed);
        let scene = render(&spec)?;
        let cfg = RecoveryConfig {
            loss,
            front_end,
            unsupervised: a.unsupervised,
            ..RecoveryConfig::default()
        };
        let problem = scene_problem(&spec, &scene, &cfg)?;
        let depth = match &a.depth {
            Some(p) => io::read_depth_pfm(p).with_context(|| format!("reading {}", p.display()))?,
            None => scene.depth.clone(),
        };
        if depth.dims() != spec.intrinsics.dims() {
            bail!("depth map is {:?}, scene is {:?}", depth.dims(), spec.intrinsics.dims());
        }
        if let Some(i) = depth.valid.iter().position(|v| !v) {
            bail!("depth map has an invalid pixel at index {i}");
        }
        let log_depth: Vec<f64> = depth.values.iter().map(|d| d.ln()).collect();
        let eval = problem.evaluate(&log_depth, &[spec.pose.to_chart()], false)?;
        let config = json!({
            "objective": "depth",
            "scene": spec,
            "depth_sha256": a.depth.as_ref().map(|p| fs::read(p).map(|b| sha256_hex(&b))).transpose()?,
            "loss": cfg.loss,
            "front_end": cfg.front_end,
            "unsupervised": a.unsupervised,
        });
        (eval.breakdown, config)
    } else {
        let (Some(t), Some(s), Some(f)) = (&a.target, &a.source, &a.flow) else {
            bail!("give either --scene or all of --target, --source and --flow");
        };
        let target = read_image(t)?;
        let source = read_image(s)?;
        let flow = io::read_flo(f).with_context(|| format!("reading {}", f.display()))?;
        let patches = extract_keypoints(&target, front_end.max_keypoints, &front_end.keypoints)?;
        let obj = total_flow_loss(&target, &source, &flow, &patches, &loss)?;
        let hash = |p: &Path| -> Result<String> { Ok(sha256_hex(&fs::read(p)?)) };
        let config = json!({
            "objective": "flow",
            "target_sha256": hash(t)?,
            "source_sha256": hash(s)?,
            "flow_sha256": hash(f)?,
            "loss": loss,
            "front_end": front_end,
        });
        (obj.breakdown, config)
    };
    let provenance = Provenance::new("loss-eval", &config, seed)?;
    if let Some(p) = &a.out {
        write_report(p, &breakdown, &provenance)?;
    }
    emit("loss-eval", &breakdown, &provenance)?;
    Ok(true)
}

fn optimize(a: &OptimizeArgs, seed: Option<u64>) -> Result<bool> {
    let mut m = match &a.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => ExperimentManifest {
            scene: SceneRef::Path(a.scene.clone().ok_or_else(|| anyhow!("--scene is required"))?),
            loss: read_config(a.loss_config.as_ref())?,
            front_end: read_config(a.front_end.as_ref())?,
            optim: read_config(a.optim_config.as_ref())?,
            unsupervised: false,
            outputs: OutputPaths::default(),
            seed: None,
        },
    };
    m.unsupervised |= a.unsupervised;
    if let Some(n) = a.iterations {
        m.optim.max_iterations = n;
    }
    for (slot, flag) in [
        (&mut m.outputs.depth, &a.out),
        (&mut m.outputs.trace, &a.trace),
        (&mut m.outputs.report, &a.report),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    m.seed = seed.or(m.seed);
    m.check_paths()?;

    let mut spec = m.scene_spec()?;
    if let Some(s) = m.seed {
        spec.seed = s;
        m.optim.init.seed = s;
    }
    let scene = render(&spec)?;
    let cfg = RecoveryConfig {
        loss: m.loss.clone(),
        front_end: m.front_end.clone(),
        optim: m.optim.clone(),
        unsupervised: m.unsupervised,
        ..RecoveryConfig::default()
    };
    let rec = recover(&spec, &scene, &cfg)?;
    let config = json!({ "scene": spec, "recovery": cfg });
    let provenance = Provenance::new("optimize", &config, Some(spec.seed))?;
    let last = rec.result.trace.last().expect("trace holds the initial entry");
    let result = json!({
        "stop": rec.result.stop,
        "iterations": rec.result.state.iteration,
        "initial_loss": rec.result.trace[0].breakdown.total,
        "final_loss": last.breakdown,
        "metrics": rec.report,
    });
    if let Some(p) = &m.outputs.depth {
        io::write_depth_pfm(p, &rec.result.depth).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &m.outputs.trace {
        io::write_json(p, &rec.result.trace).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &m.outputs.report {
        write_report(p, &result, &provenance)?;
    }
    emit("optimize", result, &provenance)?;
    Ok(true)
}

fn eval_depth(a: &EvalDepthArgs) -> Result<bool> {
    let pred = io::read_depth_pfm(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let gt = io::read_depth_pfm(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let mask = a
        .mask
        .as_ref()
        .map(|p| io::read_mask(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let opts = EvalOptions {
        min_depth: a.min_depth,
        max_depth: a.max_depth,
    };
    let report = if a.no_scaling {
        let m = evaluation_mask(&pred, &gt, mask.as_ref(), &opts)?;
        compute_metrics(&pred, &gt, &m)?
    } else {
        evaluate(&pred, &gt, mask.as_ref(), &opts)?
    };
    let mut config = json!({
        "pred_sha256": sha256_hex(&fs::read(&a.pred)?),
        "gt_sha256": sha256_hex(&fs::read(&a.gt)?),
        "options": opts,
        "median_scaling": !a.no_scaling,
    });
    if let Some(p) = &a.mask {
        config["mask_sha256"] = Value::String(sha256_hex(&fs::read(p)?));
    }
    let provenance = Provenance::new("eval-depth", &config, None)?;
    if let Some(p) = &a.out {
        write_report(p, &report, &provenance)?;
    }
    emit("eval-depth", report, &provenance)?;
    Ok(true)
}

fn flow_check(a: &FlowCheckArgs, seed: Option<u64>) -> Result<bool> {
    if !(a.tolerance >= 0.0) {
        bail!("tolerance must be non-negative");
    }
    let spec = seeded_spec(read_scene(&a.scene)?, seed);
    let scene = render(&spec)?;
    let (candidate, valid, source) = match &a.flow {
        Some(p) => {
            let f = io::read_flo(p).with_context(|| format!("reading {}", p.display()))?;
            if f.dims() != scene.flow.dims() {
                bail!("flow is {:?}, scene is {:?}", f.dims(), scene.flow.dims());
            }
            // only pixels seen in both views have a meaningful reference flow
            (f, scene.occlusion.not(), "file")
        }
        None => {
            let (f, m) = rigid_flow(&scene.depth, &spec.pose, &spec.intrinsics)?;
            (f, m, "rigid_flow")
        }
    };
    let errors: Vec<f64> = (0..candidate.len())
        .filter(|&i| valid.data[i])
        .map(|i| (candidate.u[i] - scene.flow.u[i]).hypot(candidate.v[i] - scene.flow.v[i]))
        .collect();
    if errors.is_empty() {
        bail!("no pixel to compare");
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let passed = max <= a.tolerance;
    let result = json!({
        "compared": source,
        "pixels": errors.len(),
        "max_endpoint_error": max,
        "mean_endpoint_error": mean,
        "tolerance": a.tolerance,
        "passed": passed,
    });
    let mut config = json!({ "scene": spec, "tolerance": a.tolerance });
    if let Some(p) = &a.flow {
        config["flow_sha256"] = Value::String(sha256_hex(&fs::read(p)?));
    }
    let provenance = Provenance::new("flow-check", &config, Some(spec.seed))?;
    if let Some(p) = &a.out {
        write_report(p, &result, &provenance)?;
    }
    emit("flow-check", result, &provenance)?;
    if !passed {
        eprintln!("flow-check: max endpoint error {max:e} exceeds tolerance {:e}", a.tolerance);
    }
    Ok(passed)
}

fn gradcheck(a: &GradcheckArgs, seed: Option<u64>) -> Result<bool> {
    let mut cfg = GradCheckConfig::default();
    if let Some(n) = a.states {
        cfg.states = n;
    }
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let reports = match GradTerm::parse(&a.term) {
        Some(term) => vec![check_term(term, &cfg)?],
        None => check_all(&cfg)?,
    };
    let passed = reports.iter().all(|r| r.passed);
    let config = json!({ "term": a.term, "check": cfg });
    let provenance = Provenance::new("gradcheck", &config, Some(cfg.seed))?;
    if let Some(p) = &a.out {
        write_report(p, &reports, &provenance)?;
    }
    emit("gradcheck", &reports, &provenance)?;
    for r in reports.iter().filter(|r| !r.passed) {
        eprintln!(
            "gradcheck: {} failed, max relative error {:e} (tolerance {:e})",
            r.term.name(),
            r.max_rel_error,
            cfg.tolerance
        );
    }
    Ok(passed)
}
