use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stegsplat::geometry::Camera;
use stegsplat::image::Image;
use stegsplat::io::{
    audit_format, audit_geometry, parse_key, perturb as apply_attack, read_all, read_container, read_decoders,
    write_all, write_container, write_decoders, write_key, Attack, Region, Schema,
};
use stegsplat::rasterizer::RenderConfig;
use stegsplat::scene::KeyBundle;
use stegsplat::stego::{
    decode_bits, decode_hidden_view, evaluate, render_original, trace_jsonl, train as run_training, BitMessage,
    HidingTask,
};
use stegsplat::synthetic::{initial_anchors, make_scene, read_dataset, write_dataset, Dataset};

use crate::config::{Level, RunConfig, TaskConfig};
use crate::{runtime, AuditArgs, CameraArgs, DecodeArgs, Failure, GenArgs, PerturbArgs, RenderArgs, TrainArgs};

pub const CONTAINER: &str = "scene.ply";
pub const DECODERS: &str = "decoders.bin";
pub const KEY: &str = "key.bin";
pub const TRACE: &str = "trace.jsonl";
pub const CONFIG: &str = "config.toml";
pub const RUN_INFO: &str = "run.json";

fn invalid(m: impl Into<String>) -> Failure {
    Failure::Validation(m.into())
}

pub fn gen(a: GenArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.synthetic.seed = seed;
    }
    cfg.validate()?;
    let out = a
        .out
        .or(cfg.paths.dataset)
        .ok_or_else(|| invalid("no dataset directory: pass --out or set paths.dataset"))?;
    let ds = make_scene(&cfg.synthetic).map_err(runtime)?;
    write_dataset(&ds, &out).map_err(runtime)?;
    println!("wrote {} views to {}", ds.cameras.len(), out.display());
    Ok(())
}

/// Builds the hiding task from the dataset, resolving random bits so the
/// echoed config names the exact message.
fn build_task(cfg: &mut RunConfig, ds: &Dataset) -> Result<HidingTask, Failure> {
    match cfg.task.clone() {
        TaskConfig::Object { level } => Ok(HidingTask::Object3d {
            targets: match level {
                Level::Object => ds.hidden_object.clone(),
                Level::Scene => ds.hidden_scene.clone(),
            },
        }),
        TaskConfig::Image { view } => {
            let image = ds
                .hidden_object
                .get(view)
                .ok_or_else(|| invalid(format!("image view {view} out of range ({} views)", ds.cameras.len())))?;
            Ok(HidingTask::ImageSingleView {
                view,
                image: image.clone(),
            })
        }
        TaskConfig::Bits { message, random } => {
            let message = match (message, random) {
                (Some(m), _) => m,
                (None, Some(n)) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    BitMessage::random(n, &mut rng).map_err(runtime)?
                }
                (None, None) => return Err(invalid("bits task has no message")),
            };
            cfg.task = TaskConfig::Bits {
                message: Some(message.clone()),
                random: None,
            };
            Ok(HidingTask::Bits { message })
        }
    }
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.iterations.is_some() {
        cfg.iterations = a.iterations;
    }
    if a.k.is_some() {
        cfg.k = a.k;
    }
    if a.dataset.is_some() {
        cfg.paths.dataset = a.dataset;
    }
    if a.out.is_some() {
        cfg.paths.run_dir = a.out;
    }
    cfg.validate()?;
    let dataset = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| invalid("no dataset: pass --dataset or set paths.dataset"))?;
    let run_dir = cfg
        .paths
        .run_dir
        .clone()
        .ok_or_else(|| invalid("no run directory: pass --out or set paths.run_dir"))?;
    let ds = read_dataset(&dataset).map_err(runtime)?;
    // the dataset, not the config, decides the scene and voxel grid
    cfg.synthetic = ds.spec.clone();
    cfg.densify.voxel_size = ds.spec.voxel_size;
    cfg.iterations = Some(cfg.train_config().iterations);
    cfg.k = Some(cfg.k());
    cfg.min_contribution = Some(cfg.train_config().min_contribution);
    let task = build_task(&mut cfg, &ds)?;
    cfg.validate()?;
    let tc = cfg.train_config();

    fs::create_dir_all(&run_dir).map_err(|e| runtime(format!("{}: {e}", run_dir.display())))?;
    write_all(&run_dir.join(CONFIG), cfg.to_toml().as_bytes()).map_err(runtime)?;
    let init = initial_anchors(&ds.spec, &ds.reference_original, cfg.k());
    let out = run_training(init, &ds.cameras, &ds.originals, &task, &tc, ds.spec.background).map_err(runtime)?;
    write_all(&run_dir.join(TRACE), trace_jsonl(&out.trace).as_bytes()).map_err(runtime)?;
    write_container(&out.scene, &run_dir.join(CONTAINER)).map_err(runtime)?;
    write_decoders(&out.decoders, &run_dir.join(DECODERS)).map_err(runtime)?;
    write_key(&out.key, &run_dir.join(KEY)).map_err(runtime)?;

    let ev = evaluate(
        &out.scene,
        &out.decoders,
        Some(&out.key),
        &ds.cameras,
        &ds.originals,
        &task,
        &ds.spec.render_config(),
    )
    .map_err(runtime)?;
    let bits = match &task {
        HidingTask::Bits { message } => {
            let d = decode_bits(&out.scene, &out.key).map_err(runtime)?;
            Some(json!({ "accuracy": d.message.accuracy(message), "confidence": d.confidence }))
        }
        _ => None,
    };
    let info = json!({
        "seed": cfg.seed,
        "versions": {
            "stegsplat": stegsplat::VERSION,
            "stegsplat-cli": env!("CARGO_PKG_VERSION"),
        },
        "dataset": dataset,
        "iterations": tc.iterations,
        "anchors": out.scene.len(),
        "psnr_original": ev.psnr_ori,
        "psnr_hidden": ev.psnr_hid,
        "bits": bits,
    });
    let text = serde_json::to_string_pretty(&info).map_err(runtime)?;
    write_all(&run_dir.join(RUN_INFO), text.as_bytes()).map_err(runtime)?;

    print!("trained {} anchors in {} iterations; original PSNR {:.2} dB", out.scene.len(), tc.iterations, ev.mean_ori());
    if let Some(h) = ev.mean_hid() {
        print!(", hidden PSNR {h:.2} dB");
    }
    if let Some(b) = bits {
        print!(", bit accuracy {}", b["accuracy"]);
    }
    println!();
    Ok(())
}

/// Loads a key file and checks it belongs to a scene with `k` slots.
fn load_key(path: &Path, k: usize) -> Result<KeyBundle, Failure> {
    let bytes = read_all(path).map_err(runtime)?;
    let key = parse_key(&bytes).map_err(|e| runtime(format!("{}: {e:?}", path.display())))?;
    if key.k != k {
        return Err(runtime(format!("{}: key is for k = {}, container has k = {k}", path.display(), key.k)));
    }
    Ok(key)
}

fn load_cameras(a: &CameraArgs) -> Result<(Vec<(usize, Camera)>, RenderConfig), Failure> {
    match (&a.dataset, &a.camera) {
        (Some(dir), None) => {
            let ds = read_dataset(dir).map_err(runtime)?;
            let all: Vec<(usize, Camera)> = ds.cameras.into_iter().enumerate().collect();
            let cams = match a.view {
                Some(v) if v >= all.len() => return Err(invalid(format!("view {v} out of range ({} views)", all.len()))),
                Some(v) => vec![all[v].clone()],
                None => all,
            };
            Ok((cams, ds.spec.render_config()))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let cam: Camera = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            cam.validate().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            Ok((vec![(0, cam)], RenderConfig::default()))
        }
        _ => Err(invalid("give cameras with --dataset or --camera")),
    }
}

fn write_ppm(img: &Image, path: &Path) -> Result<(), Failure> {
    let f = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    img.write_ppm(BufWriter::new(f))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

pub fn render(a: RenderArgs) -> Result<(), Failure> {
    let (cams, rcfg) = load_cameras(&a.cameras)?;
    let scene = read_container(&a.container).map_err(runtime)?;
    let dec = read_decoders(&a.decoders).map_err(runtime)?;
    let key = a.key.as_deref().map(|p| load_key(p, scene.k)).transpose()?;
    create_dir(&a.out)?;
    for (i, cam) in &cams {
        let img = render_original(&scene, &dec, cam, &rcfg).map_err(runtime)?;
        write_ppm(&img, &a.out.join(format!("original_{i:03}.ppm")))?;
        if let Some(key) = &key {
            let img = decode_hidden_view(&scene, &dec, key, cam, &rcfg).map_err(runtime)?;
            write_ppm(&img, &a.out.join(format!("hidden_{i:03}.ppm")))?;
        }
    }
    let kinds = if key.is_some() { "original and hidden" } else { "original" };
    println!("rendered {} {kinds} view(s) to {}", cams.len(), a.out.display());
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<(), Failure> {
    let Some(key_path) = a.key.as_deref() else {
        return Err(invalid("hidden content is only readable with the key: pass --key"));
    };
    let scene = read_container(&a.container).map_err(runtime)?;
    let key = load_key(key_path, scene.k)?;
    if key.n_bits().is_some() {
        let d = decode_bits(&scene, &key).map_err(runtime)?;
        println!("bits {}", d.message);
        println!("confidence {:.4}", d.confidence);
        if let Some(out) = &a.out {
            let report = json!({ "bits": d.message, "confidence": d.confidence, "means": d.means });
            let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            write_all(&out.join("bits.json"), text.as_bytes()).map_err(runtime)?;
        }
        return Ok(());
    }
    let dec_path = a.decoders.as_deref().ok_or_else(|| invalid("hidden views need --decoders"))?;
    let out = a.out.as_deref().ok_or_else(|| invalid("hidden views need --out"))?;
    let (cams, rcfg) = load_cameras(&a.cameras)?;
    let dec = read_decoders(dec_path).map_err(runtime)?;
    create_dir(out)?;
    for (i, cam) in &cams {
        let img = decode_hidden_view(&scene, &dec, &key, cam, &rcfg).map_err(runtime)?;
        write_ppm(&img, &out.join(format!("hidden_{i:03}.ppm")))?;
    }
    println!("decoded {} hidden view(s) to {}", cams.len(), out.display());
    Ok(())
}

fn parse_region(s: &str) -> Result<Region, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(format!("region `{s}`: {e}")))?;
    if v.len() != 6 || (0..3).any(|i| !(v[i] < v[i + 3])) {
        return Err(invalid(format!("region `{s}` must be x0,y0,z0,x1,y1,z1 with min < max")));
    }
    Ok(Region {
        min: [v[0], v[1], v[2]],
        max: [v[3], v[4], v[5]],
    })
}

pub fn audit(a: AuditArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    let region = a.region.as_deref().map(parse_region).transpose()?;
    let baseline = match &a.baseline {
        Some(p) => Schema::read_file(p).map_err(runtime)?,
        None => Schema::anchors(a.k.unwrap_or(cfg.k()), 0),
    };
    let format = audit_format(&a.container, &baseline).map_err(runtime)?;
    // a container the reader rejects has no geometry to audit
    let geometry = read_container(&a.container).ok().map(|scene| {
        let points: Vec<_> = scene.anchors.iter().map(|p| p.position).collect();
        audit_geometry(&points, region.as_ref(), &cfg.audit)
    });
    let pass = format.pass && geometry.as_ref().is_some_and(|g| g.flagged == 0);

    println!("format: {}", if format.pass { "pass" } else { "FAIL" });
    if !format.pass {
        println!("  element matches: {}", format.element_matches);
        println!("  missing: {:?}", format.missing);
        println!("  extra: {:?}", format.extra);
        println!("  type mismatch: {:?}", format.type_mismatch);
        println!("  reordered: {}", format.reordered);
    }
    match &geometry {
        None => println!("geometry: unreadable container"),
        Some(g) => {
            println!(
                "geometry: {} anchors, {} clusters, {} noise points, {} flagged region(s)",
                g.points,
                g.cluster_sizes.len(),
                g.noise,
                g.flagged
            );
            for r in &g.regions {
                println!(
                    "  region {:?}..{:?}: {} inside, density ratio {:.3}{}",
                    r.region.min,
                    r.region.max,
                    r.points_inside,
                    r.ratio,
                    if r.flagged { " FLAGGED" } else { "" }
                );
            }
        }
    }
    if let Some(path) = &a.json {
        let report = json!({ "pass": pass, "format": format, "geometry": geometry });
        let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
        write_all(path, text.as_bytes()).map_err(runtime)?;
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Audit)
    }
}

pub fn perturb(a: PerturbArgs) -> Result<(), Failure> {
    let attack = match (a.attack.noise, a.attack.prune) {
        (Some(sigma), None) => Attack::Noise { sigma },
        (None, Some(percent)) => Attack::Prune { percent },
        _ => return Err(invalid("give exactly one of --noise or --prune")),
    };
    let scene = read_container(&a.container).map_err(runtime)?;
    let out = apply_attack(&scene, attack, a.seed).map_err(|e| invalid(e.to_string()))?;
    write_container(&out, &a.out).map_err(runtime)?;
    println!("{} -> {} anchors, written to {}", scene.len(), out.len(), a.out.display());
    Ok(())
}
