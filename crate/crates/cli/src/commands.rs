use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};
use surfgan_core::adapters::{AdapterRegistry, LatentLayout};
use surfgan_core::checkpoint::Checkpoint;
use surfgan_core::config::{read_view_list, view_grid, write_sidecar, RunConfig, ViewRecord};
use surfgan_core::data::{load_png, make_grid, resize_image, save_png};
use surfgan_core::evaluation::Evaluator;
use surfgan_core::generator::{edit_control, ControlCode, ControlIndex, GeneratorState};
use surfgan_core::geometry::CameraView;
use surfgan_core::injection::{
    load_injection_model, novel_view as novel_view_of, InjectionBackends, InjectionStepReport, InjectionTrainer,
    LatentCode, LinearPoseSource, SurfTripletSource, TripletSource, PART_NAMES,
};
use surfgan_core::training::{append_jsonl, checkpoint_path, load_generator, run, truncate_stream, Trainer};
use surfgan_core::{Error, Result};

use crate::{ConfigArgs, ViewArgs};

pub const INJECTION_CHECKPOINT: &str = "injection.ckpt";
pub const INJECTION_CURVE: &str = "injection.jsonl";

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), std::env::vars(), &args.set)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Views in degrees plus the number of grid columns.
fn views_of(args: &ViewArgs) -> Result<(Vec<ViewRecord>, usize)> {
    match (&args.views, &args.grid) {
        (Some(p), _) => {
            let v = read_view_list(p)?;
            let n = v.len();
            Ok((v, n))
        }
        (None, Some(g)) => {
            let bad = || Error::Config(format!("--grid `{g}` is not of the form ROWSxCOLS"));
            let (r, c) = g.split_once(['x', 'X']).ok_or_else(bad)?;
            let rows: usize = r.trim().parse().map_err(|_| bad())?;
            let cols: usize = c.trim().parse().map_err(|_| bad())?;
            if rows == 0 || cols == 0 {
                return Err(bad());
            }
            let (p, y) = (args.pitch_range, args.yaw_range);
            Ok((view_grid((-p, p), (-y, y), rows, cols), cols))
        }
        (None, None) => Err(Error::Config("pass --views FILE or --grid ROWSxCOLS".into())),
    }
}

fn evaluator<'a>(cfg: &RunConfig, generator: &'a GeneratorState, seed: u64) -> Evaluator<'a> {
    Evaluator {
        generator,
        camera: cfg.camera,
        render: cfg.render,
        pose_prior: cfg.pose_prior.clone(),
        config_hash: cfg.hash(),
        seed,
    }
}

fn load_surf(path: &Path) -> Result<GeneratorState> {
    load_generator(&Checkpoint::load(path)?, path)
}

pub fn train_surf(
    args: &ConfigArgs,
    dry_run: bool,
    resume: bool,
    progressive: Option<bool>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(p) = progressive {
        cfg.schedule.progressive = p;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let data = cfg.data.open(cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let hash = cfg.train_hash();
    let dir = cfg.output_dir.clone();
    if dry_run {
        let trainer = Trainer::new(&cfg.train_config(), &hash)?;
        let img = trainer.sample_images(1, 32, cfg.seed)?.remove(0);
        let path = dir.join("dry_run.png");
        save_png(&path, &img)?;
        write_sidecar(
            &path,
            &json!({"command": "train-surf --dry-run", "config_hash": cfg.hash(), "seed": cfg.seed, "resolution": 32}),
        )?;
        cfg.write_resolved(&dir)?;
        println!("config ok; untrained sample written to {}", path.display());
        return Ok(());
    }
    let ck_path = checkpoint_path(&dir);
    let mut trainer = if resume {
        Trainer::from_checkpoint(&cfg.train_config(), &hash, &Checkpoint::load(&ck_path)?, &ck_path)?
    } else {
        Trainer::new(&cfg.train_config(), &hash)?
    };
    cfg.write_resolved(&dir)?;
    let extractor = if cfg.train.fid_every > 0 {
        Some(AdapterRegistry::with_mocks().build_features(&cfg.adapters.features)?)
    } else {
        None
    };
    let start = trainer.step;
    run(&mut trainer, data.as_ref(), cfg.train.total_steps, &cfg.run_options(), extractor.as_deref())?;
    println!(
        "trained steps {start}..{} at resolution {}; outputs in {}",
        trainer.step,
        trainer.resolution(),
        dir.display()
    );
    Ok(())
}

pub fn train_inject(args: &ConfigArgs, surf_checkpoint: Option<PathBuf>, resume: bool, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let ic = &cfg.injection;
    let layout = LatentLayout {
        layers: ic.layers,
        width: ic.width,
        editable: ic.editable,
        resolution: ic.decoder_resolution,
    };
    let b = AdapterRegistry::with_mocks().build(&cfg.adapters, layout)?;
    let backends = InjectionBackends {
        encoder: b.encoder,
        decoder: b.decoder,
        perceptual: b.perceptual,
    };
    let (pr, yr) = (ic.pitch_range_deg.to_radians(), ic.yaw_range_deg.to_radians());
    let source: Box<dyn TripletSource> = match &surf_checkpoint {
        Some(p) => Box::new(SurfTripletSource {
            generator: Arc::new(load_surf(p)?),
            camera: cfg.camera,
            render: cfg.render,
            resolution: ic.triplet_resolution,
            pitch_range: pr,
            yaw_range: yr,
        }),
        None if cfg.adapters.decoder.backend == "mock" => {
            let template = backends
                .encoder
                .mean_latent()
                .cloned()
                .unwrap_or_else(|| LatentCode::zeros(ic.layers, ic.width, ic.editable));
            let identity_dims = ic.slice_len().saturating_sub(2).min(32);
            Box::new(LinearPoseSource::new(backends.decoder.clone(), template, identity_dims, 10.0, pr, yr, cfg.seed))
        }
        None => {
            return Err(Error::Config(
                "--surf-checkpoint is required unless the decoder backend is `mock`".into(),
            ))
        }
    };

    let dir = cfg.output_dir.clone();
    let ck_path = dir.join(INJECTION_CHECKPOINT);
    let hash = cfg.injection_hash();
    let mut trainer = InjectionTrainer::new(ic, cfg.seed, &backends)?;
    if resume {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config_hash != hash {
            return Err(Error::Checkpoint {
                path: ck_path,
                reason: format!("written under config {}, resuming with {hash}", ck.config_hash),
            });
        }
        trainer.load_checkpoint(&ck, &ck_path)?;
    }
    cfg.write_resolved(&dir)?;
    let curve = dir.join(INJECTION_CURVE);
    truncate_stream(&curve, trainer.step)?;
    let every = cfg.train.checkpoint_every;
    while trainer.step < ic.steps {
        let before = trainer.to_checkpoint(&hash);
        let r = match trainer.train_step(source.as_ref(), &backends) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                before.save(&dir.join("nonfinite.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        append_jsonl(&curve, &[curve_line(&r)])?;
        if every > 0 && trainer.step % every == 0 {
            trainer.to_checkpoint(&hash).save(&ck_path)?;
        }
    }
    trainer.check_frozen(&backends)?;
    trainer.to_checkpoint(&hash).save(&ck_path)?;
    println!("injection trained to step {}; checkpoint {}", trainer.step, ck_path.display());
    Ok(())
}

fn curve_line(r: &InjectionStepReport) -> serde_json::Value {
    let parts: serde_json::Map<String, serde_json::Value> =
        PART_NAMES.iter().zip(&r.parts).map(|(n, v)| (n.to_string(), json!(v))).collect();
    json!({"step": r.step, "total": r.total, "parts": parts})
}

fn sample_codes(generator: &GeneratorState, seed: u64, n: usize) -> Vec<ControlCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ControlCode::sample(&mut rng, &generator.config)).collect()
}

pub fn generate(
    args: &ConfigArgs,
    checkpoint: &Path,
    view_args: &ViewArgs,
    identities: usize,
    seed: u64,
    resolution: usize,
    out: &Path,
) -> Result<()> {
    let cfg = resolve(args)?;
    let (views, cols) = views_of(view_args)?;
    if identities == 0 || resolution == 0 {
        return Err(Error::Config("--identities and --resolution must be positive".into()));
    }
    let generator = load_surf(checkpoint)?;
    let ev = evaluator(&cfg, &generator, seed);
    let cameras: Vec<CameraView> = views.iter().map(|v| v.camera(&cfg.camera)).collect();
    let ck_digest = file_sha256(checkpoint)?;
    for (i, code) in sample_codes(&generator, seed, identities).into_iter().enumerate() {
        let codes = vec![code.clone(); cameras.len()];
        let grid = make_grid(&ev.render_all(&codes, &cameras, resolution)?, cols)?;
        let path = out.join(format!("identity_{i:03}.png"));
        save_png(&path, &grid)?;
        write_sidecar(
            &path,
            &json!({
                "command": "generate",
                "checkpoint": checkpoint, "checkpoint_sha256": ck_digest,
                "seed": seed, "identity": i, "resolution": resolution, "columns": cols,
                "views": views, "camera": cfg.camera, "render": cfg.render, "code": code,
            }),
        )?;
    }
    println!("{identities} grid(s) of {} views written to {}", views.len(), out.display());
    Ok(())
}

pub struct EditArgs {
    pub checkpoint: PathBuf,
    pub control: String,
    pub values: Vec<f64>,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub identities: usize,
    pub seed: u64,
    pub resolution: usize,
    pub out: PathBuf,
}

pub fn edit(args: &ConfigArgs, e: &EditArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let index: ControlIndex = e.control.parse().map_err(|err: Error| Error::Config(err.to_string()))?;
    if e.values.is_empty() || e.identities == 0 || e.resolution == 0 {
        return Err(Error::Config("--values, --identities and --resolution must be non-empty".into()));
    }
    let generator = load_surf(&e.checkpoint)?;
    let ev = evaluator(&cfg, &generator, e.seed);
    let view = cfg.camera.with_angles(e.pitch_deg.to_radians(), e.yaw_deg.to_radians());
    let mut codes = Vec::new();
    for base in sample_codes(&generator, e.seed, e.identities) {
        for &v in &e.values {
            codes.push(edit_control(&base, index, v).map_err(|err| Error::Config(err.to_string()))?);
        }
    }
    let views = vec![view; codes.len()];
    let grid = make_grid(&ev.render_all(&codes, &views, e.resolution)?, e.values.len())?;
    let path = e.out.join(format!("edit_{index}.png"));
    save_png(&path, &grid)?;
    write_sidecar(
        &path,
        &json!({
            "command": "edit",
            "checkpoint": e.checkpoint, "checkpoint_sha256": file_sha256(&e.checkpoint)?,
            "seed": e.seed, "control": index.to_string(), "values": e.values,
            "pitch_deg": e.pitch_deg, "yaw_deg": e.yaw_deg, "resolution": e.resolution,
            "camera": cfg.camera, "render": cfg.render, "codes": codes,
        }),
    )?;
    println!("{index} sweep over {} values written to {}", e.values.len(), path.display());
    Ok(())
}

pub fn novel_view(args: &ConfigArgs, checkpoint: &Path, image: &Path, view_args: &ViewArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let (views, cols) = views_of(view_args)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (model, editable) = load_injection_model(&ck, checkpoint)?;
    let layout = LatentLayout {
        layers: ck.meta_usize("layers")?,
        width: ck.meta_usize("width")?,
        editable,
        resolution: cfg.injection.decoder_resolution,
    };
    let b = AdapterRegistry::with_mocks().build(&cfg.adapters, layout)?;
    let input = load_png(image)?;
    let mut images = Vec::with_capacity(views.len());
    let mut code = None;
    for v in &views {
        let nv = novel_view_of(&input, v.angles(), b.encoder.as_ref(), &model, b.decoder.as_ref())?;
        code.get_or_insert(nv.code);
        images.push(nv.image);
    }
    let grid = make_grid(&images, cols)?;
    let path = out.join("novel_view.png");
    save_png(&path, &grid)?;
    let source = resize_image(&input, b.decoder.resolution());
    save_png(&out.join("source.png"), &source)?;
    write_sidecar(
        &path,
        &json!({
            "command": "novel-view",
            "checkpoint": checkpoint, "checkpoint_sha256": file_sha256(checkpoint)?,
            "image": image, "image_sha256": file_sha256(image)?,
            "adapters": cfg.adapters, "columns": cols, "views": views,
            "code": code.map(|c| c.values().to_vec()),
        }),
    )?;
    println!("{} novel views written to {}", views.len(), path.display());
    Ok(())
}

pub fn evaluate(args: &ConfigArgs, checkpoint: &Path, metrics: &[String], out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let generator = load_surf(checkpoint)?;
    let ev = evaluator(&cfg, &generator, cfg.seed);
    let reg = AdapterRegistry::with_mocks();
    let e = &cfg.eval;
    std::fs::create_dir_all(out).map_err(|err| Error::Io {
        path: out.to_path_buf(),
        source: err,
    })?;
    for m in metrics {
        let report = match m.as_str() {
            "fid" => {
                let data = cfg.data.open(cfg.seed)?;
                let fx = reg.build_features(&cfg.adapters.features)?;
                ev.fid(data.as_ref(), fx.as_ref(), e.fid_generated, e.fid_real, e.resolution)?
            }
            "pose" => ev.pose_error(reg.build_pose(&cfg.adapters.pose_estimator)?.as_ref(), e.pose_samples, e.resolution)?,
            "id" => ev.id_consistency(
                reg.build_identity(&cfg.adapters.identity)?.as_ref(),
                &e.id_yaw_deg,
                e.id_identities,
                e.resolution,
            )?,
            "throughput" => ev.throughput(e.resolution, e.throughput_trials)?,
            other => return Err(Error::Config(format!("unknown metric `{other}` (fid, pose, id, throughput)"))),
        };
        let path = out.join(format!("{}.json", report.metric));
        let text = serde_json::to_string_pretty(&report).map_err(|err| Error::Data(err.to_string()))?;
        std::fs::write(&path, text).map_err(|err| Error::Io { path: path.clone(), source: err })?;
        println!("{} = {:.6} (samples {:?})", report.metric, report.value, report.samples);
    }
    Ok(())
}
