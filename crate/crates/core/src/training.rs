//! Adversarial training of the generator: non-saturating loss with an R1
//! penalty on reals, the subspace orthogonality regularizer and an optional
//! pose loss shared by both players, under a stage-wise schedule in which
//! only the discriminator grows.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use surfgan_grad::{backward, grad, no_grad, Adam, Tensor, Var};

use crate::adapters::FeatureExtractor;
use crate::checkpoint::Checkpoint;
use crate::data::{draw_index, resize_image, stack, ImageSource};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{ControlCode, GeneratorConfig, GeneratorState, RenderOptions};
use crate::geometry::CameraView;
use crate::metrics::fid;
use crate::nn::{adam_step, Module};

pub const BETA1: f64 = 0.0;
pub const BETA2: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub steps_per_stage: u64,
    pub start_resolution: usize,
    pub final_resolution: usize,
    /// When false every stage trains at `final_resolution`; learning rates
    /// still halve at the same boundaries.
    pub progressive: bool,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// Batch size of stage `i` is `batch_sizes[min(i, len - 1)]`.
    pub batch_sizes: Vec<usize>,
    /// Steps over which a new discriminator level fades in.
    pub fade_steps: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps_per_stage: 20_000,
            start_resolution: 32,
            final_resolution: 128,
            progressive: true,
            generator_lr: 1e-4,
            discriminator_lr: 1e-4,
            batch_sizes: vec![16, 8, 4],
            fade_steps: 1000,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok_res = |r: usize| r >= 4 && r.is_power_of_two();
        if !ok_res(self.start_resolution) || !ok_res(self.final_resolution) {
            return Err(Error::Config("schedule resolutions must be powers of two >= 4".into()));
        }
        if self.start_resolution > self.final_resolution {
            return Err(Error::Config("schedule.start_resolution exceeds final_resolution".into()));
        }
        if self.steps_per_stage == 0 {
            return Err(Error::Config("schedule.steps_per_stage must be positive".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("schedule.batch_sizes must be non-empty and positive".into()));
        }
        if !(self.generator_lr > 0.0 && self.discriminator_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        (self.final_resolution / self.start_resolution).trailing_zeros() as usize + 1
    }

    pub fn stage(&self, step: u64) -> usize {
        ((step / self.steps_per_stage) as usize).min(self.num_stages() - 1)
    }

    pub fn resolution(&self, stage: usize) -> usize {
        if self.progressive {
            self.start_resolution << stage.min(self.num_stages() - 1)
        } else {
            self.final_resolution
        }
    }

    pub fn lr_scale(&self, stage: usize) -> f64 {
        0.5f64.powi(stage as i32)
    }

    pub fn batch_size(&self, stage: usize) -> usize {
        self.batch_sizes[stage.min(self.batch_sizes.len() - 1)]
    }

    /// Weight of the newest discriminator level at `step`.
    pub fn alpha(&self, step: u64) -> f64 {
        let stage = self.stage(step);
        if !self.progressive || stage == 0 || self.fade_steps == 0 {
            return 1.0;
        }
        let into = step - stage as u64 * self.steps_per_stage;
        (into as f64 / self.fade_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub r1: f64,
    pub pose: f64,
    pub orthogonality: f64,
    /// Adds the pose head to the discriminator and the pose loss to both players.
    pub use_pose_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            r1: 10.0,
            pose: 15.0,
            orthogonality: 1.0,
            use_pose_loss: true,
        }
    }
}

/// Independent normal priors on training pitch and yaw, radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosePrior {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub yaw_mean: f64,
    pub yaw_std: f64,
}

impl Default for PosePrior {
    fn default() -> Self {
        Self {
            pitch_mean: 0.0,
            pitch_std: 0.155,
            yaw_mean: 0.0,
            yaw_std: 0.3,
        }
    }
}

impl PosePrior {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.pitch_mean, self.pitch_std, self.yaw_mean, self.yaw_std]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.pitch_std < 0.0 || self.yaw_std < 0.0 {
            return Err(Error::Config("pose prior needs finite means and non-negative deviations".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let p = Normal::new(self.pitch_mean, self.pitch_std).expect("validated prior");
        let y = Normal::new(self.yaw_mean, self.yaw_std).expect("validated prior");
        (p.sample(rng), y.sample(rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub camera: CameraView,
    pub render: RenderOptions,
    pub schedule: TrainSchedule,
    pub loss: LossWeights,
    pub pose_prior: PosePrior,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            camera: CameraView::default(),
            render: RenderOptions::default(),
            schedule: TrainSchedule::default(),
            loss: LossWeights::default(),
            pose_prior: PosePrior::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.schedule.validate()?;
        self.pose_prior.validate()?;
        self.camera.validate()?;
        if self.discriminator.base_channels == 0 || self.discriminator.max_channels == 0 {
            return Err(Error::Config("discriminator channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all `(pitch, yaw)` entries.
pub fn pose_loss(input_views: &Tensor, predicted: &Var) -> Result<Var> {
    if input_views.shape() != predicted.shape() || input_views.shape().len() != 2 || input_views.shape()[1] != 2 {
        return Err(Error::invalid(format!(
            "pose loss needs two [B, 2] arrays, got {:?} and {:?}",
            input_views.shape(),
            predicted.shape()
        )));
    }
    Ok(predicted.sub(&Var::constant(input_views.clone())).square().mean())
}

/// Batch mean of `|d logits_i / d images_i|^2`, differentiable in `d`.
pub fn r1_penalty(d: &Discriminator, real: &Tensor) -> Result<Var> {
    let x = Var::param(real.clone());
    let out = d.forward(&x)?;
    let g = grad(&out.logits.sum(), &[&x], true).remove(0);
    Ok(g.square().sum().scale(1.0 / real.shape()[0] as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DLossReport {
    pub adversarial: f64,
    pub r1: f64,
    pub pose: f64,
    pub total: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GLossReport {
    pub adversarial: f64,
    pub orthogonality: f64,
    pub pose: f64,
    pub total: f64,
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    pub resolution: usize,
    pub alpha: f64,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub d: DLossReport,
    pub g: GLossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRecord {
    pub step: u64,
    pub resolution: usize,
    pub fid: f64,
    pub samples: usize,
    pub extractor: String,
}

/// Stream identifiers for the per-step generators.
#[derive(Clone, Copy)]
enum Purpose {
    DiscriminatorFakes = 2,
    GeneratorFakes = 3,
    Grow = 4,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub config_hash: String,
    pub generator: GeneratorState,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub step: u64,
    stage: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, config_hash: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = GeneratorState::new(&config.generator, &mut rng)?;
        let s = &config.schedule;
        let discriminator = Discriminator::new(&config.discriminator, s.resolution(0), config.loss.use_pose_loss, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            config_hash: config_hash.to_string(),
            generator,
            discriminator,
            g_opt: Adam::new(s.generator_lr, BETA1, BETA2),
            d_opt: Adam::new(s.discriminator_lr, BETA1, BETA2),
            step: 0,
            stage: 0,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn resolution(&self) -> usize {
        self.discriminator.resolution()
    }

    fn rng(&self, purpose: Purpose) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add((purpose as u64) << 56));
        rng.set_stream(self.step);
        rng
    }

    /// Moves to the stage of the current step: grows the discriminator on
    /// progressive runs, restarts its optimizer and halves both rates.
    pub fn advance_stage(&mut self) {
        let s = &self.config.schedule;
        let target = s.stage(self.step);
        while self.stage < target {
            self.stage += 1;
            if s.progressive && self.discriminator.resolution() < s.resolution(self.stage) {
                let mut rng = self.rng(Purpose::Grow);
                self.discriminator.grow(&mut rng);
                self.d_opt = Adam::new(s.discriminator_lr, BETA1, BETA2);
            }
        }
        let scale = s.lr_scale(self.stage);
        self.g_opt.lr = s.generator_lr * scale;
        self.d_opt.lr = s.discriminator_lr * scale;
        self.discriminator.alpha = s.alpha(self.step);
    }

    fn sample_fakes(&self, rng: &mut ChaCha8Rng, n: usize) -> (Vec<ControlCode>, Vec<CameraView>, Tensor) {
        let codes: Vec<ControlCode> = (0..n).map(|_| ControlCode::sample(rng, &self.config.generator)).collect();
        let mut views = Vec::with_capacity(n);
        let mut angles = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (p, y) = self.config.pose_prior.sample(rng);
            views.push(self.config.camera.with_angles(p, y));
            angles.extend([p, y]);
        }
        (codes, views, Tensor::new(&[n, 2], angles))
    }

    pub fn real_batch(&self, data: &dyn ImageSource) -> Result<Tensor> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let n = self.config.schedule.batch_size(self.stage);
        let r = self.resolution();
        let images = (0..n as u64)
            .map(|i| {
                let idx = draw_index(data.len(), self.config.seed, self.step * n as u64 + i);
                data.get(idx, r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(&images))
    }

    pub fn d_loss(&self, real: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Var, DLossReport)> {
        let r = self.resolution();
        if real.shape().len() != 4 || real.shape()[1] != r || real.shape()[2] != r {
            return Err(Error::invalid(format!(
                "real batch {:?} does not match the {r}x{r} stage",
                real.shape()
            )));
        }
        let b = real.shape()[0];
        let (codes, views, angles) = self.sample_fakes(rng, b);
        let fake = {
            let _g = no_grad();
            let img = self.generator.render(&codes, &views, (r, r), &self.config.render, Some(rng))?;
            Var::constant(img.value().clone())
        };
        let d = &self.discriminator;
        let out_fake = d.forward(&fake)?;
        let out_real = d.forward(&Var::constant(real.clone()))?;
        let adversarial = out_fake.logits.softplus().mean().add(&out_real.logits.neg().softplus().mean());
        let w = &self.config.loss;
        let mut total = adversarial.clone();
        let mut report = DLossReport {
            adversarial: adversarial.item(),
            real_logit: out_real.logits.mean().item(),
            fake_logit: out_fake.logits.mean().item(),
            ..Default::default()
        };
        if w.r1 != 0.0 {
            let r1 = r1_penalty(d, real)?;
            report.r1 = r1.item();
            total = total.add(&r1.scale(w.r1));
        }
        if let (true, Some(pred)) = (w.use_pose_loss, &out_fake.pose) {
            let pose = pose_loss(&angles, pred)?;
            report.pose = pose.item();
            total = total.add(&pose.scale(w.pose));
        }
        report.total = total.item();
        Ok((total, report))
    }

    pub fn g_loss(&self, rng: &mut ChaCha8Rng) -> Result<(Var, GLossReport)> {
        let r = self.resolution();
        let b = self.config.schedule.batch_size(self.stage);
        let (codes, views, angles) = self.sample_fakes(rng, b);
        let fake = self.generator.render(&codes, &views, (r, r), &self.config.render, Some(rng))?;
        let out = self.discriminator.forward(&fake)?;
        let adversarial = out.logits.neg().softplus().mean();
        let orth = self.generator.orthogonality_penalty();
        let w = &self.config.loss;
        let mut total = adversarial.add(&orth.scale(w.orthogonality));
        let mut report = GLossReport {
            adversarial: adversarial.item(),
            orthogonality: orth.item(),
            ..Default::default()
        };
        if let (true, Some(pred)) = (w.use_pose_loss, &out.pose) {
            let pose = pose_loss(&angles, pred)?;
            report.pose = pose.item();
            total = total.add(&pose.scale(w.pose));
        }
        report.total = total.item();
        Ok((total, report))
    }

    /// One discriminator update on `real`.
    pub fn d_step(&mut self, real: &Tensor) -> Result<DLossReport> {
        let mut rng = self.rng(Purpose::DiscriminatorFakes);
        let (total, report) = self.d_loss(real, &mut rng)?;
        ensure_finite("discriminator", self.step, &[report.total, report.r1, report.pose])?;
        let params = self.discriminator.params();
        let grads = backward(&total, &params.iter().collect::<Vec<_>>());
        adam_step(&mut self.d_opt, &mut self.discriminator, &grads);
        Ok(report)
    }

    /// One generator update; the discriminator is left untouched.
    pub fn g_step(&mut self) -> Result<GLossReport> {
        let mut rng = self.rng(Purpose::GeneratorFakes);
        let (total, report) = self.g_loss(&mut rng)?;
        ensure_finite("generator", self.step, &[report.total, report.orthogonality, report.pose])?;
        let params = self.generator.params();
        let grads = backward(&total, &params.iter().collect::<Vec<_>>());
        adam_step(&mut self.g_opt, &mut self.generator, &grads);
        Ok(report)
    }

    /// Stage bookkeeping, a D update, a G update, then `step += 1`.
    pub fn train_step(&mut self, data: &dyn ImageSource) -> Result<StepRecord> {
        self.advance_stage();
        let real = self.real_batch(data)?;
        let d = self.d_step(&real)?;
        let g = self.g_step()?;
        let record = StepRecord {
            step: self.step,
            stage: self.stage,
            resolution: self.resolution(),
            alpha: self.discriminator.alpha,
            generator_lr: self.g_opt.lr,
            discriminator_lr: self.d_opt.lr,
            d,
            g,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "surf-gan",
            &self.config_hash,
            serde_json::json!({
                "step": self.step,
                "stage": self.stage,
                "resolution": self.resolution(),
                "alpha": self.discriminator.alpha,
                "pose_head": self.discriminator.pose_head,
                "generator": self.config.generator,
                "discriminator": self.config.discriminator,
            }),
        );
        ck.insert_all("g.", self.generator.tensors());
        ck.insert_all("d.", self.discriminator.tensors());
        ck.insert_adam("g_opt.", &self.g_opt.state());
        ck.insert_adam("d_opt.", &self.d_opt.state());
        ck
    }

    /// Restores a trainer from a checkpoint written under the same config.
    pub fn from_checkpoint(config: &TrainConfig, config_hash: &str, ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind("surf-gan", path)?;
        if ck.config_hash != config_hash {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "written under config {}, resuming with {config_hash}",
                    ck.config_hash
                ),
            });
        }
        let mut t = Self::new(config, config_hash)?;
        let resolution = ck.meta_usize("resolution")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        t.discriminator = Discriminator::new(&config.discriminator, resolution, config.loss.use_pose_loss, &mut rng)?;
        t.generator.load_tensors(&ck.with_prefix("g."))?;
        t.discriminator.load_tensors(&ck.with_prefix("d."))?;
        t.g_opt.load_state(ck.adam("g_opt.")?);
        t.d_opt.load_state(ck.adam("d_opt.")?);
        t.step = ck.meta_usize("step")? as u64;
        t.stage = ck.meta_usize("stage")?;
        t.discriminator.alpha = ck
            .meta
            .get("alpha")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Data("checkpoint meta lacks `alpha`".into()))?;
        let s = &config.schedule;
        t.g_opt.lr = s.generator_lr * s.lr_scale(t.stage);
        t.d_opt.lr = s.discriminator_lr * s.lr_scale(t.stage);
        Ok(t)
    }

    /// Renders `n` samples under a fixed evaluation seed.
    pub fn sample_images(&self, n: usize, resolution: usize, seed: u64) -> Result<Vec<Tensor>> {
        let _g = no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (codes, views, _) = self.sample_fakes(&mut rng, n);
        let imgs = self
            .generator
            .render::<ChaCha8Rng>(&codes, &views, (resolution, resolution), &self.config.render, None)?;
        let v = imgs.value();
        let per = resolution * resolution * 3;
        Ok((0..n)
            .map(|i| Tensor::new(&[resolution, resolution, 3], v.data()[i * per..(i + 1) * per].to_vec()))
            .collect())
    }

    /// FID between generated and real images through `extractor`.
    pub fn fid(
        &self,
        data: &dyn ImageSource,
        extractor: &dyn FeatureExtractor,
        samples: usize,
        resolution: usize,
    ) -> Result<f64> {
        let fakes = self.sample_images(samples, resolution, self.config.seed ^ 0xF1D)?;
        let fake_feats = fakes
            .iter()
            .map(|im| extractor.extract(im))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let real_feats = (0..samples.min(data.len()))
            .map(|i| {
                let im = data.get(i, resolution)?;
                Ok(extractor.extract(&im)?)
            })
            .collect::<Result<Vec<_>>>()?;
        fid(&fake_feats, &real_feats)
    }
}

fn ensure_finite(who: &str, step: u64, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{who} loss became non-finite at step {step}: {values:?}")))
    }
}

/// Output locations and cadences of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    /// 0 disables the FID stream.
    pub fid_every: u64,
    pub fid_samples: usize,
    /// Resolution the FID images are rendered at.
    pub fid_resolution: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/surf"),
            checkpoint_every: 1000,
            fid_every: 0,
            fid_samples: 64,
            fid_resolution: 32,
        }
    }
}

/// Generator weights of a training checkpoint, without optimizer or discriminator state.
pub fn load_generator(ck: &Checkpoint, path: &Path) -> Result<GeneratorState> {
    ck.expect_kind("surf-gan", path)?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let cfg: GeneratorConfig = ck
        .meta
        .get("generator")
        .cloned()
        .ok_or_else(|| bad("meta lacks `generator`".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(e.to_string())))?;
    let mut g = GeneratorState::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    g.load_tensors(&ck.with_prefix("g."))?;
    Ok(g)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}

pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Drops stream lines at or after `step` so a resumed run does not duplicate them.
pub fn truncate_stream(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s < step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs until `trainer.step == until`, writing `metrics.jsonl`, `fid.jsonl`
/// and periodic checkpoints into `opts.out_dir`. A non-finite loss saves
/// `nonfinite.ckpt` before returning the error.
pub fn run(
    trainer: &mut Trainer,
    data: &dyn ImageSource,
    until: u64,
    opts: &RunOptions,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<()> {
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.jsonl");
    let fid_path = dir.join("fid.jsonl");
    truncate_stream(&metrics, trainer.step)?;
    truncate_stream(&fid_path, trainer.step)?;
    let mut pending = Vec::new();
    while trainer.step < until {
        let before = trainer.to_checkpoint();
        let record = match trainer.train_step(data) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                append_jsonl(&metrics, &pending)?;
                before.save(&dir.join("nonfinite.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        pending.push(record);
        let step = trainer.step;
        if let (Some(ex), true) = (extractor, opts.fid_every > 0 && step % opts.fid_every == 0) {
            let value = trainer.fid(data, ex, opts.fid_samples, opts.fid_resolution)?;
            append_jsonl(
                &fid_path,
                &[FidRecord {
                    step,
                    resolution: trainer.resolution(),
                    fid: value,
                    samples: opts.fid_samples,
                    extractor: ex.backend().to_string(),
                }],
            )?;
        }
        if (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0) || step == until {
            append_jsonl(&metrics, &pending)?;
            pending.clear();
            trainer.to_checkpoint().save(&checkpoint_path(dir))?;
        }
    }
    append_jsonl(&metrics, &pending)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    use std::io::BufRead;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Downsamples a batch `[B, r, r, 3]` to `resolution`.
pub fn resize_batch(batch: &Tensor, resolution: usize) -> Tensor {
    let (b, r) = (batch.shape()[0], batch.shape()[1]);
    let per = r * r * 3;
    let imgs: Vec<Tensor> = (0..b)
        .map(|i| resize_image(&Tensor::new(&[r, r, 3], batch.data()[i * per..(i + 1) * per].to_vec()), resolution))
        .collect();
    stack(&imgs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_doubles_and_halves() {
        let s = TrainSchedule {
            steps_per_stage: 10,
            start_resolution: 32,
            final_resolution: 128,
            ..Default::default()
        };
        assert_eq!(s.num_stages(), 3);
        assert_eq!((s.stage(9), s.resolution(s.stage(9))), (0, 32));
        assert_eq!((s.stage(10), s.resolution(1)), (1, 64));
        assert_eq!(s.generator_lr * s.lr_scale(1), 5e-5);
        assert_eq!(s.stage(1000), 2);
        let flat = TrainSchedule { progressive: false, ..s };
        assert_eq!(flat.resolution(0), 128);
        assert_eq!(flat.alpha(15), 1.0);
    }

    #[test]
    fn pose_loss_closed_forms() {
        let v = Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.0]);
        assert_eq!(pose_loss(&v, &Var::constant(v.clone())).unwrap().item(), 0.0);
        let shifted = Var::constant(v.map(|x| x + 0.25));
        assert!((pose_loss(&v, &shifted).unwrap().item() - 0.0625).abs() < 1e-15);
        assert!(pose_loss(&v, &Var::constant(Tensor::zeros(&[1, 2]))).is_err());
    }

    #[test]
    fn prior_samples_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PosePrior::default();
        assert!((0..100).all(|_| {
            let (a, b) = p.sample(&mut rng);
            a.is_finite() && b.is_finite()
        }));
    }
}
