//! Run configuration: one TOML document, overridable from the environment
//! (`SURFGAN__section__key=value`) and from `--set section.key=value`.
//! Precedence is `--set` > environment > file > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::data::{load_image_folder, ImageSource, SphereDataset};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, RenderOptions};
use crate::geometry::CameraView;
use crate::injection::InjectionConfig;
use crate::training::{LossWeights, PosePrior, RunOptions, TrainConfig, TrainSchedule};

pub const ENV_PREFIX: &str = "SURFGAN__";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Every decodable image under `path`.
    Folder,
    /// Rendered spheres with known poses.
    Spheres,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub sphere_count: usize,
    pub sphere_max_pitch_deg: f64,
    pub sphere_max_yaw_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Spheres,
            path: None,
            sphere_count: 64,
            sphere_max_pitch_deg: 20.0,
            sphere_max_yaw_deg: 30.0,
        }
    }
}

impl DataConfig {
    pub fn open(&self, seed: u64) -> Result<Box<dyn ImageSource>> {
        match self.kind {
            DataKind::Folder => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for folder datasets".into()))?;
                Ok(Box::new(load_image_folder(path)?))
            }
            DataKind::Spheres => Ok(Box::new(SphereDataset::uniform(
                self.sphere_count,
                self.sphere_max_pitch_deg.to_radians(),
                self.sphere_max_yaw_deg.to_radians(),
                seed,
            ))),
        }
    }
}

/// Lengths and cadences of a generator training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub fid_every: u64,
    pub fid_samples: usize,
    pub fid_resolution: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            total_steps: 60_000,
            checkpoint_every: 1000,
            fid_every: 0,
            fid_samples: 64,
            fid_resolution: 32,
        }
    }
}

/// Evaluation protocol sizes. The defaults are the full-scale protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fid_generated: usize,
    pub fid_real: usize,
    pub resolution: usize,
    /// Yaw angles of the identity-consistency curve, degrees.
    pub id_yaw_deg: Vec<f64>,
    pub id_identities: usize,
    pub pose_samples: usize,
    pub throughput_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fid_generated: 50_000,
            fid_real: 70_000,
            resolution: 128,
            id_yaw_deg: vec![-45.0, -30.0, -15.0, 15.0, 30.0, 45.0],
            id_identities: 100,
            pose_samples: 1000,
            throughput_trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub camera: CameraView,
    pub render: RenderOptions,
    pub schedule: TrainSchedule,
    pub loss: LossWeights,
    pub pose_prior: PosePrior,
    pub train: TrainRunConfig,
    pub injection: InjectionConfig,
    pub adapters: AdapterConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            camera: CameraView::default(),
            render: RenderOptions::default(),
            schedule: TrainSchedule::default(),
            loss: LossWeights::default(),
            pose_prior: PosePrior::default(),
            train: TrainRunConfig::default(),
            injection: InjectionConfig::default(),
            adapters: AdapterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value, origin: &str) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .filter(|(l, _)| !l.is_empty())
        .ok_or_else(|| Error::Config(format!("{origin}: empty key")))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{origin}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies `section.key=value` (dots) to `table`.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    set_path(table, &parts, parse_value(raw.trim()), assignment)
}

/// Applies every `SURFGAN__section__key` variable to `table`.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (k, v) in vars {
        let lower = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        let parts: Vec<&str> = lower.split("__").collect();
        set_path(table, &parts, parse_value(&v), &k)?;
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    /// Resolves file, environment and `--set` layers into a validated config.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.injection.validate()?;
        if self.data.kind == DataKind::Spheres && self.data.sphere_count == 0 {
            return Err(Error::Config("data.sphere_count must be positive".into()));
        }
        if self.eval.resolution == 0 {
            return Err(Error::Config("eval.resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            camera: self.camera,
            render: self.render,
            schedule: self.schedule.clone(),
            loss: self.loss.clone(),
            pose_prior: self.pose_prior.clone(),
            seed: self.seed,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.output_dir.clone(),
            checkpoint_every: self.train.checkpoint_every,
            fid_every: self.train.fid_every,
            fid_samples: self.train.fid_samples,
            fid_resolution: self.train.fid_resolution,
        }
    }

    /// Hash of everything that shapes generator training; checkpoints carry it.
    pub fn train_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.train_config()).expect("config serializes"))
    }

    pub fn injection_hash(&self) -> String {
        let v = serde_json::json!({"seed": self.seed, "injection": self.injection, "adapters": self.adapters});
        sha256_hex(v.to_string().as_bytes())
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config to `dir/config.resolved.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// One row of a view-list file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    #[serde(default)]
    pub fov_deg: Option<f64>,
}

impl ViewRecord {
    pub fn angles(&self) -> (f64, f64) {
        (self.pitch_deg.to_radians(), self.yaw_deg.to_radians())
    }

    pub fn camera(&self, base: &CameraView) -> CameraView {
        let (p, y) = self.angles();
        let mut v = base.with_angles(p, y);
        if let Some(f) = self.fov_deg {
            v.fov_deg = f;
        }
        v
    }
}

/// Parses CSV with a `pitch_deg,yaw_deg[,fov_deg]` header. An empty list is an error.
pub fn parse_view_list(text: &str, origin: &str) -> Result<Vec<ViewRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let views = rdr
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            let v: ViewRecord = r.map_err(|e| Error::Data(format!("{origin}: record {}: {e}", i + 1)))?;
            let finite = v.pitch_deg.is_finite() && v.yaw_deg.is_finite() && v.fov_deg.is_none_or(|f| f > 0.0 && f < 180.0);
            if !finite {
                return Err(Error::Data(format!("{origin}: record {} has an invalid angle", i + 1)));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    if views.is_empty() {
        return Err(Error::Data(format!("{origin}: view list is empty")));
    }
    Ok(views)
}

pub fn read_view_list(path: &Path) -> Result<Vec<ViewRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_view_list(&text, &path.display().to_string())
}

/// A `rows x cols` grid over the given ranges, row-major with pitch varying by row.
pub fn view_grid(pitch_deg: (f64, f64), yaw_deg: (f64, f64), rows: usize, cols: usize) -> Vec<ViewRecord> {
    let lin = |(a, b): (f64, f64), n: usize, i: usize| {
        if n == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (n - 1) as f64
        }
    };
    (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| ViewRecord {
                pitch_deg: lin(pitch_deg, rows, r),
                yaw_deg: lin(yaw_deg, cols, c),
                fov_deg: None,
            })
        })
        .collect()
}

/// Writes `value` as pretty JSON next to an artifact (`<artifact>.json`).
pub fn write_sidecar<T: Serialize>(artifact: &Path, value: &T) -> Result<PathBuf> {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    let p = PathBuf::from(s);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[generator]\nwidth = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn precedence_set_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 1\n[generator]\nhidden = 32\nk = 4\n").unwrap();
        let env = vec![
            ("SURFGAN__SEED".to_string(), "2".to_string()),
            ("SURFGAN__generator__hidden".to_string(), "48".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = RunConfig::resolve(Some(&f), env, &["seed=3".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.generator.hidden, 48);
        assert_eq!(c.generator.k, 4);
    }

    #[test]
    fn string_overrides_and_hash_sensitivity() {
        let c = RunConfig::resolve(None, vec![], &["output_dir=out/x".into(), "schedule.progressive=false".into()]).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert!(!c.schedule.progressive);
        let d = RunConfig::resolve(None, vec![], &["output_dir=out/y".into(), "schedule.progressive=false".into()]).unwrap();
        assert_eq!(c.train_hash(), d.train_hash());
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn view_lists() {
        let v = parse_view_list("pitch_deg,yaw_deg,fov_deg\n10, -20,\n0,45,15\n", "t").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].fov_deg, None);
        assert_eq!(v[1].camera(&CameraView::default()).fov_deg, 15.0);
        assert!(matches!(parse_view_list("pitch_deg,yaw_deg\n", "t"), Err(Error::Data(_))));
        assert!(parse_view_list("pitch_deg,yaw_deg\nx,1\n", "t").is_err());
    }

    #[test]
    fn grid_covers_pose_box() {
        let g = view_grid((-30.0, 30.0), (-45.0, 45.0), 3, 5);
        assert_eq!(g.len(), 15);
        assert_eq!((g[0].pitch_deg, g[0].yaw_deg), (-30.0, -45.0));
        assert_eq!((g[14].pitch_deg, g[14].yaw_deg), (30.0, 45.0));
    }
}
