//! JSON experiment configuration. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use occludox::attacks::{AttackBudget, EyeglassConfig, Norm, PatchConfig, RoaConfig, Search, StickerConfig};
use occludox::data::SyntheticParams;
use occludox::defenses::SmoothingConfig;
use occludox::{ConvNetSpec, OptimizerConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: Option<ConvNetSpec>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub smoothing: Option<SmoothSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Output directory of `gen-data`.
    Dir(PathBuf),
    /// Generate in memory.
    Synthetic(SyntheticParams),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticParams::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Clean,
    At,
    Cat,
    Doa,
    RsNoise,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::At => "at",
            Method::Cat => "cat",
            Method::Doa => "doa",
            Method::RsNoise => "rs-noise",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Checkpoint to start from instead of a fresh initialization.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    /// PGD bound (0–255) for `at`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// PGD steps per batch for `at` and `cat`.
    #[serde(default = "default_train_iterations")]
    pub iterations: usize,
    #[serde(default = "default_start_epsilon")]
    pub start_epsilon: f64,
    #[serde(default = "default_target_epsilon")]
    pub target_epsilon: f64,
    /// Rectangle settings for `doa`.
    #[serde(default = "default_roa")]
    pub roa: RoaConfig,
    /// Noise level for `rs-noise`.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}
fn default_epsilon() -> f64 {
    8.0
}
fn default_train_iterations() -> usize {
    7
}
fn default_start_epsilon() -> f64 {
    4.0
}
fn default_target_epsilon() -> f64 {
    32.0
}
fn default_roa() -> RoaConfig {
    RoaConfig::new(7, 7).with_search(Search::Exhaustive)
}
fn default_sigma() -> f64 {
    0.25
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Pgd,
    Roa,
    Eyeglass,
    Sticker,
    Patch,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskSource {
    Eyeglass,
    Stickers,
    Pgm(PathBuf),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default = "default_pgd")]
    pub pgd: AttackBudget,
    #[serde(default = "default_roa")]
    pub roa: RoaConfig,
    #[serde(default)]
    pub eyeglass: EyeglassConfig,
    #[serde(default)]
    pub sticker: StickerConfig,
    #[serde(default = "default_patch")]
    pub patch: PatchConfig,
    /// Attackable region for eyeglass and sticker attacks.
    #[serde(default)]
    pub mask: Option<MaskSource>,
    /// Strength grid: iteration counts, or area fractions for patches.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

fn default_pgd() -> AttackBudget {
    AttackBudget::from_255(Norm::Inf, 8.0, 2.0, 10).expect("valid default")
}

fn default_patch() -> PatchConfig {
    PatchConfig::new(0.1, 0)
}

pub const DEFAULT_GRID: [f64; 4] = [0.0, 10.0, 100.0, 1000.0];
pub const FAST_GRID: [f64; 3] = [0.0, 10.0, 50.0];
pub const PATCH_GRID: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25];

impl AttackSpec {
    pub fn grid(&self, fast: bool) -> CliResult<Vec<f64>> {
        let grid = match (&self.grid, self.kind) {
            (Some(g), _) => g.clone(),
            (None, AttackKind::Patch) => PATCH_GRID.to_vec(),
            (None, _) if fast => FAST_GRID.to_vec(),
            (None, _) => DEFAULT_GRID.to_vec(),
        };
        if grid.is_empty() {
            return Err(CliError::Config("attack.grid: grid must not be empty".into()));
        }
        if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(CliError::Config(format!(
                "attack.grid: strength {v} must be non-negative"
            )));
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: PathBuf,
    /// Defense label written in the report.
    #[serde(default = "default_defense_label")]
    pub defense: String,
    #[serde(default = "default_attack_report")]
    pub report: PathBuf,
    /// Write every attacked test image (strongest grid point) here.
    #[serde(default)]
    pub dump: Option<PathBuf>,
}

fn default_defense_label() -> String {
    "model".into()
}
fn default_attack_report() -> PathBuf {
    PathBuf::from("attack_report.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseId {
    Clean,
    At,
    Cat,
    DoaExh,
    DoaGrad,
    Rs,
}

impl DefenseId {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseId::Clean => "clean",
            DefenseId::At => "at",
            DefenseId::Cat => "cat",
            DefenseId::DoaExh => "doa-exh",
            DefenseId::DoaGrad => "doa-grad",
            DefenseId::Rs => "rs",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseEntry {
    pub id: DefenseId,
    pub checkpoint: PathBuf,
    /// Required for `rs`: the checkpoint is the base classifier.
    #[serde(default)]
    pub smoothing: Option<SmoothingConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub defenses: Vec<DefenseEntry>,
    #[serde(default = "default_sweep_report")]
    pub report: PathBuf,
}

fn default_sweep_report() -> PathBuf {
    PathBuf::from("sweep_report.csv")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSection {
    pub checkpoint: PathBuf,
    pub sigma: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_predictions")]
    pub out: PathBuf,
}

fn default_samples() -> usize {
    1000
}
fn default_predictions() -> PathBuf {
    PathBuf::from("smoothed_predictions.csv")
}

/// A parsed config plus what is needed to resolve its paths and stamp
/// reports.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub base: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }
}

/// Parse JSON text; schema errors name the offending JSON path.
pub fn parse_config(text: &str) -> CliResult<Config> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner()))
    })
}

pub fn load_config(path: Option<&Path>) -> CliResult<Loaded> {
    match path {
        None => Ok(Loaded {
            config: Config::default(),
            base: PathBuf::from("."),
            hash: hex(&Sha256::digest(b"{}")),
        }),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Config(format!("{}: config is not UTF-8", p.display())))?;
            let config = parse_config(&text)?;
            Ok(Loaded {
                config,
                base: p.parent().map(Path::to_path_buf).unwrap_or_default(),
                hash: hex(&Sha256::digest(text.as_bytes())),
            })
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
