use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tracing::info;

use occludox::attacks::{EyeglassConfig, PatchConfig, StickerConfig};
use occludox::data::{
    gen_synthetic_signs, image_to_ppm, load_checkpoint, load_image_dir, load_mask_pgm, read_report_csv,
    save_checkpoint, write_image_dir, write_report_csv, EvaluationReport, ReportMeta, ReportRow, SplitDataset,
    SyntheticParams,
};
use occludox::defenses::{
    adversarial_train, curriculum_schedule, curriculum_train, doa_train, gaussian_noise_train, smoothed_predict, train,
    Perturbation, SmoothedClassifier, SmoothingConfig, TrainConfig, TrainHistory,
};
use occludox::eval::{attacked_images, sweep, Attack};
use occludox::model::{accuracy, Classifier};
use occludox::{build_cnn, ConvNetSpec, Dataset, Mask, Split};

use crate::config::{AttackKind, AttackSpec, DataSource, DefenseId, Loaded, MaskSource, Method};
use crate::error::{CliError, CliResult};
use crate::plot::render_svg;

/// Everything a command needs besides its own arguments.
#[derive(Clone, Debug)]
pub struct Context {
    pub loaded: Loaded,
    /// `--seed`, when given.
    pub seed_flag: Option<u64>,
    pub fast: bool,
    pub force: bool,
    pub out: Option<PathBuf>,
}

impl Context {
    /// Effective seed: flag, then config, then 0.
    pub fn seed(&self) -> u64 {
        self.seed_flag.or(self.loaded.config.seed).unwrap_or(0)
    }

    fn output(&self, configured: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.loaded.resolve(configured))
    }

    fn meta(&self) -> ReportMeta {
        ReportMeta {
            seed: self.seed(),
            config_hash: self.loaded.hash.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref()
        .ok_or_else(|| CliError::Config(format!("{name}: section missing from config")))
}

fn load_datasets(ctx: &Context) -> CliResult<SplitDataset> {
    match &ctx.loaded.config.data {
        DataSource::Synthetic(p) => Ok(gen_synthetic_signs(p.seed, p.classes, p.per_class, p.side)?),
        DataSource::Dir(dir) => {
            let dir = ctx.loaded.resolve(dir);
            let load = |split: Split| -> CliResult<Dataset> {
                let d = dir.join(split.as_str());
                Ok(load_image_dir(&d, &d.join("labels.csv"), split)?)
            };
            Ok(SplitDataset {
                train: load(Split::Train)?,
                val: load(Split::Val)?,
                test: load(Split::Test)?,
            })
        }
    }
}

fn model_spec(ctx: &Context, data: &SplitDataset) -> ConvNetSpec {
    ctx.loaded.config.model.clone().unwrap_or_else(|| {
        let classes = match &ctx.loaded.config.data {
            DataSource::Synthetic(p) => p.classes,
            DataSource::Dir(_) => [&data.train, &data.val, &data.test]
                .iter()
                .map(|d| d.classes())
                .max()
                .unwrap_or(2),
        };
        ConvNetSpec {
            input: data.train.image_dims(),
            classes,
            ..ConvNetSpec::desk_default()
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Write the synthetic dataset as `train/`, `val/` and `test/` image folders.
pub fn gen_data(ctx: &Context) -> CliResult<PathBuf> {
    let out = ctx
        .out
        .clone()
        .ok_or_else(|| CliError::Config("gen-data needs --out DIR".into()))?;
    let mut params = match &ctx.loaded.config.data {
        DataSource::Synthetic(p) => *p,
        DataSource::Dir(_) => SyntheticParams::default(),
    };
    if let Some(seed) = ctx.seed_flag {
        params.seed = seed;
    }
    if out.exists() {
        let nonempty = fs::read_dir(&out).map_err(|e| CliError::io(&out, e))?.next().is_some();
        if nonempty && !ctx.force {
            return Err(CliError::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if nonempty {
            fs::remove_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        }
    }
    let data = gen_synthetic_signs(params.seed, params.classes, params.per_class, params.side)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        write_image_dir(data.get(split), &out.join(split.as_str()))?;
    }
    info!(dir = %out.display(), train = data.train.len(), test = data.test.len(), "dataset written");
    Ok(out)
}

fn log_csv(stages: &[(f64, &TrainHistory)]) -> String {
    let mut s = String::from("stage,epsilon,epoch,loss\n");
    for (k, (eps, h)) in stages.iter().enumerate() {
        for (e, loss) in h.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{k},{eps},{e},{loss}\n"));
        }
    }
    s
}

/// Train one model and write its checkpoint and training log.
pub fn train_cmd(ctx: &Context) -> CliResult<PathBuf> {
    let t = section(&ctx.loaded.config.train, "train")?;
    let data = load_datasets(ctx)?;
    let spec = model_spec(ctx, &data);
    let seed = ctx.seed();
    let start = match &t.init {
        Some(p) => load_checkpoint(&ctx.loaded.resolve(p), &spec)?,
        None => build_cnn(&spec, seed)?,
    };
    let cfg = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        optimizer: t.optimizer,
        seed,
        snapshots: false,
    };
    let ckpt = ctx.output(&t.checkpoint);
    info!(method = t.method.as_str(), epochs = t.epochs, "training");
    let (params, log) = match t.method {
        Method::Clean => {
            let (p, h) = train(start, &data.train, &cfg, &Perturbation::None)?;
            (p, log_csv(&[(0.0, &h)]))
        }
        Method::At => {
            let (p, h) = adversarial_train(start, &data.train, t.epsilon, t.iterations, &cfg)?;
            (p, log_csv(&[(t.epsilon, &h)]))
        }
        Method::Cat => {
            let schedule = curriculum_schedule(t.start_epsilon, t.target_epsilon)?;
            let stages = curriculum_train(start, &data.train, &schedule, t.iterations, &cfg)?;
            for s in &stages {
                let path = with_suffix(&ckpt, &format!(".eps{}.ckpt", s.epsilon));
                save_checkpoint(&s.end, &path)?;
            }
            let log = log_csv(&stages.iter().map(|s| (s.epsilon, &s.history)).collect::<Vec<_>>());
            (stages.last().expect("non-empty schedule").end.clone(), log)
        }
        Method::Doa => {
            let (p, h) = doa_train(start, &data.train, &t.roa, &cfg)?;
            (p, log_csv(&[(0.0, &h)]))
        }
        Method::RsNoise => {
            let (p, h) = gaussian_noise_train(start, &data.train, t.sigma, &cfg)?;
            (p, log_csv(&[(0.0, &h)]))
        }
    };
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    save_checkpoint(&params, &ckpt)?;
    write_file(&with_suffix(&ckpt, ".log.csv"), log.as_bytes())?;
    info!(accuracy = accuracy(&params, &data.test)?, "test accuracy");
    Ok(ckpt)
}

fn build_attack(ctx: &Context, spec: &AttackSpec, dims: [usize; 3]) -> CliResult<Attack> {
    let [_, h, w] = dims;
    let seed = ctx.seed();
    let mask = || -> CliResult<Mask> {
        match &spec.mask {
            None => Err(CliError::Config(
                "attack.mask: eyeglass and sticker attacks need a mask".into(),
            )),
            Some(MaskSource::Eyeglass) => Ok(Mask::eyeglass_frame(h, w)),
            Some(MaskSource::Stickers) => Ok(Mask::sticker_bars(h, w)),
            Some(MaskSource::Pgm(p)) => Ok(load_mask_pgm(&ctx.loaded.resolve(p), h, w)?),
        }
    };
    Ok(match spec.kind {
        AttackKind::Pgd => Attack::Pgd(spec.pgd),
        AttackKind::Roa => Attack::Roa(spec.roa),
        AttackKind::Eyeglass => Attack::Eyeglass {
            mask: mask()?,
            config: EyeglassConfig { seed, ..spec.eyeglass },
        },
        AttackKind::Sticker => Attack::Sticker {
            mask: mask()?,
            config: StickerConfig { seed, ..spec.sticker },
        },
        AttackKind::Patch => Attack::Patch(PatchConfig { seed, ..spec.patch }),
    })
}

fn rows_for(defense: &str, attack: &Attack, points: &[occludox::eval::SweepPoint], seconds: f64) -> Vec<ReportRow> {
    points
        .iter()
        .map(|p| ReportRow {
            defense: defense.to_string(),
            attack: attack.name().to_string(),
            param: attack.param().to_string(),
            value: p.value,
            accuracy: p.accuracy,
            wall_seconds: seconds / points.len() as f64,
        })
        .collect()
}

fn write_report(ctx: &Context, rows: Vec<ReportRow>, path: &Path) -> CliResult<()> {
    let report = EvaluationReport { rows, meta: ctx.meta() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_report_csv(&report, path)?;
    let meta = serde_json::to_string_pretty(&report.meta).expect("plain struct serializes");
    write_file(&with_suffix(path, ".meta.json"), format!("{meta}\n").as_bytes())
}

/// Evaluate one checkpoint under the configured attack across the grid.
pub fn attack_cmd(ctx: &Context) -> CliResult<PathBuf> {
    let spec = section(&ctx.loaded.config.attack, "attack")?;
    let ev = section(&ctx.loaded.config.evaluate, "evaluate")?;
    let ckpt = ctx.loaded.resolve(&ev.checkpoint);
    if !ckpt.exists() {
        return Err(CliError::io(&ckpt, std::io::ErrorKind::NotFound.into()));
    }
    let data = load_datasets(ctx)?;
    let params = load_checkpoint(&ckpt, &model_spec(ctx, &data))?;
    let grid = spec.grid(ctx.fast)?;
    let attack = build_attack(ctx, spec, data.test.image_dims())?;
    let t = Instant::now();
    let points = sweep(&params, &params, &data.test, &attack, &grid, Some(&data.train))?;
    let rows = rows_for(&ev.defense, &attack, &points, t.elapsed().as_secs_f64());
    let report = ctx.output(&ev.report);
    write_report(ctx, rows, &report)?;
    if let Some(dump) = &ev.dump {
        let dir = ctx.loaded.resolve(dump);
        let strongest = grid.iter().copied().fold(0.0, f64::max);
        let images = attacked_images(&params, &data.test, &attack, strongest, Some(&data.train))?;
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for i in 0..data.test.len() {
            write_file(
                &dir.join(format!("{i:05}.ppm")),
                &image_to_ppm(&images.slice_outer(i)?)?,
            )?;
        }
    }
    Ok(report)
}

/// Evaluate every listed defense under one attack grid.
pub fn sweep_cmd(ctx: &Context) -> CliResult<PathBuf> {
    let spec = section(&ctx.loaded.config.attack, "attack")?;
    let sw = section(&ctx.loaded.config.sweep, "sweep")?;
    if sw.defenses.is_empty() {
        return Err(CliError::Config("sweep.defenses: list is empty".into()));
    }
    for d in &sw.defenses {
        let p = ctx.loaded.resolve(&d.checkpoint);
        if !p.is_file() {
            return Err(CliError::io(p, std::io::ErrorKind::NotFound.into()));
        }
        if d.id == DefenseId::Rs && d.smoothing.is_none() {
            return Err(CliError::Config("sweep.defenses: rs needs a smoothing section".into()));
        }
    }
    let grid = spec.grid(ctx.fast)?;
    let data = load_datasets(ctx)?;
    let model = model_spec(ctx, &data);
    let attack = build_attack(ctx, spec, data.test.image_dims())?;
    let mut rows = Vec::new();
    for d in &sw.defenses {
        let params = load_checkpoint(&ctx.loaded.resolve(&d.checkpoint), &model)?;
        let t = Instant::now();
        let points = match d.smoothing {
            Some(s) if d.id == DefenseId::Rs => {
                let judge = SmoothedClassifier {
                    base: &params,
                    config: SmoothingConfig { seed: ctx.seed(), ..s },
                };
                sweep(&judge, &params, &data.test, &attack, &grid, Some(&data.train))?
            }
            _ => sweep(&params, &params, &data.test, &attack, &grid, Some(&data.train))?,
        };
        info!(defense = d.id.as_str(), ?points, "defense evaluated");
        rows.extend(rows_for(d.id.as_str(), &attack, &points, t.elapsed().as_secs_f64()));
    }
    let report = ctx.output(&sw.report);
    write_report(ctx, rows, &report)?;
    Ok(report)
}

/// Smoothed predictions for the test split.
pub fn smooth_predict_cmd(ctx: &Context) -> CliResult<PathBuf> {
    let s = section(&ctx.loaded.config.smoothing, "smoothing")?;
    let data = load_datasets(ctx)?;
    let params = load_checkpoint(&ctx.loaded.resolve(&s.checkpoint), &model_spec(ctx, &data))?;
    let cfg = SmoothingConfig {
        sigma: s.sigma,
        samples: s.samples,
        seed: ctx.seed(),
    };
    let predicted = smoothed_predict(&params, data.test.images(), &cfg)?;
    let mut csv = String::from("index,label,prediction\n");
    let mut correct = 0;
    for (i, (&p, &l)) in predicted.iter().zip(data.test.labels()).enumerate() {
        csv.push_str(&format!("{i},{l},{p}\n"));
        correct += usize::from(p == l);
    }
    let out = ctx.output(&s.out);
    write_file(&out, csv.as_bytes())?;
    info!(
        accuracy = correct as f64 / predicted.len() as f64,
        classes = params.classes(),
        "smoothed test accuracy"
    );
    Ok(out)
}

/// Render a report CSV as an SVG chart next to it (or at `--out`).
pub fn plot_cmd(ctx: &Context, report: &Path) -> CliResult<PathBuf> {
    let rows = read_report_csv(report)?;
    let svg = render_svg(&rows)?;
    let out = ctx.out.clone().unwrap_or_else(|| report.with_extension("svg"));
    write_file(&out, svg.as_bytes())?;
    Ok(out)
}
