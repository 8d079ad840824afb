//! The pipeline commands. Each writes its outputs atomically into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use polsar_mcnn::autodiff::{load_checkpoint, save_checkpoint, AdamState};
use polsar_mcnn::formats::{stats_to_text, Raster};
use polsar_mcnn::gradcheck::{layer_suite, SuiteCase};
use polsar_mcnn::metrics::{format_table, MetricsReport};
use polsar_mcnn::models::{classify_map, evaluate, train, EpochRecord, Model, ModelConfig, Variant};
use polsar_mcnn::polsar::{
    channel_stats, coherency_matrix, extract_patches, pauli_vector, sample_split, to_amplitude_phase, to_real_imag, ChannelCube,
    CubeForm, LabelMap, PatchSet,
};
use polsar_mcnn::synth::{generate, SynthSpec};
use polsar_mcnn::tensor::{atomic_write, read_all};
use polsar_mcnn::{Error, Result};

use crate::config::RunConfig;
use crate::render::{colorize, encode_png, ClassPalette};

pub const CHECKPOINT_FILE: &str = "checkpoint.pckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Reads a raster and turns it into a cube of `form`. Scattering planes go through
/// the Pauli vector and a `window` boxcar; coherency planes are converted directly;
/// a cube already in `form` is used as is.
pub fn load_cube(path: &Path, form: CubeForm, window: usize) -> Result<ChannelCube> {
    let raster = Raster::read(path)?;
    if let Some(found) = CubeForm::from_planes(&raster.plane_names()) {
        if found == form {
            return raster.to_cube();
        }
        if found == CubeForm::AmpPhase {
            return Err(Error::Config(format!(
                "{} holds an amp_phase cube but {} input is required",
                path.display(),
                form.name()
            )));
        }
    }
    let t = if raster.is_coherency() {
        if window > 1 {
            log::warn!("window {window} ignored: {} already holds coherency planes", path.display());
        }
        raster.to_coherency()?
    } else if raster.is_scattering() {
        coherency_matrix(&pauli_vector(&raster.to_scattering()?)?, window)?
    } else {
        return Err(Error::Data(format!(
            "{}: planes {:?} are neither scattering, coherency nor a channel cube",
            path.display(),
            raster.plane_names()
        )));
    };
    Ok(match form {
        CubeForm::AmpPhase => to_amplitude_phase(&t),
        CubeForm::RealImag => to_real_imag(&t),
    })
}

pub struct Dataset {
    pub cube: Arc<ChannelCube>,
    pub labels: LabelMap,
}

impl Dataset {
    pub fn load(raster: &Path, labels: &Path, form: CubeForm, window: usize) -> Result<Dataset> {
        let cube = load_cube(raster, form, window)?;
        let labels = LabelMap::read(labels)?;
        if (labels.height, labels.width) != (cube.height, cube.width) {
            return Err(Error::Data(format!(
                "label map is {}x{} but the raster is {}x{}",
                labels.height, labels.width, cube.height, cube.width
            )));
        }
        Ok(Dataset { cube: Arc::new(cube), labels })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Dataset> {
        let raster = cfg.raster.as_deref().ok_or_else(|| Error::Config("config sets no `raster`".into()))?;
        let labels = cfg.labels.as_deref().ok_or_else(|| Error::Config("config sets no `labels`".into()))?;
        Dataset::load(raster, labels, cfg.input_form()?, cfg.window)
    }

    pub fn patches(&self, size: usize) -> Result<PatchSet> {
        extract_patches(Arc::clone(&self.cube), &self.labels, size)
    }
}

pub struct PreprocessOutput {
    pub cube: PathBuf,
    pub stats: PathBuf,
}

/// Writes `cube.ptc1` in the requested form and `cube_stats.txt` with per-channel
/// statistics over the whole image.
pub fn preprocess(input: &Path, form: CubeForm, window: usize, out: &Path) -> Result<PreprocessOutput> {
    let cube = load_cube(input, form, window)?;
    let stats = channel_stats(&cube, &[]);
    ensure_dir(out)?;
    let paths = PreprocessOutput { cube: out.join("cube.ptc1"), stats: out.join("cube_stats.txt") };
    Raster::from_cube(&cube).write(&paths.cube)?;
    write_text(&paths.stats, &stats_to_text(&stats))?;
    Ok(paths)
}

pub struct Trained {
    pub model: Model,
    pub adam: AdamState<f32>,
    pub log: Vec<EpochRecord>,
    /// The config as run, with the class count filled in.
    pub config: RunConfig,
    /// Every labeled sample, the evaluation set.
    pub test: PatchSet,
}

fn resolve_classes(cfg: &RunConfig, data: &Dataset) -> Result<ModelConfig> {
    let found = data.labels.num_classes();
    if cfg.model.classes != 0 && cfg.model.classes != found {
        return Err(Error::Data(format!("config expects {} classes, label map has {found}", cfg.model.classes)));
    }
    let model = ModelConfig { classes: found, ..cfg.model.clone() };
    model.validate()?;
    Ok(model)
}

/// Splits, fits input statistics on the training samples and trains.
pub fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<Trained> {
    cfg.check()?;
    let model_cfg = resolve_classes(cfg, data)?;
    if data.cube.form != cfg.input_form()? {
        return Err(Error::Config(format!(
            "{} requires {} input, cube is {}",
            model_cfg.variant,
            cfg.input_form()?.name(),
            data.cube.form.name()
        )));
    }
    let all = data.patches(model_cfg.patch_size)?;
    let seed = cfg.train.seed;
    let (train_set, test) = sample_split(&all, cfg.per_class, seed, cfg.split_policy)?;
    log::info!("{}: {} training and {} test samples", model_cfg.variant, train_set.len(), test.len());
    let mut model: Model = Model::new(model_cfg.clone(), seed)?;
    model.fit_input_stats(&train_set)?;
    let mut adam = AdamState::new(cfg.train.lr);
    let log = train(&mut model, &mut adam, &train_set, Some(&test), &cfg.train, |_| {})?;
    let config = RunConfig { model: model_cfg, ..cfg.clone() };
    Ok(Trained { model, adam, log, config, test })
}

pub fn epoch_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,train_oa,test_oa\n");
    for r in log {
        let test = r.test_oa.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.train_oa, test);
    }
    s
}

fn absolute(p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.clone()))
}

/// Writes `config.txt`, `epochs.csv` and `checkpoint.pckpt` into `out`.
pub fn write_training(out: &Path, trained: &Trained) -> Result<PathBuf> {
    ensure_dir(out)?;
    let copy = RunConfig {
        raster: absolute(&trained.config.raster),
        labels: absolute(&trained.config.labels),
        out: None,
        ..trained.config.clone()
    };
    write_text(&out.join(CONFIG_FILE), &copy.to_text())?;
    write_text(&out.join(EPOCH_LOG_FILE), &epoch_csv(&trained.log))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &trained.model.store, Some(&trained.adam))?;
    Ok(ckpt)
}

pub fn train_command(cfg: &RunConfig, out: &Path) -> Result<Trained> {
    cfg.check()?;
    let data = Dataset::from_config(cfg)?;
    let trained = train_model(cfg, &data)?;
    write_training(out, &trained)?;
    Ok(trained)
}

/// Rebuilds the model saved by `train`, reading `config.txt` beside the checkpoint.
pub fn load_trained(checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::Config(format!("{} not found next to the checkpoint", cfg_path.display())));
    }
    let cfg = RunConfig::load(&cfg_path)?;
    if cfg.model.classes < 2 {
        return Err(Error::Config(format!("{} does not record the class count", cfg_path.display())));
    }
    let mut model: Model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    load_checkpoint(&read_all(checkpoint)?, &mut model.store)?;
    Ok((cfg, model))
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub class_names: Vec<String>,
    pub text: String,
}

pub fn evaluate_patches(model: &Model, patches: &PatchSet, class_names: &[String], batch: usize) -> Result<Evaluation> {
    if patches.num_classes != model.config.classes {
        return Err(Error::Data(format!(
            "class-count mismatch: checkpoint has {} classes, dataset {}",
            model.config.classes, patches.num_classes
        )));
    }
    let (cm, _) = evaluate(model, patches, batch)?;
    let report = cm.report()?;
    let text = report.to_text(class_names, &model.config.variant.to_string());
    Ok(Evaluation { report, class_names: class_names.to_vec(), text })
}

/// Scores every labeled pixel and writes `report.txt` and `metrics.txt`.
pub fn evaluate_command(checkpoint: &Path, raster: Option<&Path>, labels: Option<&Path>, out: &Path) -> Result<Evaluation> {
    let (mut cfg, model) = load_trained(checkpoint)?;
    if let Some(r) = raster {
        cfg.raster = Some(r.to_path_buf());
    }
    if let Some(l) = labels {
        cfg.labels = Some(l.to_path_buf());
    }
    let data = Dataset::from_config(&cfg)?;
    if data.labels.num_classes() != model.config.classes {
        return Err(Error::Data(format!(
            "class-count mismatch: checkpoint has {} classes, label map {}",
            model.config.classes,
            data.labels.num_classes()
        )));
    }
    let patches = data.patches(model.config.patch_size)?;
    let eval = evaluate_patches(&model, &patches, &data.labels.classes, cfg.train.eval_batch)?;
    ensure_dir(out)?;
    write_text(&out.join("report.txt"), &eval.text)?;
    write_text(&out.join("metrics.txt"), &eval.report.to_key_values())?;
    Ok(eval)
}

pub struct MapOutput {
    pub map: LabelMap,
    pub map_path: PathBuf,
    pub png_path: PathBuf,
}

/// Classifies every pixel and writes `map.plbl1` and `map.png`. With `overlay`, pixels
/// unlabeled in the ground truth are drawn black in the image.
pub fn classify_map_command(
    checkpoint: &Path,
    raster: Option<&Path>,
    ground_truth: Option<&Path>,
    overlay: bool,
    out: &Path,
) -> Result<MapOutput> {
    let (cfg, model) = load_trained(checkpoint)?;
    let raster = raster.map(Path::to_path_buf).or(cfg.raster.clone()).ok_or_else(|| Error::Config("no raster given".into()))?;
    let cube = load_cube(&raster, cfg.input_form()?, cfg.window)?;
    let gt_path = ground_truth.map(Path::to_path_buf).or(cfg.labels.clone());
    let gt = match &gt_path {
        Some(p) if overlay || p.exists() => Some(LabelMap::read(p)?),
        _ => None,
    };
    if overlay && gt.is_none() {
        return Err(Error::Config("overlay needs a ground-truth label map".into()));
    }
    if let Some(g) = &gt {
        if (g.height, g.width) != (cube.height, cube.width) {
            return Err(Error::Data(format!(
                "ground truth is {}x{} but the cube is {}x{}",
                g.height, g.width, cube.height, cube.width
            )));
        }
    }
    let c = model.config.classes;
    let names = match &gt {
        Some(g) if g.num_classes() == c => g.classes.clone(),
        _ => (1..=c).map(|i| format!("class{i}")).collect(),
    };
    let (labels, _) = classify_map(&model, &cube, cfg.train.eval_batch)?;
    let map = LabelMap::new(cube.height, cube.width, names, labels)?;
    let mask = if overlay { gt.as_ref().map(|g| g.labels.as_slice()) } else { None };
    let rgb = colorize(&map.labels, &ClassPalette::new(c), mask)?;
    let png = encode_png(cube.width, cube.height, &rgb)?;
    ensure_dir(out)?;
    let (map_path, png_path) = (out.join("map.plbl1"), out.join("map.png"));
    map.write(&map_path)?;
    atomic_write(&png_path, &png)?;
    Ok(MapOutput { map, map_path, png_path })
}

pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let columns: Vec<String> = ["AA", "OA", "Kappa", "F1", "F1_macro"].map(String::from).to_vec();
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|r| {
            let m = &r.report;
            (
                r.variant.to_string(),
                vec![
                    format!("{:.2}", m.aa * 100.0),
                    format!("{:.2}", m.oa * 100.0),
                    format!("{:.4}", m.kappa),
                    format!("{:.4}", m.f1),
                    format!("{:.4}", m.f1_macro),
                ],
            )
        })
        .collect();
    format_table("variant", &columns, &body)
}

/// Trains and scores M1..M6 with the config's seed; each run goes to `out/<variant>`
/// and the comparison to `out/ablation.txt`.
pub fn ablate_command(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let data =
        Dataset::from_config(&RunConfig { model: ModelConfig { variant: Variant::M1, ..cfg.model.clone() }, ..cfg.clone() })?;
    let mut rows = Vec::new();
    for variant in Variant::ABLATION {
        let run = RunConfig { model: ModelConfig { variant, ..cfg.model.clone() }, ..cfg.clone() };
        let trained = train_model(&run, &data)?;
        let dir = out.join(variant.name());
        write_training(&dir, &trained)?;
        let eval = evaluate_patches(&trained.model, &trained.test, &data.labels.classes, run.train.eval_batch)?;
        write_text(&dir.join("report.txt"), &eval.text)?;
        write_text(&dir.join("metrics.txt"), &eval.report.to_key_values())?;
        log::info!("{variant}: OA {:.4}", eval.report.oa);
        rows.push(AblationRow { variant, report: eval.report });
    }
    write_text(&out.join("ablation.txt"), &ablation_table(&rows))?;
    Ok(rows)
}

pub struct SynthOutput {
    pub raster: PathBuf,
    pub labels: PathBuf,
}

/// Writes `scene.ptc1` (scattering planes), `labels.plbl1` and the spec as `synth.txt`.
pub fn synth_command(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    let (s, labels) = generate(spec)?;
    ensure_dir(out)?;
    let paths = SynthOutput { raster: out.join("scene.ptc1"), labels: out.join("labels.plbl1") };
    Raster::from_scattering(&s).write(&paths.raster)?;
    labels.write(&paths.labels)?;
    write_text(&out.join("synth.txt"), &spec.to_text())?;
    Ok(paths)
}

pub fn gradcheck_table(cases: &[SuiteCase]) -> String {
    let columns: Vec<String> = ["shape", "max_rel_error", "result"].map(String::from).to_vec();
    let rows: Vec<(String, Vec<String>)> = cases
        .iter()
        .map(|c| {
            let verdict = if c.report.passed() { "ok" } else { "FAIL" };
            (c.op.to_string(), vec![c.shape.clone(), format!("{:.3e}", c.report.max_rel_error()), verdict.to_string()])
        })
        .collect();
    format_table("op", &columns, &rows)
}

/// Runs the layer gradient suite; any failing case is a numerical failure.
pub fn gradient_check_command(seed: u64, out: Option<&Path>) -> Result<String> {
    let cases = layer_suite(seed)?;
    let table = gradcheck_table(&cases);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_text(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<String> = cases.iter().filter(|c| !c.report.passed()).map(|c| format!("{} {}", c.op, c.shape)).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(Error::Numerical(format!("{table}gradient check failed for: {}", failed.join(", "))))
    }
}
