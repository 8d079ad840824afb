//! Run configuration: a flat `key = value` text file with `schema = 1`.
//!
//! ```text
//! schema = 1
//! raster = scene/cube.ptc1
//! labels = scene/labels.plbl1
//! variant = DMCNN
//! widths = 12,24,24
//! epochs = 20
//! ```
//!
//! Relative paths resolve against the directory holding the file. `#` starts a
//! comment. Dropout can be given either as a drop probability (`conv_dropout`)
//! or as a keep probability (`conv_keep_prob`); the last one wins.

use std::path::{Path, PathBuf};

use polsar_mcnn::models::{ModelConfig, TrainOptions, Variant};
use polsar_mcnn::polsar::{CubeForm, SplitPolicy};
use polsar_mcnn::{Error, Result};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub raster: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Requested input form; the variant's own form when absent.
    pub form: Option<CubeForm>,
    /// Boxcar window for coherency estimation when the raster holds scattering planes.
    pub window: usize,
    /// `classes = 0` takes the count from the label map.
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub per_class: usize,
    pub split_policy: SplitPolicy,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            raster: None,
            labels: None,
            form: None,
            window: 1,
            model: ModelConfig::new(Variant::Mcnn, 0),
            train: TrainOptions::default(),
            per_class: 200,
            split_policy: SplitPolicy::Strict,
            out: None,
        }
    }
}

fn triple<T: std::str::FromStr + Copy>(key: &str, value: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("`{key}` needs three comma-separated values"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("`{key}`: cannot parse `{p}`"))?);
    }
    Ok([out[0], out[1], out[2]])
}

fn policy_name(p: SplitPolicy) -> &'static str {
    match p {
        SplitPolicy::Strict => "strict",
        SplitPolicy::CapAtAvailable => "cap",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text, path.parent())
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut schema = None;
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
                _ => p,
            }
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("config line {}: {msg}", ln + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| at(format!("`{key}` needs a number, got `{v}`")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| at(format!("`{key}` needs a non-negative integer, got `{v}`")));
            let m = &mut cfg.model;
            match key {
                "schema" => schema = Some(value.parse::<u32>().map_err(|_| at("schema must be an integer".into()))?),
                "raster" => cfg.raster = Some(resolve(value)),
                "labels" => cfg.labels = Some(resolve(value)),
                "out" => cfg.out = Some(resolve(value)),
                "form" => cfg.form = Some(CubeForm::parse(value)?),
                "window" => cfg.window = int(value)?,
                "variant" => m.variant = Variant::parse(value)?,
                "classes" => m.classes = int(value)?,
                "patch_size" => m.patch_size = int(value)?,
                "widths" => m.widths = triple(key, value).map_err(at)?,
                "fc_width" => m.fc_width = int(value)?,
                "conv_dropout" => m.conv_drop = num(value)?,
                "conv_keep_prob" => m.conv_drop = 1.0 - num(value)?,
                "fc_dropout" => m.fc_drop = num(value)?,
                "fc_keep_prob" => m.fc_drop = 1.0 - num(value)?,
                "growth" => m.growth = int(value)?,
                "multiplier" => m.multiplier = int(value)?,
                "dense_layers" => m.dense_layers = int(value)?,
                "alphas" => m.alphas = triple(key, value).map_err(at)?,
                "fusion_source" => m.fusion_source = int(value)?,
                "lr" => cfg.train.lr = num(value)?,
                "epochs" => cfg.train.epochs = int(value)?,
                "batch_size" => cfg.train.batch_size = int(value)?,
                "eval_subsample" => cfg.train.eval_subsample = int(value)?,
                "eval_batch" => cfg.train.eval_batch = int(value)?,
                "seed" => cfg.train.seed = value.parse().map_err(|_| at(format!("`seed` needs an integer, got `{value}`")))?,
                "per_class" => cfg.per_class = int(value)?,
                "split_policy" => cfg.split_policy = SplitPolicy::parse(value)?,
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }
        match schema {
            Some(SCHEMA) => {}
            Some(v) => return Err(Error::Config(format!("unsupported config schema {v}; this build reads schema {SCHEMA}"))),
            None => return Err(Error::Config(format!("config lacks `schema = {SCHEMA}`"))),
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Form the variant consumes; a conflicting explicit `form` is an error.
    pub fn input_form(&self) -> Result<CubeForm> {
        let want = self.model.variant.input_form();
        match self.form {
            Some(f) if f != want => Err(Error::Config(format!(
                "variant {} requires {} input but form = {}",
                self.model.variant,
                want.name(),
                f.name()
            ))),
            _ => Ok(want),
        }
    }

    /// Checks everything that does not depend on the dataset.
    pub fn check(&self) -> Result<()> {
        self.input_form()?;
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be odd and positive, got {}", self.window)));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.train.lr)));
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.train.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        let probe = ModelConfig { classes: self.model.classes.max(2), ..self.model.clone() };
        probe.validate()
    }

    /// Every key with its resolved value; parsing the text gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = format!("schema = {SCHEMA}\n");
        for (key, path) in [("raster", &self.raster), ("labels", &self.labels), ("out", &self.out)] {
            if let Some(p) = path {
                s.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        if let Some(f) = self.form {
            s.push_str(&format!("form = {}\n", f.name()));
        }
        s.push_str(&format!(
            "window = {}\nvariant = {}\nclasses = {}\npatch_size = {}\nwidths = {},{},{}\nfc_width = {}\n\
             conv_dropout = {}\nfc_dropout = {}\ngrowth = {}\nmultiplier = {}\ndense_layers = {}\n\
             alphas = {},{},{}\nfusion_source = {}\nlr = {}\nepochs = {}\nbatch_size = {}\n\
             eval_subsample = {}\neval_batch = {}\nseed = {}\nper_class = {}\nsplit_policy = {}\n",
            self.window,
            m.variant,
            m.classes,
            m.patch_size,
            m.widths[0],
            m.widths[1],
            m.widths[2],
            m.fc_width,
            m.conv_drop,
            m.fc_drop,
            m.growth,
            m.multiplier,
            m.dense_layers,
            m.alphas[0],
            m.alphas[1],
            m.alphas[2],
            m.fusion_source,
            t.lr,
            t.epochs,
            t.batch_size,
            t.eval_subsample,
            t.eval_batch,
            t.seed,
            self.per_class,
            policy_name(self.split_policy),
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig { raster: Some(PathBuf::from("/data/cube.ptc1")), ..RunConfig::default() };
        cfg.model.variant = Variant::Dmcnn;
        cfg.model.conv_drop = 0.2;
        cfg.model.alphas = [0.5, 0.25, 1.0];
        cfg.train.lr = 3e-4;
        cfg.split_policy = SplitPolicy::CapAtAvailable;
        let back = RunConfig::parse(&cfg.to_text(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn keep_probability_maps_to_dropout() {
        let cfg = RunConfig::parse("schema = 1\nconv_keep_prob = 0.8\nfc_keep_prob = 0.5\n", None).unwrap();
        assert!((cfg.model.conv_drop - 0.2).abs() < 1e-12);
        assert!((cfg.model.fc_drop - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let cfg =
            RunConfig::parse("schema = 1\nraster = a/cube.ptc1\nlabels = /abs/l.plbl1\n", Some(Path::new("/runs"))).unwrap();
        assert_eq!(cfg.raster.unwrap(), PathBuf::from("/runs/a/cube.ptc1"));
        assert_eq!(cfg.labels.unwrap(), PathBuf::from("/abs/l.plbl1"));
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "variant = MCNN\n",
            "schema = 2\n",
            "schema = 1\ncolour = red\n",
            "schema = 1\nwidths = 1,2\n",
            "schema = 1\nepochs = -3\n",
            "schema = 1\nvariant = CNN_v1\nform = amp_phase\n",
            "schema = 1\nwindow = 4\n",
            "schema = 1\nconv_dropout = 1.5\n",
            "schema = 1\nbatch_size = 1\n",
            "schema = 1\nvariant = resnet\n",
        ] {
            assert!(RunConfig::parse(text, None).is_err(), "{text}");
        }
    }

    #[test]
    fn form_defaults_to_variant() {
        let cfg = RunConfig::parse("schema = 1\nvariant = cnn_v1\n", None).unwrap();
        assert_eq!(cfg.input_form().unwrap(), CubeForm::RealImag);
        let cfg = RunConfig::parse("schema = 1\nvariant = M3\n", None).unwrap();
        assert_eq!(cfg.input_form().unwrap(), CubeForm::AmpPhase);
    }
}
