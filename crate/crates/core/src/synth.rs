//! Synthetic PolSAR scenes: blocky class regions whose pixels draw scattering
//! matrices from per-class complex Gaussian models.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::polsar::{LabelMap, ScatteringImage};
use crate::tensor::{derive_seed, rng_from_seed, Rng64};

/// Scattering statistics of one class. Powers are `E|S|^2`; `rho` is the complex
/// correlation coefficient between `S_HH` and `S_VV`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub name: String,
    pub hh_power: f64,
    pub hv_power: f64,
    pub vv_power: f64,
    pub rho: Complex64,
}

impl ClassModel {
    /// Expected `T11 = E|S_HH + S_VV|^2 / 2`.
    pub fn expected_t11(&self) -> f64 {
        let (a, b) = (self.hh_power.sqrt(), self.vv_power.sqrt());
        (self.hh_power + self.vv_power + 2.0 * self.rho.re * a * b) / 2.0
    }

    /// Expected `T33 = 2 E|S_HV|^2`.
    pub fn expected_t33(&self) -> f64 {
        2.0 * self.hv_power
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Side of the square class regions.
    pub block: usize,
    pub seed: u64,
    pub classes: Vec<ClassModel>,
}

impl SynthSpec {
    /// Three well separated classes (surface, volume, double bounce) on a 128x128 grid.
    pub fn three_class(seed: u64) -> SynthSpec {
        let class = |name: &str, hh, hv, vv, re| ClassModel {
            name: name.into(),
            hh_power: hh,
            hv_power: hv,
            vv_power: vv,
            rho: Complex64::new(re, 0.0),
        };
        SynthSpec {
            height: 128,
            width: 128,
            block: 32,
            seed,
            classes: vec![
                class("surface", 1.0, 0.02, 0.8, 0.8),
                class("volume", 0.5, 0.4, 0.5, 0.1),
                class("double_bounce", 2.0, 0.05, 1.2, -0.7),
            ],
        }
    }

    /// Parses `key = value` lines: `height`, `width`, `block`, `seed`, and one
    /// `class = NAME HH HV VV RHO_RE RHO_IM` line per class. `#` starts a comment.
    pub fn parse(text: &str) -> Result<SynthSpec> {
        let mut spec = SynthSpec { height: 128, width: 128, block: 16, seed: 0, classes: Vec::new() };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("synth spec line {}: {msg}", ln + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || value.parse::<u64>().map_err(|_| bad(&format!("`{key}` needs an integer")));
            match key {
                "schema" if value == "1" => {}
                "schema" => return Err(bad("unsupported schema")),
                "height" => spec.height = int()? as usize,
                "width" => spec.width = int()? as usize,
                "block" => spec.block = int()? as usize,
                "seed" => spec.seed = int()?,
                "class" => {
                    let f: Vec<&str> = value.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(bad("class needs NAME HH HV VV RHO_RE RHO_IM"));
                    }
                    let nums: Vec<f64> = f[1..]
                        .iter()
                        .map(|s| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number"))))
                        .collect::<Result<_>>()?;
                    spec.classes.push(ClassModel {
                        name: f[0].to_string(),
                        hh_power: nums[0],
                        hv_power: nums[1],
                        vv_power: nums[2],
                        rho: Complex64::new(nums[3], nums[4]),
                    });
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "schema = 1\nheight = {}\nwidth = {}\nblock = {}\nseed = {}\n",
            self.height, self.width, self.block, self.seed
        );
        for c in &self.classes {
            s.push_str(&format!("class = {} {} {} {} {} {}\n", c.name, c.hh_power, c.hv_power, c.vv_power, c.rho.re, c.rho.im));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes.len() < 2 {
            return err(format!("synth spec needs at least 2 classes, got {}", self.classes.len()));
        }
        if self.height == 0 || self.width == 0 || self.block == 0 {
            return err("height, width and block must be positive".into());
        }
        let blocks = self.height.div_ceil(self.block) * self.width.div_ceil(self.block);
        if blocks < self.classes.len() {
            return err(format!("{blocks} blocks cannot hold {} classes", self.classes.len()));
        }
        for c in &self.classes {
            let powers = [c.hh_power, c.hv_power, c.vv_power];
            if powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return err(format!("class `{}` has a negative or non-finite power", c.name));
            }
            if c.rho.norm().is_nan() || c.rho.norm() > 1.0 {
                return err(format!("class `{}` has |rho| > 1", c.name));
            }
            if c.name.is_empty() || c.name.contains('\0') {
                return err("class names must be non-empty without NUL bytes".into());
            }
        }
        Ok(())
    }
}

fn circular(rng: &mut Rng64) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Generates the scene; identical specs give identical output.
pub fn generate(spec: &SynthSpec) -> Result<(ScatteringImage, LabelMap)> {
    spec.validate()?;
    let c = spec.classes.len();
    let (br, bc) = (spec.height.div_ceil(spec.block), spec.width.div_ceil(spec.block));
    let mut block_class: Vec<u16> = (0..br * bc).map(|i| (i % c + 1) as u16).collect();
    block_class.shuffle(&mut rng_from_seed(derive_seed(spec.seed, "synth/layout")));

    let mut rng = rng_from_seed(derive_seed(spec.seed, "synth/pixels"));
    let n = spec.height * spec.width;
    let (mut hh, mut hv, mut vv, mut labels) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for r in 0..spec.height {
        for col in 0..spec.width {
            let label = block_class[(r / spec.block) * bc + col / spec.block];
            let m = &spec.classes[label as usize - 1];
            let (z1, z2, z3) = (circular(&mut rng), circular(&mut rng), circular(&mut rng));
            let (a, b) = (m.hh_power.sqrt(), m.vv_power.sqrt());
            let tail = (1.0 - m.rho.norm_sqr()).max(0.0).sqrt();
            hh.push(z1 * a);
            vv.push((z1 * m.rho.conj() + z2 * tail) * b);
            hv.push(z3 * m.hv_power.sqrt());
            labels.push(label);
        }
    }
    let names = spec.classes.iter().map(|m| m.name.clone()).collect();
    Ok((ScatteringImage::new(spec.height, spec.width, hh, hv, vv)?, LabelMap::new(spec.height, spec.width, names, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polsar::{coherency_matrix, pauli_vector};

    #[test]
    fn spec_text_round_trip() {
        let s = SynthSpec::three_class(4);
        assert_eq!(SynthSpec::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn spec_rejects_bad_input() {
        assert!(SynthSpec::parse("class = a 1 1 1 0 0\n").is_err());
        assert!(SynthSpec::parse("class = a 1 1 1 0 0\nclass = b -1 1 1 0 0\n").is_err());
        assert!(SynthSpec::parse("class = a 1 1 1 0 0\nclass = b 1 1 1 2 0\n").is_err());
        assert!(SynthSpec::parse("colour = red\n").is_err());
        assert!(SynthSpec::parse("height = 4\nwidth = 4\nblock = 4\nclass = a 1 1 1 0 0\nclass = b 1 1 1 0 0\n").is_err());
    }

    #[test]
    fn deterministic_and_all_classes_present() {
        let spec = SynthSpec::three_class(11);
        let (s1, l1) = generate(&spec).unwrap();
        let (s2, l2) = generate(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert!(l1.class_counts().iter().all(|&n| n > 1000));
        let (s3, _) = generate(&SynthSpec::three_class(12)).unwrap();
        assert_ne!(s1.hh, s3.hh);
    }

    #[test]
    fn class_means_recoverable_from_t11() {
        let spec = SynthSpec::three_class(5);
        let (s, labels) = generate(&spec).unwrap();
        let t = coherency_matrix(&pauli_vector(&s).unwrap(), 1).unwrap();
        for (k, model) in spec.classes.iter().enumerate() {
            let vals: Vec<(f64, f64)> =
                (0..t.len()).filter(|&i| labels.labels[i] as usize == k + 1).map(|i| (t.t11[i], t.t33[i])).collect();
            assert!(vals.len() >= 1000);
            let n = vals.len() as f64;
            let m11 = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let m33 = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let e11 = model.expected_t11();
            assert!((m11 - e11).abs() / e11 < 0.05, "{}: {m11} vs {e11}", model.name);
            assert!((m33 - model.expected_t33()).abs() / model.expected_t33() < 0.1, "{}", model.name);
        }
    }
}
