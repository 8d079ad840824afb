//! PolSAR preprocessing: Pauli vectors, multilooked coherency matrices, the
//! amplitude/phase and real/imaginary channel forms, normalization, patch
//! extraction and per-class train sampling.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, rng_from_seed, Tensor};

/// Single-look scattering matrices under reciprocity (`S_HV == S_VH`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringImage {
    pub height: usize,
    pub width: usize,
    pub hh: Vec<Complex64>,
    pub hv: Vec<Complex64>,
    pub vv: Vec<Complex64>,
}

impl ScatteringImage {
    pub fn new(height: usize, width: usize, hh: Vec<Complex64>, hv: Vec<Complex64>, vv: Vec<Complex64>) -> Result<Self> {
        let n = height * width;
        if n == 0 || hh.len() != n || hv.len() != n || vv.len() != n {
            return Err(Error::Data(format!("scattering planes do not match {height}x{width}")));
        }
        Ok(ScatteringImage { height, width, hh, hv, vv })
    }
}

/// Per-pixel Pauli scattering vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliField {
    pub height: usize,
    pub width: usize,
    pub k: Vec<[Complex64; 3]>,
}

/// `k = (S_HH + S_VV, S_HH - S_VV, 2 S_HV) / sqrt(2)` at every pixel.
pub fn pauli_vector(s: &ScatteringImage) -> Result<PauliField> {
    let mut k = Vec::with_capacity(s.hh.len());
    for i in 0..s.hh.len() {
        let (hh, hv, vv) = (s.hh[i], s.hv[i], s.vv[i]);
        if !(hh.is_finite() && hv.is_finite() && vv.is_finite()) {
            return Err(Error::Data(format!("non-finite scattering value at pixel ({}, {})", i / s.width, i % s.width)));
        }
        k.push([(hh + vv) * FRAC_1_SQRT_2, (hh - vv) * FRAC_1_SQRT_2, hv * (2.0 * FRAC_1_SQRT_2)]);
    }
    Ok(PauliField { height: s.height, width: s.width, k })
}

/// Upper triangle of the 3x3 Hermitian coherency matrix at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherencyImage {
    pub height: usize,
    pub width: usize,
    pub t11: Vec<f64>,
    pub t22: Vec<f64>,
    pub t33: Vec<f64>,
    pub t12: Vec<Complex64>,
    pub t13: Vec<Complex64>,
    pub t23: Vec<Complex64>,
}

impl CoherencyImage {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First pixel violating non-negative diagonals or the pairwise Cauchy-Schwarz
    /// bound `|T_ij|^2 <= T_ii T_jj` (relative tolerance `tol`).
    pub fn find_psd_violation(&self, tol: f64) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let (a, b, c) = (self.t11[i], self.t22[i], self.t33[i]);
            let bad = |off: Complex64, x: f64, y: f64| off.norm_sqr() > x * y + tol * (x * y).abs().max(f64::MIN_POSITIVE);
            a < 0.0 || b < 0.0 || c < 0.0 || bad(self.t12[i], a, b) || bad(self.t13[i], a, c) || bad(self.t23[i], b, c)
        })
    }
}

/// Boxcar average of `k k^H` over a `window x window` neighbourhood with edge replication.
pub fn coherency_matrix(field: &PauliField, window: usize) -> Result<CoherencyImage> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("multilook window must be odd and positive, got {window}")));
    }
    let (h, w) = (field.height, field.width);
    let n = h * w;
    let r = (window / 2) as isize;
    let norm = 1.0 / (window * window) as f64;
    let mut out = CoherencyImage {
        height: h,
        width: w,
        t11: Vec::with_capacity(n),
        t22: Vec::with_capacity(n),
        t33: Vec::with_capacity(n),
        t12: Vec::with_capacity(n),
        t13: Vec::with_capacity(n),
        t23: Vec::with_capacity(n),
    };
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = [0.0f64; 3];
            let mut off = [Complex64::new(0.0, 0.0); 3];
            for di in -r..=r {
                for dj in -r..=r {
                    let k = &field.k[clamp(i + di, h) * w + clamp(j + dj, w)];
                    acc[0] += k[0].norm_sqr();
                    acc[1] += k[1].norm_sqr();
                    acc[2] += k[2].norm_sqr();
                    off[0] += k[0] * k[1].conj();
                    off[1] += k[0] * k[2].conj();
                    off[2] += k[1] * k[2].conj();
                }
            }
            out.t11.push(acc[0] * norm);
            out.t22.push(acc[1] * norm);
            out.t33.push(acc[2] * norm);
            out.t12.push(off[0] * norm);
            out.t13.push(off[1] * norm);
            out.t23.push(off[2] * norm);
        }
    }
    Ok(out)
}

/// Modulus `sqrt(a^2 + b^2)`.
pub fn amplitude(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Argument of `a + bi` in `(-pi, pi]`, case by case: `atan(b/a)` for `a > 0`,
/// `+-pi/2` on the imaginary axis, `atan(b/a) +- pi` in the left half plane (sign of
/// `b`), and `pi` on the negative real axis. The origin maps to 0.
pub fn phase(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        (b / a).atan()
    } else if a == 0.0 {
        if b > 0.0 {
            FRAC_PI_2
        } else if b < 0.0 {
            -FRAC_PI_2
        } else {
            0.0
        }
    } else if b > 0.0 {
        (b / a).atan() + PI
    } else if b < 0.0 {
        (b / a).atan() - PI
    } else {
        PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubeForm {
    /// `T11, T22, T33, |T12|, |T13|, |T23|, arg T12, arg T13, arg T23`
    AmpPhase,
    /// `T11, T22, T33, Re T12, Im T12, Re T13, Im T13, Re T23, Im T23`
    RealImag,
}

impl CubeForm {
    pub fn plane_names(self) -> [&'static str; 9] {
        match self {
            CubeForm::AmpPhase => ["T11", "T22", "T33", "AmpT12", "AmpT13", "AmpT23", "PhaT12", "PhaT13", "PhaT23"],
            CubeForm::RealImag => COHERENCY_PLANES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CubeForm::AmpPhase => "amp_phase",
            CubeForm::RealImag => "real_imag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "amp_phase" => Ok(CubeForm::AmpPhase),
            "real_imag" => Ok(CubeForm::RealImag),
            other => Err(Error::Config(format!("unknown input form `{other}` (amp_phase | real_imag)"))),
        }
    }

    /// Recognizes a cube form from its plane names.
    pub fn from_planes(names: &[String]) -> Option<Self> {
        [CubeForm::AmpPhase, CubeForm::RealImag]
            .into_iter()
            .find(|f| names.len() == 9 && names.iter().zip(f.plane_names()).all(|(a, b)| a == b))
    }
}

pub const COHERENCY_PLANES: [&str; 9] = ["T11", "T22", "T33", "ReT12", "ImT12", "ReT13", "ImT13", "ReT23", "ImT23"];
pub const SCATTERING_PLANES: [&str; 6] = ["ReSHH", "ImSHH", "ReSHV", "ImSHV", "ReSVV", "ImSVV"];

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Real `C x H x W` raster fed to the networks, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCube {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub form: CubeForm,
    pub data: Vec<f32>,
    /// Statistics applied by [`normalize`], if any.
    pub stats: Option<ChannelStats>,
}

impl ChannelCube {
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }
}

fn cube_from_planes(t: &CoherencyImage, form: CubeForm, planes: [Vec<f64>; 9]) -> ChannelCube {
    let mut data = Vec::with_capacity(9 * t.len());
    for p in planes {
        data.extend(p.into_iter().map(|v| v as f32));
    }
    ChannelCube { height: t.height, width: t.width, channels: 9, form, data, stats: None }
}

/// Six amplitude channels followed by three phase channels.
pub fn to_amplitude_phase(t: &CoherencyImage) -> ChannelCube {
    let amp = |v: &[Complex64]| v.iter().map(|z| amplitude(z.re, z.im)).collect::<Vec<_>>();
    let pha = |v: &[Complex64]| v.iter().map(|z| phase(z.re, z.im)).collect::<Vec<_>>();
    cube_from_planes(
        t,
        CubeForm::AmpPhase,
        [
            t.t11.clone(),
            t.t22.clone(),
            t.t33.clone(),
            amp(&t.t12),
            amp(&t.t13),
            amp(&t.t23),
            pha(&t.t12),
            pha(&t.t13),
            pha(&t.t23),
        ],
    )
}

/// Diagonal entries followed by interleaved real/imaginary parts of the off-diagonals.
pub fn to_real_imag(t: &CoherencyImage) -> ChannelCube {
    let re = |v: &[Complex64]| v.iter().map(|z| z.re).collect::<Vec<_>>();
    let im = |v: &[Complex64]| v.iter().map(|z| z.im).collect::<Vec<_>>();
    cube_from_planes(
        t,
        CubeForm::RealImag,
        [t.t11.clone(), t.t22.clone(), t.t33.clone(), re(&t.t12), im(&t.t12), re(&t.t13), im(&t.t13), re(&t.t23), im(&t.t23)],
    )
}

/// Mean and population standard deviation of every channel over `pixels`
/// (all pixels when `pixels` is empty).
pub fn channel_stats(cube: &ChannelCube, pixels: &[(usize, usize)]) -> ChannelStats {
    let mut mean = Vec::with_capacity(cube.channels);
    let mut std = Vec::with_capacity(cube.channels);
    for c in 0..cube.channels {
        let values: Vec<f64> = if pixels.is_empty() {
            cube.plane(c).iter().map(|&v| v as f64).collect()
        } else {
            pixels.iter().map(|&(r, col)| cube.at(c, r, col) as f64).collect()
        };
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    ChannelStats { mean, std }
}

/// Per-channel z-scoring. Without `stats`, statistics come from `train_pixels`
/// (or the whole cube if that is empty). Channels with zero spread are only
/// centred.
pub fn normalize(cube: &ChannelCube, stats: Option<&ChannelStats>, train_pixels: &[(usize, usize)]) -> Result<ChannelCube> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != cube.channels || s.std.len() != cube.channels {
                return Err(Error::Data(format!(
                    "normalization stats cover {} channels, cube has {}",
                    s.mean.len(),
                    cube.channels
                )));
            }
            s.clone()
        }
        None => channel_stats(cube, train_pixels),
    };
    let n = cube.height * cube.width;
    let mut data = Vec::with_capacity(cube.data.len());
    for c in 0..cube.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        if s == 0.0 {
            log::warn!("channel {c} has zero standard deviation; leaving it unscaled");
        }
        let scale = if s > 0.0 { 1.0 / s } else { 1.0 };
        data.extend(cube.data[c * n..(c + 1) * n].iter().map(|&v| ((v as f64 - m) * scale) as f32));
    }
    Ok(ChannelCube { data, stats: Some(stats), ..cube.clone() })
}

/// Per-pixel class map; 0 is unlabeled, classes are `1..=classes.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<String>, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!("label map has {} entries, expected {height}x{width}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > classes.len()) {
            return Err(Error::Data(format!("label {bad} exceeds class count {}", classes.len())));
        }
        Ok(LabelMap { height, width, classes, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Labeled pixel count per class, index 0 being class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    AllLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSample {
    pub row: usize,
    pub col: usize,
    /// Class id in `1..=c`.
    pub label: u16,
}

/// Patches centred on labeled pixels. Patch tensors are cut lazily from the shared
/// cube with edge replication, so large scenes do not materialize every window.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub cube: Arc<ChannelCube>,
    pub size: usize,
    pub samples: Vec<PatchSample>,
    pub split: SplitTag,
    pub num_classes: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `C x size x size` patch of sample `i`.
    pub fn patch(&self, i: usize) -> Tensor<f32> {
        let s = self.samples[i];
        let mut out = Vec::with_capacity(self.cube.channels * self.size * self.size);
        write_patch(&self.cube, s.row, s.col, self.size, &mut out);
        Tensor::new(&[self.cube.channels, self.size, self.size], out).expect("patch dims")
    }

    /// `N x C x size x size` batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let centers: Vec<(usize, usize)> = indices.iter().map(|&i| (self.samples[i].row, self.samples[i].col)).collect();
        patch_batch(&self.cube, &centers, self.size)
    }

    /// 0-based class indices of the given samples.
    pub fn class_indices(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label as usize - 1).collect()
    }

    pub fn centers(&self) -> Vec<(usize, usize)> {
        self.samples.iter().map(|s| (s.row, s.col)).collect()
    }

    fn with_samples(&self, samples: Vec<PatchSample>, split: SplitTag) -> PatchSet {
        PatchSet { cube: Arc::clone(&self.cube), size: self.size, samples, split, num_classes: self.num_classes }
    }
}

/// Appends the edge-replicated `size x size` window whose centre is `(row, col)`; for
/// even sizes the centre is the lower-right of the middle four pixels.
fn write_patch(cube: &ChannelCube, row: usize, col: usize, size: usize, out: &mut Vec<f32>) {
    let half = (size / 2) as isize;
    let (h, w) = (cube.height as isize, cube.width as isize);
    for c in 0..cube.channels {
        let plane = cube.plane(c);
        for di in 0..size as isize {
            let r = (row as isize + di - half).clamp(0, h - 1) as usize;
            let line = &plane[r * cube.width..(r + 1) * cube.width];
            for dj in 0..size as isize {
                let cc = (col as isize + dj - half).clamp(0, w - 1) as usize;
                out.push(line[cc]);
            }
        }
    }
}

/// `N x C x size x size` batch of patches centred on `centers`.
pub fn patch_batch(cube: &ChannelCube, centers: &[(usize, usize)], size: usize) -> Tensor<f32> {
    let mut out = Vec::with_capacity(centers.len() * cube.channels * size * size);
    for &(r, c) in centers {
        write_patch(cube, r, c, size, &mut out);
    }
    Tensor::new(&[centers.len(), cube.channels, size, size], out).expect("non-empty batch")
}

/// One patch per labeled pixel, in row-major order of the centre pixel.
pub fn extract_patches(cube: Arc<ChannelCube>, labels: &LabelMap, size: usize) -> Result<PatchSet> {
    if size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if (labels.height, labels.width) != (cube.height, cube.width) {
        return Err(Error::Data(format!(
            "label map is {}x{}, cube is {}x{}",
            labels.height, labels.width, cube.height, cube.width
        )));
    }
    let samples: Vec<PatchSample> = (0..labels.height)
        .flat_map(|r| (0..labels.width).map(move |c| (r, c)))
        .filter_map(|(r, c)| {
            let l = labels.get(r, c);
            (l > 0).then_some(PatchSample { row: r, col: c, label: l })
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::Data("label map has no labeled pixels".into()));
    }
    Ok(PatchSet { cube, size, samples, split: SplitTag::AllLabeled, num_classes: labels.num_classes() })
}

/// Number of `size x size` windows a plain sliding sweep visits (no centring or padding).
pub fn sliding_window_count(height: usize, width: usize, size: usize, stride: usize) -> usize {
    if size > height || size > width || stride == 0 {
        return 0;
    }
    ((height - size) / stride + 1) * ((width - size) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Every class must offer at least `per_class` samples.
    Strict,
    /// Classes with fewer samples contribute all they have.
    CapAtAvailable,
}

impl SplitPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(SplitPolicy::Strict),
            "cap" => Ok(SplitPolicy::CapAtAvailable),
            other => Err(Error::Config(format!("unknown split policy `{other}` (strict | cap)"))),
        }
    }
}

/// Draws `per_class` training samples per class uniformly without replacement; the
/// test set is every labeled sample. Training samples keep row-major order.
pub fn sample_split(patches: &PatchSet, per_class: usize, seed: u64, policy: SplitPolicy) -> Result<(PatchSet, PatchSet)> {
    let c = patches.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in patches.samples.iter().enumerate() {
        by_class[s.label as usize - 1].push(i);
    }
    let short: Vec<String> = by_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.len() < per_class)
        .map(|(k, v)| format!("class {} has {}", k + 1, v.len()))
        .collect();
    if policy == SplitPolicy::Strict && !short.is_empty() {
        return Err(Error::Data(format!("fewer than {per_class} labeled samples: {}", short.join(", "))));
    }
    let mut chosen = Vec::new();
    for (k, members) in by_class.iter().enumerate() {
        let take = per_class.min(members.len());
        if take < per_class {
            log::info!("class {} capped at {take} training samples", k + 1);
        }
        let mut rng = rng_from_seed(derive_seed(seed, &format!("split/class{}", k + 1)));
        let picks = rand::seq::index::sample(&mut rng, members.len(), take);
        chosen.extend(picks.iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    let train = chosen.iter().map(|&i| patches.samples[i]).collect();
    Ok((patches.with_samples(train, SplitTag::Train), patches.with_samples(patches.samples.clone(), SplitTag::Test)))
}
