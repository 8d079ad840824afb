//! On-disk containers: `PTC1` float rasters and `PLBL1` label maps.

use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::polsar::{
    ChannelCube, ChannelStats, CoherencyImage, CubeForm, LabelMap, ScatteringImage, COHERENCY_PLANES, SCATTERING_PLANES,
};
use crate::tensor::{atomic_write, read_all, ByteReader};

const RASTER_MAGIC: &[u8] = b"PTC1";
const LABEL_MAGIC: &[u8] = b"PLBL1";

/// Named float32 planes sharing one `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<(String, Vec<f32>)>,
}

impl Raster {
    pub fn plane_names(&self) -> Vec<String> {
        self.planes.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn plane(&self, name: &str) -> Option<&[f32]> {
        self.planes.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f32]> {
        self.plane(name).ok_or_else(|| Error::Data(format!("raster has no `{name}` plane")))
    }

    pub fn is_scattering(&self) -> bool {
        SCATTERING_PLANES.iter().all(|n| self.plane(n).is_some())
    }

    pub fn is_coherency(&self) -> bool {
        COHERENCY_PLANES.iter().all(|n| self.plane(n).is_some())
    }

    pub fn to_scattering(&self) -> Result<ScatteringImage> {
        let mut cplx = Vec::new();
        for pair in SCATTERING_PLANES.chunks(2) {
            let (re, im) = (self.require(pair[0])?, self.require(pair[1])?);
            cplx.push(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a as f64, b as f64)).collect::<Vec<_>>());
        }
        let vv = cplx.pop().unwrap();
        let hv = cplx.pop().unwrap();
        let hh = cplx.pop().unwrap();
        ScatteringImage::new(self.height, self.width, hh, hv, vv)
    }

    pub fn to_coherency(&self) -> Result<CoherencyImage> {
        let real = |n: &str| -> Result<Vec<f64>> { Ok(self.require(n)?.iter().map(|&v| v as f64).collect()) };
        let cplx = |re: &str, im: &str| -> Result<Vec<Complex64>> {
            let (a, b) = (self.require(re)?, self.require(im)?);
            Ok(a.iter().zip(b).map(|(&x, &y)| Complex64::new(x as f64, y as f64)).collect())
        };
        let t = CoherencyImage {
            height: self.height,
            width: self.width,
            t11: real("T11")?,
            t22: real("T22")?,
            t33: real("T33")?,
            t12: cplx("ReT12", "ImT12")?,
            t13: cplx("ReT13", "ImT13")?,
            t23: cplx("ReT23", "ImT23")?,
        };
        let all = t.t11.iter().chain(&t.t22).chain(&t.t33).all(|v| v.is_finite())
            && t.t12.iter().chain(&t.t13).chain(&t.t23).all(|z| z.is_finite());
        if !all {
            return Err(Error::Data("coherency raster contains non-finite values".into()));
        }
        Ok(t)
    }

    pub fn from_coherency(t: &CoherencyImage) -> Raster {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let re = |v: &[Complex64]| v.iter().map(|z| z.re as f32).collect::<Vec<_>>();
        let im = |v: &[Complex64]| v.iter().map(|z| z.im as f32).collect::<Vec<_>>();
        let planes =
            vec![f(&t.t11), f(&t.t22), f(&t.t33), re(&t.t12), im(&t.t12), re(&t.t13), im(&t.t13), re(&t.t23), im(&t.t23)];
        Raster { height: t.height, width: t.width, planes: COHERENCY_PLANES.iter().map(|n| n.to_string()).zip(planes).collect() }
    }

    pub fn from_scattering(s: &ScatteringImage) -> Raster {
        let re = |v: &[Complex64]| v.iter().map(|z| z.re as f32).collect::<Vec<_>>();
        let im = |v: &[Complex64]| v.iter().map(|z| z.im as f32).collect::<Vec<_>>();
        let planes = vec![re(&s.hh), im(&s.hh), re(&s.hv), im(&s.hv), re(&s.vv), im(&s.vv)];
        Raster { height: s.height, width: s.width, planes: SCATTERING_PLANES.iter().map(|n| n.to_string()).zip(planes).collect() }
    }

    pub fn from_cube(cube: &ChannelCube) -> Raster {
        Raster {
            height: cube.height,
            width: cube.width,
            planes: cube.form.plane_names().iter().enumerate().map(|(c, n)| (n.to_string(), cube.plane(c).to_vec())).collect(),
        }
    }

    /// Interprets the raster as a channel cube when its planes match one of the two forms.
    pub fn to_cube(&self) -> Result<ChannelCube> {
        let form = CubeForm::from_planes(&self.plane_names())
            .ok_or_else(|| Error::Data(format!("planes {:?} are not an amp_phase or real_imag cube", self.plane_names())))?;
        let data: Vec<f32> = self.planes.iter().flat_map(|(_, p)| p.iter().copied()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("cube contains non-finite values".into()));
        }
        Ok(ChannelCube { height: self.height, width: self.width, channels: 9, form, data, stats: None })
    }

    /// Layout: magic, u32 H, u32 W, u8 plane count, then per plane a u8 name length and
    /// the utf-8 name, then the planes as little-endian f32 in row-major order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.planes.len() > u8::MAX as usize {
            return Err(Error::Data(format!("{} planes exceed the PTC1 limit of 255", self.planes.len())));
        }
        let mut out = Vec::with_capacity(17 + self.planes.len() * (16 + 4 * self.height * self.width));
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(self.planes.len() as u8);
        for (name, _) in &self.planes {
            if name.len() > u8::MAX as usize {
                return Err(Error::Data(format!("plane name `{name}` is longer than 255 bytes")));
            }
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
        }
        for (name, plane) in &self.planes {
            if plane.len() != self.height * self.width {
                return Err(Error::Data(format!("plane `{name}` has {} values", plane.len())));
            }
            for v in plane {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Raster> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(RASTER_MAGIC)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        if height == 0 || width == 0 {
            return Err(Error::Parse { offset: 4, msg: format!("empty raster {height}x{width}") });
        }
        let count = r.u8()? as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u8()? as usize;
            let at = r.position();
            let name = r.utf8(len)?.to_string();
            if names.contains(&name) {
                return Err(Error::Parse { offset: at, msg: format!("duplicate plane `{name}`") });
            }
            names.push(name);
        }
        let n = height * width;
        let mut planes = Vec::with_capacity(count);
        for name in names {
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            planes.push((name, data));
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes after last plane"));
        }
        Ok(Raster { height, width, planes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Raster> {
        Raster::from_bytes(&read_all(path)?)
    }
}

impl LabelMap {
    /// Layout: magic, u32 H, u32 W, u16 class count, null-terminated class names,
    /// then one little-endian u16 per pixel.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.classes.len() > u16::MAX as usize {
            return Err(Error::Data("too many classes for PLBL1".into()));
        }
        let mut out = Vec::with_capacity(15 + 2 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u16).to_le_bytes());
        for name in &self.classes {
            if name.as_bytes().contains(&0) {
                return Err(Error::Data(format!("class name {name:?} contains a NUL byte")));
            }
            out.extend_from_slice(name.as_bytes());
            out.push(0);
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LabelMap> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(LABEL_MAGIC)?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let c = r.u16()? as usize;
        let mut classes = Vec::with_capacity(c);
        for _ in 0..c {
            let start = r.position();
            let rest = &bytes[start..];
            let len = rest.iter().position(|&b| b == 0).ok_or_else(|| r.error("unterminated class name"))?;
            classes.push(r.utf8(len)?.to_string());
            r.take(1)?;
        }
        let mut labels = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            let at = r.position();
            let l = r.u16()?;
            if l as usize > c {
                return Err(Error::Parse { offset: at, msg: format!("label {l} exceeds class count {c}") });
            }
            labels.push(l);
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes after label data"));
        }
        LabelMap::new(height, width, classes, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<LabelMap> {
        LabelMap::from_bytes(&read_all(path)?)
    }
}

/// Text sidecar with one `channel mean std` line per channel.
pub fn stats_to_text(stats: &ChannelStats) -> String {
    let mut s = String::from("# channel mean std\n");
    for (c, (m, d)) in stats.mean.iter().zip(&stats.std).enumerate() {
        s.push_str(&format!("{c} {m:e} {d:e}\n"));
    }
    s
}

pub fn stats_from_text(text: &str) -> Result<ChannelStats> {
    let mut stats = ChannelStats { mean: Vec::new(), std: Vec::new() };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (f.len() == 3)
            .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<f64>().ok()?, f[2].parse::<f64>().ok()?)))
            .flatten();
        match parsed {
            Some((c, m, d)) if c == stats.mean.len() => {
                stats.mean.push(m);
                stats.std.push(d);
            }
            _ => return Err(Error::Config(format!("stats line {}: cannot parse `{line}`", ln + 1))),
        }
    }
    Ok(stats)
}
