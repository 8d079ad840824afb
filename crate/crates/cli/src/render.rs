//! Class palettes and PNG rendering of label maps.

use std::collections::HashSet;

use polsar_mcnn::{Error, Result};

const BASE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Colour per class id; id 0 (unlabeled) is black and every class colour is distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    colors: Vec<[u8; 3]>,
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

impl ClassPalette {
    pub fn new(classes: usize) -> ClassPalette {
        let mut colors = vec![[0u8; 3]];
        let mut used: HashSet<[u8; 3]> = colors.iter().copied().collect();
        let mut k = 0u64;
        while colors.len() <= classes {
            let candidate = if (k as usize) < BASE.len() {
                BASE[k as usize]
            } else {
                let h = (k as f64 * 0.618_033_988_749_895).fract();
                let v = 0.55 + 0.45 * ((k / 7) % 4) as f64 / 3.0;
                hsv(h, 0.35 + 0.65 * ((k % 5) as f64 / 4.0), v)
            };
            if used.insert(candidate) {
                colors.push(candidate);
            }
            k += 1;
        }
        ClassPalette { colors }
    }

    pub fn classes(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn color(&self, id: u16) -> Result<[u8; 3]> {
        self.colors
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("class id {id} exceeds the palette of {} classes", self.classes())))
    }
}

/// RGB pixels of a label map. With `ground_truth`, pixels unlabeled there are black.
pub fn colorize(labels: &[u16], palette: &ClassPalette, ground_truth: Option<&[u16]>) -> Result<Vec<u8>> {
    if let Some(gt) = ground_truth {
        if gt.len() != labels.len() {
            return Err(Error::Data(format!("ground truth has {} pixels, map {}", gt.len(), labels.len())));
        }
    }
    let mut rgb = Vec::with_capacity(labels.len() * 3);
    for (i, &l) in labels.iter().enumerate() {
        let shown = match ground_truth {
            Some(gt) if gt[i] == 0 => 0,
            _ => l,
        };
        rgb.extend_from_slice(&palette.color(shown)?);
    }
    Ok(rgb)
}

/// Encodes 8-bit RGB pixels as PNG bytes.
pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Data(format!("{} bytes do not form a {width}x{height} RGB image", rgb.len())));
    }
    let png_err = |e: png::EncodingError| Error::Data(format!("png encoding failed: {e}"));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(rgb).map_err(png_err)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_colors_are_distinct() {
        for c in [1, 3, 15, 16, 17, 60, 300] {
            let p = ClassPalette::new(c);
            assert_eq!(p.classes(), c);
            assert_eq!(p.color(0).unwrap(), [0, 0, 0]);
            let set: HashSet<[u8; 3]> = (0..=c as u16).map(|i| p.color(i).unwrap()).collect();
            assert_eq!(set.len(), c + 1);
        }
        assert!(ClassPalette::new(3).color(4).is_err());
    }

    #[test]
    fn overlay_blacks_out_unlabeled_pixels() {
        let p = ClassPalette::new(2);
        let rgb = colorize(&[1, 2, 2], &p, Some(&[1, 0, 2])).unwrap();
        assert_eq!(&rgb[0..3], &p.color(1).unwrap());
        assert_eq!(&rgb[3..6], &[0, 0, 0]);
        assert_eq!(&rgb[6..9], &p.color(2).unwrap());
        assert!(colorize(&[1, 2], &p, Some(&[1])).is_err());
    }

    #[test]
    fn png_header_carries_dimensions() {
        let bytes = encode_png(5, 3, &[7u8; 45]).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let reader = decoder.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (5, 3));
        assert!(encode_png(5, 3, &[0u8; 44]).is_err());
    }
}
