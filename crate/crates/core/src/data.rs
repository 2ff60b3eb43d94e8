//! Synthetic segmentation data and netpbm (PPM P6 / PGM P5) I/O.
//!
//! Samples are class-0 backgrounds with a few random rectangles and
//! circles, each carrying a class-correlated palette color plus per-pixel
//! uniform noise. Generation is deterministic per (seed, index).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Label value that evaluation ignores.
pub const IGNORE_INDEX: u8 = 255;

/// Fixed 20-color palette for class colors and overlays.
pub const PALETTE: [[u8; 3]; 20] = [
    [40, 40, 40],
    [200, 40, 40],
    [40, 180, 40],
    [50, 80, 220],
    [220, 200, 40],
    [170, 40, 200],
    [40, 200, 200],
    [240, 130, 20],
    [120, 70, 20],
    [230, 120, 170],
    [90, 200, 120],
    [130, 130, 230],
    [180, 90, 90],
    [90, 90, 30],
    [30, 120, 90],
    [200, 170, 120],
    [110, 30, 110],
    [160, 220, 220],
    [70, 50, 160],
    [220, 220, 220],
];

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Image {
        Image {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// (1, 3, H, W) tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        let plane = self.height * self.width;
        {
            let d = t.data_mut();
            for y in 0..self.height {
                for x in 0..self.width {
                    let p = (y * self.width + x) * 3;
                    for c in 0..3 {
                        d[c * plane + y * self.width + x] = self.data[p + c] as f64 / 255.0;
                    }
                }
            }
        }
        t
    }
}

/// Per-pixel class indices; 255 = ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// One image/label pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationSample {
    pub image: Image,
    pub label: LabelMap,
}

impl SegmentationSample {
    /// Dims equal; labels < num_classes or the ignore index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.height != self.label.height || self.image.width != self.label.width {
            return Err(Error::ShapeMismatch {
                context: "segmentation sample",
                dimension: "label dims",
                expected: self.image.height * self.image.width,
                found: self.label.height * self.label.width,
            });
        }
        if let Some(bad) = self
            .label
            .data
            .iter()
            .find(|v| **v != IGNORE_INDEX && **v as usize >= num_classes)
        {
            return Err(Error::InvalidGeometry {
                context: "segmentation sample",
                message: format!("label {bad} out of range for {num_classes} classes"),
            });
        }
        Ok(())
    }
}

enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Circle { cy: isize, cx: isize, r: isize },
}

/// Deterministic synthetic dataset: per sample, 2-5 random shapes of
/// classes 1..num_classes-1 over a class-0 background.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    hw: (usize, usize),
    num_classes: usize,
) -> Result<Vec<SegmentationSample>> {
    synth_dataset_range(seed, 0, count, hw, num_classes)
}

/// Samples at indices [start, start+count); disjoint index ranges give
/// disjoint (e.g. held-out) sets under the same seed.
pub fn synth_dataset_range(
    seed: u64,
    start: usize,
    count: usize,
    hw: (usize, usize),
    num_classes: usize,
) -> Result<Vec<SegmentationSample>> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig {
            field: "num_classes".into(),
            message: format!("synthetic data needs >= 2 classes, got {num_classes}"),
        });
    }
    if num_classes > PALETTE.len() {
        return Err(Error::InvalidConfig {
            field: "num_classes".into(),
            message: format!("palette supports at most {} classes", PALETTE.len()),
        });
    }
    let (h, w) = hw;
    if h < 8 || w < 8 {
        return Err(Error::InvalidConfig {
            field: "hw".into(),
            message: format!("images must be at least 8x8, got {h}x{w}"),
        });
    }
    (start..start + count)
        .map(|i| synth_sample(seed, i as u64, h, w, num_classes))
        .collect()
}

fn synth_sample(seed: u64, index: u64, h: usize, w: usize, num_classes: usize) -> Result<SegmentationSample> {
    let mut rng = Rng::from_seed_index(seed, index.wrapping_add(0x5a17));
    let shape_count = rng.range(2, 5);
    synth_sample_with_shapes(&mut rng, h, w, num_classes, shape_count)
}

fn synth_sample_with_shapes(
    rng: &mut Rng,
    h: usize,
    w: usize,
    num_classes: usize,
    shape_count: usize,
) -> Result<SegmentationSample> {
    let mut label = LabelMap::new(h, w);
    for _ in 0..shape_count {
        let class = rng.range(1, num_classes - 1) as u8;
        let shape = if rng.next_f64() < 0.5 {
            let sh = rng.range(h / 6, h / 2);
            let sw = rng.range(w / 6, w / 2);
            let y0 = rng.below(h - sh + 1);
            let x0 = rng.below(w - sw + 1);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        } else {
            let r = rng.range(h / 8, h / 3) as isize;
            Shape::Circle {
                cy: rng.below(h) as isize,
                cx: rng.below(w) as isize,
                r,
            }
        };
        match shape {
            Shape::Rect { y0, x0, y1, x1 } => {
                for y in y0..y1 {
                    for x in x0..x1 {
                        label.set(y, x, class);
                    }
                }
            }
            Shape::Circle { cy, cx, r } => {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                            label.set(y as usize, x as usize, class);
                        }
                    }
                }
            }
        }
    }

    let mut image = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let class = label.get(y, x) as usize;
            let base = PALETTE[class];
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let noise = rng.range(0, 20) as i32 - 10;
                *v = (base[c] as i32 + noise).clamp(0, 255) as u8;
            }
            image.set(y, x, rgb);
        }
    }
    let sample = SegmentationSample { image, label };
    sample.validate(num_classes)?;
    Ok(sample)
}

// netpbm parsing: header fields are ASCII integers separated by
// whitespace; '#' starts a comment running to end of line; exactly one
// whitespace byte separates maxval from the binary payload.

fn parse_header(bytes: &[u8], magic: &[u8; 2], origin: &str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            origin,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(origin, "truncated header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if start == pos {
            return Err(Error::format(origin, "expected integer in header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::format(origin, "header integer out of range"))?;
    }
    // single whitespace byte before payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(origin, "expected whitespace before payload")),
    }
    if fields[2] != 255 {
        return Err(Error::format(
            origin,
            format!("maxval must be 255, got {}", fields[2]),
        ));
    }
    Ok((fields[0], fields[1], pos))
}

/// Read a binary P6 image.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let origin = path.display().to_string();
    let bytes = read_all(path)?;
    let (width, height, offset) = parse_header(&bytes, b"P6", &origin)?;
    let need = width * height * 3;
    let payload = bytes
        .get(offset..offset + need)
        .ok_or_else(|| Error::format(&origin, "payload shorter than header promises"))?;
    Ok(Image {
        height,
        width,
        data: payload.to_vec(),
    })
}

/// Write a binary P6 image.
pub fn save_ppm(path: &Path, image: &Image) -> Result<()> {
    let origin = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&origin, e))?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| Error::io(&origin, e))?;
    f.write_all(&image.data).map_err(|e| Error::io(&origin, e))
}

/// Read a binary P5 label map.
pub fn load_pgm(path: &Path) -> Result<LabelMap> {
    let origin = path.display().to_string();
    let bytes = read_all(path)?;
    let (width, height, offset) = parse_header(&bytes, b"P5", &origin)?;
    let need = width * height;
    let payload = bytes
        .get(offset..offset + need)
        .ok_or_else(|| Error::format(&origin, "payload shorter than header promises"))?;
    Ok(LabelMap {
        height,
        width,
        data: payload.to_vec(),
    })
}

/// Write a binary P5 label map.
pub fn save_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    let origin = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&origin, e))?;
    write!(f, "P5\n{} {}\n255\n", label.width, label.height).map_err(|e| Error::io(&origin, e))?;
    f.write_all(&label.data).map_err(|e| Error::io(&origin, e))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

/// Write samples as numbered PPM/PGM pairs plus a tab-separated manifest
/// (one `image_path<TAB>label_path` line per sample). Returns the manifest
/// path.
pub fn write_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let img = dir.join(format!("img_{i:04}.ppm"));
        let lbl = dir.join(format!("lbl_{i:04}.pgm"));
        save_ppm(&img, &sample.image)?;
        save_pgm(&lbl, &sample.label)?;
        manifest.push_str(&format!("{}\t{}\n", img.display(), lbl.display()));
    }
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

/// Read a dataset back through its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SegmentationSample>> {
    let origin = manifest_path.display().to_string();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(&origin, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img, lbl) = line.split_once('\t').ok_or_else(|| {
            Error::format(&origin, format!("line {}: expected image<TAB>label", lineno + 1))
        })?;
        samples.push(SegmentationSample {
            image: load_ppm(Path::new(img))?,
            label: load_pgm(Path::new(lbl))?,
        });
    }
    Ok(samples)
}
