//! Images, datasets, the synthetic colored-shape generator and the
//! `root/<class>/<image>.ppm` directory format.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const BACKGROUND_NOISE: f64 = 16.0;

pub const COLORS: [&str; 8] = [
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta",
];
pub const SHAPES: [&str; 4] = ["square", "disc", "cross", "ring"];
pub const PATTERN_COUNT: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major H×W×C 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * channels, "pixel buffer size");
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Keeps only the given classes, relabelled 0.. in the given order.
    pub fn restrict(&self, classes: &[usize]) -> Dataset {
        let mut out = Dataset {
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            ..Dataset::default()
        };
        for (img, &label) in self.images.iter().zip(&self.labels) {
            if let Some(pos) = classes.iter().position(|&c| c == label) {
                out.images.push(img.clone());
                out.labels.push(pos);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pattern {
    pub color: usize,
    pub shape: usize,
}

impl Pattern {
    /// The i-th shipped pattern; the first eight pair every color with a
    /// cycling shape, the next eight shift the shape cycle by two.
    pub fn shipped(i: usize) -> Self {
        Self {
            color: i % COLORS.len(),
            shape: (i + (i / COLORS.len()) * 2) % SHAPES.len(),
        }
    }

    pub fn name(&self) -> String {
        format!("{}_{}", COLORS[self.color], SHAPES[self.shape])
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(shape: usize, dy: i64, dx: i64) -> bool {
    let r2 = dy * dy + dx * dx;
    match SHAPES[shape] {
        "square" => dy.abs() <= 5 && dx.abs() <= 5,
        "disc" => r2 <= 36,
        "cross" => (dy.abs() <= 1 && dx.abs() <= 6) || (dx.abs() <= 1 && dy.abs() <= 6),
        _ => (12..=42).contains(&r2),
    }
}

/// One jittered render of a colored shape on a noisy gray background.
pub fn render(pattern: Pattern, noise: f64, rng: &mut impl Rng) -> Image {
    let hue = (pattern.color as f64 * 45.0 + rng.random_range(-8.0..8.0)) / 360.0;
    let rgb = hsv_to_rgb(hue.rem_euclid(1.0), 0.9, 0.95);
    let mut pixels = Vec::with_capacity(SIDE * SIDE * CHANNELS);
    for _ in 0..SIDE * SIDE * CHANNELS {
        let v: f64 = 128.0 + rng.random_range(-noise..=noise);
        pixels.push(v.clamp(0.0, 255.0) as u8);
    }
    let cy = rng.random_range(9..23) as i64;
    let cx = rng.random_range(9..23) as i64;
    for y in 0..SIDE {
        for x in 0..SIDE {
            if inside(pattern.shape, y as i64 - cy, x as i64 - cx) {
                for c in 0..CHANNELS {
                    pixels[(y * SIDE + x) * CHANNELS + c] = (rgb[c] * 255.0) as u8;
                }
            }
        }
    }
    Image::new(SIDE, SIDE, CHANNELS, pixels)
}

/// Deterministic dataset of `classes` distinct colored shapes.
pub fn generate_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::Config(format!("need at least 2 classes, got {classes}")));
    }
    if classes > PATTERN_COUNT {
        return Err(DataError::Config(format!(
            "{classes} classes requested but only {PATTERN_COUNT} patterns ship"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        class_names: (0..classes)
            .map(|i| format!("{i:02}_{}", Pattern::shipped(i).name()))
            .collect(),
        ..Dataset::default()
    };
    for class in 0..classes {
        for _ in 0..per_class {
            ds.images.push(render(Pattern::shipped(class), BACKGROUND_NOISE, &mut rng));
            ds.labels.push(class);
        }
    }
    Ok(ds)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), DataError> {
    if img.channels != 3 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: format!("P6 needs 3 channels, image has {}", img.channels),
        });
    }
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height).map_err(io_err(path))?;
    f.write_all(&img.pixels).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| DataError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 pixmap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    let need = w * h * 3;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Image::new(h, w, 3, body.to_vec()))
}

/// Writes `root/<class_name>/<index>.ppm`; indices are zero-padded so path
/// order equals generation order.
pub fn write_directory(ds: &Dataset, root: &Path) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut counters = vec![0usize; ds.num_classes()];
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        let path = root
            .join(&ds.class_names[label])
            .join(format!("{:05}.ppm", counters[label]));
        counters[label] += 1;
        write_ppm(&path, img)?;
    }
    Ok(())
}

pub fn load_directory(root: &Path) -> Result<Dataset, DataError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut ds = Dataset::default();
    let mut dims = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        ds.class_names.push(name);
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        for file in files {
            let img = read_ppm(&file)?;
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(DataError::Format {
                        path: file,
                        reason: format!("dimensions {:?} differ from {:?}", img.dims(), d),
                    })
                }
                _ => {}
            }
            ds.images.push(img);
            ds.labels.push(label);
        }
    }
    Ok(ds)
}
