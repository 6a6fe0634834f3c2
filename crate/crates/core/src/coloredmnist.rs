//! The ColoredMNIST domain-generalization benchmark.
//!
//! Digits are binarized (`< 5 → 0`), each label is flipped with probability
//! 0.25, and the background gets a color that agrees with the noisy label
//! with probability `p_color` (0.85 for training and in-distribution test,
//! 0.10 out of distribution). Shape alone therefore predicts the noisy label
//! about 75% of the time everywhere, while color predicts it 85% of the time
//! in distribution and 10% out of it.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const MNIST_SIDE: usize = 28;
pub const SIDE: usize = 32;
/// Grayscale intensity below which a pixel counts as background.
pub const BACKGROUND_THRESHOLD: f32 = 0.1;
/// Color id 0 is red, 1 is green.
pub const COLORS: [[f32; 3]; 2] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

const ARCHIVE_MAGIC: &[u8; 4] = b"OXCM";
const ARCHIVE_VERSION: u32 = 1;

/// Raw grayscale digits with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Digits {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Digits {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Digits {
        let n = self.rows * self.cols;
        Digits {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses an IDX3 image file (`0x00000803`, big-endian dims).
pub fn parse_idx_images(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |r: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0803 {
        return Err(bad("not an IDX3 ubyte image file"));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if bytes.len() != 16 + n * rows * cols {
        return Err(bad("image payload length does not match header"));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX1 label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], origin: &Path) -> Result<Vec<u8>> {
    let bad = |r: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0801 {
        return Err(bad("not an IDX1 ubyte label file"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(bad("label payload length does not match header"));
    }
    if bytes[8..].iter().any(|&l| l > 9) {
        return Err(bad("label outside 0..=9"));
    }
    Ok(bytes[8..].to_vec())
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// MNIST files as found on disk, plus a digest of their contents.
#[derive(Debug, Clone)]
pub struct MnistSource {
    pub train: Digits,
    pub test: Digits,
    pub digest: String,
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
pub fn load_mnist(dir: &Path) -> Result<MnistSource> {
    let stems = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    let mut paths = Vec::new();
    let mut missing = Vec::new();
    for s in stems {
        match find(dir, s) {
            Some(p) => paths.push(p),
            None => missing.push(dir.join(format!("{s}[.gz]")).display().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::NotFound(format!(
            "MNIST IDX files missing; expected {} (set OXEL_DATA_DIR to the directory containing mnist/)",
            missing.join(", ")
        )));
    }
    let mut hasher = Sha256::new();
    let mut raw = Vec::new();
    for p in &paths {
        let bytes = open_maybe_gz(p)?;
        hasher.update(&bytes);
        raw.push(bytes);
    }
    let split = |img: usize, lab: usize| -> Result<Digits> {
        let (n, rows, cols, pixels) = parse_idx_images(&raw[img], &paths[img])?;
        let labels = parse_idx_labels(&raw[lab], &paths[lab])?;
        if labels.len() != n {
            return Err(Error::Format {
                path: paths[lab].clone(),
                reason: format!("{} labels for {n} images", labels.len()),
            });
        }
        Ok(Digits { rows, cols, pixels, labels })
    };
    let train = split(0, 1)?;
    let test = split(2, 3)?;
    Ok(MnistSource {
        train,
        test,
        digest: hex::encode(hasher.finalize()),
    })
}

pub fn binarize_label(digit: u8) -> Result<u8> {
    match digit {
        0..=4 => Ok(0),
        5..=9 => Ok(1),
        _ => Err(Error::Input(format!("digit {digit} outside 0..=9"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Split::ALL.get(c as usize).copied()
    }
}

/// One generated example. The image is kept as 8-bit RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredSample {
    pub pixels: Vec<u8>,
    pub digit: u8,
    pub clean_label: u8,
    /// Possibly flipped label; the training target.
    pub label: u8,
    pub color: u8,
    pub split: Split,
}

impl ColoredSample {
    pub fn image(&self) -> Image {
        let data = self.pixels.iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(SIDE, SIDE, data).expect("stored samples are 32x32x3")
    }
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(src: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::new(height, width);
    let sy = src.height() as f32 / height as f32;
    let sx = src.width() as f32 / width as f32;
    let coord = |d: usize, s: f32, n: usize| {
        let c = ((d as f32 + 0.5) * s - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    // lerp as a + (b - a) t keeps equal neighbours exact.
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sy, src.height());
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sx, src.width());
            let (a, b, c, d) = (src.get(y0, x0), src.get(y0, x1), src.get(y1, x0), src.get(y1, x1));
            let mut px = [0.0; 3];
            for k in 0..3 {
                px[k] = lerp(lerp(a[k], b[k], fx), lerp(c[k], d[k], fx), fy);
            }
            out.set(y, x, px);
        }
    }
    out
}

/// Colors a grayscale digit: background pixels become `COLORS[color]`,
/// strokes blend from that color toward white with their intensity.
pub fn colorize(gray: &[u8], rows: usize, cols: usize, color: u8) -> Image {
    let base = COLORS[color as usize];
    let mut img = Image::new(rows, cols);
    for (i, &v) in gray.iter().enumerate() {
        let g = v as f32 / 255.0;
        let px = if g < BACKGROUND_THRESHOLD {
            base
        } else {
            base.map(|b| b + (1.0 - b) * g)
        };
        img.set(i / cols, i % cols, px);
    }
    img
}

fn to_u8(img: &Image) -> Vec<u8> {
    img.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Labels and color of one sample before rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawnLabels {
    pub clean_label: u8,
    pub label: u8,
    pub color: u8,
}

/// Draws the flip and the color for one digit. Exactly two uniforms are
/// consumed per call, whatever the probabilities.
pub fn draw_labels(digit: u8, rng: &mut impl Rng, p_color: f64, flip_prob: f64) -> Result<DrawnLabels> {
    let clean_label = binarize_label(digit)?;
    let flip = rng.gen::<f64>() < flip_prob;
    let label = clean_label ^ u8::from(flip);
    let agree = rng.gen::<f64>() < p_color;
    let color = if agree { label } else { 1 - label };
    Ok(DrawnLabels { clean_label, label, color })
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} outside [0, 1]")))
    }
}

/// Generates one domain: flips, colors, recolors and resizes every digit.
/// `p_color` may hold several values to build a multi-domain pool; sample
/// `i` uses `p_color[i % len]`.
pub fn build_domain(
    digits: &Digits,
    rng: &mut impl Rng,
    p_color: &[f64],
    flip_prob: f64,
    split: Split,
) -> Result<Vec<ColoredSample>> {
    if p_color.is_empty() {
        return Err(Error::Config("at least one color probability is required".into()));
    }
    for &p in p_color {
        check_prob("p_color", p)?;
    }
    check_prob("flip_prob", flip_prob)?;
    let mut out = Vec::with_capacity(digits.len());
    for i in 0..digits.len() {
        let digit = digits.labels[i];
        let drawn = draw_labels(digit, rng, p_color[i % p_color.len()], flip_prob)?;
        let img = colorize(digits.image(i), digits.rows, digits.cols, drawn.color);
        let img = resize_bilinear(&img, SIDE, SIDE);
        out.push(ColoredSample {
            pixels: to_u8(&img),
            digit,
            clean_label: drawn.clean_label,
            label: drawn.label,
            color: drawn.color,
            split,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColoredMnistConfig {
    /// Color agreement for training/validation/in-distribution test. More
    /// than one value builds a multi-domain training pool.
    #[serde(default = "default_p_train")]
    pub p_train: Vec<f64>,
    #[serde(default = "default_p_test")]
    pub p_test: f64,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_p_train() -> Vec<f64> {
    vec![0.85]
}
fn default_p_test() -> f64 {
    0.10
}
fn default_flip() -> f64 {
    0.25
}
fn default_val() -> f64 {
    0.10
}

impl Default for ColoredMnistConfig {
    fn default() -> Self {
        Self {
            p_train: default_p_train(),
            p_test: default_p_test(),
            flip_prob: default_flip(),
            val_fraction: default_val(),
            seed: 0,
        }
    }
}

/// All four splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredMnist {
    pub config_hash: [u8; 32],
    pub train: Vec<ColoredSample>,
    pub val: Vec<ColoredSample>,
    pub test_id: Vec<ColoredSample>,
    pub test_ood: Vec<ColoredSample>,
}

impl ColoredMnist {
    pub fn split(&self, s: Split) -> &[ColoredSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }
}

/// Hash of the generation config and the MNIST source digest.
pub fn config_hash(config: &ColoredMnistConfig, source_digest: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(source_digest.as_bytes());
    h.update(ARCHIVE_VERSION.to_le_bytes());
    h.finalize().into()
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

pub fn generate(source: &MnistSource, config: &ColoredMnistConfig) -> Result<ColoredMnist> {
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 1)", config.val_fraction)));
    }
    let n_train = source.train.len();
    let n_val = (n_train as f64 * config.val_fraction).round() as usize;
    let train_digits = source.train.slice(0..n_train - n_val);
    let val_digits = source.train.slice(n_train - n_val..n_train);
    let s = config.seed;
    Ok(ColoredMnist {
        config_hash: config_hash(config, &source.digest),
        train: build_domain(&train_digits, &mut stream(s, 1), &config.p_train, config.flip_prob, Split::Train)?,
        val: build_domain(&val_digits, &mut stream(s, 2), &config.p_train, config.flip_prob, Split::Val)?,
        test_id: build_domain(&source.test, &mut stream(s, 3), &config.p_train, config.flip_prob, Split::TestId)?,
        test_ood: build_domain(&source.test, &mut stream(s, 4), &[config.p_test], config.flip_prob, Split::TestOod)?,
    })
}

/// Archive layout: `b"OXCM"`, u32 version, 32-byte config hash, u32 sample
/// count, then per sample `digit, clean_label, label, color, split` bytes and
/// 32·32·3 RGB bytes. Little-endian.
pub fn write_archive(data: &ColoredMnist, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let all: Vec<&ColoredSample> = Split::ALL.iter().flat_map(|s| data.split(*s)).collect();
    let mut buf = Vec::with_capacity(44 + all.len() * (5 + SIDE * SIDE * 3));
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&data.config_hash);
    buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for s in all {
        buf.extend_from_slice(&[s.digit, s.clean_label, s.label, s.color, s.split.code()]);
        buf.extend_from_slice(&s.pixels);
    }
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Reads the 32-byte config hash stored in an archive header.
pub fn archive_hash(path: &Path) -> Result<[u8; 32]> {
    let mut head = [0u8; 40];
    File::open(path)?.read_exact(&mut head)?;
    if &head[..4] != ARCHIVE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "missing OXCM header".into(),
        });
    }
    Ok(head[8..40].try_into().unwrap())
}

pub fn read_archive(path: &Path) -> Result<ColoredMnist> {
    let bytes = std::fs::read(path)?;
    let bad = |r: &str| Error::Format {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 44 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(bad("missing OXCM header"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != ARCHIVE_VERSION {
        return Err(bad("unsupported archive version"));
    }
    let config_hash: [u8; 32] = bytes[8..40].try_into().unwrap();
    let n = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
    let rec = 5 + SIDE * SIDE * 3;
    if bytes.len() != 44 + n * rec {
        return Err(bad("archive length does not match sample count"));
    }
    let mut out = ColoredMnist {
        config_hash,
        train: Vec::new(),
        val: Vec::new(),
        test_id: Vec::new(),
        test_ood: Vec::new(),
    };
    for chunk in bytes[44..].chunks_exact(rec) {
        let split = Split::from_code(chunk[4]).ok_or_else(|| bad("unknown split code"))?;
        let s = ColoredSample {
            digit: chunk[0],
            clean_label: chunk[1],
            label: chunk[2],
            color: chunk[3],
            split,
            pixels: chunk[5..].to_vec(),
        };
        match split {
            Split::Train => out.train.push(s),
            Split::Val => out.val.push(s),
            Split::TestId => out.test_id.push(s),
            Split::TestOod => out.test_ood.push(s),
        }
    }
    Ok(out)
}

/// Archive path for a config under `root`.
pub fn archive_path(root: &Path, hash: &[u8; 32]) -> PathBuf {
    root.join("coloredmnist").join(format!("coloredmnist-{}.oxcm", &hex::encode(hash)[..16]))
}

/// Loads the cached archive when its hash matches, otherwise generates and
/// writes it. Returns the data and whether it was freshly generated.
pub fn load_or_generate(data_root: &Path, config: &ColoredMnistConfig) -> Result<(ColoredMnist, bool)> {
    let source = load_mnist(&data_root.join("mnist"))?;
    let hash = config_hash(config, &source.digest);
    let path = archive_path(data_root, &hash);
    if path.is_file() && archive_hash(&path)? == hash {
        return Ok((read_archive(&path)?, false));
    }
    let data = generate(&source, config)?;
    write_archive(&data, &path)?;
    Ok((data, true))
}

/// Predicts the label from the background color alone.
pub fn color_oracle(s: &ColoredSample) -> u8 {
    s.color
}

/// Predicts the clean (unflipped) label from the digit shape.
pub fn shape_oracle(s: &ColoredSample) -> u8 {
    s.clean_label
}
