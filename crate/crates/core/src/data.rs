//! Synthetic palmprint-texture dataset and grayscale image file I/O.
//!
//! Each identity is a fixed composition of localized oriented ridge fields
//! and dark curved principal lines. Individual samples re-render that
//! composition under a small random rigid jitter with brightness shift and
//! sensor noise, then blur and clamp.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Grid};

/// Aligned grayscale region of interest with its identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiImage {
    pub pixels: Grid,
    pub identity: usize,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<RoiImage>,
    pub test: Vec<RoiImage>,
    pub n_identities: usize,
    pub master_seed: u64,
}

impl Dataset {
    pub fn image_size(&self) -> (usize, usize) {
        self.train
            .first()
            .or(self.test.first())
            .map(|r| r.pixels.shape())
            .unwrap_or((0, 0))
    }
}

struct RidgeField {
    dir: (f64, f64),
    freq: f64,
    phase: f64,
    amp: f64,
    center: (f64, f64),
    radius: f64,
}

struct PrincipalLine {
    ctrl: [(f64, f64); 3],
    width: f64,
    depth: f64,
}

struct PalmIdentity {
    base: f64,
    ridges: Vec<RidgeField>,
    lines: Vec<Vec<(f64, f64)>>,
    line_style: Vec<(f64, f64)>,
}

const LINE_SAMPLES: usize = 48;

impl PalmIdentity {
    /// Identity structure in unit coordinates `[0, 1]^2`.
    fn generate(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(identity_seed, &[0x1d]));
        let base = rng.random_range(0.45..0.6);
        let n_ridges = rng.random_range(3..=5);
        let ridges = (0..n_ridges)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                RidgeField {
                    dir: (theta.cos(), theta.sin()),
                    // cycles per unit side
                    freq: rng.random_range(4.0..11.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.08..0.16),
                    center: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                    radius: rng.random_range(0.22..0.45),
                }
            })
            .collect::<Vec<_>>();
        let n_lines = rng.random_range(2..=3);
        let mut lines = Vec::with_capacity(n_lines);
        let mut line_style = Vec::with_capacity(n_lines);
        for _ in 0..n_lines {
            let line = PrincipalLine {
                ctrl: [
                    (rng.random_range(0.05..0.35), rng.random_range(0.1..0.9)),
                    (rng.random_range(0.3..0.7), rng.random_range(0.1..0.9)),
                    (rng.random_range(0.65..0.95), rng.random_range(0.1..0.9)),
                ],
                width: rng.random_range(0.012..0.025),
                depth: rng.random_range(0.2..0.35),
            };
            lines.push(sample_bezier(&line.ctrl));
            line_style.push((line.width, line.depth));
        }
        Self {
            base,
            ridges,
            lines,
            line_style,
        }
    }

    fn intensity(&self, u: f64, v: f64) -> f64 {
        let mut value = self.base;
        for r in &self.ridges {
            let du = u - r.center.0;
            let dv = v - r.center.1;
            let env = (-(du * du + dv * dv) / (2.0 * r.radius * r.radius)).exp();
            let arg = 2.0 * PI * r.freq * (u * r.dir.0 + v * r.dir.1) + r.phase;
            value += r.amp * env * arg.sin();
        }
        for (pts, &(width, depth)) in self.lines.iter().zip(&self.line_style) {
            let d2 = pts
                .iter()
                .map(|&(px, py)| (u - px).powi(2) + (v - py).powi(2))
                .fold(f64::INFINITY, f64::min);
            value -= depth * (-d2 / (2.0 * width * width)).exp();
        }
        value
    }
}

fn sample_bezier(ctrl: &[(f64, f64); 3]) -> Vec<(f64, f64)> {
    (0..LINE_SAMPLES)
        .map(|i| {
            let t = i as f64 / (LINE_SAMPLES - 1) as f64;
            let a = (1.0 - t) * (1.0 - t);
            let b = 2.0 * t * (1.0 - t);
            let c = t * t;
            (
                a * ctrl[0].0 + b * ctrl[1].0 + c * ctrl[2].0,
                a * ctrl[0].1 + b * ctrl[1].1 + c * ctrl[2].1,
            )
        })
        .collect()
}

fn gaussian_blur(src: &Grid, sigma: f64) -> Grid {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = src.shape();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * src.get(r, clampi(c as isize + k as isize - radius, w)))
            .sum()
    });
    Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * horiz.get(clampi(r as isize + k as isize - radius, h), c))
            .sum()
    })
}

/// Renders one sample of an identity.
pub fn synth_palm(identity_seed: u64, sample_seed: u64, size: usize) -> Result<Grid> {
    if size < 32 {
        return Err(Error::invalid(format!(
            "palm size must be at least 32, got {size}"
        )));
    }
    let palm = PalmIdentity::generate(identity_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, &[0x5a]));
    let rot = rng.random_range(-3.0f64..=3.0).to_radians();
    let tx = rng.random_range(-0.02..=0.02);
    let ty = rng.random_range(-0.02..=0.02);
    let brightness = rng.random_range(-0.05..=0.05);
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let (sin, cos) = rot.sin_cos();
    let n = size as f64;
    let mut img = Grid::from_fn(size, size, |row, col| {
        // Pixel centre in unit coordinates, inverse-jittered about the middle.
        let x = (col as f64 + 0.5) / n - 0.5 - tx;
        let y = (row as f64 + 0.5) / n - 0.5 - ty;
        let u = cos * x + sin * y + 0.5;
        let v = -sin * x + cos * y + 0.5;
        palm.intensity(u, v) + brightness
    });
    for v in img.values_mut() {
        *v += noise.sample(&mut rng);
    }
    let mut img = gaussian_blur(&img, 0.8);
    img.clamp_unit();
    Ok(img)
}

/// Seed of identity `id` under a dataset master seed.
pub fn identity_seed(master_seed: u64, identity: usize) -> u64 {
    derive_seed(master_seed, &[1, identity as u64])
}

/// Seed of sample `index` of identity `id` under a dataset master seed.
pub fn sample_seed(master_seed: u64, identity: usize, index: usize) -> u64 {
    derive_seed(master_seed, &[2, identity as u64, index as u64])
}

pub fn build_dataset(
    n_identities: usize,
    n_per_identity: usize,
    train_fraction: f64,
    master_seed: u64,
    size: usize,
) -> Result<Dataset> {
    if n_identities < 2 {
        return Err(Error::invalid("need at least 2 identities"));
    }
    if n_per_identity < 4 {
        return Err(Error::invalid("need at least 4 images per identity"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n_per_identity as f64).ceil() as usize;
    if n_train >= n_per_identity {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} leaves no test images out of {n_per_identity}"
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..n_identities)
        .flat_map(|id| (0..n_per_identity).map(move |i| (id, i)))
        .collect();
    let images = jobs
        .par_iter()
        .map(|&(id, i)| {
            let seed = sample_seed(master_seed, id, i);
            synth_palm(identity_seed(master_seed, id), seed, size).map(|pixels| RoiImage {
                pixels,
                identity: id,
                sample_seed: seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train = Vec::with_capacity(n_identities * n_train);
    let mut test = Vec::with_capacity(n_identities * (n_per_identity - n_train));
    for (img, &(_, i)) in images.into_iter().zip(&jobs) {
        if i < n_train {
            train.push(img);
        } else {
            test.push(img);
        }
    }
    Ok(Dataset {
        train,
        test,
        n_identities,
        master_seed,
    })
}

// ---------------------------------------------------------------------------
// Portable graymap / float-map I/O

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary "P5" graymap, maxval 255.
    Graymap8,
    /// Grayscale "Pf" portable float map, little-endian.
    FloatMap,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "pgm" => Some(Self::Graymap8),
            "pfm" => Some(Self::FloatMap),
            _ => None,
        }
    }
}

const MAX_DIM: usize = 1 << 15;

pub fn encode_image(grid: &Grid, format: ImageFormat) -> Result<Vec<u8>> {
    if !grid.is_unit_range() {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    let (h, w) = grid.shape();
    match format {
        ImageFormat::Graymap8 => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(grid.values().iter().map(|v| (v * 255.0).round() as u8));
            Ok(out)
        }
        ImageFormat::FloatMap => {
            let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
            // Scanlines are stored bottom to top.
            for row in (0..h).rev() {
                for col in 0..w {
                    out.extend_from_slice(&(grid.get(row, col) as f32).to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

struct Header<'a> {
    tokens: Vec<&'a str>,
    body_offset: usize,
}

/// Splits `n` whitespace-separated header tokens (comments allowed) and the
/// offset of the payload after the single whitespace byte that ends them.
fn parse_header(bytes: &[u8], n: usize) -> Option<Header<'_>> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(std::str::from_utf8(&bytes[start..i]).ok()?);
    }
    if i >= bytes.len() {
        return if i == bytes.len() { Some(Header { tokens, body_offset: i }) } else { None };
    }
    Some(Header {
        tokens,
        body_offset: i + 1,
    })
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: &str| Error::format(path, reason);
    let header = parse_header(bytes, 4).ok_or_else(|| bad("malformed header"))?;
    let dims = |s: &str| -> Result<usize> {
        let v: usize = s.parse().map_err(|_| bad("malformed dimensions"))?;
        if v == 0 || v > MAX_DIM {
            return Err(bad("out-of-range dimensions"));
        }
        Ok(v)
    };
    let w = dims(header.tokens[1])?;
    let h = dims(header.tokens[2])?;
    let body = &bytes[header.body_offset..];
    match header.tokens[0] {
        "P5" => {
            if header.tokens[3] != "255" {
                return Err(bad("unsupported maxval"));
            }
            if body.len() < w * h {
                return Err(bad("truncated payload"));
            }
            let values = body[..w * h].iter().map(|&b| b as f64 / 255.0).collect();
            Grid::new(h, w, values)
        }
        "Pf" => {
            let scale: f64 = header.tokens[3].parse().map_err(|_| bad("malformed scale"))?;
            if scale == 0.0 || !scale.is_finite() {
                return Err(bad("malformed scale"));
            }
            if body.len() < 4 * w * h {
                return Err(bad("truncated payload"));
            }
            let read = |i: usize| {
                let b = [body[4 * i], body[4 * i + 1], body[4 * i + 2], body[4 * i + 3]];
                if scale < 0.0 {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            };
            let mut grid = Grid::zeros(h, w);
            for (k, row) in (0..h).rev().enumerate() {
                for col in 0..w {
                    grid.set(row, col, read(k * w + col) as f64);
                }
            }
            Ok(grid)
        }
        _ => Err(bad("unknown magic, expected P5 or Pf")),
    }
}

pub fn write_image(path: &Path, grid: &Grid, format: ImageFormat) -> Result<()> {
    let bytes = encode_image(grid, format)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

// ---------------------------------------------------------------------------
// Dataset directory: `<root>/<split>/<identity>/<index>.pgm` + `manifest.tsv`

pub const MANIFEST: &str = "manifest.tsv";

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::from("split\tidentity\tindex\tsample_seed\n");
    for (split, images) in [("train", &dataset.train), ("test", &dataset.test)] {
        let mut counters = vec![0usize; dataset.n_identities];
        for img in images {
            let index = counters[img.identity];
            counters[img.identity] += 1;
            let path = root
                .join(split)
                .join(img.identity.to_string())
                .join(format!("{index}.pgm"));
            write_image(&path, &img.pixels, ImageFormat::Graymap8)?;
            manifest.push_str(&format!(
                "{split}\t{}\t{index}\t{}\n",
                img.identity, img.sample_seed
            ));
        }
    }
    let mpath = root.join(MANIFEST);
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    let meta = root.join("dataset.meta.tsv");
    fs::write(
        &meta,
        format!(
            "n_identities\t{}\nmaster_seed\t{}\n",
            dataset.n_identities, dataset.master_seed
        ),
    )
    .map_err(|e| Error::io(&meta, e))
}

/// Loads a dataset directory written by [`write_dataset`]. Pixels come back
/// quantized to the graymap's 8-bit levels.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta_path = root.join("dataset.meta.tsv");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut n_identities = None;
    let mut master_seed = None;
    for line in meta.lines() {
        let mut parts = line.split('\t');
        match (parts.next(), parts.next()) {
            (Some("n_identities"), Some(v)) => n_identities = v.parse().ok(),
            (Some("master_seed"), Some(v)) => master_seed = v.parse().ok(),
            _ => {}
        }
    }
    let (Some(n_identities), Some(master_seed)) = (n_identities, master_seed) else {
        return Err(Error::format(&meta_path, "missing n_identities or master_seed"));
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(&mpath, format!("bad row {}", lineno + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let identity: usize = cols[1].parse().map_err(|_| bad())?;
        let index: usize = cols[2].parse().map_err(|_| bad())?;
        let sample_seed: u64 = cols[3].parse().map_err(|_| bad())?;
        if identity >= n_identities {
            return Err(bad());
        }
        let pixels = read_image(&root.join(cols[0]).join(cols[1]).join(format!("{index}.pgm")))?;
        let img = RoiImage {
            pixels,
            identity,
            sample_seed,
        };
        match cols[0] {
            "train" => train.push(img),
            "test" => test.push(img),
            _ => return Err(bad()),
        }
    }
    Ok(Dataset {
        train,
        test,
        n_identities,
        master_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_clamped() {
        let a = synth_palm(3, 9, 64).unwrap();
        let b = synth_palm(3, 9, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.is_unit_range());
        let c = synth_palm(3, 10, 64).unwrap();
        let mad: f64 =
            a.values().iter().zip(c.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(mad > 0.0);
    }

    #[test]
    fn synth_rejects_small_sizes() {
        assert!(synth_palm(1, 1, 31).is_err());
        assert!(synth_palm(1, 1, 32).is_ok());
        assert_eq!(synth_palm(1, 1, 128).unwrap().shape(), (128, 128));
    }

    #[test]
    fn split_arithmetic() {
        let ds = build_dataset(20, 20, 0.5, 7, 32).unwrap();
        assert_eq!(ds.train.len(), 200);
        assert_eq!(ds.test.len(), 200);
        for id in 0..20 {
            assert_eq!(ds.train.iter().filter(|r| r.identity == id).count(), 10);
            assert_eq!(ds.test.iter().filter(|r| r.identity == id).count(), 10);
        }
        let small = build_dataset(2, 4, 0.5, 7, 32).unwrap();
        assert_eq!((small.train.len(), small.test.len()), (4, 4));
        for id in 0..2 {
            assert!(small.train.iter().any(|r| r.identity == id));
            assert!(small.test.iter().any(|r| r.identity == id));
        }
    }

    #[test]
    fn dataset_is_deterministic_and_disjoint() {
        let a = build_dataset(3, 5, 0.6, 99, 32).unwrap();
        let b = build_dataset(3, 5, 0.6, 99, 32).unwrap();
        assert_eq!(a, b);
        for t in &a.train {
            assert!(a.test.iter().all(|s| s.sample_seed != t.sample_seed));
        }
    }

    #[test]
    fn dataset_rejects_bad_parameters() {
        assert!(build_dataset(1, 10, 0.5, 0, 32).is_err());
        assert!(build_dataset(2, 3, 0.5, 0, 32).is_err());
        assert!(build_dataset(2, 4, 0.0, 0, 32).is_err());
        assert!(build_dataset(2, 4, 1.0, 0, 32).is_err());
        // ceil(0.9 * 4) = 4 leaves an empty test split.
        assert!(build_dataset(2, 4, 0.9, 0, 32).is_err());
    }

    #[test]
    fn graymap_scaling() {
        let g = Grid::filled(3, 4, 1.0);
        let bytes = encode_image(&g, ImageFormat::Graymap8).unwrap();
        assert!(bytes.ends_with(&[255u8; 12]));
        let back = decode_image(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_unsupported_maxval() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend([0, 0, 0, 0]);
        let err = decode_image(&bytes, Path::new("x.pgm")).unwrap_err();
        assert!(err.to_string().contains("unsupported maxval"));
    }

    #[test]
    fn rejects_malformed_files() {
        let p = Path::new("x");
        assert!(decode_image(b"P5\n2 2\n255\n\x01\x02", p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(decode_image(b"P6\n1 1\n255\n\x00", p).is_err());
        assert!(decode_image(b"P5\n0 1\n255\n", p)
            .unwrap_err()
            .to_string()
            .contains("out-of-range"));
        assert!(decode_image(b"Pf\n1 1\n", p).is_err());
        assert!(decode_image(b"Pf\n2 2\n-1.0\n\x00\x00", p).is_err());
    }

    #[test]
    fn graymap_rounds_half_levels() {
        let g = Grid::new(1, 2, vec![0.5, 0.2]).unwrap();
        let bytes = encode_image(&g, ImageFormat::Graymap8).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[128, 51]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(2, 4, 0.5, 5, 32).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert!(dir.path().join("train/1/0.pgm").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), 4);
        assert_eq!(back.n_identities, 2);
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.sample_seed, b.sample_seed);
            for (x, y) in a.pixels.values().iter().zip(b.pixels.values()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn float_map_round_trip_is_exact(
            h in 1usize..6,
            w in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Exactly representable in f32 so the round trip is bit-identical.
            let g = Grid::from_fn(h, w, |_, _| rng.random::<f32>() as f64);
            let bytes = encode_image(&g, ImageFormat::FloatMap).unwrap();
            let back = decode_image(&bytes, Path::new("x.pfm")).unwrap();
            proptest::prop_assert_eq!(back, g);
        }
    }
}
