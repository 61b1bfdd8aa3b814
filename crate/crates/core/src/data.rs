//! Synthetic datasets, image-folder ingestion and the NTF1 tensor format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// 2D point sets

/// Centers of `modes` equally spaced points on a circle.
pub fn ring_centers(modes: usize, radius: f64) -> Tensor {
    let data = (0..modes)
        .flat_map(|i| {
            let t = std::f64::consts::TAU * i as f64 / modes as f64;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect();
    Tensor::from_raw(vec![modes, 2], data)
}

/// Centers of a `size × size` grid with the given spacing, centered at the
/// origin.
pub fn grid_centers(size: usize, spacing: f64) -> Tensor {
    let off = (size as f64 - 1.0) / 2.0;
    let data = (0..size * size)
        .flat_map(|i| [((i / size) as f64 - off) * spacing, ((i % size) as f64 - off) * spacing])
        .collect();
    Tensor::from_raw(vec![size * size, 2], data)
}

fn mixture(centers: &Tensor, sigma: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(contract_err!("sigma must be positive, got {sigma}"));
    }
    let k = centers.shape()[0];
    if k == 0 {
        return Err(contract_err!("need at least one mode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = centers.data();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let m = rng.gen_range(0..k);
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        out.push(c[2 * m] + sigma * dx);
        out.push(c[2 * m + 1] + sigma * dy);
    }
    Tensor::new(&[n, 2], out)
}

/// `n` samples from `modes` isotropic Gaussians on a ring.
pub fn ring_gaussians(modes: usize, radius: f64, sigma: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(contract_err!("radius must be non-negative, got {radius}"));
    }
    mixture(&ring_centers(modes, radius), sigma, n, seed)
}

/// `n` samples from a square grid of isotropic Gaussians.
pub fn grid2d(size: usize, spacing: f64, sigma: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(contract_err!("spacing must be positive, got {spacing}"));
    }
    mixture(&grid_centers(size, spacing), sigma, n, seed)
}

// ---------------------------------------------------------------------------
// MiniScenes

/// Object palette in `[0, 1]` RGB.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.7, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.8, 0.1],
    [0.75, 0.2, 0.8],
    [0.1, 0.75, 0.8],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Rect,
}

/// One flat-colored object. Circles use `rx` as the radius; rectangles
/// cover `|x − cx| ≤ rx, |y − cy| ≤ ry`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub cx: i64,
    pub cy: i64,
    pub rx: i64,
    pub ry: i64,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn covers(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.rx * self.rx,
            Shape::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniScenesSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Global drop-shadow displacement `(dx, dy)` in pixels.
    pub shadow_offset: (i64, i64),
    /// Multiplier applied to whatever lies under a shadow.
    pub shadow_gain: f64,
    pub background: [f64; 3],
}

impl Default for MiniScenesSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            min_objects: 1,
            max_objects: 3,
            shadow_offset: (2, 2),
            shadow_gain: 0.5,
            background: [0.6, 0.6, 0.6],
        }
    }
}

impl MiniScenesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(contract_err!("MiniScenes size must be ≥ 16, got {}", self.image_size));
        }
        if self.min_objects > self.max_objects {
            return Err(contract_err!(
                "object range {}..={} is empty",
                self.min_objects,
                self.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.shadow_gain) {
            return Err(contract_err!("shadow gain must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Inclusive range of object half-extents.
    pub fn extent_range(&self) -> (i64, i64) {
        let s = self.image_size as i64;
        ((s / 16).max(1), (s / 6).max(2))
    }

    pub fn sample_object<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneObject {
        let s = self.image_size as i64;
        let (lo, hi) = self.extent_range();
        let shape = if rng.gen_bool(0.5) { Shape::Circle } else { Shape::Rect };
        SceneObject {
            shape,
            cx: rng.gen_range(0..s),
            cy: rng.gen_range(0..s),
            rx: rng.gen_range(lo..=hi),
            ry: rng.gen_range(lo..=hi),
            color: PALETTE[rng.gen_range(0..PALETTE.len())],
        }
    }
}

/// Paints objects in order: each object first casts its shadow (the object
/// silhouette displaced by the global offset, darkening what is already
/// there) and is then drawn opaque on top. Output is `size×size×3` in
/// `[−1, 1]`.
pub fn render_scene(spec: &MiniScenesSpec, objects: &[SceneObject]) -> Vec<f64> {
    let s = spec.image_size;
    let mut img: Vec<f64> = spec.background.repeat(s * s);
    let (sx, sy) = spec.shadow_offset;
    for o in objects {
        for y in 0..s as i64 {
            for x in 0..s as i64 {
                let px = &mut img[3 * (y as usize * s + x as usize)..][..3];
                if o.covers(x, y) {
                    px.copy_from_slice(&o.color);
                } else if o.covers(x - sx, y - sy) {
                    px.iter_mut().for_each(|v| *v *= spec.shadow_gain);
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    img
}

/// `n` scenes, a pure function of `(spec, seed)`.
pub fn mini_scenes(spec: &MiniScenesSpec, n: usize, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let mut out = Vec::with_capacity(n * s * s * 3);
    for _ in 0..n {
        let count = rng.gen_range(spec.min_objects..=spec.max_objects);
        let objects: Vec<SceneObject> = (0..count).map(|_| spec.sample_object(&mut rng)).collect();
        out.extend(render_scene(spec, &objects));
    }
    Tensor::new(&[n, s, s, 3], out)
}

// ---------------------------------------------------------------------------
// Dataset specs

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Ring2D { modes: usize, radius: f64, sigma: f64 },
    Grid2D { size: usize, spacing: f64, sigma: f64 },
    MiniScenes(MiniScenesSpec),
    ImageFolder { path: PathBuf, image_size: usize },
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Ring2D { .. } => "ring2d",
            Self::Grid2D { .. } => "grid2d",
            Self::MiniScenes(_) => "mini_scenes",
            Self::ImageFolder { .. } => "image_folder",
        }
    }

    pub fn is_points(&self) -> bool {
        matches!(self, Self::Ring2D { .. } | Self::Grid2D { .. })
    }

    /// Mode centers of the point datasets.
    pub fn modes(&self) -> Option<Tensor> {
        match *self {
            Self::Ring2D { modes, radius, .. } => Some(ring_centers(modes, radius)),
            Self::Grid2D { size, spacing, .. } => Some(grid_centers(size, spacing)),
            _ => None,
        }
    }

    /// Per-sample shape (`[2]` or `[size, size, 3]`).
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Self::Ring2D { .. } | Self::Grid2D { .. } => vec![2],
            Self::MiniScenes(s) => vec![s.image_size, s.image_size, 3],
            Self::ImageFolder { image_size, .. } => vec![*image_size, *image_size, 3],
        }
    }

    /// Materializes `n` samples. Image folders ignore `n` and `seed` and
    /// return every image in the folder.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        match self {
            Self::Ring2D { modes, radius, sigma } => ring_gaussians(*modes, *radius, *sigma, n, seed),
            Self::Grid2D { size, spacing, sigma } => grid2d(*size, *spacing, *sigma, n, seed),
            Self::MiniScenes(s) => mini_scenes(s, n, seed),
            Self::ImageFolder { path, image_size } => load_image_folder(path, *image_size),
        }
    }
}

// ---------------------------------------------------------------------------
// NTF1

pub const NTF1_MAGIC: &[u8; 4] = b"NTF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Serializes with 64-bit payload.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    encode_tensor_as(t, DType::F64).expect("f64 encoding is lossless")
}

/// Serializes with the given payload type. Shapes with more than 255 axes
/// or an axis above `u32::MAX` are rejected.
pub fn encode_tensor_as(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| shape_err!("rank {} exceeds 255", t.rank()))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + dtype.size() * t.numel());
    out.extend_from_slice(NTF1_MAGIC);
    out.push(dtype as u8);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| shape_err!("axis length {d} exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Decodes one NTF1 record from the front of `bytes`, returning the tensor
/// and the number of bytes consumed. Error offsets are reported relative to
/// `base`.
pub fn decode_tensor_at(bytes: &[u8], base: usize) -> Result<(Tensor, usize)> {
    let need = |pos: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < pos + len {
            Err(format_err(base + bytes.len(), format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != NTF1_MAGIC {
        return Err(format_err(base, "bad magic, expected NTF1"));
    }
    need(4, 1, "dtype code")?;
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(format_err(base + 4, format!("unknown dtype code {c}"))),
    };
    need(5, 1, "rank")?;
    let rank = bytes[5] as usize;
    need(6, 4 * rank, "shape")?;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let at = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| format_err(base + at, "shape product overflows"))?;
        shape.push(d);
    }
    let start = 6 + 4 * rank;
    let payload = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(base + start, "payload size overflows"))?;
    if bytes.len() - start < payload {
        return Err(format_err(
            base + bytes.len(),
            format!("truncated payload: {} of {payload} bytes", bytes.len() - start),
        ));
    }
    let raw = &bytes[start..start + payload];
    let data: Vec<f64> = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(base + start + i * dtype.size(), "non-finite value"));
    }
    Ok((Tensor::from_raw(shape, data), start + payload))
}

/// Decodes a buffer holding exactly one NTF1 record.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn save_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_tensor_as(t, dtype)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// PPM / PGM

/// Decoded netpbm image with samples scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

fn header_token(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format!("unexpected end of header reading {what}")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad {what} at byte {start}"))
}

/// Decodes binary P6 (RGB) or P5 (grayscale) data.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM file (expected P6 or P5)".into()),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos, "width")?;
    let height = header_token(bytes, &mut pos, "height")?;
    let maxval = header_token(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}×{height}"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} out of range"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format!("missing whitespace after header at byte {pos}"));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let body = &bytes[pos..];
    if body.len() < count * bps {
        return Err(format!("truncated pixel data: {} of {} bytes", body.len(), count * bps));
    }
    let scale = maxval as f64;
    let data = if bps == 1 {
        body[..count].iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        body[..2 * count]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Ok(RawImage {
        width,
        height,
        channels,
        data,
    })
}

/// Bilinear resampling of an `h×w×c` buffer (pixel centers aligned,
/// edges clamped).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_src: usize, n_dst: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Center-crops to a square, resizes to `size×size`, replicates grayscale
/// to three channels and maps `[0, 1]` to `[−1, 1]`.
pub fn prepare_image(img: &RawImage, size: usize) -> Vec<f64> {
    let m = img.width.min(img.height);
    let (x0, y0) = ((img.width - m) / 2, (img.height - m) / 2);
    let mut crop = Vec::with_capacity(m * m * 3);
    for y in y0..y0 + m {
        for x in x0..x0 + m {
            let p = (y * img.width + x) * img.channels;
            if img.channels == 3 {
                crop.extend_from_slice(&img.data[p..p + 3]);
            } else {
                crop.extend_from_slice(&[img.data[p]; 3]);
            }
        }
    }
    resize_bilinear(&crop, m, m, 3, size, size)
        .into_iter()
        .map(|v| 2.0 * v - 1.0)
        .collect()
}

pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let img = decode_pnm(&bytes).map_err(|message| Error::FileFormat {
        path: path.to_path_buf(),
        message,
    })?;
    Ok(prepare_image(&img, size))
}

/// Loads every `.ppm`/`.pgm` file in `dir` (lexicographic order) as an
/// `N×size×size×3` tensor in `[−1, 1]`.
pub fn load_image_folder(dir: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(contract_err!("image size must be positive"));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(contract_err!("no PPM/PGM images in {}", dir.as_ref().display()));
    }
    let mut data = Vec::with_capacity(paths.len() * size * size * 3);
    for p in &paths {
        data.extend(load_image(p, size)?);
    }
    Tensor::new(&[paths.len(), size, size, 3], data)
}

/// Writes an `h×w×3` image in `[−1, 1]` as 8-bit P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(shape_err!("PPM image must be h×w×3, got {s:?}")),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Writes an `h×w` map in `[0, 1]` as 8-bit P5 with `round(255·v)`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(shape_err!("PGM map must be h×w, got {s:?}")),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}
