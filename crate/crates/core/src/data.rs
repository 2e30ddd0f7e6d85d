//! Sample sources and image I/O.
//!
//! Images are grayscale grids with values in `[0, 1]`. External images come
//! in as binary or ASCII PGM/PPM with maxval 255 (color is converted with
//! luma weights), or as raw little-endian `f64` tensors. Training draws
//! random crops from a pool of such images, or from synthetic
//! piecewise-smooth images when no data directory is given.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::split_normal::{split_normal_sample, SplitNormalParams};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image must be at least 1×1".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel value {v}")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Sample encoding used when writing PGM files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmEncoding {
    Ascii,
    Binary,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Next unsigned decimal integer and the offset where it starts.
    fn integer(&mut self, what: &str) -> Result<(u32, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let reason = match self.bytes.get(start) {
                None => format!("unexpected end of file while reading {what}"),
                Some(c) => format!("expected {what}, found byte 0x{c:02x}"),
            };
            return Err(Error::MalformedHeader { offset: start, reason });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text.parse::<u32>().map_err(|_| Error::MalformedHeader {
            offset: start,
            reason: format!("{what} {text} is out of range"),
        })?;
        Ok((value, start))
    }
}

/// Decodes a PGM/PPM byte buffer.
pub fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: "missing 'P' magic".into(),
        });
    }
    let (ascii, channels) = match bytes[1] {
        b'2' => (true, 1),
        b'3' => (true, 3),
        b'5' => (false, 1),
        b'6' => (false, 3),
        c => {
            return Err(Error::MalformedHeader {
                offset: 1,
                reason: format!("unsupported format P{}", c as char),
            })
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(Error::MalformedHeader {
            offset: cur.pos,
            reason: "magic must be followed by whitespace".into(),
        });
    }
    let (width, w_off) = cur.integer("width")?;
    let (height, h_off) = cur.integer("height")?;
    if width == 0 {
        return Err(Error::MalformedHeader { offset: w_off, reason: "zero width".into() });
    }
    if height == 0 {
        return Err(Error::MalformedHeader { offset: h_off, reason: "zero height".into() });
    }
    let (maxval, m_off) = cur.integer("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval { offset: m_off, maxval });
    }
    let count = width as usize * height as usize * channels;
    let samples: Vec<u8> = if ascii {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            cur.skip_space_and_comments();
            if cur.pos >= bytes.len() {
                return Err(Error::TruncatedPayload {
                    offset: cur.pos,
                    expected: count,
                    actual: out.len(),
                    unit: "samples",
                });
            }
            let (v, off) = cur.integer("sample")?;
            if v > maxval {
                return Err(Error::MalformedHeader {
                    offset: off,
                    reason: format!("sample {v} exceeds maxval {maxval}"),
                });
            }
            out.push(v as u8);
        }
        out
    } else {
        match bytes.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(Error::MalformedHeader {
                    offset: cur.pos,
                    reason: "maxval must be followed by a single whitespace byte".into(),
                })
            }
        }
        let payload = &bytes[cur.pos..];
        if payload.len() < count {
            return Err(Error::TruncatedPayload {
                offset: cur.pos,
                expected: count,
                actual: payload.len(),
                unit: "bytes",
            });
        }
        payload[..count].to_vec()
    };
    let scale = 1.0 / maxval as f64;
    let pixels = if channels == 1 {
        samples.iter().map(|&v| v as f64 * scale).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|rgb| (0..3).map(|k| LUMA[k] * rgb[k] as f64 * scale).sum())
            .collect()
    };
    Image::new(width as usize, height as usize, pixels)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

/// Encodes an image as 8-bit PGM. Values outside `[0, 1]` are rejected
/// rather than clipped.
pub fn encode_pnm(image: &Image, encoding: PnmEncoding) -> Result<Vec<u8>> {
    if let Some(v) = image.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "pixel value {v} outside [0, 1]; clip explicitly before writing"
        )));
    }
    let quantized = image.pixels.iter().map(|v| (v * 255.0).round() as u8);
    let magic = match encoding {
        PnmEncoding::Ascii => "P2",
        PnmEncoding::Binary => "P5",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    match encoding {
        PnmEncoding::Binary => out.extend(quantized),
        PnmEncoding::Ascii => {
            let q: Vec<u8> = quantized.collect();
            for row in q.chunks(image.width) {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
    }
    Ok(out)
}

pub fn write_pnm(path: impl AsRef<Path>, image: &Image, encoding: PnmEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(image, encoding)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const RAW_TENSOR_MAGIC: [u8; 4] = *b"AELP";
pub const RAW_TENSOR_VERSION: u32 = 1;

/// Dense `f64` array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len() as u64) {
            return Err(Error::MalformedTensor(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(&RAW_TENSOR_MAGIC);
        out.extend_from_slice(&RAW_TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let take = |pos: usize, n: usize| -> Result<&[u8]> {
            bytes.get(pos..pos + n).ok_or_else(|| {
                Error::MalformedTensor(format!(
                    "need {n} bytes at offset {pos}, only {} available",
                    bytes.len().saturating_sub(pos)
                ))
            })
        };
        if take(0, 4)? != RAW_TENSOR_MAGIC {
            return Err(Error::MalformedTensor("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != RAW_TENSOR_VERSION {
            return Err(Error::MalformedTensor(format!("unsupported tensor version {version}")));
        }
        let rank = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
        let mut pos = 12;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            pos += 8;
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::MalformedTensor(format!("dims {dims:?} overflow")))?;
        let payload = take(pos, count * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += count * 8;
        Ok((Self { dims, data }, pos))
    }
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = RawTensor::decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::MalformedTensor(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write_raw_tensor(path: impl AsRef<Path>, tensor: &RawTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

/// Interprets a rank-2 `(height, width)` or rank-3 `(count, height, width)`
/// tensor as grayscale images.
pub fn images_from_tensor(t: &RawTensor) -> Result<Vec<Image>> {
    let (count, h, w) = match t.dims[..] {
        [h, w] => (1, h as usize, w as usize),
        [n, h, w] => (n as usize, h as usize, w as usize),
        _ => {
            return Err(Error::MalformedTensor(format!(
                "image tensors have rank 2 or 3, got dims {:?}",
                t.dims
            )))
        }
    };
    if h == 0 || w == 0 {
        return Ok(Vec::new());
    }
    t.data
        .chunks_exact(h * w)
        .take(count)
        .map(|c| Image::new(w, h, c.to_vec()))
        .collect()
}

/// Loads every `.pgm`, `.ppm`, `.pnm` and `.aelp` file in `dir`, in file
/// name order.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "ppm" | "pnm" | "aelp")
            )
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in &paths {
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("aelp")) {
            images.extend(images_from_tensor(&read_raw_tensor(p)?)?);
        } else {
            images.push(load_pnm(p)?);
        }
    }
    if images.is_empty() {
        return Err(Error::EmptySource(format!("no images found in {}", dir.display())));
    }
    Ok(images)
}

/// Seeded 80/20 split. At least one item lands in each half when there are
/// two or more; a single item serves as both.
pub fn split_train_eval<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = Rng::stream(seed, Stream::Custom(0x5911));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    if items.len() < 2 {
        return (items.to_vec(), items.to_vec());
    }
    let n_eval = (items.len() / 5).max(1);
    let eval = order[..n_eval].iter().map(|&i| items[i].clone()).collect();
    let train = order[n_eval..].iter().map(|&i| items[i].clone()).collect();
    (train, eval)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::new(16, 16)
    }
}

impl PatchSpec {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, channels: 1 }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn check(&self, image: &Image) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels != 1 {
            return Err(Error::InvalidArgument(format!("invalid patch spec {self:?}")));
        }
        if image.height < self.height || image.width < self.width {
            return Err(Error::Shape(format!(
                "{}×{} patch does not fit a {}×{} image",
                self.height, self.width, image.height, image.width
            )));
        }
        Ok(())
    }
}

/// Crop at a uniformly random top-left corner, flattened row-major.
pub fn sample_patch(image: &Image, spec: &PatchSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    spec.check(image)?;
    let top = rng.below(image.height - spec.height + 1);
    let left = rng.below(image.width - spec.width + 1);
    let mut out = Vec::with_capacity(spec.dim());
    for r in top..top + spec.height {
        let start = r * image.width + left;
        out.extend_from_slice(&image.pixels[start..start + spec.width]);
    }
    Ok(out)
}

/// Recipe for a random piecewise-smooth test image: a 0.5 background plus
/// linear ramps, rectangles and soft-edged disks, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImageSpec {
    pub width: usize,
    pub height: usize,
    pub gradients: usize,
    pub rectangles: usize,
    pub disks: usize,
    /// Largest end-to-end swing of a ramp.
    pub gradient_amplitude: f64,
    /// Range of the (signed) intensity added by a rectangle or disk.
    pub intensity: (f64, f64),
    /// Width in pixels of a disk's logistic edge.
    pub disk_softness: f64,
}

impl SyntheticImageSpec {
    pub fn new(size: usize) -> Self {
        Self {
            width: size,
            height: size,
            gradients: 1,
            rectangles: 3,
            disks: 3,
            gradient_amplitude: 0.4,
            intensity: (-0.4, 0.4),
            disk_softness: 1.0,
        }
    }

    pub fn empty(size: usize) -> Self {
        Self {
            gradients: 0,
            rectangles: 0,
            disks: 0,
            ..Self::new(size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("synthetic image size must be positive".into()));
        }
        let (lo, hi) = self.intensity;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument("intensity range must satisfy lo ≤ hi".into()));
        }
        if !(self.gradient_amplitude >= 0.0) || !(self.disk_softness > 0.0) {
            return Err(Error::InvalidArgument(
                "gradient amplitude must be ≥ 0 and disk softness > 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn synth_image(spec: &SyntheticImageSpec, rng: &mut Rng) -> Result<Image> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut px = vec![0.5; w * h];
    let span = w.max(h) as f64;
    for _ in 0..spec.gradients {
        let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
        let amp = rng.uniform_in(-spec.gradient_amplitude, spec.gradient_amplitude);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        for r in 0..h {
            for c in 0..w {
                let t = ((c as f64 - cx) * theta.cos() + (r as f64 - cy) * theta.sin()) / span;
                px[r * w + c] += amp * t;
            }
        }
    }
    for _ in 0..spec.rectangles {
        let (r0, r1) = ordered(rng.below(h + 1), rng.below(h + 1));
        let (c0, c1) = ordered(rng.below(w + 1), rng.below(w + 1));
        let v = rng.uniform_in(spec.intensity.0, spec.intensity.1);
        for r in r0..r1 {
            for c in c0..c1 {
                px[r * w + c] += v;
            }
        }
    }
    for _ in 0..spec.disks {
        let cx = rng.uniform_in(0.0, w as f64);
        let cy = rng.uniform_in(0.0, h as f64);
        let radius = rng.uniform_in(span / 10.0, span / 3.0);
        let v = rng.uniform_in(spec.intensity.0, spec.intensity.1);
        for r in 0..h {
            for c in 0..w {
                let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
                px[r * w + c] += v / (1.0 + ((d - radius) / spec.disk_softness).exp());
            }
        }
    }
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(w, h, px)
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Which half of the synthetic data a pool belongs to. Training and
/// evaluation pools for the same seed never share an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRole {
    Train,
    Eval,
}

/// `count` synthetic images, each from its own substream of `seed`.
pub fn synthetic_pool(spec: &SyntheticImageSpec, count: usize, seed: u64, role: PoolRole) -> Result<Vec<Image>> {
    let base = match role {
        PoolRole::Train => 1 << 20,
        PoolRole::Eval => 2 << 20,
    };
    (0..count)
        .map(|i| synth_image(spec, &mut Rng::stream(seed, Stream::Custom(base + i as u64))))
        .collect()
}

/// A stream of clean training samples.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn sample(&mut self, rng: &mut Rng) -> Vec<f64>;
}

/// One-dimensional split normal draws.
#[derive(Clone, Debug)]
pub struct SplitNormalSource {
    pub params: SplitNormalParams,
}

impl SampleSource for SplitNormalSource {
    fn dim(&self) -> usize {
        1
    }

    fn sample(&mut self, rng: &mut Rng) -> Vec<f64> {
        vec![split_normal_sample(&self.params, rng)]
    }
}

/// Random crops from a pool of images: pick an image uniformly, then a
/// corner uniformly.
#[derive(Clone, Debug)]
pub struct PatchSource {
    images: Vec<Image>,
    spec: PatchSpec,
}

impl PatchSource {
    pub fn new(images: Vec<Image>, spec: PatchSpec) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptySource("patch source needs at least one image".into()));
        }
        for img in &images {
            spec.check(img)?;
        }
        Ok(Self { images, spec })
    }

    pub fn spec(&self) -> PatchSpec {
        self.spec
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn patches(&mut self, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

impl SampleSource for PatchSource {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn sample(&mut self, rng: &mut Rng) -> Vec<f64> {
        let img = &self.images[rng.below(self.images.len())];
        sample_patch(img, &self.spec, rng).expect("images validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn p5(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn p5_scaling() {
        let img = parse_pnm(&p5(2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn ascii_and_binary_agree() {
        let ascii = b"P2\n# a comment\n2 2\n255\n0 255\n128 64\n";
        assert_eq!(parse_pnm(ascii).unwrap(), parse_pnm(&p5(2, 2, &[0, 255, 128, 64])).unwrap());
        let rgb_ascii = b"P3 1 2 255 10 20 30 200 100 0";
        let mut rgb_bin = b"P6 1 2 255\n".to_vec();
        rgb_bin.extend_from_slice(&[10, 20, 30, 200, 100, 0]);
        let a = parse_pnm(rgb_ascii).unwrap();
        assert_eq!(a, parse_pnm(&rgb_bin).unwrap());
        let expect = (0.299 * 10.0 + 0.587 * 20.0 + 0.114 * 30.0) / 255.0;
        assert!((a.pixels()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn distinct_errors_with_offsets() {
        match parse_pnm(&p5(2, 2, &[1, 2, 3])) {
            Err(Error::TruncatedPayload { offset, expected, actual, unit }) => {
                assert_eq!((offset, expected, actual, unit), (11, 4, 3, "bytes"));
            }
            other => panic!("{other:?}"),
        }
        match parse_pnm(b"P5\n2 2\n65535\n") {
            Err(Error::UnsupportedMaxval { offset, maxval }) => assert_eq!((offset, maxval), (7, 65535)),
            other => panic!("{other:?}"),
        }
        match parse_pnm(b"P5\n2 x\n255\n") {
            Err(Error::MalformedHeader { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_pnm(b"P7\n"), Err(Error::MalformedHeader { offset: 1, .. })));
        assert!(matches!(
            parse_pnm(b"P2 2 2 255 1 2 3"),
            Err(Error::TruncatedPayload { expected: 4, actual: 3, unit: "samples", .. })
        ));
        let msg = parse_pnm(&p5(2, 2, &[1])).unwrap_err().to_string();
        assert!(msg.contains("expected 4 bytes") && msg.contains("found 1"), "{msg}");
    }

    #[test]
    fn pnm_round_trip_is_exact() {
        let mut rng = Rng::new(4);
        let payload: Vec<u8> = (0..35).map(|_| rng.below(256) as u8).collect();
        let img = parse_pnm(&p5(7, 5, &payload)).unwrap();
        for enc in [PnmEncoding::Binary, PnmEncoding::Ascii] {
            let back = parse_pnm(&encode_pnm(&img, enc).unwrap()).unwrap();
            assert_eq!(back, img);
        }
        assert_eq!(encode_pnm(&img, PnmEncoding::Binary).unwrap(), p5(7, 5, &payload));
        let bad = Image::new(1, 1, vec![1.5]).unwrap();
        assert!(encode_pnm(&bad, PnmEncoding::Binary).is_err());
    }

    #[test]
    fn raw_tensor_round_trip() {
        let t = RawTensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"AELP");
        assert_eq!(bytes.len(), 12 + 16 + 48);
        let (back, used) = RawTensor::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(RawTensor::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(RawTensor::decode(&wrong).is_err());
        assert!(RawTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let imgs = images_from_tensor(&t).unwrap();
        assert_eq!((imgs.len(), imgs[0].width(), imgs[0].height()), (1, 3, 2));
    }

    #[test]
    fn whole_image_patch() {
        let img = synth_image(&SyntheticImageSpec::new(16), &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            assert_eq!(sample_patch(&img, &PatchSpec::default(), &mut rng).unwrap(), img.pixels());
        }
        assert!(sample_patch(&img, &PatchSpec::new(17, 4), &mut rng).is_err());
    }

    #[test]
    fn patch_sampling_is_seeded() {
        let img = synth_image(&SyntheticImageSpec::new(40), &mut Rng::new(2)).unwrap();
        let draw = |s| {
            let mut rng = Rng::new(s);
            (0..10)
                .map(|_| sample_patch(&img, &PatchSpec::default(), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn synthetic_images() {
        let flat = synth_image(&SyntheticImageSpec::empty(8), &mut Rng::new(0)).unwrap();
        assert!(flat.pixels().iter().all(|&v| v == 0.5));
        for s in 0..10u64 {
            let spec = SyntheticImageSpec::new(24);
            let a = synth_image(&spec, &mut Rng::new(2 * s)).unwrap();
            let b = synth_image(&spec, &mut Rng::new(2 * s + 1)).unwrap();
            assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a, b);
            assert_eq!(a, synth_image(&spec, &mut Rng::new(2 * s)).unwrap());
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let items: Vec<u32> = (0..10).collect();
        let (train, eval) = split_train_eval(&items, 5);
        assert_eq!((train.len(), eval.len()), (8, 2));
        let mut all: Vec<u32> = train.iter().chain(&eval).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_train_eval(&items, 5), (train, eval));
        assert_eq!(split_train_eval(&[7], 0), (vec![7], vec![7]));
    }

    #[test]
    fn image_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir(dir.path()), Err(Error::EmptySource(_))));
        let img = Image::new(2, 1, vec![0.0, 1.0]).unwrap();
        write_pnm(dir.path().join("b.pgm"), &img, PnmEncoding::Ascii).unwrap();
        let t = RawTensor::new(vec![2, 1, 2], vec![0.25, 0.5, 0.75, 1.0]).unwrap();
        write_raw_tensor(dir.path().join("a.aelp"), &t).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let imgs = load_image_dir(dir.path()).unwrap();
        assert_eq!(imgs.len(), 3);
        assert_eq!(imgs[0].pixels(), &[0.25, 0.5]);
        assert_eq!(imgs[2], img);
        assert!(load_pnm(dir.path().join("missing.pgm")).unwrap_err().is_io());
    }

    #[test]
    fn split_normal_source() {
        let mut src = SplitNormalSource { params: SplitNormalParams::new(0.0, 1.0, 2.0).unwrap() };
        let mut rng = Rng::new(1);
        assert_eq!(src.dim(), 1);
        let left = (0..20_000).filter(|_| src.sample(&mut rng)[0] < 0.0).count();
        assert!((left as f64 / 20_000.0 - 1.0 / 3.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn patches_stay_in_bounds(
            iw in 1usize..30, ih in 1usize..30, pw in 1usize..30, ph in 1usize..30, seed: u64
        ) {
            let pixels: Vec<f64> = (0..iw * ih).map(|i| i as f64 / (iw * ih) as f64).collect();
            let img = Image::new(iw, ih, pixels).unwrap();
            let spec = PatchSpec::new(ph, pw);
            let mut rng = Rng::new(seed);
            match sample_patch(&img, &spec, &mut rng) {
                Ok(p) => {
                    prop_assert!(pw <= iw && ph <= ih);
                    prop_assert_eq!(p.len(), pw * ph);
                    prop_assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
                }
                Err(_) => prop_assert!(pw > iw || ph > ih),
            }
        }

        #[test]
        fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut b = b"P5 3 2 255\n".to_vec();
            b.extend(bytes.iter().copied());
            let _ = parse_pnm(&b);
            let _ = parse_pnm(&bytes);
            let _ = RawTensor::decode(&bytes);
        }
    }
}
