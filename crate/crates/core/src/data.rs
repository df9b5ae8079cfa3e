//! Frame I/O, padding, augmentation and the synthetic moving-texture corpus.

use std::f32::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Spatial dimensions are padded to a multiple of this.
pub const PAD_MULTIPLE: usize = 64;
pub const CLIP_LEN: usize = 7;

/// RGB picture with values in `[0, 1]`, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub data: Tensor,
    pub poc: usize,
}

impl Frame {
    pub fn new(data: Tensor, poc: usize) -> Self {
        assert_eq!(data.shape()[..2], [1, 3], "frames are [1, 3, H, W]");
        Frame { data, poc }
    }

    pub fn filled(width: usize, height: usize, value: f32, poc: usize) -> Self {
        Frame::new(Tensor::full([1, 3, height, width], value), poc)
    }

    pub fn width(&self) -> usize {
        self.data.w()
    }

    pub fn height(&self) -> usize {
        self.data.h()
    }

    /// `8-bit` interleaved RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let plane = w * h;
        let d = self.data.data();
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                out.push(quantize8(d[c * plane + p]));
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8], poc: usize) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        let plane = width * height;
        let mut data = vec![0f32; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = rgb[p * 3 + c] as f32 / 255.0;
            }
        }
        Frame::new(Tensor::from_vec([1, 3, height, width], data), poc)
    }
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Display-order frames padded to [`PAD_MULTIPLE`] plus the original size.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub width: usize,
    pub height: usize,
}

impl Sequence {
    /// Pads every frame; `frames` must share one size.
    pub fn from_frames(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
        let (width, height) = (first.width(), first.height());
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                if (f.width(), f.height()) != (width, height) {
                    return Err(Error::Dimension(format!(
                        "frame {i} is {}x{}, expected {width}x{height}",
                        f.width(),
                        f.height()
                    )));
                }
                Ok(Frame::new(pad_replicate(&f.data, PAD_MULTIPLE), i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequence {
            frames,
            width,
            height,
        })
    }

    pub fn padded_width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn padded_height(&self) -> usize {
        self.frames[0].height()
    }

    /// Frames cropped back to the original size.
    pub fn cropped(&self) -> Vec<Frame> {
        self.frames
            .iter()
            .map(|f| Frame::new(crop_top_left(&f.data, self.width, self.height), f.poc))
            .collect()
    }
}

pub fn padded_len(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple) * multiple
}

/// Replicates the last row and column until both sides divide `multiple`.
pub fn pad_replicate(t: &Tensor, multiple: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let (ph, pw) = (padded_len(h, multiple), padded_len(w, multiple));
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for p in 0..n * c {
        for y in 0..ph {
            let row = &src[(p * h + y.min(h - 1)) * w..(p * h + y.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pw - w));
        }
    }
    Tensor::from_vec([n, c, ph, pw], out)
}

pub fn crop_top_left(t: &Tensor, width: usize, height: usize) -> Tensor {
    crop(t, 0, 0, width, height)
}

pub fn crop(t: &Tensor, x0: usize, y0: usize, width: usize, height: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    assert!(x0 + width <= w && y0 + height <= h, "crop window outside tensor");
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * width * height);
    for p in 0..n * c {
        for y in y0..y0 + height {
            let off = (p * h + y) * w + x0;
            out.extend_from_slice(&src[off..off + width]);
        }
    }
    Tensor::from_vec([n, c, height, width], out)
}

// ---- loading and saving ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    /// Directory of `frame_%05d.png` files.
    PngDir,
    /// Raw 8-bit planar YUV 4:2:0 with externally supplied dimensions.
    Yuv420 { width: usize, height: usize },
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Loads frames in display order, converts to RGB in `[0, 1]` and pads.
pub fn load_sequence(path: &Path, format: InputFormat) -> Result<Sequence> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let frames = match format {
        InputFormat::PngDir => load_png_dir(path)?,
        InputFormat::Yuv420 { width, height } => load_yuv420(path, width, height)?,
    };
    Sequence::from_frames(frames)
}

fn load_png_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_file_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p, frames.len())?);
    }
    if frames.is_empty() {
        return Err(Error::Missing(dir.join(frame_file_name(0))));
    }
    Ok(frames)
}

pub fn read_png(path: &Path, poc: usize) -> Result<Frame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                message: "unexpanded palette".into(),
            })
        }
    };
    let stride = info.line_size;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        for px in row.chunks(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(Frame::from_rgb8(w, h, &rgb, poc))
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width() as u32,
        frame.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&frame.to_rgb8()).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes `frames` as `frame_%05d.png` into `dir`, creating it if needed.
pub fn save_png_dir(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(frame_file_name(i)), f)?;
    }
    Ok(())
}

fn load_yuv420(path: &Path, width: usize, height: usize) -> Result<Vec<Frame>> {
    if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "yuv420 needs even non-zero dimensions, got {width}x{height}"
        )));
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let frame_len = width * height * 3 / 2;
    if bytes.is_empty() || bytes.len() % frame_len != 0 {
        return Err(Error::Truncated(format!(
            "{} bytes is not a multiple of the {frame_len}-byte frame size",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks(frame_len)
        .enumerate()
        .map(|(i, chunk)| yuv420_to_frame(chunk, width, height, i))
        .collect())
}

/// BT.709 limited-range YUV 4:2:0 to RGB.
pub fn yuv420_to_frame(buf: &[u8], width: usize, height: usize, poc: usize) -> Frame {
    let (cw, ch) = (width / 2, height / 2);
    let (ys, rest) = buf.split_at(width * height);
    let (us, vs) = rest.split_at(cw * ch);
    let plane = width * height;
    let mut data = vec![0f32; plane * 3];
    for y in 0..height {
        for x in 0..width {
            let luma = (ys[y * width + x] as f32 - 16.0) / 219.0;
            let cb = (us[(y / 2) * cw + x / 2] as f32 - 128.0) / 224.0;
            let cr = (vs[(y / 2) * cw + x / 2] as f32 - 128.0) / 224.0;
            let p = y * width + x;
            data[p] = (luma + 1.5748 * cr).clamp(0.0, 1.0);
            data[plane + p] = (luma - 0.187_324 * cb - 0.468_124 * cr).clamp(0.0, 1.0);
            data[2 * plane + p] = (luma + 1.8556 * cb).clamp(0.0, 1.0);
        }
    }
    Frame::new(Tensor::from_vec([1, 3, height, width], data), poc)
}

// ---- training clips -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainingClip {
    pub frames: Vec<Frame>,
    pub source_id: String,
}

impl TrainingClip {
    pub fn new(frames: Vec<Frame>, source_id: impl Into<String>) -> Result<Self> {
        if frames.len() != CLIP_LEN {
            return Err(Error::InvalidArgument(format!(
                "clips hold {CLIP_LEN} frames, got {}",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        if frames.iter().any(|f| (f.width(), f.height()) != (w, h)) {
            return Err(Error::Dimension("clip frames differ in size".into()));
        }
        Ok(TrainingClip {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// Crop window and flips shared by all frames of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    /// Deterministic choice for `seed`; flips have probability 0.5 each.
    pub fn from_seed(seed: u64, width: usize, height: usize, size: usize) -> Result<Self> {
        if width < size || height < size {
            return Err(Error::Dimension(format!(
                "{width}x{height} clip is smaller than the {size}x{size} crop"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Augmentation {
            x0: rng.random_range(0..=width - size),
            y0: rng.random_range(0..=height - size),
            size,
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, clip: &TrainingClip) -> Result<TrainingClip> {
        if clip.width() < self.x0 + self.size || clip.height() < self.y0 + self.size {
            return Err(Error::Dimension("crop window outside clip".into()));
        }
        let frames = clip
            .frames
            .iter()
            .map(|f| {
                let mut t = crop(&f.data, self.x0, self.y0, self.size, self.size);
                if self.flip_h {
                    t = flip(&t, true);
                }
                if self.flip_v {
                    t = flip(&t, false);
                }
                Frame::new(t, f.poc)
            })
            .collect();
        TrainingClip::new(frames, clip.source_id.clone())
    }
}

pub fn augment(clip: &TrainingClip, seed: u64, size: usize) -> Result<TrainingClip> {
    Augmentation::from_seed(seed, clip.width(), clip.height(), size)?.apply(clip)
}

fn flip(t: &Tensor, horizontal: bool) -> Tensor {
    let [n, c, h, w] = t.shape();
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[(p * h + y) * w + x] = src[(p * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

/// `(frame[c - k], frame[c], frame[c + k])`.
pub fn triplet(clip: &TrainingClip, k: usize, center: usize) -> Result<(Frame, Frame, Frame)> {
    if k == 0 || 2 * k + 1 > CLIP_LEN {
        return Err(Error::InvalidArgument(format!("temporal distance {k} out of range")));
    }
    if center < k || center + k >= CLIP_LEN {
        return Err(Error::InvalidArgument(format!("center {center} invalid for k={k}")));
    }
    Ok((
        clip.frames[center - k].clone(),
        clip.frames[center].clone(),
        clip.frames[center + k].clone(),
    ))
}

/// Triplet at a uniformly drawn valid center.
pub fn triplet_sampler(
    clip: &TrainingClip,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Frame, Frame, Frame)> {
    if k == 0 || 2 * k + 1 > CLIP_LEN {
        return Err(Error::InvalidArgument(format!("temporal distance {k} out of range")));
    }
    let center = rng.random_range(k..CLIP_LEN - k);
    triplet(clip, k, center)
}

/// Reads a newline-separated list of clip directories, each holding seven
/// `frame_%05d.png` files.
pub fn load_clip_index(index: &Path) -> Result<Vec<TrainingClip>> {
    let text = std::fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let base = index.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let dir: PathBuf = base.join(line);
            let frames = (0..CLIP_LEN)
                .map(|i| read_png(&dir.join(frame_file_name(i)), i))
                .collect::<Result<Vec<_>>>()?;
            TrainingClip::new(frames, line)
        })
        .collect()
}

// ---- synthetic moving textures ------------------------------------------

/// Smooth lattice noise in `[-1, 1]` with one independent field per channel.
#[derive(Clone, Copy, Debug)]
struct ValueNoise {
    seed: u64,
    cell: f32,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64, c: usize) -> f32 {
        let mut h = self.seed
            ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (c as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 33;
        (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    }

    fn sample(&self, x: f32, y: f32, c: usize) -> f32 {
        let (u, v) = (x / self.cell, y / self.cell);
        let (fx, fy) = (u.floor(), v.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(u - fx), smooth(v - fy));
        let top = self.lattice(ix, iy, c) * (1.0 - tx) + self.lattice(ix + 1, iy, c) * tx;
        let bottom = self.lattice(ix, iy + 1, c) * (1.0 - tx) + self.lattice(ix + 1, iy + 1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

#[derive(Clone, Debug)]
struct Grating {
    fx: f32,
    fy: f32,
    vx: f32,
    vy: f32,
    amp: [f32; 3],
    phase: [f32; 3],
}

/// Translating noise layer added to the background.
#[derive(Clone, Debug)]
struct NoiseLayer {
    noise: ValueNoise,
    vx: f32,
    vy: f32,
    amp: f32,
}

/// Per-frame lighting: a global offset per channel plus one smooth
/// cosine field, drawn independently for every frame index. Temporal
/// interpolation cannot predict it, so it is information the codec must send.
#[derive(Clone, Copy, Debug)]
struct Lighting {
    seed: u64,
    flicker: f32,
    field: f32,
}

/// `(offset per channel, fx, fy, phase, field amplitude per channel)` of frame `t`.
type LightState = ([f32; 3], f32, f32, f32, [f32; 3]);

impl Lighting {
    fn at(&self, t: usize) -> LightState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let mut sym = |a: f32| a * rng.random_range(-1.0f32..1.0);
        let offset = [sym(self.flicker), sym(self.flicker), sym(self.flicker)];
        let amp = [sym(self.field), sym(self.field), sym(self.field)];
        let theta = TAU * rng.random_range(0.0f32..1.0);
        let freq = rng.random_range(0.005f32..0.02);
        let phase = TAU * rng.random_range(0.0f32..1.0);
        (offset, freq * theta.cos(), freq * theta.sin(), phase, amp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disc,
    Rect,
}

/// Opaque textured object moving on a straight line while spinning.
#[derive(Clone, Debug)]
struct Sprite {
    shape: Shape,
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
    half_w: f32,
    half_h: f32,
    angle: f32,
    spin: f32,
    color: [f32; 3],
    texture: ValueNoise,
    texture_amp: f32,
}

impl Sprite {
    /// Coverage in `[0, 1]` and object-frame coordinates of pixel `(x, y)`.
    fn cover(&self, x: f32, y: f32, t: f32) -> (f32, f32, f32) {
        let (dx, dy) = (x - (self.cx + self.vx * t), y - (self.cy + self.vy * t));
        let (s, c) = (self.angle + self.spin * t).sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let dist = match self.shape {
            Shape::Disc => (u * u + v * v).sqrt() - self.half_w,
            Shape::Rect => (u.abs() - self.half_w).max(v.abs() - self.half_h),
        };
        ((0.5 - dist).clamp(0.0, 1.0), u, v)
    }
}

/// Procedural scene: translating gratings and a noise layer under a few
/// hard-edged textured sprites that translate and rotate, lit by a
/// per-frame [`Lighting`]. Rendering is analytic, so any frame index is
/// available.
#[derive(Clone, Debug)]
pub struct MovingTexture {
    width: usize,
    height: usize,
    base: [f32; 3],
    gratings: Vec<Grating>,
    noise: NoiseLayer,
    sprites: Vec<Sprite>,
    lighting: Lighting,
}

impl MovingTexture {
    pub fn random(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let mut unit = || rng.random_range(0.0f32..1.0);
        let base = [0.3 + 0.4 * unit(), 0.3 + 0.4 * unit(), 0.3 + 0.4 * unit()];
        let mut gratings = Vec::new();
        for level in 0..2 {
            let freq = if level == 0 { 0.02 + 0.04 * unit() } else { 0.06 + 0.1 * unit() };
            let theta = TAU * unit();
            let speed = 2.0 * unit();
            let dir = TAU * unit();
            let amp_scale = if level == 0 { 0.15 } else { 0.08 };
            gratings.push(Grating {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
                amp: [amp_scale * unit(), amp_scale * unit(), amp_scale * unit()],
                phase: [TAU * unit(), TAU * unit(), TAU * unit()],
            });
        }
        let dir = TAU * unit();
        let speed = 0.5 + 2.5 * unit();
        let noise = NoiseLayer {
            noise: ValueNoise {
                seed: (unit() * u32::MAX as f32) as u64,
                cell: 3.0 + 5.0 * unit(),
            },
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            amp: 0.06 + 0.1 * unit(),
        };
        let span = width.min(height) as f32;
        let count = 1 + (unit() * 3.0) as usize;
        let sprites = (0..count)
            .map(|_| {
                let dir = TAU * unit();
                let speed = 1.0 + 3.0 * unit();
                let half_w = span * (0.08 + 0.12 * unit());
                Sprite {
                    shape: if unit() < 0.5 { Shape::Disc } else { Shape::Rect },
                    cx: width as f32 * unit(),
                    cy: height as f32 * unit(),
                    vx: speed * dir.cos(),
                    vy: speed * dir.sin(),
                    half_w,
                    half_h: half_w * (0.5 + 0.5 * unit()),
                    angle: TAU * unit(),
                    spin: 0.1 * (unit() - 0.5),
                    color: [unit(), unit(), unit()],
                    texture: ValueNoise {
                        seed: (unit() * u32::MAX as f32) as u64,
                        cell: 2.0 + 4.0 * unit(),
                    },
                    texture_amp: 0.2 * unit(),
                }
            })
            .collect();
        let lighting = Lighting {
            seed: (unit() * u32::MAX as f32) as u64,
            flicker: 0.08 * unit(),
            field: 0.08 * unit(),
        };
        MovingTexture {
            width,
            height,
            base,
            gratings,
            noise,
            sprites,
            lighting,
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn render(&self, t: usize) -> Frame {
        let (w, h) = (self.width, self.height);
        let plane = w * h;
        let tf = t as f32;
        let mut data = vec![0f32; 3 * plane];
        let nl = &self.noise;
        let (offset, lfx, lfy, lphase, lamp) = self.lighting.at(t);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f32, y as f32);
                let mut px = self.base;
                for g in &self.gratings {
                    let arg = TAU * (g.fx * (xf - g.vx * tf) + g.fy * (yf - g.vy * tf));
                    for c in 0..3 {
                        px[c] += g.amp[c] * (arg + g.phase[c]).sin();
                    }
                }
                let (nx, ny) = (xf - nl.vx * tf, yf - nl.vy * tf);
                for c in 0..3 {
                    px[c] += nl.amp * nl.noise.sample(nx, ny, c);
                }
                for s in &self.sprites {
                    let (alpha, u, v) = s.cover(xf, yf, tf);
                    if alpha <= 0.0 {
                        continue;
                    }
                    for c in 0..3 {
                        let fill = s.color[c] + s.texture_amp * s.texture.sample(u, v, c);
                        px[c] += alpha * (fill - px[c]);
                    }
                }
                let field = (TAU * (lfx * xf + lfy * yf) + lphase).cos();
                for c in 0..3 {
                    px[c] += offset[c] + lamp[c] * field;
                    data[c * plane + y * w + x] = px[c].clamp(0.0, 1.0);
                }
            }
        }
        Frame::new(Tensor::from_vec([1, 3, h, w], data), t)
    }

    pub fn frames(&self, count: usize) -> Vec<Frame> {
        (0..count).map(|t| self.render(t)).collect()
    }
}

/// Lazily generated corpus of synthetic seven-frame clips.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticClips {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SyntheticClips {
    pub fn scene(&self, index: usize) -> MovingTexture {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        MovingTexture::random(self.width, self.height, &mut rng)
    }

    pub fn clip(&self, index: usize) -> TrainingClip {
        assert!(index < self.count, "clip index out of range");
        TrainingClip::new(self.scene(index).frames(CLIP_LEN), format!("synthetic-{index}"))
            .expect("synthetic clips are well formed")
    }
}
