//! Corpus generation and persistence.
//!
//! Two layouts share one manifest format:
//!
//! * training sets (`frames: loudest`) store one noisy/clean FS-GCC
//!   magnitude crop per example as raw little-endian `f64` files;
//! * evaluation sets (`frames: all`) store the rendered two-channel signals
//!   of every scene, so estimators can be run on every STFT frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{fft_in_place, frame_starts, hop_length, is_power_of_two, windowed_frame, SampleBuffer, Spectrum, WindowKind};
use crate::error::DatasetError;
use crate::fsgcc::{fs_gcc, FsGccConfig, FsGccMatrix, RealMatrix};
use crate::gcc::correlation_time;
use crate::room::{distance, reflection_coefficient, render_mic_signals, true_tdoa, Point3, RoomSetup, SINC_TAPS};
use crate::unet::{normalize_by_max, PairSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSelection {
    /// The single highest-energy frame per scene (training pairs).
    Loudest,
    /// Every complete STFT frame (evaluation).
    All,
}

/// Grid rendered for every geometry instead of random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub t60_s: Vec<f64>,
    /// `null` renders without noise.
    pub snr_db: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub room_dims: Point3,
    pub n_mic_pairs: usize,
    pub n_sources: usize,
    pub snr_range_db: [f64; 2],
    pub t60_range_s: [f64; 2],
    pub source_height: f64,
    pub fs: f64,
    pub frame_length: usize,
    pub overlap: f64,
    pub fsgcc: FsGccConfig,
    pub seed: u64,
    pub mic_spacing_m: [f64; 2],
    pub wall_margin_m: f64,
    pub utterance_s: f64,
    pub crop_width: usize,
    pub frames: FrameSelection,
    /// Frames kept per scene with `Loudest` selection, highest energy first.
    pub frames_per_scene: usize,
    pub sweep: Option<Sweep>,
    /// WAV files used round-robin as sources; synthetic speech when empty.
    pub wav_sources: Vec<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            room_dims: [6.0, 7.0, 3.0],
            n_mic_pairs: 8,
            n_sources: 8,
            snr_range_db: [-10.0, 20.0],
            t60_range_s: [0.2, 1.0],
            source_height: 1.25,
            fs: 44_100.0,
            frame_length: 2048,
            overlap: 0.75,
            fsgcc: FsGccConfig::default(),
            seed: 0,
            mic_spacing_m: [0.3, 0.45],
            wall_margin_m: 0.5,
            utterance_s: 0.5,
            crop_width: 128,
            frames: FrameSelection::Loudest,
            frames_per_scene: 1,
            sweep: None,
            wav_sources: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.n_mic_pairs == 0 || self.n_sources == 0 {
            return bad("n_mic_pairs and n_sources must be at least 1".into());
        }
        for (name, r) in [
            ("snr_range_db", self.snr_range_db),
            ("t60_range_s", self.t60_range_s),
            ("mic_spacing_m", self.mic_spacing_m),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} must be an ordered finite pair, got {r:?}"));
            }
        }
        if self.t60_range_s[0] < 0.0 || self.mic_spacing_m[0] <= 0.0 {
            return bad("T60 must be non-negative and mic spacing positive".into());
        }
        if !(self.fs > 0.0) || !(0.0..1.0).contains(&self.overlap) {
            return bad("fs must be positive and overlap in [0, 1)".into());
        }
        if !is_power_of_two(self.frame_length) || self.frame_length != self.fsgcc.dft_length {
            return bad(format!(
                "frame_length {} must be a power of two equal to fsgcc.dft_length {}",
                self.frame_length, self.fsgcc.dft_length
            ));
        }
        self.fsgcc.validate()?;
        if self.frames_per_scene == 0 {
            return bad("frames_per_scene must be at least 1".into());
        }
        if !is_power_of_two(self.crop_width) || self.crop_width > self.frame_length {
            return bad(format!("crop_width {} must be a power of two ≤ frame_length", self.crop_width));
        }
        if self.room_dims.iter().any(|d| *d <= 2.0 * self.wall_margin_m) || self.wall_margin_m < 0.0 {
            return bad("room too small for the wall margin".into());
        }
        if self.source_height <= 0.0 || self.source_height >= self.room_dims[2] {
            return bad("source height outside the room".into());
        }
        if (self.utterance_s * self.fs) < self.frame_length as f64 {
            return bad("utterance shorter than one frame".into());
        }
        // crops must cover every physically possible lag
        let max_lag = (self.mic_spacing_m[1] / crate::room::DEFAULT_SPEED_OF_SOUND * self.fs).ceil() as usize;
        if max_lag >= self.crop_width / 2 {
            return bad(format!(
                "mic spacing up to {} m reaches lag {max_lag}, beyond the ±{} crop",
                self.mic_spacing_m[1],
                self.crop_width / 2
            ));
        }
        if let Some(s) = &self.sweep {
            if s.t60_s.is_empty() || s.snr_db.is_empty() || s.t60_s.iter().any(|t| !(*t >= 0.0)) {
                return bad("sweep grids must be non-empty with T60 ≥ 0".into());
            }
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        hop_length(self.frame_length, self.overlap).unwrap_or(1)
    }
}

/// `ChaCha8` stream `stream` of `seed`; independent per example, so
/// generation order does not affect any draw.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_PAIR: u64 = 1 << 40;
const STREAM_SOURCE: u64 = 2 << 40;
const STREAM_SCENE: u64 = 3 << 40;
const STREAM_NOISE: u64 = 4 << 40;
const STREAM_SPEECH: u64 = 5 << 40;

/// Horizontal pair at the source height, random orientation, every mic
/// at least the wall margin from the walls.
pub fn sample_mic_pair(cfg: &ExperimentConfig, index: usize) -> (Point3, Point3) {
    let mut rng = sub_rng(cfg.seed, STREAM_PAIR + index as u64);
    let m = cfg.wall_margin_m;
    let [lx, ly, _] = cfg.room_dims;
    loop {
        let d = rng.gen_range(cfg.mic_spacing_m[0]..=cfg.mic_spacing_m[1]);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let cx = rng.gen_range(m..lx - m);
        let cy = rng.gen_range(m..ly - m);
        let (dx, dy) = (0.5 * d * phi.cos(), 0.5 * d * phi.sin());
        let a = [cx - dx, cy - dy, cfg.source_height];
        let b = [cx + dx, cy + dy, cfg.source_height];
        let inside = |p: &Point3| p[0] >= m && p[0] <= lx - m && p[1] >= m && p[1] <= ly - m;
        if inside(&a) && inside(&b) {
            return (a, b);
        }
    }
}

/// Source on the horizontal plane, at least the wall margin from walls and
/// from both microphones of `pair`.
pub fn sample_source(cfg: &ExperimentConfig, index: usize, pair_index: usize, pair: &(Point3, Point3)) -> Point3 {
    let mut rng = sub_rng(cfg.seed, STREAM_SOURCE + index as u64);
    let m = cfg.wall_margin_m;
    let [lx, ly, _] = cfg.room_dims;
    let draw = |rng: &mut ChaCha8Rng| [rng.gen_range(m..lx - m), rng.gen_range(m..ly - m), cfg.source_height];
    let clear = |p: &Point3| distance(p, &pair.0) >= m.max(0.3) && distance(p, &pair.1) >= m.max(0.3);
    let p = draw(&mut rng);
    if clear(&p) {
        return p;
    }
    // the shared draw collides with this pair; redraw on a pair-specific stream
    let mut rng = sub_rng(cfg.seed, STREAM_SOURCE + ((pair_index as u64 + 1) << 20) + index as u64);
    loop {
        let p = draw(&mut rng);
        if clear(&p) {
            return p;
        }
    }
}

/// Amplitude-modulated, formant-filtered noise standing in for speech.
///
/// White noise drives three two-pole resonators (first three formants,
/// randomised per seed); a raised-cosine syllabic envelope at 4–8 Hz with a
/// floor keeps every 100 ms window audible. Peak-normalised to 0.9.
pub fn synth_speech_like(duration_s: f64, fs: f64, seed: u64) -> Result<SampleBuffer, DatasetError> {
    if !(duration_s > 0.0) || !(fs > 0.0) {
        return Err(DatasetError::InvalidConfig("duration and fs must be positive".into()));
    }
    let n = (duration_s * fs).round().max(1.0) as usize;
    let mut rng = sub_rng(seed, STREAM_SPEECH);
    let formants = [
        (rng.gen_range(500.0..800.0), rng.gen_range(80.0..120.0), 1.0),
        (rng.gen_range(1200.0..2000.0), rng.gen_range(100.0..160.0), 0.7),
        (rng.gen_range(2400.0..3200.0), rng.gen_range(150.0..250.0), 0.5),
    ];
    let rate = rng.gen_range(4.0..8.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let excitation: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let mut out = vec![0.0; n];
    for (f, bw, gain) in formants {
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let a1 = 2.0 * r * (std::f64::consts::TAU * f / fs).cos();
        let a2 = -r * r;
        let g = gain * (1.0 - r);
        let (mut y1, mut y2) = (0.0, 0.0);
        for (o, x) in out.iter_mut().zip(&excitation) {
            let y = g * x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *o += y;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let s = 0.5 - 0.5 * (std::f64::consts::TAU * rate * t + phase).cos();
        *o *= 0.2 + 0.8 * s * s;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Ok(SampleBuffer::new(out, fs)?)
}

fn wav_err(offset: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Wav {
        offset,
        message: message.into(),
    }
}

fn le_u16(b: &[u8], at: usize) -> Result<u16, DatasetError> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| wav_err(at, "unexpected end of file"))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32, DatasetError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| wav_err(at, "unexpected end of file"))
}

/// Parses RIFF/WAVE bytes (PCM 16/24/32-bit or IEEE float 32/64, possibly
/// `WAVE_FORMAT_EXTENSIBLE`). Returns the first channel and the sample rate.
pub fn parse_wav(bytes: &[u8]) -> Result<(Vec<f64>, f64), DatasetError> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(wav_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(wav_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 {
                return Err(wav_err(pos + 4, "fmt chunk shorter than 16 bytes"));
            }
            let mut tag = le_u16(bytes, body)?;
            let channels = le_u16(bytes, body + 2)?;
            let rate = le_u32(bytes, body + 4)?;
            let bits = le_u16(bytes, body + 14)?;
            if tag == 0xFFFE {
                if size < 40 {
                    return Err(wav_err(body, "extensible fmt chunk too short"));
                }
                tag = le_u16(bytes, body + 24)?;
            }
            if channels == 0 {
                return Err(wav_err(body + 2, "zero channels"));
            }
            if rate == 0 {
                return Err(wav_err(body + 4, "zero sample rate"));
            }
            fmt = Some((tag, channels, rate, bits, body));
        } else if id == b"data" {
            let (tag, channels, rate, bits, fmt_at) = fmt.ok_or_else(|| wav_err(pos, "data chunk before fmt chunk"))?;
            let end = body.checked_add(size).filter(|e| *e <= bytes.len()).ok_or_else(|| {
                wav_err(pos + 4, format!("data chunk of {size} bytes runs past end of file"))
            })?;
            let width = bits as usize / 8;
            let decode: fn(&[u8]) -> f64 = match (tag, bits) {
                (1, 16) => |s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                (1, 24) => |s| (i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8) as f64 / 8_388_608.0,
                (1, 32) => |s| i32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64 / 2_147_483_648.0,
                (3, 32) => |s| f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
                (3, 64) => |s| f64::from_le_bytes(s[..8].try_into().expect("8 bytes")),
                _ => return Err(wav_err(fmt_at, format!("unsupported format tag {tag} with {bits} bits"))),
            };
            let stride = width * channels as usize;
            let samples: Vec<f64> = bytes[body..end].chunks_exact(stride).map(|f| decode(&f[..width])).collect();
            if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
                return Err(wav_err(body + i * stride, "non-finite sample"));
            }
            return Ok((samples, rate as f64));
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(wav_err(pos.min(bytes.len()), "no data chunk"))
}

/// Band-limited resampling with a Hann-windowed sinc of 32 zero crossings.
pub fn resample(x: &[f64], from: f64, to: f64) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    const HALF: f64 = 32.0;
    let ratio = to / from;
    let cutoff = ratio.min(1.0);
    let n_out = ((x.len() as f64) * ratio).round() as usize;
    let reach = HALF / cutoff;
    (0..n_out)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = (t - reach).ceil().max(0.0) as usize;
            let hi = ((t + reach).floor() as usize).min(x.len() - 1);
            (lo..=hi)
                .map(|k| {
                    let d = t - k as f64;
                    let arg = d * cutoff;
                    let sinc = if arg == 0.0 { 1.0 } else { (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg) };
                    let w = 0.5 + 0.5 * (std::f64::consts::PI * d / reach).cos();
                    x[k] * cutoff * sinc * w
                })
                .sum()
        })
        .collect()
}

/// Reads a WAV file, keeps the first channel, resamples to `fs` and scales
/// down to peak 1 if it exceeds it.
pub fn load_wav(path: &Path, fs: f64) -> Result<SampleBuffer, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let (mut x, rate) = parse_wav(&bytes)?;
    if rate != fs {
        x = resample(&x, rate, fs);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(SampleBuffer::new(x, fs)?)
}

/// 16-bit PCM mono encoding, clipped to [-1, 1].
pub fn wav_bytes(buffer: &SampleBuffer) -> Vec<u8> {
    let n = buffer.len();
    let rate = buffer.sample_rate_hz().round() as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + 2 * n as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(2 * rate).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(2 * n as u32).to_le_bytes());
    for v in buffer.samples() {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, buffer: &SampleBuffer) -> Result<(), DatasetError> {
    fs::write(path, wav_bytes(buffer)).map_err(|e| DatasetError::io(path, e))
}

/// FS-GCC of the Hann-windowed frame starting at `start` in both channels.
pub fn frame_spectra(x1: &[f64], x2: &[f64], start: usize, window: &[f64]) -> Result<(Spectrum, Spectrum), DatasetError> {
    let mut a = windowed_frame(x1, start, window);
    let mut b = windowed_frame(x2, start, window);
    fft_in_place(&mut a, false)?;
    fft_in_place(&mut b, false)?;
    Ok((Spectrum::new(a), Spectrum::new(b)))
}

pub fn frame_fsgcc(x1: &[f64], x2: &[f64], start: usize, window: &[f64], cfg: &FsGccConfig) -> Result<FsGccMatrix, DatasetError> {
    let (a, b) = frame_spectra(x1, x2, start, window)?;
    Ok(fs_gcc(&a, &b, cfg)?)
}

/// Magnitude crop of `width` lags centred on zero lag.
pub fn centered_crop(m: &FsGccMatrix, width: usize) -> Result<RealMatrix, DatasetError> {
    Ok(m.magnitude().crop_columns(m.cols() / 2, width)?)
}

/// Start of the highest-energy complete frame (earliest on ties).
pub fn loudest_frame(x: &[f64], frame_length: usize, hop: usize) -> Option<usize> {
    loudest_frames(x, frame_length, hop, 1).first().copied()
}

/// Starts of the `k` highest-energy complete frames, loudest first
/// (earliest on ties).
pub fn loudest_frames(x: &[f64], frame_length: usize, hop: usize, k: usize) -> Vec<usize> {
    let mut frames: Vec<(usize, f64)> = frame_starts(x.len(), frame_length, hop)
        .into_iter()
        .map(|s| (s, x[s..s + frame_length].iter().map(|v| v * v).sum()))
        .collect();
    frames.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    frames.into_iter().take(k).map(|(s, _)| s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub id: usize,
    pub mic_pair: usize,
    pub source_index: usize,
    pub room_dims: Point3,
    pub mic_1: Point3,
    pub mic_2: Point3,
    pub source: Point3,
    pub t60: f64,
    /// `None` when rendered without noise.
    pub snr_db: Option<f64>,
    pub true_tdoa: i64,
    /// Largest physically possible |lag| for this pair, in samples.
    pub max_lag: usize,
    pub correlation_time: f64,
    pub source_file: Option<String>,
    /// Training layout: start samples of the selected frames and crop files
    /// holding one crop per frame, back to back.
    pub frame_starts: Vec<usize>,
    pub noisy: Option<String>,
    pub clean: Option<String>,
    /// Evaluation layout: both channels back to back, and frame starts.
    pub signals: Option<String>,
    pub samples: Option<usize>,
    pub frame_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomModelInfo {
    pub method: String,
    pub reflection_coefficient: String,
    pub max_order: String,
    pub fractional_delay_taps: usize,
    pub speed_of_sound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub frames: FrameSelection,
    pub tensor_shape: [usize; 2],
    pub config: ExperimentConfig,
    pub room_model: RoomModelInfo,
    pub examples: Vec<ExampleRecord>,
    pub skipped: Vec<String>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Frames across all scenes: every evaluation frame, or every stored training crop.
    pub fn frame_total(&self) -> usize {
        self.examples.iter().map(|e| e.frame_count.unwrap_or(e.frame_starts.len())).sum()
    }
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(8 * values.len());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(DatasetError::Manifest(format!(
            "{} holds {} bytes, not a whole number of f64 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// One scene to render.
#[derive(Debug, Clone)]
struct Scene {
    id: usize,
    pair: usize,
    source: usize,
    setup: RoomSetup,
}

fn plan_scenes(cfg: &ExperimentConfig) -> Vec<Scene> {
    let pairs: Vec<_> = (0..cfg.n_mic_pairs).map(|p| sample_mic_pair(cfg, p)).collect();
    let grid: Vec<(f64, Option<f64>)> = match &cfg.sweep {
        Some(s) => s.t60_s.iter().flat_map(|t| s.snr_db.iter().map(move |n| (*t, *n))).collect(),
        None => vec![(f64::NAN, None)],
    };
    let mut scenes = Vec::new();
    for (t60, snr) in grid {
        for (p, pair) in pairs.iter().enumerate() {
            for s in 0..cfg.n_sources {
                let id = scenes.len();
                let src = sample_source(cfg, s, p, pair);
                let (t60, snr) = if cfg.sweep.is_some() {
                    (t60, snr)
                } else {
                    let mut rng = sub_rng(cfg.seed, STREAM_SCENE + id as u64);
                    let t = rng.gen_range(cfg.t60_range_s[0]..=cfg.t60_range_s[1]);
                    let n = rng.gen_range(cfg.snr_range_db[0]..=cfg.snr_range_db[1]);
                    (t, Some(n))
                };
                let setup = RoomSetup::new(cfg.room_dims, pair.0, pair.1, src)
                    .with_t60(t60)
                    .with_snr_db(snr.unwrap_or(f64::INFINITY))
                    .with_sample_rate(cfg.fs);
                scenes.push(Scene { id, pair: p, source: s, setup });
            }
        }
    }
    scenes
}

fn source_signal(cfg: &ExperimentConfig, index: usize) -> Result<(SampleBuffer, Option<String>), DatasetError> {
    if cfg.wav_sources.is_empty() {
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);
        return Ok((synth_speech_like(cfg.utterance_s, cfg.fs, seed)?, None));
    }
    let path = &cfg.wav_sources[index % cfg.wav_sources.len()];
    Ok((load_wav(path, cfg.fs)?, Some(path.display().to_string())))
}

enum SceneOutcome {
    Done(ExampleRecord),
    Skipped(String),
}

fn render_scene(cfg: &ExperimentConfig, root: &Path, scene: &Scene, source: &(SampleBuffer, Option<String>), tc: f64) -> Result<SceneOutcome, DatasetError> {
    let (signal, source_file) = source;
    let n = cfg.frame_length;
    if signal.len() < n {
        return Ok(SceneOutcome::Skipped(format!(
            "scene {}: source of {} samples is shorter than one frame",
            scene.id,
            signal.len()
        )));
    }
    let setup = &scene.setup;
    let noise_seed = sub_rng(cfg.seed, STREAM_NOISE + scene.id as u64).gen::<u64>();
    let (x1, x2) = render_mic_signals(setup, signal, noise_seed)?;
    let mut record = ExampleRecord {
        id: scene.id,
        mic_pair: scene.pair,
        source_index: scene.source,
        room_dims: setup.room_dims,
        mic_1: setup.mic_1,
        mic_2: setup.mic_2,
        source: setup.source,
        t60: setup.t60,
        snr_db: setup.snr_db.is_finite().then_some(setup.snr_db),
        true_tdoa: true_tdoa(setup),
        max_lag: setup.max_physical_lag(),
        correlation_time: tc,
        source_file: source_file.clone(),
        frame_starts: Vec::new(),
        noisy: None,
        clean: None,
        signals: None,
        samples: None,
        frame_count: None,
    };
    let window = WindowKind::Hann.samples(n)?;
    match cfg.frames {
        FrameSelection::Loudest => {
            let anechoic = setup.clone().with_t60(0.0).with_snr_db(f64::INFINITY);
            anechoic.validate()?;
            let (c1, c2) = render_mic_signals(&anechoic, signal, 0)?;
            let starts = loudest_frames(c1.samples(), n, cfg.hop(), cfg.frames_per_scene);
            let (mut clean, mut noisy) = (Vec::new(), Vec::new());
            for &start in &starts {
                clean.extend(centered_crop(&frame_fsgcc(c1.samples(), c2.samples(), start, &window, &cfg.fsgcc)?, cfg.crop_width)?.data);
                noisy.extend(centered_crop(&frame_fsgcc(x1.samples(), x2.samples(), start, &window, &cfg.fsgcc)?, cfg.crop_width)?.data);
            }
            let (np, cp) = (format!("tensors/{:05}_noisy.f64", scene.id), format!("tensors/{:05}_clean.f64", scene.id));
            write_f64s(&root.join(&np), &noisy)?;
            write_f64s(&root.join(&cp), &clean)?;
            record.frame_starts = starts;
            record.noisy = Some(np);
            record.clean = Some(cp);
        }
        FrameSelection::All => {
            let sp = format!("signals/{:05}.f64", scene.id);
            let mut both = x1.samples().to_vec();
            both.extend_from_slice(x2.samples());
            write_f64s(&root.join(&sp), &both)?;
            record.signals = Some(sp);
            record.samples = Some(x1.len());
            record.frame_count = Some(frame_starts(x1.len(), n, cfg.hop()).len());
        }
    }
    Ok(SceneOutcome::Done(record))
}

/// Renders every scene of `cfg` under `root` and writes the manifest.
/// Output is identical for any worker count.
pub fn generate_pairs(cfg: &ExperimentConfig, root: &Path) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    fs::create_dir_all(root.join("tensors")).map_err(|e| DatasetError::io(root, e))?;
    fs::create_dir_all(root.join("signals")).map_err(|e| DatasetError::io(root, e))?;
    let sources: Vec<(SampleBuffer, Option<String>)> =
        (0..cfg.n_sources).into_par_iter().map(|s| source_signal(cfg, s)).collect::<Result<_, _>>()?;
    let tcs: Vec<f64> = sources
        .par_iter()
        .map(|(s, _)| correlation_time(s).map_err(|e| DatasetError::InvalidConfig(format!("source correlation time: {e}"))))
        .collect::<Result<_, _>>()?;
    let scenes = plan_scenes(cfg);
    let outcomes: Vec<SceneOutcome> = scenes
        .par_iter()
        .map(|sc| render_scene(cfg, root, sc, &sources[sc.source], tcs[sc.source]))
        .collect::<Result<_, _>>()?;
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            SceneOutcome::Done(r) => examples.push(r),
            SceneOutcome::Skipped(m) => skipped.push(m),
        }
    }
    let beta = reflection_coefficient(&cfg.room_dims, cfg.t60_range_s[1], crate::room::DEFAULT_SPEED_OF_SOUND);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        frames: cfg.frames,
        tensor_shape: [cfg.fsgcc.band_count, cfg.crop_width],
        config: cfg.clone(),
        room_model: RoomModelInfo {
            method: "image-source, uniform walls".into(),
            reflection_coefficient: format!(
                "fitted so the image lattice decays by 60 dB in T60 (beta = {beta:.4} at the upper T60)"
            ),
            max_order: "every image arriving within T60 of the direct path and within 60 dB of it".into(),
            fractional_delay_taps: SINC_TAPS,
            speed_of_sound: crate::room::DEFAULT_SPEED_OF_SOUND,
        },
        examples,
        skipped,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| DatasetError::io(&path, e))?;
    Ok(manifest)
}

/// Loads every noisy/clean crop of a training set, each scaled by its own
/// maximum.
pub fn load_pairs(root: &Path, manifest: &DatasetManifest) -> Result<PairSet, DatasetError> {
    let [h, w] = manifest.tensor_shape;
    let mut set = PairSet {
        height: h,
        width: w,
        ..PairSet::default()
    };
    for e in &manifest.examples {
        let (Some(np), Some(cp)) = (&e.noisy, &e.clean) else {
            return Err(DatasetError::Manifest(format!("example {} has no tensors (evaluation set?)", e.id)));
        };
        let noisy = read_f64s(&root.join(np))?;
        let clean = read_f64s(&root.join(cp))?;
        let expected = h * w * e.frame_starts.len();
        if expected == 0 || noisy.len() != expected || clean.len() != expected {
            return Err(DatasetError::Manifest(format!(
                "example {} tensors do not hold {} crops of shape {h}x{w}",
                e.id,
                e.frame_starts.len()
            )));
        }
        for (n, c) in noisy.chunks(h * w).zip(clean.chunks(h * w)) {
            let (mut n, mut c) = (n.to_vec(), c.to_vec());
            normalize_by_max(&mut n);
            normalize_by_max(&mut c);
            set.noisy.push(n);
            set.clean.push(c);
        }
    }
    Ok(set)
}

/// Both channels of an evaluation scene.
pub fn load_signals(root: &Path, record: &ExampleRecord) -> Result<(Vec<f64>, Vec<f64>), DatasetError> {
    let (Some(sp), Some(n)) = (&record.signals, record.samples) else {
        return Err(DatasetError::Manifest(format!("example {} has no signals (training set?)", record.id)));
    };
    let mut both = read_f64s(&root.join(sp))?;
    if both.len() != 2 * n {
        return Err(DatasetError::Manifest(format!("{sp} holds {} values, expected {}", both.len(), 2 * n)));
    }
    let x2 = both.split_off(n);
    Ok((both, x2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_speech_correlation_time_in_range() {
        for seed in 0..20 {
            let s = synth_speech_like(0.5, 44_100.0, seed).unwrap();
            let tc = correlation_time(&s).unwrap();
            assert!((12.0..=30.0).contains(&tc), "seed {seed}: T_c = {tc}");
        }
    }

    #[test]
    fn synthetic_speech_is_seeded_and_never_silent() {
        let a = synth_speech_like(1.0, 44_100.0, 3).unwrap();
        assert_eq!(a, synth_speech_like(1.0, 44_100.0, 3).unwrap());
        assert_ne!(a, synth_speech_like(1.0, 44_100.0, 4).unwrap());
        let total = a.power();
        for w in a.samples().chunks(4410) {
            let p = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            assert!(p > 1e-3 * total);
        }
    }

    #[test]
    fn wav_round_trip_within_quantisation() {
        let x: Vec<f64> = (0..1000).map(|i| 0.8 * (i as f64 * 0.1).sin()).collect();
        let buf = SampleBuffer::new(x.clone(), 44_100.0).unwrap();
        let (y, rate) = parse_wav(&wav_bytes(&buf)).unwrap();
        assert_eq!(rate, 44_100.0);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn malformed_wav_reports_offset() {
        let buf = SampleBuffer::new(vec![0.1; 10], 8000.0).unwrap();
        let mut bytes = wav_bytes(&buf);
        bytes[8] = b'X';
        assert!(matches!(parse_wav(&bytes), Err(DatasetError::Wav { offset: 8, .. })));
        let good = wav_bytes(&buf);
        assert!(matches!(parse_wav(&good[..good.len() - 4]), Err(DatasetError::Wav { offset: 40, .. })));
        assert!(matches!(parse_wav(b"RIFX"), Err(DatasetError::Wav { offset: 0, .. })));
    }

    #[test]
    fn resampling_preserves_a_low_tone() {
        let x: Vec<f64> = (0..4800).map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / 48_000.0).sin()).collect();
        let y = resample(&x, 48_000.0, 44_100.0);
        assert_eq!(y.len(), 4410);
        for (i, v) in y.iter().enumerate().skip(200).take(4000) {
            let e = (std::f64::consts::TAU * 440.0 * i as f64 / 44_100.0).sin();
            assert!((v - e).abs() < 1e-3, "{i}: {v} vs {e}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.t60_range_s = [1.0, 0.2];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.n_sources = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.mic_spacing_m = [0.3, 0.6];
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"n_sorces": 3}"#).is_err());
    }

    #[test]
    fn geometry_respects_margins() {
        let cfg = ExperimentConfig::default();
        for p in 0..20 {
            let pair = sample_mic_pair(&cfg, p);
            let d = distance(&pair.0, &pair.1);
            assert!((0.3..=0.45 + 1e-12).contains(&d));
            for s in 0..5 {
                let src = sample_source(&cfg, s, p, &pair);
                assert!(distance(&src, &pair.0) >= 0.5 && distance(&src, &pair.1) >= 0.5);
                assert!(src[0] >= 0.5 && src[0] <= 5.5 && src[1] >= 0.5 && src[1] <= 6.5);
            }
        }
    }

    #[test]
    fn loudest_frame_picks_energy_peak() {
        let mut x = vec![0.01; 5000];
        x[3000..3100].iter_mut().for_each(|v| *v = 1.0);
        let s = loudest_frame(&x, 1024, 256).unwrap();
        assert!(s <= 3000 && s + 1024 >= 3100);
    }

    #[test]
    fn loudest_frames_are_ranked_by_energy() {
        let mut x = vec![0.0; 4096];
        x[1100] = 3.0;
        x[2600] = 2.0;
        // frames of 512 at hop 512: the spikes sit in frames 2 and 5, ties go to the earliest start
        assert_eq!(loudest_frames(&x, 512, 512, 3), vec![1024, 2560, 0]);
        assert_eq!(loudest_frames(&x, 512, 512, 100).len(), 8);
    }
}
