//! Log-mel features: STFT with a Hann window and centered reflect padding, an
//! HTK-scale triangular filterbank, a 16-bit PCM WAV reader, and the
//! shape-prefixed f32 feature dump.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("n_fft {n_fft} must be a power of two no smaller than hop {hop}")]
    BadFft { n_fft: usize, hop: usize },
    #[error("frequency range {fmin}..{fmax} Hz is invalid for sample rate {sample_rate}")]
    BadRange { fmin: f64, fmax: f64, sample_rate: u32 },
    #[error("mel filter {index} covers no FFT bin; use fewer mels or a larger n_fft")]
    EmptyFilter { index: usize },
    #[error("waveform is {got} Hz but the feature config expects {expected} Hz")]
    RateMismatch { got: u32, expected: u32 },
    #[error("wav: {0}")]
    Wav(String),
    #[error("feature file: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(FeatureError::ZeroSampleRate);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(FeatureError::NonFiniteSample(i));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 24_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 100,
            fmin: 0.0,
            fmax: 12_000.0,
        }
    }
}

/// Log mel energies `[frames, n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor<f64>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Complex spectra, one row of `n_fft / 2 + 1` bins per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub n_fft: usize,
    pub hop: usize,
}

impl Stft {
    pub fn power(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|c| c.norm_sqr()).collect())
            .collect()
    }
}

pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into `x` extended by reflection about both ends (edge not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT: frame `k` is the window centered on sample `k * hop`.
pub fn stft(w: &Waveform, n_fft: usize, hop: usize) -> Result<Stft> {
    if w.is_empty() {
        return Err(FeatureError::EmptyWaveform);
    }
    if !n_fft.is_power_of_two() || hop == 0 || n_fft < hop {
        return Err(FeatureError::BadFft { n_fft, hop });
    }
    let x = w.samples();
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let bins = n_fft / 2 + 1;
    let frames = (0..frame_count(x.len(), hop))
        .map(|k| {
            let start = (k * hop) as isize - half;
            let mut buf: Vec<Complex<f64>> = (0..n_fft)
                .map(|i| Complex::new(x[reflect(start + i as isize, x.len())] * window[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(bins);
            buf
        })
        .collect();
    Ok(Stft { frames, n_fft, hop })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters `[n_mels, n_fft / 2 + 1]` with peaks evenly spaced on
/// the HTK mel scale; unnormalized (unit peak height).
pub fn mel_filterbank(n_fft: usize, sample_rate: u32, n_mels: usize, fmin: f64, fmax: f64) -> Result<Tensor<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(FeatureError::BadRange { fmin, fmax, sample_rate });
    }
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    let mut data = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut data[m * bins..(m + 1) * bins];
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            row[k] = up.min(down).max(0.0);
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(FeatureError::EmptyFilter { index: m });
        }
    }
    Ok(Tensor::new([n_mels, bins], data).expect("filterbank shape"))
}

/// `ln(filterbank . |stft|^2 + 1e-10)` per frame.
pub fn log_mel(w: &Waveform, config: &MelConfig) -> Result<MelSpectrogram> {
    if w.sample_rate() != config.sample_rate {
        return Err(FeatureError::RateMismatch {
            got: w.sample_rate(),
            expected: config.sample_rate,
        });
    }
    let spec = stft(w, config.n_fft, config.hop)?;
    let fb = mel_filterbank(config.n_fft, config.sample_rate, config.n_mels, config.fmin, config.fmax)?;
    let bins = config.n_fft / 2 + 1;
    let power = spec.power();
    let mut out = Vec::with_capacity(power.len() * config.n_mels);
    for frame in &power {
        for m in 0..config.n_mels {
            let row = &fb.data()[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram {
        frames: Tensor::new([power.len(), config.n_mels], out).expect("mel shape"),
        hop: config.hop,
        sample_rate: config.sample_rate,
    })
}

/// Reads a mono 16-bit PCM RIFF/WAVE file; samples are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |m: &str| FeatureError::Wav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| bad("truncated fmt chunk"))?;
                if end - body < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let c = &bytes[body..end];
                format = Some((le_u16(&c[0..2]), le_u16(&c[2..4]), le_u32(&c[4..8]), le_u16(&c[14..16])));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                if tag != 1 {
                    return Err(FeatureError::Wav(format!("format tag {tag} is not PCM")));
                }
                if channels != 1 {
                    return Err(FeatureError::Wav(format!("{channels} channels; only mono is supported")));
                }
                if bits != 16 {
                    return Err(FeatureError::Wav(format!("{bits}-bit samples; only 16-bit is supported")));
                }
                let end = end.ok_or_else(|| bad("truncated data chunk"))?;
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}

/// Writes a mono 16-bit PCM WAV, clamping samples to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Feature dump: `u32` rank, `u32` dims, then `f32` values, all little-endian.
pub fn encode_features(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: String| FeatureError::Dump(m);
    if bytes.len() < 4 {
        return Err(bad("missing rank".into()));
    }
    let rank = le_u32(bytes) as usize;
    let header = 4 * (1 + rank);
    if bytes.len() < header {
        return Err(bad(format!("truncated shape: rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| le_u32(&bytes[4 + 4 * i..]) as usize).collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    let body = &bytes[header..];
    if Some(body.len()) != n.checked_mul(4) {
        return Err(bad(format!(
            "shape {shape:?} needs {n} values but {} bytes follow the header",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_features(t))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    decode_features(&std::fs::read(path)?)
}
