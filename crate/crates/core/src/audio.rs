//! Audio front end: WAV loading, resampling, segmentation and the 3-channel
//! log-mel input tensor.
//!
//! A segment is 196608 samples at 22050 Hz (768 hops of 256). A 1024-point Hamming
//! STFT without centering yields 765 frames, which are right-padded with zero frames
//! to 768 and split into three consecutive 256-frame channels.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 128;
pub const FRAMES_PER_CHANNEL: usize = 256;
pub const N_CHANNELS: usize = 3;
pub const TOTAL_FRAMES: usize = FRAMES_PER_CHANNEL * N_CHANNELS;
pub const SEGMENT_SAMPLES: usize = TOTAL_FRAMES * HOP;
/// Frames produced by the uncentered STFT before zero padding.
pub const STFT_FRAMES: usize = (SEGMENT_SAMPLES - N_FFT) / HOP + 1;

/// Segment duration in seconds.
pub fn segment_seconds() -> f64 {
    SEGMENT_SAMPLES as f64 / SAMPLE_RATE as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
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

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::ClipTooShort {
                required: start + len,
                available: self.samples.len(),
            });
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float, any channel count) as a mono
/// clip. Channels are averaged; integer samples are divided by 32768.
pub fn load_audio(path: &Path) -> Result<AudioClip> {
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => unsupported(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unsupported("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (fmt, bits) => return Err(unsupported(format!("{bits}-bit {fmt:?} samples"))),
    };
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(unsupported("no audio frames".into()));
    }
    AudioClip::new(mono, spec.sample_rate).map_err(|e| unsupported(e.to_string()))
}

/// Writes a mono 16-bit PCM WAV.
pub fn write_wav_i16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
            .map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResampleMethod {
    #[default]
    Linear,
    /// Hann-windowed sinc with 16 zero crossings per side.
    Sinc,
}

/// Converts `clip` to `target_rate`. Equal rates return the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32, method: ResampleMethod) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let n_out = ((clip.len() as f64) / ratio).round().max(1.0) as usize;
    let x = &clip.samples;
    let out: Vec<f64> = match method {
        ResampleMethod::Linear => (0..n_out)
            .map(|j| {
                let t = j as f64 * ratio;
                let i0 = (t.floor() as usize).min(x.len() - 1);
                let i1 = (i0 + 1).min(x.len() - 1);
                let f = t - i0 as f64;
                x[i0] * (1.0 - f) + x[i1] * f
            })
            .collect(),
        ResampleMethod::Sinc => {
            const ZEROS: f64 = 16.0;
            let cutoff = (1.0 / ratio).min(1.0);
            let half = (ZEROS / cutoff).ceil() as isize;
            (0..n_out)
                .map(|j| {
                    let t = j as f64 * ratio;
                    let centre = t.floor() as isize;
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for i in centre - half..=centre + half {
                        if i < 0 || i as usize >= x.len() {
                            continue;
                        }
                        let d = (t - i as f64) * cutoff;
                        if d.abs() >= ZEROS {
                            continue;
                        }
                        let sinc = if d == 0.0 {
                            1.0
                        } else {
                            (std::f64::consts::PI * d).sin() / (std::f64::consts::PI * d)
                        };
                        let win = 0.5 + 0.5 * (std::f64::consts::PI * d / ZEROS).cos();
                        let k = sinc * win;
                        acc += k * x[i as usize];
                        norm += k;
                    }
                    if norm.abs() > 1e-12 {
                        acc / norm
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    AudioClip::new(out, target_rate)
}

/// Cuts the fixed-length analysis segment beginning at `floor(start_fraction * len)`.
pub fn segment_clip(clip: &AudioClip, start_fraction: f64) -> Result<AudioClip> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "segment_clip expects {SAMPLE_RATE} Hz, got {}",
            clip.sample_rate
        )));
    }
    if !(0.0..=1.0).contains(&start_fraction) {
        return Err(Error::invalid(format!(
            "start fraction {start_fraction} outside [0, 1]"
        )));
    }
    let start = (start_fraction * clip.len() as f64).floor() as usize;
    let available = clip.len().saturating_sub(start);
    if available < SEGMENT_SAMPLES {
        return Err(Error::ClipTooShort {
            required: SEGMENT_SAMPLES,
            available,
        });
    }
    clip.slice(start, SEGMENT_SAMPLES)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-scale triangular filters over `[0, sr/2]`, each scaled to unit area.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` band edges in Hz.
    edges: Vec<f64>,
    /// Row-major `n_mels x (n_fft/2 + 1)`.
    weights: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let f_max = sample_rate as f64 / 2.0;
        let m_max = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let area = 2.0 / (hi - lo);
            for (k, &f) in bin_hz.iter().enumerate() {
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                weights[m * n_bins + k] = area * up.min(down).max(0.0);
            }
        }
        Self {
            edges,
            weights,
            n_bins,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.edges.len() - 2
    }

    /// Peak frequency of each filter.
    pub fn center_frequencies(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }

    pub fn band_edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn weights(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        (0..self.n_mels())
            .map(|m| {
                self.weights(m)
                    .iter()
                    .zip(magnitude)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT frames, uncentered: frame `t` covers samples `[t*hop, t*hop + n_fft)`.
pub fn stft_magnitude(samples: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    if samples.len() < n_fft {
        return Vec::new();
    }
    let window = hamming(n_fft);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let n_frames = (samples.len() - n_fft) / hop + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..n_frames)
        .map(|t| {
            for (b, (x, w)) in buf
                .iter_mut()
                .zip(samples[t * hop..t * hop + n_fft].iter().zip(&window))
            {
                *b = Complex::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

/// `128 x 256 x 3` log-mel tensor: entry `(m, f, ch)` is mel bin `m` of frame
/// `ch * 256 + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Tensor,
}

impl MelSpectrogram {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape() != [N_MELS, FRAMES_PER_CHANNEL, N_CHANNELS] {
            return Err(Error::shape(format!(
                "mel spectrogram must be {N_MELS}x{FRAMES_PER_CHANNEL}x{N_CHANNELS}, got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("mel spectrogram entry".into()));
        }
        Ok(Self { data })
    }

    /// Builds the channel split from a `128 x 768` row-major matrix.
    pub fn from_matrix(matrix: &[f64]) -> Result<Self> {
        if matrix.len() != N_MELS * TOTAL_FRAMES {
            return Err(Error::shape(format!(
                "expected {N_MELS}x{TOTAL_FRAMES} matrix"
            )));
        }
        let mut data = vec![0.0; matrix.len()];
        for m in 0..N_MELS {
            for t in 0..TOTAL_FRAMES {
                let (ch, f) = (t / FRAMES_PER_CHANNEL, t % FRAMES_PER_CHANNEL);
                data[(m * FRAMES_PER_CHANNEL + f) * N_CHANNELS + ch] = matrix[m * TOTAL_FRAMES + t];
            }
        }
        Self::from_tensor(Tensor::new(&[N_MELS, FRAMES_PER_CHANNEL, N_CHANNELS], data))
    }

    /// Concatenates the channels back into the `128 x 768` matrix.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; N_MELS * TOTAL_FRAMES];
        for m in 0..N_MELS {
            for t in 0..TOTAL_FRAMES {
                let (ch, f) = (t / FRAMES_PER_CHANNEL, t % FRAMES_PER_CHANNEL);
                out[m * TOTAL_FRAMES + t] =
                    self.data.data()[(m * FRAMES_PER_CHANNEL + f) * N_CHANNELS + ch];
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Value at mel bin `m` of global frame `t` (0..768).
    pub fn at(&self, m: usize, t: usize) -> f64 {
        let (ch, f) = (t / FRAMES_PER_CHANNEL, t % FRAMES_PER_CHANNEL);
        self.data.data()[(m * FRAMES_PER_CHANNEL + f) * N_CHANNELS + ch]
    }
}

/// Computes the mel spectrogram of one analysis segment.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelFrontend::new().compute(clip)
}

/// Reusable filterbank for repeated mel computations.
#[derive(Clone, Debug)]
pub struct MelFrontend {
    bank: MelFilterbank,
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        Self {
            bank: MelFilterbank::new(N_MELS, N_FFT, SAMPLE_RATE),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate() != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "mel front end expects {SAMPLE_RATE} Hz, got {}",
                clip.sample_rate()
            )));
        }
        if clip.len() != SEGMENT_SAMPLES {
            return Err(Error::invalid(format!(
                "mel front end expects {SEGMENT_SAMPLES} samples, got {}",
                clip.len()
            )));
        }
        let frames = stft_magnitude(clip.samples(), N_FFT, HOP);
        debug_assert_eq!(frames.len(), STFT_FRAMES);
        let mut matrix = vec![0.0; N_MELS * TOTAL_FRAMES];
        for (t, mag) in frames.iter().enumerate() {
            for (m, s) in self.bank.apply(mag).into_iter().enumerate() {
                matrix[m * TOTAL_FRAMES + t] = s.ln_1p();
            }
        }
        MelSpectrogram::from_matrix(&matrix)
    }

    /// Loads, resamples to 22050 Hz, cuts the segment at `start_fraction` and computes
    /// its mel spectrogram.
    pub fn from_file(&self, path: &Path, start_fraction: f64) -> Result<MelSpectrogram> {
        let clip = load_audio(path)?;
        let clip = resample(&clip, SAMPLE_RATE, ResampleMethod::Linear)?;
        self.compute(&segment_clip(&clip, start_fraction)?)
    }
}
