//! Per-frame style transfer of a video driven by a sliding music window.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    resample, segment_seconds, AudioClip, MelFrontend, ResampleMethod, SAMPLE_RATE, SEGMENT_SAMPLES,
};
use crate::error::{Error, Result};
use crate::imaging::{write_file, ImageTensor};
use crate::mvnet::{MVNet, NoiseCode};
use crate::stnets::{StyleTransfer, TransferConfig};

pub const DEFAULT_FPS: f64 = 20.0;
pub const FRAME_MANIFEST: &str = "frames.jsonl";

/// Music window `[start, end]` in seconds for a frame at time `t`: centred on `t`,
/// shifted inwards at the clip boundaries.
pub fn window_for_frame(t: f64, audio_len: f64) -> Result<(f64, f64)> {
    let l = segment_seconds();
    if audio_len.is_nan() || audio_len < l {
        return Err(Error::ClipTooShort {
            required: SEGMENT_SAMPLES,
            available: (audio_len.max(0.0) * SAMPLE_RATE as f64) as usize,
        });
    }
    let start = (t - l / 2.0).clamp(0.0, audio_len - l);
    Ok((start, start + l))
}

/// First sample of the window for time `t` in a clip of `n_samples` samples.
fn window_start_sample(t: f64, n_samples: usize) -> Result<usize> {
    let (start, _) = window_for_frame(t, n_samples as f64 / SAMPLE_RATE as f64)?;
    Ok(((start * SAMPLE_RATE as f64).round() as usize).min(n_samples - SEGMENT_SAMPLES))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub index: usize,
    /// Frame timestamp in seconds.
    pub time: f64,
    /// Music window in seconds.
    pub start: f64,
    pub end: f64,
    pub start_sample: usize,
}

/// Plans `n_frames` frames at `fps` against a 22050 Hz clip.
pub fn plan_frames(n_frames: usize, fps: f64, audio: &AudioClip) -> Result<Vec<FramePlan>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid(format!("frame rate {fps} must be positive")));
    }
    if audio.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "expected {SAMPLE_RATE} Hz audio, got {}",
            audio.sample_rate()
        )));
    }
    let last = n_frames.saturating_sub(1) as f64 / fps;
    if last > audio.duration() {
        return Err(Error::invalid(format!(
            "{n_frames} frames at {fps} fps need {last:.3} s of audio, clip has {:.3} s",
            audio.duration()
        )));
    }
    (0..n_frames)
        .map(|index| {
            let time = index as f64 / fps;
            let start_sample = window_start_sample(time, audio.len())?;
            let start = start_sample as f64 / SAMPLE_RATE as f64;
            Ok(FramePlan {
                index,
                time,
                start,
                end: start + segment_seconds(),
                start_sample,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub fps: f64,
    pub seed: u64,
    pub transfer: TransferConfig,
    /// Draw `z` once for the whole video (the default); otherwise a fresh `z` per frame.
    pub fixed_noise: bool,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            seed: 0,
            transfer: TransferConfig::default(),
            fixed_noise: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrame {
    pub plan: FramePlan,
    pub style: ImageTensor,
    pub output: ImageTensor,
    pub fell_back: bool,
}

/// Stylizes every frame with the style image generated from its music window.
pub fn transfer_video(
    frames: &[ImageTensor],
    audio: &AudioClip,
    net: &MVNet,
    st: &StyleTransfer,
    cfg: &VideoConfig,
) -> Result<Vec<VideoFrame>> {
    cfg.transfer.validate()?;
    let audio = resample(audio, SAMPLE_RATE, ResampleMethod::Linear)?;
    let plans = plan_frames(frames.len(), cfg.fps, &audio)?;
    let fe = MelFrontend::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed: NoiseCode = net.noise(&mut rng);
    let mut out = Vec::with_capacity(frames.len());
    for (frame, plan) in frames.iter().zip(plans) {
        let z = if cfg.fixed_noise || plan.index == 0 {
            fixed.clone()
        } else {
            net.noise(&mut rng)
        };
        let mel = fe.compute(&audio.slice(plan.start_sample, SEGMENT_SAMPLES)?)?;
        let (t, style) = st.stylize(frame, &mel, net, &z, &cfg.transfer)?;
        out.push(VideoFrame {
            plan,
            style,
            output: t.image,
            fell_back: t.fell_back,
        });
    }
    Ok(out)
}

/// Numbered PNG frames of a directory, in file-name order, resized to 64x64.
pub fn load_frames(dir: &Path) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG frames in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| ImageTensor::load(&p).map(|img| (p, img)))
        .collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    frame: usize,
    file: &'a str,
    time: f64,
    start: f64,
    end: f64,
    fell_back: bool,
}

/// Writes `frame_<n>.png` files plus a manifest mapping each frame to its music window.
pub fn write_frames(dir: &Path, frames: &[VideoFrame]) -> Result<()> {
    let mut manifest = String::new();
    for f in frames {
        let name = frame_file_name(f.plan.index);
        f.output.save_png(&dir.join(&name))?;
        let rec = FrameRecord {
            frame: f.plan.index,
            file: &name,
            time: f.plan.time,
            start: f.plan.start,
            end: f.plan.end,
            fell_back: f.fell_back,
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        manifest.push('\n');
    }
    write_file(&dir.join(FRAME_MANIFEST), manifest.as_bytes())
}
