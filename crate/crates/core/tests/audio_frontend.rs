use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use musart::audio::*;
use musart::Error;
use proptest::prelude::*;

/// Minimal RIFF writer that does not share code with the crate.
fn write_riff(path: &Path, rate: u32, channels: u16, format: u16, bits: u16, payload: &[u8]) {
    let block = channels * bits / 8;
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&format.to_le_bytes());
    b.extend_from_slice(&channels.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(rate * block as u32).to_le_bytes());
    b.extend_from_slice(&block.to_le_bytes());
    b.extend_from_slice(&bits.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    b.extend_from_slice(payload);
    fs::write(path, b).unwrap();
}

fn pcm16(samples: &[f64]) -> Vec<u8> {
    samples
        .iter()
        .flat_map(|s| ((s * 32767.0).round() as i16).to_le_bytes())
        .collect()
}

fn sine(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin())
        .collect()
}

/// Index of the largest |DFT| coefficient among bins `1..max_bin`, computed naively.
fn dominant_bin(x: &[f64], max_bin: usize) -> usize {
    let n = x.len() as f64;
    (1..max_bin)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = 2.0 * PI * k as f64 * i as f64 / n;
                re += v * a.cos();
                im -= v * a.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0
}

#[test]
fn silent_mono_wav_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("silence.wav");
    write_riff(&p, 22050, 1, 1, 16, &pcm16(&vec![0.0; 22050]));
    let clip = load_audio(&p).unwrap();
    assert_eq!(clip.len(), 22050);
    assert_eq!(clip.sample_rate(), 22050);
    assert!(clip.samples().iter().all(|&s| s == 0.0));
}

#[test]
fn opposite_stereo_channels_cancel() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stereo.wav");
    let frames: Vec<f64> = (0..1000).flat_map(|_| [0.5, -0.5]).collect();
    write_riff(&p, 22050, 2, 1, 16, &pcm16(&frames));
    let clip = load_audio(&p).unwrap();
    assert_eq!(clip.len(), 1000);
    assert!(clip.samples().iter().all(|&s| s == 0.0));

    let pf = dir.path().join("stereo_f32.wav");
    let payload: Vec<u8> = frames
        .iter()
        .flat_map(|&s| (s as f32).to_le_bytes())
        .collect();
    write_riff(&pf, 22050, 2, 3, 32, &payload);
    let clip = load_audio(&pf).unwrap();
    assert!(clip.samples().iter().all(|&s| s == 0.0));
}

#[test]
fn full_scale_sine_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a440.wav");
    let x = sine(440.0, 22050.0, 22050, 1.0);
    write_riff(&p, 22050, 1, 1, 16, &pcm16(&x));
    let clip = load_audio(&p).unwrap();
    assert_eq!(clip.len(), 22050);
    let peak = clip.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
    assert!((peak - 1.0).abs() < 1e-3, "peak {peak}");
    for (a, b) in clip.samples().iter().zip(&x) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn float_wav_matches_written_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f32.wav");
    let x = sine(100.0, 8000.0, 800, 0.75);
    let payload: Vec<u8> = x.iter().flat_map(|&s| (s as f32).to_le_bytes()).collect();
    write_riff(&p, 8000, 1, 3, 32, &payload);
    let clip = load_audio(&p).unwrap();
    assert_eq!(clip.sample_rate(), 8000);
    for (a, b) in clip.samples().iter().zip(&x) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn load_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.wav");
    let e = load_audio(&missing).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert!(e.to_string().contains("nope.wav"));

    let garbage = dir.path().join("garbage.wav");
    fs::write(&garbage, b"definitely not audio").unwrap();
    let e = load_audio(&garbage).unwrap_err();
    assert!(e.to_string().contains("garbage.wav"), "{e}");

    let p24 = dir.path().join("pcm24.wav");
    write_riff(&p24, 22050, 1, 1, 24, &[0u8; 30]);
    let e = load_audio(&p24).unwrap_err();
    assert!(matches!(e, Error::UnsupportedAudio { .. }), "{e:?}");
    assert!(e.to_string().contains("pcm24.wav"));
}

#[test]
fn downsampling_keeps_the_dominant_frequency() {
    let x = sine(440.0, 44100.0, 44100, 0.9);
    let clip = AudioClip::new(x.clone(), 44100).unwrap();
    assert_eq!(dominant_bin(&x, 1000), 440);
    for method in [ResampleMethod::Linear, ResampleMethod::Sinc] {
        let r = resample(&clip, 22050, method).unwrap();
        assert_eq!(r.sample_rate(), 22050);
        assert_eq!(r.len(), 22050);
        // One second at either rate, so bin index equals frequency in Hz.
        assert_eq!(dominant_bin(r.samples(), 1000), 440, "{method:?}");
    }
}

#[test]
fn upsampling_keeps_the_dominant_frequency() {
    let clip = AudioClip::new(sine(300.0, 16000.0, 16000, 0.5), 16000).unwrap();
    let r = resample(&clip, 22050, ResampleMethod::Linear).unwrap();
    assert_eq!(r.len(), 22050);
    assert_eq!(dominant_bin(r.samples(), 600), 300);
}

#[test]
fn sine_at_filter_centre_peaks_in_that_filter() {
    let fe = MelFrontend::new();
    let centres = fe.filterbank().center_frequencies();
    let edges = fe.filterbank().band_edges().to_vec();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    for (k, &c) in centres.iter().enumerate() {
        let clip = AudioClip::new(
            sine(c, SAMPLE_RATE as f64, SEGMENT_SAMPLES, 1.0),
            SAMPLE_RATE,
        )
        .unwrap();
        let mel = fe.compute(&clip).unwrap();
        // Filters whose rising slope is narrower than one FFT bin cannot resolve a
        // tone at their own centre; for those only the neighbourhood is checked.
        let resolvable = c - edges[k] >= bin_hz;
        for t in 0..STFT_FRAMES {
            let col: Vec<f64> = (0..N_MELS).map(|m| mel.at(m, t)).collect();
            let am = (0..N_MELS)
                .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
                .unwrap();
            if resolvable {
                assert_eq!(am, k, "filter {k} ({c:.1} Hz), frame {t}");
            } else {
                assert!(
                    am.abs_diff(k) <= 1,
                    "filter {k} ({c:.1} Hz), frame {t}: argmax {am}"
                );
            }
        }
    }
}

#[test]
fn padded_frames_are_zero_and_channels_concatenate() {
    let x: Vec<f64> = (0..SEGMENT_SAMPLES)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
        .collect();
    let clip = AudioClip::new(x.clone(), SAMPLE_RATE).unwrap();
    let mel = mel_spectrogram(&clip).unwrap();
    assert_eq!(mel.shape(), &[N_MELS, FRAMES_PER_CHANNEL, N_CHANNELS]);
    let matrix = mel.to_matrix();
    for m in 0..N_MELS {
        for t in 0..TOTAL_FRAMES {
            assert_eq!(matrix[m * TOTAL_FRAMES + t], mel.at(m, t));
            let ch = t / 256;
            let f = t % 256;
            assert_eq!(
                mel.tensor().data()[(m * 256 + f) * 3 + ch].to_bits(),
                matrix[m * TOTAL_FRAMES + t].to_bits()
            );
        }
        for t in STFT_FRAMES..TOTAL_FRAMES {
            assert_eq!(mel.at(m, t), 0.0);
        }
    }
    assert_eq!(MelSpectrogram::from_matrix(&matrix).unwrap(), mel);

    // Channel boundaries line up with the STFT frames of the same signal.
    let frames = stft_magnitude(&x, N_FFT, HOP);
    assert_eq!(frames.len(), 765);
    let bank = MelFilterbank::new(N_MELS, N_FFT, SAMPLE_RATE);
    for &t in &[0usize, 255, 256, 511, 512, 764] {
        let s = bank.apply(&frames[t]);
        for m in 0..N_MELS {
            assert_eq!(mel.at(m, t), s[m].ln_1p());
        }
    }
}

#[test]
fn identical_input_gives_identical_bytes() {
    let x: Vec<f64> = sine(1234.5, 22050.0, SEGMENT_SAMPLES, 0.3);
    let a = mel_spectrogram(&AudioClip::new(x.clone(), SAMPLE_RATE).unwrap()).unwrap();
    let b = mel_spectrogram(&AudioClip::new(x, SAMPLE_RATE).unwrap()).unwrap();
    assert_eq!(a.tensor().to_le_bytes(), b.tensor().to_le_bytes());
    assert!(a.tensor().data().iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn file_pipeline_resamples_and_segments() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("long.wav");
    let x = sine(880.0, 44100.0, 44100 * 15, 0.5);
    write_riff(&p, 44100, 1, 1, 16, &pcm16(&x));
    let mel = MelFrontend::new().from_file(&p, 1.0 / 3.0).unwrap();
    assert_eq!(mel.shape(), &[128, 256, 3]);
    let short = dir.path().join("short.wav");
    write_riff(&short, 22050, 1, 1, 16, &pcm16(&vec![0.1; 22050]));
    assert!(matches!(
        MelFrontend::new().from_file(&short, 0.0),
        Err(Error::ClipTooShort { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn louder_signal_never_lowers_any_entry(seed in any::<u32>(), gain in 1.0f64..4.0) {
        let f1 = 100.0 + (seed % 3000) as f64;
        let f2 = 50.0 + (seed / 3000 % 5000) as f64;
        let x: Vec<f64> = (0..SEGMENT_SAMPLES)
            .map(|i| 0.2 * (2.0 * PI * f1 * i as f64 / 22050.0).sin() + 0.05 * (2.0 * PI * f2 * i as f64 / 22050.0).cos())
            .collect();
        let clip = AudioClip::new(x, SAMPLE_RATE).unwrap();
        let fe = MelFrontend::new();
        let quiet = fe.compute(&clip).unwrap();
        let loud = fe.compute(&clip.scaled(gain)).unwrap();
        for (a, b) in quiet.tensor().data().iter().zip(loud.tensor().data()) {
            prop_assert!(b >= a, "{} < {}", b, a);
        }
    }
}
