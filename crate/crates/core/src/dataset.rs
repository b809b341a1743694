//! Era-labelled music/image corpus: manifest ingestion, augmentation, pair and
//! triplet sampling, and a synthetic generator with class-dependent audio register
//! and image hue.
//!
//! Manifest format: one JSON object per line,
//! `{"path": "music/a.wav", "kind": "music", "year": 1703}`. Relative paths are
//! resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav_i16, AudioClip, MelFrontend, MelSpectrogram, SAMPLE_RATE};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{load_rgb, resize_rgb, save_png_rgb8, ImageTensor, IMAGE_SIZE};
use crate::mvnet::N_CLASSES;

pub const FIRST_YEAR: i32 = 1480;
pub const AUGMENT_SIZE: usize = 96;
pub const DEFAULT_MUSIC_CAP: usize = 100;
/// Fraction of each music file at which the analysis segment starts.
pub const SEGMENT_START: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EraLabel(usize);

impl EraLabel {
    pub fn new(c: usize) -> Result<Self> {
        if c >= N_CLASSES {
            return Err(Error::invalid(format!(
                "era class {c} outside [0, {N_CLASSES})"
            )));
        }
        Ok(Self(c))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Decade class `floor((year - 1480) / 10)`, clamped to the last class.
pub fn era_from_year(year: i32) -> Result<EraLabel> {
    if year < FIRST_YEAR {
        return Err(Error::invalid(format!(
            "year {year} is before {FIRST_YEAR}"
        )));
    }
    Ok(EraLabel(
        (((year - FIRST_YEAR) / 10) as usize).min(N_CLASSES - 1),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Music,
    Image,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub kind: Kind,
    pub year: i32,
}

impl ManifestEntry {
    pub fn label(&self) -> EraLabel {
        era_from_year(self.year).expect("validated at load")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub music: usize,
    pub image: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestOptions {
    /// Per-class cap on music entries (first entries in file order are kept).
    pub music_cap: Option<usize>,
    /// Per-class cap on image entries.
    pub image_cap: Option<usize>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            music_cap: Some(DEFAULT_MUSIC_CAP),
            image_cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn histogram(&self) -> BTreeMap<usize, ClassCounts> {
        let mut h: BTreeMap<usize, ClassCounts> = BTreeMap::new();
        for e in &self.entries {
            let c = h.entry(e.label().index()).or_default();
            match e.kind {
                Kind::Music => c.music += 1,
                Kind::Image => c.image += 1,
            }
        }
        h
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_manifest_with(path, &ManifestOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: &ManifestOptions) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut entries = Vec::new();
    let mut kept: BTreeMap<(usize, bool), usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry =
            serde_json::from_str(raw).map_err(|err| bad(line, err.to_string()))?;
        let label = era_from_year(e.year).map_err(|err| bad(line, err.to_string()))?;
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if !e.path.is_file() {
            return Err(bad(
                line,
                format!("file {} does not exist", e.path.display()),
            ));
        }
        let is_music = e.kind == Kind::Music;
        let cap = if is_music {
            opts.music_cap
        } else {
            opts.image_cap
        };
        let n = kept.entry((label.index(), is_music)).or_default();
        if cap.is_some_and(|c| *n >= c) {
            continue;
        }
        *n += 1;
        entries.push(e);
    }
    let m = Manifest { entries };
    if m.entries.is_empty() {
        log::warn!("manifest {} has no entries", path.display());
    }
    for (c, counts) in m.histogram() {
        log::info!("class {c}: {} music, {} images", counts.music, counts.image);
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    crate::imaging::write_file(path, out.as_bytes())
}

/// Resizes to 96x96, takes a uniformly placed 64x64 crop and maps `[0, 1]` to
/// `[-1, 1]`. Also returns the crop offset `(dy, dx)`.
pub fn augment_image_with_offset<R: Rng + ?Sized>(
    img: &Tensor,
    rng: &mut R,
) -> Result<(ImageTensor, (usize, usize))> {
    if img.ndim() != 3 || img.shape()[2] != 3 || img.shape()[0] == 0 || img.shape()[1] == 0 {
        return Err(Error::shape(format!(
            "expected a non-empty HxWx3 image, got {:?}",
            img.shape()
        )));
    }
    let big = resize_rgb(img, AUGMENT_SIZE, AUGMENT_SIZE);
    let span = AUGMENT_SIZE - IMAGE_SIZE;
    let dy = rng.gen_range(0..=span);
    let dx = rng.gen_range(0..=span);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for y in dy..dy + IMAGE_SIZE {
        let row =
            &big.data()[(y * AUGMENT_SIZE + dx) * 3..(y * AUGMENT_SIZE + dx + IMAGE_SIZE) * 3];
        data.extend(row.iter().map(|v| v * 2.0 - 1.0));
    }
    Ok((
        ImageTensor::clamped(Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, 3], data))?,
        (dy, dx),
    ))
}

pub fn augment_image<R: Rng + ?Sized>(img: &Tensor, rng: &mut R) -> Result<ImageTensor> {
    Ok(augment_image_with_offset(img, rng)?.0)
}

/// Indices of one music entry and one image entry sharing a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub music: usize,
    pub image: usize,
    pub label: EraLabel,
}

/// Music and image entry indices grouped by label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelIndex {
    /// Label of every music entry, by position.
    pub music_labels: Vec<EraLabel>,
    pub image_labels: Vec<EraLabel>,
    music_by_label: BTreeMap<EraLabel, Vec<usize>>,
    image_by_label: BTreeMap<EraLabel, Vec<usize>>,
}

impl LabelIndex {
    pub fn new(music_labels: Vec<EraLabel>, image_labels: Vec<EraLabel>) -> Self {
        let group = |labels: &[EraLabel]| {
            let mut m: BTreeMap<EraLabel, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                m.entry(l).or_default().push(i);
            }
            m
        };
        let music_by_label = group(&music_labels);
        let image_by_label = group(&image_labels);
        Self {
            music_labels,
            image_labels,
            music_by_label,
            image_by_label,
        }
    }

    pub fn from_manifest(m: &Manifest) -> Self {
        let pick = |k: Kind| {
            m.entries
                .iter()
                .filter(|e| e.kind == k)
                .map(|e| e.label())
                .collect()
        };
        Self::new(pick(Kind::Music), pick(Kind::Image))
    }

    pub fn images_with(&self, label: EraLabel) -> &[usize] {
        self.image_by_label.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn music_with(&self, label: EraLabel) -> &[usize] {
        self.music_by_label.get(&label).map_or(&[], Vec::as_slice)
    }

    /// Music entries whose label also has at least one image.
    pub fn pairable_music(&self) -> Vec<usize> {
        (0..self.music_labels.len())
            .filter(|&i| !self.images_with(self.music_labels[i]).is_empty())
            .collect()
    }

    /// Uniform music entry (among pairable ones), then a uniform image with its label.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PairIndex> {
        let music = self.pairable_music();
        let &m = music
            .choose(rng)
            .ok_or_else(|| Error::Dataset("no label has both music and images".into()))?;
        let label = self.music_labels[m];
        let &image = self.images_with(label).choose(rng).expect("pairable");
        Ok(PairIndex {
            music: m,
            image,
            label,
        })
    }

    /// Positive and negative partners for a given anchor music entry.
    pub fn sample_triplet_for<R: Rng + ?Sized>(
        &self,
        anchor: usize,
        rng: &mut R,
    ) -> Result<(usize, usize)> {
        let label = *self
            .music_labels
            .get(anchor)
            .ok_or_else(|| Error::invalid(format!("no music entry {anchor}")))?;
        let positives: Vec<usize> = self
            .music_with(label)
            .iter()
            .copied()
            .filter(|&i| i != anchor)
            .collect();
        let &p = positives.choose(rng).ok_or_else(|| {
            Error::Dataset(format!("class {} has a single music entry", label.index()))
        })?;
        let negatives: Vec<usize> = (0..self.music_labels.len())
            .filter(|&i| self.music_labels[i] != label)
            .collect();
        let &n = negatives
            .choose(rng)
            .ok_or_else(|| Error::Dataset("triplets need at least two music classes".into()))?;
        Ok((p, n))
    }

    /// Anchor, positive and negative music indices.
    pub fn sample_triplet<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize, usize)> {
        if self.music_by_label.len() < 2 {
            return Err(Error::Dataset(
                "triplets need at least two music classes".into(),
            ));
        }
        let anchors: Vec<usize> = (0..self.music_labels.len())
            .filter(|&i| self.music_with(self.music_labels[i]).len() >= 2)
            .collect();
        let &a = anchors
            .choose(rng)
            .ok_or_else(|| Error::Dataset("no class has two music entries".into()))?;
        let (p, n) = self.sample_triplet_for(a, rng)?;
        Ok((a, p, n))
    }

    fn draw_plan(&self, rng: &mut ChaCha8Rng) -> Vec<PairIndex> {
        let mut music = self.pairable_music();
        music.shuffle(rng);
        music
            .into_iter()
            .map(|m| {
                let label = self.music_labels[m];
                let &image = self.images_with(label).choose(rng).expect("pairable");
                PairIndex {
                    music: m,
                    image,
                    label,
                }
            })
            .collect()
    }

    fn has_alternative_plans(&self) -> bool {
        let music = self.pairable_music();
        music.len() > 1
            || music
                .iter()
                .any(|&m| self.images_with(self.music_labels[m]).len() > 1)
    }

    /// Epoch pairing plan: a permutation of all pairable music entries, each with a
    /// uniformly drawn same-label image. Deterministic in `(seed, epoch)`, and two
    /// consecutive epochs never share a plan when more than one plan exists.
    pub fn shuffle_pairs_epoch(&self, seed: u64, epoch: usize) -> Vec<PairIndex> {
        let draw = |e: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e as u64);
            rng
        };
        let mut rng = draw(0);
        let mut plan = self.draw_plan(&mut rng);
        if !self.has_alternative_plans() {
            return plan;
        }
        for e in 1..=epoch {
            let mut rng = draw(e);
            let mut next = self.draw_plan(&mut rng);
            while next == plan {
                next = self.draw_plan(&mut rng);
            }
            plan = next;
        }
        plan
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x: MelSpectrogram,
    pub y: ImageTensor,
    pub label: EraLabel,
}

/// Manifest contents loaded into memory: mel spectrograms of every music clip and raw
/// RGB pixels of every image.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub music: Vec<MelSpectrogram>,
    pub images: Vec<Tensor>,
    pub index: LabelIndex,
    pub music_paths: Vec<PathBuf>,
    pub image_paths: Vec<PathBuf>,
}

impl Corpus {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let fe = MelFrontend::new();
        let (mut music, mut images, mut mp, mut ip) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for e in &manifest.entries {
            match e.kind {
                Kind::Music => {
                    music.push(fe.from_file(&e.path, SEGMENT_START)?);
                    mp.push(e.path.clone());
                }
                Kind::Image => {
                    images.push(load_rgb(&e.path)?);
                    ip.push(e.path.clone());
                }
            }
        }
        Ok(Self {
            music,
            images,
            index: LabelIndex::from_manifest(manifest),
            music_paths: mp,
            image_paths: ip,
        })
    }

    pub fn materialize<R: Rng + ?Sized>(
        &self,
        pair: PairIndex,
        rng: &mut R,
    ) -> Result<PairedSample> {
        Ok(PairedSample {
            x: self.music[pair.music].clone(),
            y: augment_image(&self.images[pair.image], rng)?,
            label: pair.label,
        })
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PairedSample> {
        let p = self.index.sample_pair(rng)?;
        self.materialize(p, rng)
    }

    pub fn num_classes_present(&self) -> usize {
        let mut l: Vec<EraLabel> = self.index.music_labels.clone();
        l.sort();
        l.dedup();
        l.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Clip length in seconds; must leave a full segment after the one-third point.
    pub music_seconds: f64,
    /// Edge length of the generated square images.
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 50,
            seed: 0,
            music_seconds: 13.5,
            image_size: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub music: usize,
    pub images: usize,
}

/// Fundamental (Hz) and harmonic count for class `k` of `n`: low classes sit low
/// with few partials, high classes sit higher with many.
pub fn synth_register(k: usize, n: usize) -> (f64, usize) {
    let octaves = 3.0 * k as f64 / (n.max(2) - 1) as f64;
    (110.0 * 2f64.powf(octaves), 1 + 3 * k * 6 / n.max(1))
}

/// Class hue in `[0, 1)`, evenly spaced around the color wheel.
pub fn synth_hue(k: usize, n: usize) -> f64 {
    k as f64 / n as f64
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn synth_clip<R: Rng>(k: usize, n: usize, seconds: f64, rng: &mut R) -> Result<AudioClip> {
    let (base, partials) = synth_register(k, n);
    let len = (seconds * SAMPLE_RATE as f64) as usize;
    let note_len = SAMPLE_RATE as usize / 2;
    let mut samples = vec![0.0; len];
    let mut start = 0;
    while start < len {
        // Notes wander within a fifth of the class fundamental.
        let f0 = base * 2f64.powf(rng.gen_range(0.0..7.0f64).round() / 12.0);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let end = (start + note_len).min(len);
        for (i, s) in samples[start..end].iter_mut().enumerate() {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = (i as f64 / 200.0).min(1.0) * ((end - start - i) as f64 / 200.0).min(1.0);
            let mut v = 0.0;
            for h in 1..=partials {
                let f = f0 * h as f64;
                if f < SAMPLE_RATE as f64 / 2.0 {
                    v += (2.0 * PI * f * t + phase * h as f64).sin() / h as f64;
                }
            }
            *s = env * v;
        }
        start = end;
    }
    let peak = samples
        .iter()
        .fold(0.0f64, |m, s| m.max(s.abs()))
        .max(1e-12);
    for s in &mut samples {
        *s *= 0.8 / peak;
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

fn synth_image<R: Rng>(k: usize, n: usize, size: usize, rng: &mut R) -> Vec<u8> {
    let hue = synth_hue(k, n) + rng.gen_range(-0.03..0.03);
    let sat = 0.55 + 0.35 * ((k % 2) as f64) + rng.gen_range(-0.05..0.05);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..PI);
            let freq: f64 = rng.gen_range(2.0..8.0) * 2.0 * PI / size as f64;
            (
                angle.cos() * freq,
                angle.sin() * freq,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.05..0.15),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = gratings
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let v = (0.7 + tex).clamp(0.0, 1.0);
            let h = hue + 0.5 * tex * 0.1;
            for c in hsv_to_rgb(h, (sat + tex * 0.5).clamp(0.0, 1.0), v) {
                out.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Writes `per_class` WAV clips and PNG images per class plus `manifest.jsonl` into
/// `out_dir`. Class `k` uses years `1480 + 10k ..= 1489 + 10k`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    if !(2..=N_CLASSES).contains(&cfg.n_classes) {
        return Err(Error::invalid(format!(
            "n_classes must be in [2, {N_CLASSES}], got {}",
            cfg.n_classes
        )));
    }
    if cfg.music_seconds * (1.0 - SEGMENT_START) * SAMPLE_RATE as f64
        <= crate::audio::SEGMENT_SAMPLES as f64
    {
        return Err(Error::invalid(format!(
            "{} s clips are too short for a segment",
            cfg.music_seconds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for k in 0..cfg.n_classes {
        for i in 0..cfg.per_class {
            let year = FIRST_YEAR + 10 * k as i32 + rng.gen_range(0..10);
            let rel = PathBuf::from(format!("music/class{k:02}_{i:03}.wav"));
            let clip = synth_clip(k, cfg.n_classes, cfg.music_seconds, &mut rng)?;
            let full = out_dir.join(&rel);
            fs::create_dir_all(full.parent().unwrap()).map_err(|e| Error::io(&full, e))?;
            write_wav_i16(&full, &clip)?;
            entries.push(ManifestEntry {
                path: rel,
                kind: Kind::Music,
                year,
            });
        }
        for i in 0..cfg.per_class {
            let year = FIRST_YEAR + 10 * k as i32 + rng.gen_range(0..10);
            let rel = PathBuf::from(format!("images/class{k:02}_{i:03}.png"));
            let px = synth_image(k, cfg.n_classes, cfg.image_size, &mut rng);
            save_png_rgb8(&out_dir.join(&rel), cfg.image_size, cfg.image_size, &px)?;
            entries.push(ManifestEntry {
                path: rel,
                kind: Kind::Image,
                year,
            });
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(SynthSummary {
        manifest,
        music: cfg.n_classes * cfg.per_class,
        images: cfg.n_classes * cfg.per_class,
    })
}
