use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use musart::dataset::*;
use musart::diff::Tensor;
use musart::imaging::load_rgb;
use musart::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Capture(Mutex<Vec<(log::Level, String)>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata<'_>) -> bool {
        true
    }

    fn log(&self, record: &log::Record<'_>) {
        self.0
            .lock()
            .unwrap()
            .push((record.level(), record.args().to_string()));
    }

    fn flush(&self) {}
}

fn captured() -> &'static Capture {
    static LOGGER: OnceLock<&'static Capture> = OnceLock::new();
    LOGGER.get_or_init(|| {
        let l: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        log::set_logger(l).unwrap();
        log::set_max_level(log::LevelFilter::Trace);
        l
    })
}

fn labels(v: &[usize]) -> Vec<EraLabel> {
    v.iter().map(|&c| EraLabel::new(c).unwrap()).collect()
}

fn write_lines(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
    for name in ["a.wav", "b.wav", "c.wav", "x.png", "y.png", "z.png"] {
        fs::write(dir.join(name), b"").unwrap();
    }
    let p = dir.join("m.jsonl");
    fs::write(&p, lines.join("\n")).unwrap();
    p
}

#[test]
fn empty_manifest_warns() {
    let log = captured();
    let dir = tempfile::tempdir().unwrap();
    let p = write_lines(dir.path(), &[]);
    let m = load_manifest(&p).unwrap();
    assert!(m.entries.is_empty());
    let needle = p.display().to_string();
    let logs = log.0.lock().unwrap();
    assert!(logs
        .iter()
        .any(|(lvl, msg)| *lvl == log::Level::Warn && msg.contains(&needle)));
}

#[test]
fn manifest_errors_carry_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, usize); 4] = [
        (r#"{"path": "a.wav", "kind": "video", "year": 1500}"#, 2),
        (r#"{"path": "a.wav", "kind": "music", "year": 1479}"#, 2),
        (
            r#"{"path": "missing.wav", "kind": "music", "year": 1500}"#,
            2,
        ),
        ("not json", 2),
    ];
    for (bad, want) in cases {
        let p = write_lines(
            dir.path(),
            &[r#"{"path": "b.wav", "kind": "music", "year": 1500}"#, bad],
        );
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, want, "{bad}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
}

#[test]
fn manifest_histogram_and_relative_paths() {
    let log = captured();
    let dir = tempfile::tempdir().unwrap();
    let p = write_lines(
        dir.path(),
        &[
            r#"{"path": "a.wav", "kind": "music", "year": 1480}"#,
            r#"{"path": "b.wav", "kind": "music", "year": 1489}"#,
            r#"{"path": "c.wav", "kind": "music", "year": 1495}"#,
            "",
            r#"{"path": "x.png", "kind": "image", "year": 1490}"#,
            r#"{"path": "y.png", "kind": "image", "year": 2020}"#,
            r#"{"path": "z.png", "kind": "image", "year": 1481}"#,
        ],
    );
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.entries.len(), 6);
    assert!(m.entries.iter().all(|e| e.path.starts_with(dir.path())));
    let h = m.histogram();
    let want: BTreeMap<usize, ClassCounts> = [
        (0, ClassCounts { music: 2, image: 1 }),
        (1, ClassCounts { music: 1, image: 1 }),
        (53, ClassCounts { music: 0, image: 1 }),
    ]
    .into_iter()
    .collect();
    assert_eq!(h, want);
    let logs = log.0.lock().unwrap();
    assert!(logs
        .iter()
        .any(|(lvl, msg)| *lvl == log::Level::Info && msg == "class 0: 2 music, 1 images"));
}

#[test]
fn per_class_caps_keep_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_lines(
        dir.path(),
        &[
            r#"{"path": "a.wav", "kind": "music", "year": 1480}"#,
            r#"{"path": "b.wav", "kind": "music", "year": 1481}"#,
            r#"{"path": "c.wav", "kind": "music", "year": 1482}"#,
            r#"{"path": "x.png", "kind": "image", "year": 1482}"#,
            r#"{"path": "y.png", "kind": "image", "year": 1482}"#,
        ],
    );
    let m = load_manifest_with(
        &p,
        &ManifestOptions {
            music_cap: Some(2),
            image_cap: Some(1),
        },
    )
    .unwrap();
    let names: Vec<_> = m
        .entries
        .iter()
        .map(|e| e.path.file_name().unwrap().to_str().unwrap())
        .collect();
    assert_eq!(names, ["a.wav", "b.wav", "x.png"]);
    assert_eq!(ManifestOptions::default().music_cap, Some(100));
}

#[test]
fn manifest_round_trips_through_write() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.wav"), b"").unwrap();
    let entries = vec![ManifestEntry {
        path: "a.wav".into(),
        kind: Kind::Music,
        year: 1633,
    }];
    let p = dir.path().join("out.jsonl");
    write_manifest(&p, &entries).unwrap();
    let back = load_manifest(&p).unwrap();
    assert_eq!(back.entries[0].label().index(), 15);
    assert_eq!(back.entries[0].path, dir.path().join("a.wav"));
}

#[test]
fn forced_pair_when_one_label_is_shared() {
    let idx = LabelIndex::new(labels(&[0, 1, 1]), labels(&[2, 0, 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let p = idx.sample_pair(&mut rng).unwrap();
        assert_eq!((p.music, p.image, p.label.index()), (0, 1, 0));
    }
    let none = LabelIndex::new(labels(&[0]), labels(&[1]));
    assert!(matches!(none.sample_pair(&mut rng), Err(Error::Dataset(_))));
}

#[test]
fn sampled_pairs_share_labels() {
    let idx = LabelIndex::new(labels(&[0, 1, 2, 2, 5]), labels(&[0, 0, 1, 2, 2, 2, 7]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let p = idx.sample_pair(&mut rng).unwrap();
        assert_eq!(idx.music_labels[p.music], p.label);
        assert_eq!(idx.image_labels[p.image], p.label);
        assert_ne!(p.music, 4);
    }
}

/// Counts within three binomial standard deviations of `n p`.
fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sigma
}

#[test]
fn images_within_a_label_are_uniform() {
    let idx = LabelIndex::new(labels(&[0, 0, 0]), labels(&[0, 0]));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 4000;
    let first = (0..n)
        .filter(|_| idx.sample_pair(&mut rng).unwrap().image == 0)
        .count();
    assert!(within_3_sigma(first, n, 0.5), "{first}");
}

#[test]
fn triplet_negatives_are_uniform_over_other_classes() {
    let idx = LabelIndex::new(labels(&[0, 0, 1, 1, 1, 2]), labels(&[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4000;
    let mut counts = [0usize; 6];
    for _ in 0..n {
        let (p, neg) = idx.sample_triplet_for(0, &mut rng).unwrap();
        assert_eq!(p, 1);
        counts[neg] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0);
    for &c in &counts[2..] {
        assert!(within_3_sigma(c, n, 0.25), "{counts:?}");
    }
}

#[test]
fn forced_triplet() {
    let idx = LabelIndex::new(labels(&[0, 0, 1]), labels(&[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (a, p, n) = idx.sample_triplet(&mut rng).unwrap();
        assert!(a < 2 && p == 1 - a && n == 2);
    }
    let single = LabelIndex::new(labels(&[0, 0]), labels(&[0]));
    assert!(single.sample_triplet(&mut rng).is_err());
    let lonely = LabelIndex::new(labels(&[0, 1]), labels(&[0]));
    assert!(lonely.sample_triplet(&mut rng).is_err());
    assert!(lonely.sample_triplet_for(0, &mut rng).is_err());
}

#[test]
fn epoch_plans_are_deterministic_bijective_and_change() {
    let idx = LabelIndex::new(labels(&[0, 1, 2, 0, 1, 2, 3]), labels(&[0, 1, 1, 2]));
    let e0 = idx.shuffle_pairs_epoch(7, 0);
    let e1 = idx.shuffle_pairs_epoch(7, 1);
    assert_eq!(e0, idx.shuffle_pairs_epoch(7, 0));
    assert_eq!(e1, idx.shuffle_pairs_epoch(7, 1));
    assert_ne!(e0, e1);
    for plan in [&e0, &e1] {
        let mut m: Vec<usize> = plan.iter().map(|p| p.music).collect();
        m.sort();
        assert_eq!(m, idx.pairable_music());
        assert!(plan
            .iter()
            .all(|p| idx.image_labels[p.image] == p.label && idx.music_labels[p.music] == p.label));
    }
}

#[test]
fn augmentation_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::uniform(&[50, 70, 3], 0.0, 1.0, &mut rng);
    let out = augment_image(&img, &mut rng).unwrap();
    assert_eq!(out.tensor().shape(), &[64, 64, 3]);
    assert!(out.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(augment_image(&Tensor::zeros(&[4, 4, 1]), &mut rng).is_err());
}

#[test]
fn constant_image_maps_to_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::full(&[40, 33, 3], 0.25);
    let out = augment_image(&img, &mut rng).unwrap();
    assert!(out.tensor().data().iter().all(|v| (v + 0.5).abs() < 1e-12));
}

#[test]
fn crop_offsets_are_uniform() {
    // Chi-square over the 33 offsets per axis; 62.5 is the 0.1% critical value at 32 dof.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Tensor::full(&[96, 96, 3], 0.5);
    let n = 6600;
    let (mut ys, mut xs) = ([0usize; 33], [0usize; 33]);
    for _ in 0..n {
        let (_, (dy, dx)) = augment_image_with_offset(&img, &mut rng).unwrap();
        ys[dy] += 1;
        xs[dx] += 1;
    }
    let expected = n as f64 / 33.0;
    for counts in [ys, xs] {
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 62.5, "{chi2} {counts:?}");
    }
}

#[test]
fn crop_matches_the_resized_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::uniform(&[96, 96, 3], 0.0, 1.0, &mut rng);
    let (out, (dy, dx)) = augment_image_with_offset(&img, &mut rng).unwrap();
    for y in [0, 17, 63] {
        for x in [0, 40, 63] {
            for c in 0..3 {
                let want = img.data()[((y + dy) * 96 + x + dx) * 3 + c] * 2.0 - 1.0;
                assert!((out.tensor().data()[(y * 64 + x) * 3 + c] - want).abs() < 1e-12);
            }
        }
    }
}

fn small_synth(seed: u64, dir: &Path) -> SynthSummary {
    let cfg = SynthConfig {
        per_class: 6,
        seed,
        ..Default::default()
    };
    synth_generate(&cfg, dir).unwrap()
}

#[test]
fn synth_is_reproducible_and_counted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = small_synth(3, a.path());
    small_synth(3, b.path());
    assert_eq!((sa.music, sa.images), (24, 24));
    let m = load_manifest(&sa.manifest).unwrap();
    let h = m.histogram();
    assert_eq!(h.len(), 4);
    assert!(h.values().all(|c| c.music == 6 && c.image == 6));
    for e in &m.entries {
        let rel = e.path.strip_prefix(a.path()).unwrap();
        assert_eq!(
            fs::read(&e.path).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
    assert_eq!(
        fs::read(&sa.manifest).unwrap(),
        fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
}

fn mean_rgb(t: &Tensor) -> [f64; 3] {
    let mut m = [0.0; 3];
    for px in t.data().chunks(3) {
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    m.map(|v| v / (t.len() / 3) as f64)
}

/// Leave-one-out nearest-centroid accuracy.
fn nearest_centroid_accuracy(feats: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let mut hits = 0;
    for i in 0..feats.len() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let members: Vec<&Vec<f64>> = (0..feats.len())
                .filter(|&j| j != i && labels[j] == c)
                .map(|j| &feats[j])
                .collect();
            let centroid: Vec<f64> = (0..feats[i].len())
                .map(|d| members.iter().map(|f| f[d]).sum::<f64>() / members.len() as f64)
                .collect();
            let dist: f64 = centroid
                .iter()
                .zip(&feats[i])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        hits += usize::from(best.1 == labels[i]);
    }
    hits as f64 / feats.len() as f64
}

#[test]
fn synth_classes_are_separable_in_both_modalities() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_synth(11, dir.path());
    let m = load_manifest(&s.manifest).unwrap();
    let corpus = Corpus::load(&m).unwrap();
    assert_eq!(corpus.num_classes_present(), 4);

    let img_feats: Vec<Vec<f64>> = corpus.images.iter().map(|t| mean_rgb(t).to_vec()).collect();
    let img_labels: Vec<usize> = corpus
        .index
        .image_labels
        .iter()
        .map(|l| l.index())
        .collect();
    assert!(nearest_centroid_accuracy(&img_feats, &img_labels) >= 0.9);

    // Energy-weighted mean mel band of the first channel.
    let mus_feats: Vec<Vec<f64>> = corpus
        .music
        .iter()
        .map(|mel| {
            let (bands, frames) = (mel.shape()[0], mel.shape()[1]);
            let (mut num, mut den) = (0.0, 0.0);
            for b in 0..bands {
                for t in 0..frames {
                    let e = mel.at(b, t).max(0.0);
                    num += b as f64 * e;
                    den += e;
                }
            }
            vec![num / den]
        })
        .collect();
    let mus_labels: Vec<usize> = corpus
        .index
        .music_labels
        .iter()
        .map(|l| l.index())
        .collect();
    assert!(nearest_centroid_accuracy(&mus_feats, &mus_labels) >= 0.9);

    assert_eq!(
        load_rgb(&corpus.image_paths[0]).unwrap().shape(),
        &[96, 96, 3]
    );
    assert!(synth_generate(
        &SynthConfig {
            music_seconds: 2.0,
            ..Default::default()
        },
        dir.path()
    )
    .is_err());
}

proptest! {
    #[test]
    fn every_year_maps_to_a_valid_class(year in 1480i32..3000) {
        let l = era_from_year(year).unwrap().index();
        prop_assert!(l < 54);
        prop_assert_eq!(l, (((year - 1480) / 10) as usize).min(53));
    }

    #[test]
    fn planned_pairs_are_always_consistent(
        music in proptest::collection::vec(0usize..5, 1..20),
        images in proptest::collection::vec(0usize..5, 1..20),
        seed in 0u64..100,
        epoch in 0usize..4,
    ) {
        let idx = LabelIndex::new(labels(&music), labels(&images));
        let plan = idx.shuffle_pairs_epoch(seed, epoch);
        prop_assert_eq!(plan.len(), idx.pairable_music().len());
        for p in plan {
            prop_assert_eq!(idx.image_labels[p.image], p.label);
            prop_assert_eq!(idx.music_labels[p.music], p.label);
        }
    }
}
