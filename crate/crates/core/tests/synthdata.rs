use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use seqtrace::synth::{
    changed_fraction, generate, generate_sample, identity_distance, quality_filter, quality_score, recover,
    render_face, replay, sample_params, write_dataset, Dataset, GenerateConfig, Image, RecoveryOrder, COMMUTING_PAIR,
    DEFAULT_LENGTH_DIST, MANIFEST_FILE, NON_COMMUTING_PAIR,
};
use seqtrace::{rng, Error};

fn config(n: usize, seed: u64) -> GenerateConfig {
    GenerateConfig {
        n_samples: n,
        seed,
        ..GenerateConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in [dir.to_path_buf(), dir.join("base")] {
        for entry in std::fs::read_dir(&sub).unwrap() {
            let path = entry.unwrap().path();
            if path.is_file() {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &config(10, 7)).unwrap();
    write_dataset(b.path(), &config(10, 7)).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 21);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    write_dataset(c.path(), &config(10, 9)).unwrap();
    assert_ne!(fa[MANIFEST_FILE], dir_bytes(c.path())[MANIFEST_FILE]);
}

#[test]
fn length_histogram_follows_configuration() {
    let n = 10_000;
    let mut counts = [0usize; 6];
    for i in 0..n {
        counts[generate_sample(&config(n, 0), i).unwrap().record.labels.len()] += 1;
    }
    for (len, (&c, &p)) in counts.iter().zip(DEFAULT_LENGTH_DIST.iter()).enumerate() {
        let observed = c as f64 / n as f64;
        assert!((observed - p).abs() <= 0.02, "length {len}: {observed} vs {p}");
    }
}

#[test]
fn every_sample_replays_and_recovers_exactly() {
    let (manifest, samples) = generate(&config(500, 3)).unwrap();
    assert_eq!(manifest.records.len(), 500);
    for s in &samples {
        assert_eq!(replay(&s.base, &s.record.ops).unwrap(), s.image, "{}", s.record.id);
        assert_eq!(recover(&s.image, &s.record.ops, RecoveryOrder::Correct).unwrap(), s.base);
        let mut labels: Vec<&str> = s.record.labels.iter().collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), s.record.labels.len(), "repeated op in {}", s.record.id);
    }
}

#[test]
fn stored_dataset_replays_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &config(40, 5)).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    for rec in &ds.manifest.records {
        let (base, image) = (ds.base(rec).unwrap(), ds.image(rec).unwrap());
        assert_eq!(replay(&base, &rec.ops).unwrap(), image);
        let ops = rec.params_for(&rec.labels, false).unwrap();
        assert_eq!(recover(&image, &ops, RecoveryOrder::Correct).unwrap(), base);
    }
}

#[test]
fn designated_pairs_behave_as_declared() {
    let mut distinct = 0;
    for seed in 0..500 {
        let mut r = rng::seeded(seed);
        let (base, anchor) = render_face(&mut r);
        let op = |l: &str, r: &mut _| sample_params(l, anchor, r).unwrap();
        let (a, b) = (op(NON_COMMUTING_PAIR[0], &mut r), op(NON_COMMUTING_PAIR[1], &mut r));
        let ab = replay(&base, &[a.clone(), b.clone()]).unwrap();
        let ba = replay(&base, &[b, a]).unwrap();
        distinct += usize::from(ab != ba);
        let (c, d) = (op(COMMUTING_PAIR[0], &mut r), op(COMMUTING_PAIR[1], &mut r));
        assert_eq!(replay(&base, &[c.clone(), d.clone()]).unwrap(), replay(&base, &[d, c]).unwrap());
    }
    assert!(distinct * 100 >= 99 * 500, "{distinct} of 500 bases");
}

#[test]
fn shuffled_recovery_is_further_from_the_base() {
    let (_, samples) = generate(&config(400, 9)).unwrap();
    let mut correct = Vec::new();
    let mut shuffled = Vec::new();
    for s in samples.iter().filter(|s| s.record.labels.len() >= 2).take(100) {
        correct.push(identity_distance(&recover(&s.image, &s.record.ops, RecoveryOrder::Correct).unwrap(), &s.base).unwrap());
        shuffled.push(identity_distance(&recover(&s.image, &s.record.ops, RecoveryOrder::Shuffled).unwrap(), &s.base).unwrap());
    }
    assert_eq!(correct.len(), 100);
    assert!(correct.iter().all(|&d| d == 0.0));
    let mean = shuffled.iter().sum::<f64>() / 100.0;
    assert!(mean > 0.0);
}

#[test]
fn empty_sequence_recovery_is_identity() {
    let (base, _) = render_face(&mut rng::seeded(1));
    assert_eq!(recover(&base, &[], RecoveryOrder::Correct).unwrap(), base);
    assert_eq!(recover(&base, &[], RecoveryOrder::Shuffled).unwrap(), base);
}

#[test]
fn manipulations_stay_subtle() {
    let (_, samples) = generate(&config(300, 2)).unwrap();
    let mean = samples.iter().map(|s| changed_fraction(&s.base, &s.image)).sum::<f64>() / 300.0;
    assert!(mean < 0.15, "{mean}");
    let strict = GenerateConfig {
        changed_ceiling: mean / 2.0,
        ..config(300, 2)
    };
    assert!(matches!(generate(&strict), Err(Error::Config(_))));
}

#[test]
fn invalid_length_distribution_is_rejected() {
    for dist in [vec![0.5, 0.5], vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.0], vec![0.0, -0.2, 0.4, 0.4, 0.2, 0.2]] {
        let cfg = GenerateConfig {
            length_dist: dist,
            ..config(5, 0)
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}

fn speckled(seed: u64, clipped: usize) -> Image {
    let (mut img, _) = render_face(&mut rng::seeded(seed));
    let n = img.pixels.len();
    for i in 0..clipped {
        img.pixels[(i * 97) % n] = if i % 2 == 0 { 0 } else { 255 };
    }
    img
}

#[test]
fn quality_filter_extremes_and_monotonicity() {
    let images: Vec<Image> = (0..30).map(|i| speckled(i, (i as usize) * 11)).collect();
    assert_eq!(quality_filter(&images, 0.0).unwrap().len(), 30);
    let perfect = quality_filter(&images, 1.0).unwrap();
    assert_eq!(perfect, vec![0]);
    assert!(perfect.iter().all(|&i| quality_score(&images[i]) == 1.0));
    let mut last = usize::MAX;
    for step in 0..=100 {
        let kept = quality_filter(&images, step as f64 / 100.0).unwrap().len();
        assert!(kept <= last);
        last = kept;
    }
    assert!(quality_filter(&images, 1.5).is_err());
}

#[test]
fn identity_distance_extremes() {
    let black = Image::filled(4, 4, [0, 0, 0]);
    let white = Image::filled(4, 4, [255, 255, 255]);
    assert_eq!(identity_distance(&black, &white).unwrap(), 1.0);
    assert_eq!(identity_distance(&white, &white).unwrap(), 0.0);
    assert!(matches!(identity_distance(&black, &Image::new(3, 4)), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_distance_is_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let (x, _) = render_face(&mut rng::seeded(a));
        let (y, _) = render_face(&mut rng::seeded(b));
        let d = identity_distance(&x, &y).unwrap();
        prop_assert_eq!(d, identity_distance(&y, &x).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn any_op_order_recovers_the_base(seed in 0u64..10_000) {
        let s = generate_sample(&config(1, seed), 0).unwrap();
        prop_assert_eq!(recover(&s.image, &s.record.ops, RecoveryOrder::Correct).unwrap(), s.base);
    }
}
