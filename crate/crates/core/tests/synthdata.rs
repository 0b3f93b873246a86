use std::collections::{BTreeSet, HashSet};
use std::fs;

use ordcon::eval;
use ordcon::proxy::AgeGroupScheme;
use ordcon::seed;
use ordcon::synth::{self, Expansion, Generator, Sample, SyntheticSpec};
use ordcon::{Error, Tensor};

fn zero_noise(warp_seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise_sigma: 0.0,
        warp_seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn every_age_appears_at_fifty_samples_per_age() {
    let base = SyntheticSpec::default();
    let range = (base.age_hi - base.age_lo) as usize;
    for sample_seed in 0..3 {
        let spec = SyntheticSpec {
            n_samples: 50 * range,
            sample_seed,
            ..base.clone()
        };
        let d = synth::generate(&spec).unwrap();
        assert_eq!(d.len(), spec.n_samples);
        let seen: BTreeSet<i64> = d.ages().into_iter().collect();
        assert_eq!(seen, (spec.age_lo..=spec.age_hi).collect());
    }
}

#[test]
fn generation_is_bitwise_reproducible() {
    let spec = SyntheticSpec { n_samples: 300, warp_seed: 5, sample_seed: 9, ..SyntheticSpec::default() };
    let a = synth::generate(&spec).unwrap();
    let b = synth::generate(&spec).unwrap();
    for (s, t) in a.samples.iter().zip(&b.samples) {
        assert_eq!(s.y_age, t.y_age);
        assert_eq!(s.y_id, t.y_id);
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s.x), bits(&t.x));
    }
    let other = synth::generate(&SyntheticSpec { sample_seed: 10, ..spec }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn zero_noise_map_is_injective_over_ages() {
    for warp_seed in 0..20 {
        let spec = zero_noise(warp_seed);
        let gen = Generator::new(&spec).unwrap();
        let mut seen = HashSet::new();
        for age in spec.age_lo..=spec.age_hi {
            let x = gen.clean(age, 0).unwrap();
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "warp seed {warp_seed}: duplicate at age {age}");
        }
        assert_eq!(seen.len(), 62);
    }
}

#[test]
fn leading_principal_component_orders_ages() {
    let seeds = 20;
    let mut monotone = 0;
    for warp_seed in 0..seeds {
        let spec = zero_noise(warp_seed);
        let gen = Generator::new(&spec).unwrap();
        let rows: Vec<Vec<f64>> = (spec.age_lo..=spec.age_hi).map(|a| gen.clean(a, 0).unwrap()).collect();
        let p = eval::pca_project(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        let t = p.projected.data();
        let up = t.windows(2).all(|w| w[1] > w[0]);
        let down = t.windows(2).all(|w| w[1] < w[0]);
        if up || down {
            monotone += 1;
        }
    }
    assert!(monotone * 10 >= seeds * 9, "{monotone}/{seeds} monotone");
}

#[test]
fn cross_group_samples_match_direct_generation() {
    let spec = SyntheticSpec { n_samples: 4000, n_identities: 5, ..zero_noise(2) };
    let d = synth::generate(&spec).unwrap();
    let gen = Generator::new(&spec).unwrap();
    let scheme = AgeGroupScheme::new(13, 16).unwrap();
    let mut rng = seed::rng(1, &[]);
    let s = d.samples[0].clone();
    let out = gen.synth_across_groups(&s, &scheme, &mut rng).unwrap();
    assert_eq!(out.len(), 4);
    let own = scheme.group_of(s.y_age).unwrap();
    let neighbour = out
        .iter()
        .find(|o| (scheme.group_of(o.y_age).unwrap() - own).abs() == 1)
        .unwrap();
    let direct = d
        .samples
        .iter()
        .find(|t| t.y_age == neighbour.y_age && t.y_id == s.y_id)
        .expect("dataset covers the neighbouring centre age");
    assert_eq!(neighbour.x, direct.x);
    assert!(out.iter().all(|o| o.y_id == s.y_id));
}

#[test]
fn five_group_expansion_quintuples_the_batch() {
    let spec = SyntheticSpec { n_samples: 100, ..SyntheticSpec::default() };
    let d = synth::generate(&spec).unwrap();
    let gen = Generator::new(&spec).unwrap();
    // 16..=77 in 13-year groups gives 5 groups
    let scheme = AgeGroupScheme::new(13, 16).unwrap();
    assert_eq!(scheme.groups_in(16, 77).unwrap().count(), 5);
    let b = synth::sample_batch(&d, 4, 7, Some(Expansion { generator: &gen, scheme: &scheme })).unwrap();
    assert_eq!(b.len(), 20);
    for chunk in 0..4 {
        let ids = &b.y_id[5 * chunk..5 * chunk + 5];
        assert!(ids.iter().all(|&i| i == ids[0]));
        let groups: BTreeSet<i64> = b.y_age[5 * chunk..5 * chunk + 5]
            .iter()
            .map(|&a| scheme.group_of(a).unwrap())
            .collect();
        assert_eq!(groups.len(), 5);
    }
}

#[test]
fn different_batch_seeds_draw_different_samples() {
    let d = synth::generate(&SyntheticSpec { n_samples: 200, ..SyntheticSpec::default() }).unwrap();
    let mut distinct = 0;
    for trial in 0..100u64 {
        let a = synth::sample_batch(&d, 8, 2 * trial, None).unwrap();
        let b = synth::sample_batch(&d, 8, 2 * trial + 1, None).unwrap();
        if a != b {
            distinct += 1;
        }
    }
    assert!(distinct >= 99, "{distinct}/100");
}

#[test]
fn header_only_csv_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    fs::write(&path, "y_age,y_id,x_0,x_1\n").unwrap();
    let d = synth::load_csv(&path).unwrap();
    assert!(d.is_empty());
    assert!(d.spec.is_none());
}

#[test]
fn short_row_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "y_age,y_id,x_0,x_1\n20,1,0.5,0.25\n21,0,0.5\n").unwrap();
    match synth::load_csv(&path) {
        Err(e @ Error::Malformed { line: 3, .. }) => assert!(e.to_string().contains('3'), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn saved_dataset_reloads_with_its_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let spec = SyntheticSpec { n_samples: 10, input_dim: 3, ..SyntheticSpec::default() };
    let d = synth::generate(&spec).unwrap();
    synth::save_csv(&d, &path).unwrap();
    let back = synth::load_csv(&path).unwrap();
    assert_eq!(back.spec.as_ref(), Some(&spec));
    for (s, t) in d.samples.iter().zip(&back.samples) {
        assert_eq!((s.y_age, s.y_id), (t.y_age, t.y_id));
        for (a, b) in s.x.iter().zip(&t.x) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    let stranger = Sample { x: vec![0.0; 3], y_age: 30, y_id: 50 };
    let gen = Generator::new(&spec).unwrap();
    let scheme = AgeGroupScheme::new(6, 16).unwrap();
    assert!(gen.synth_across_groups(&stranger, &scheme, &mut seed::rng(0, &[])).is_err());
}
