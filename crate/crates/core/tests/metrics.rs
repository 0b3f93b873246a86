mod common;

use ordcon::eval;
use ordcon::proxy::{init_proxies, ProxyBank};
use ordcon::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn order_consistency_of_label_independent_features_is_one_half() {
    let mut r = common::rng(11);
    let bank = init_proxies(&[20, 40], 4, 3).unwrap();
    let n = 160;
    let labels: Vec<i64> = (0..n).map(|_| r.gen_range(20..=40)).collect();
    let z = Tensor::from_rows(&common::normal_rows(&mut r, n, 4)).unwrap();
    let pairs = labels
        .iter()
        .map(|a| labels.iter().filter(|b| a < b).count())
        .sum::<usize>();
    assert!(pairs >= 10_000, "{pairs}");
    let oc = eval::order_consistency(&z, &labels, &bank).unwrap();
    assert!((oc - 0.5).abs() < 0.05, "{oc}");
}

#[test]
fn order_consistency_needs_a_progressive_pair() {
    let bank = init_proxies(&[1, 5], 2, 0).unwrap();
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(eval::order_consistency(&z, &[3, 3], &bank).is_err());
}

#[test]
fn features_on_their_line_proxies_are_fully_consistent() {
    let rows = Tensor::matrix(8, 2, (0..8).flat_map(|k| [k as f64, 0.5 * k as f64]).collect()).unwrap();
    let bank = ProxyBank::from_rows(10, rows).unwrap();
    let labels: Vec<i64> = (10..=15).collect();
    let z = Tensor::from_rows(&labels.iter().map(|&l| bank.proxy(l).unwrap().to_vec()).collect::<Vec<_>>()).unwrap();
    assert_eq!(eval::order_consistency(&z, &labels, &bank).unwrap(), 1.0);
}

#[test]
fn rank1_of_random_features_is_near_chance() {
    let mut r = common::rng(4);
    let k = 5;
    let mut total = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let gallery: Vec<(Vec<f64>, usize)> =
            (0..k).map(|id| (common::normal_rows(&mut r, 1, 8).remove(0), id)).collect();
        let probe: Vec<(Vec<f64>, usize)> = (0..50)
            .map(|_| (common::normal_rows(&mut r, 1, 8).remove(0), r.gen_range(0..k)))
            .collect();
        total += eval::rank1_accuracy(&gallery, &probe).unwrap();
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0 / k as f64).abs() < 0.02, "{mean}");
}

#[test]
fn rank1_degenerate_cases() {
    let g = vec![(vec![1.0, 0.0], 3)];
    let same = vec![(vec![0.2, 0.9], 3), (vec![-1.0, 0.0], 3)];
    assert_eq!(eval::rank1_accuracy(&g, &same).unwrap(), 1.0);
    let other = vec![(vec![0.2, 0.9], 3), (vec![-1.0, 0.0], 4)];
    assert!(eval::rank1_accuracy(&g, &other).is_err());
    assert!(eval::rank1_accuracy(&[], &same).is_err());
}

#[test]
fn age_probe_on_label_independent_features_is_near_chance() {
    let mut r = common::rng(21);
    let groups = 5;
    let mut accs = Vec::new();
    for trial in 0..10 {
        let n = 400;
        let labels: Vec<i64> = (0..n).map(|_| r.gen_range(0..groups)).collect();
        let z = Tensor::from_rows(&common::normal_rows(&mut r, n, 8)).unwrap();
        accs.push(eval::age_probe_accuracy(&z, &labels, trial).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 1.0 / groups as f64).abs() < 0.1, "{mean}");
}

#[test]
fn age_probe_extremes() {
    let groups = 4usize;
    let mut labels: Vec<i64> = (0..200).map(|k| (k % groups) as i64).collect();
    labels.shuffle(&mut common::rng(2));
    let onehot: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..groups).map(|g| if g as i64 == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let acc = eval::age_probe_accuracy(&Tensor::from_rows(&onehot).unwrap(), &labels, 0).unwrap();
    assert!(acc > 0.99, "{acc}");
    assert!(eval::age_probe_accuracy(&Tensor::from_rows(&onehot[..2]).unwrap(), &labels[..2], 0).is_err());

    // no signal: every logit ties and the lowest group wins
    let constant = Tensor::from_rows(&vec![vec![0.3, -1.0]; 200]).unwrap();
    for seed in 0..5 {
        let acc = eval::age_probe_accuracy(&constant, &labels, seed).unwrap();
        assert_eq!(acc, 1.0 / groups as f64);
    }
}

#[test]
fn pca_of_an_isotropic_cloud_is_flat() {
    let mut r = common::rng(8);
    let d = 4;
    let z = Tensor::from_rows(&common::normal_rows(&mut r, 20_000, d)).unwrap();
    let p = eval::pca_project(&z, d).unwrap();
    for e in &p.explained {
        assert!((e - 1.0 / d as f64).abs() < 0.02, "{:?}", p.explained);
    }
    let mean: f64 = p.projected.data().iter().step_by(d).sum::<f64>() / 20_000.0;
    assert!(mean.abs() < 1e-10);
}

#[test]
fn pca_of_collinear_points_has_one_component() {
    let z = Tensor::from_rows(&(0..10).map(|k| vec![k as f64, -2.0 * k as f64]).collect::<Vec<_>>()).unwrap();
    let p = eval::pca_project(&z, 2).unwrap();
    assert!((p.explained[0] - 1.0).abs() < 1e-12);
    assert!(p.explained[1].abs() < 1e-12);
    // largest-magnitude coordinate of each direction is positive
    let c = p.components.row(0);
    assert!(c[1] > 0.0 && c[1].abs() > c[0].abs());
}
