mod common;

use common::{Bank, Loss, ALL_LOSSES};
use ordcon::objectives::{self, LossConfig};
use ordcon::proxy::{reference_pairs, Relation};
use ordcon::{Tape, Tensor};

fn unit_cfg() -> LossConfig {
    LossConfig {
        tau: 1.0,
        ..LossConfig::default()
    }
}

/// Proxies at their own label values on a line.
fn line_bank(lo: i64, hi: i64) -> Bank {
    Bank {
        lo,
        rows: (lo - 1..=hi + 1).map(|a| vec![a as f64]).collect(),
    }
}

#[test]
fn random_batches_match_the_scalar_oracle() {
    for seed in 0..300 {
        let inst = common::random_instance(seed, 7, 5);
        for loss in ALL_LOSSES {
            let want = common::oracle(loss, &inst.z, &inst.y, &inst.bank, &inst.cfg);
            let got = common::library(loss, &inst.z, &inst.y, &inst.bank, &inst.cfg);
            assert!(
                (want - got).abs() < 1e-9,
                "seed {seed} {loss:?}: library {got} oracle {want} ({:?})",
                inst.cfg
            );
        }
        let want = common::identity(&inst.z, &inst.ids, &inst.cfg);
        let got = common::library_identity(&inst.z, &inst.ids, &inst.cfg);
        assert!((want - got).abs() < 1e-9, "seed {seed} identity: {got} vs {want}");
    }
}

#[test]
fn progressive_line_example_is_minus_two() {
    let bank = line_bank(20, 30);
    let z = vec![vec![0.0], vec![1.0]];
    let got = common::library(Loss::Progressive, &z, &[20, 30], &bank, &unit_cfg());
    assert!((got + 2.0).abs() < 1e-10, "{got}");
    assert!((common::progressive(&z, &[20, 30], &bank, &unit_cfg()) + 2.0).abs() < 1e-10);
}

#[test]
fn three_sample_order_loss_matches_oracle() {
    let bank = line_bank(20, 30);
    let z = vec![vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.7, 0.9]];
    let bank2 = Bank {
        lo: 20,
        rows: bank.rows.iter().enumerate().map(|(k, r)| vec![r[0], (k as f64).sin()]).collect(),
    };
    let y = [22, 27, 22];
    let cfg = LossConfig {
        tau: 0.5,
        ..LossConfig::default()
    };
    let got = common::library(Loss::Order, &z, &y, &bank2, &cfg);
    let want = common::order(&z, &y, &bank2, &cfg);
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn order_loss_is_the_bitwise_sum_of_its_parts() {
    for seed in 0..20 {
        let inst = common::random_instance(seed, 6, 4);
        let p = common::library(Loss::Progressive, &inst.z, &inst.y, &inst.bank, &inst.cfg);
        let r = common::library(Loss::Regressive, &inst.z, &inst.y, &inst.bank, &inst.cfg);
        let o = common::library(Loss::Order, &inst.z, &inst.y, &inst.bank, &inst.cfg);
        assert_eq!(o.to_bits(), (p + r).to_bits());
    }
}

#[test]
fn equal_ages_carry_no_order_signal() {
    let bank = line_bank(20, 25);
    let z = vec![vec![0.1], vec![0.7], vec![-2.0]];
    for loss in [Loss::Progressive, Loss::Regressive, Loss::Order] {
        assert_eq!(common::library(loss, &z, &[22, 22, 22], &bank, &unit_cfg()), 0.0);
    }
}

#[test]
fn swapped_pair_mirrors_progressive_into_regressive() {
    // On a line with equally spaced proxies, the progressive term of (a, b)
    // and the regressive term of the swapped batch see the same similarities.
    let bank = line_bank(20, 30);
    let cfg = unit_cfg();
    for (za, zb) in [(0.0, 1.0), (1.0, 0.0), (-3.0, 2.5)] {
        let z = vec![vec![za], vec![zb]];
        let swapped = vec![vec![zb], vec![za]];
        let prog = common::library(Loss::Progressive, &z, &[20, 30], &bank, &cfg);
        let reg = common::library(Loss::Regressive, &swapped, &[30, 20], &bank, &cfg);
        let o_prog = common::progressive(&z, &[20, 30], &bank, &cfg);
        let o_reg = common::regressive(&swapped, &[30, 20], &bank, &cfg);
        assert!((prog - o_prog).abs() < 1e-12);
        assert!((reg - o_reg).abs() < 1e-12);
        // a 2-sample batch has one anchor per relation, so both are ±1/τ
        // similarity differences of the same pair
        assert!((prog.abs() - 2.0).abs() < 1e-12);
        assert!((reg.abs() - 2.0).abs() < 1e-12);
    }
}

#[test]
fn proxy_match_closed_forms() {
    // two assignable labels on a line: own proxy at +1, the other at -1
    let bank = Bank {
        lo: 1,
        rows: vec![vec![-1.0], vec![1.0], vec![-1.0], vec![1.0]],
    };
    let hard = LossConfig {
        tau: 1.0,
        soft_weights: false,
        ..LossConfig::default()
    };
    let soft = LossConfig {
        soft_weights: true,
        ..hard.clone()
    };
    let e2 = std::f64::consts::E.powi(2);
    let run = |cfg: &LossConfig| {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![2.0]));
        let b = bank.to_lib().bind(&mut tape, false);
        let v = objectives::proxy_match_term(&mut tape, z, 1, &b, cfg).unwrap();
        tape.item(v)
    };
    assert!((run(&hard) - e2).abs() < 1e-10);
    let w = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((run(&soft) - e2 / w).abs() < 1e-10);
    assert!((run(&soft) - 10.107).abs() < 1e-3);
    assert!((common::proxy_match(&[2.0], 1, &bank, &hard) - e2).abs() < 1e-12);

    let metric = common::library(Loss::Metric, &[vec![2.0]], &[1], &bank, &hard);
    assert!((metric + e2).abs() < 1e-10);
    let repeated = common::library(Loss::Metric, &[vec![2.0], vec![2.0], vec![2.0]], &[1, 1, 1], &bank, &hard);
    assert!((repeated - metric).abs() < 1e-12);
}

#[test]
fn equal_similarities_with_one_negative_give_unit_ratio() {
    let bank = Bank {
        lo: 1,
        rows: vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0], vec![0.0, 1.0]],
    };
    let cfg = LossConfig {
        tau: 1.0,
        soft_weights: false,
        ..LossConfig::default()
    };
    let r = common::proxy_match(&[1.0, 0.0], 1, &bank, &cfg);
    assert!((r - 1.0).abs() < 1e-12);
    let lib = -common::library(Loss::Metric, &[vec![1.0, 0.0]], &[1], &bank, &cfg);
    assert!((lib - 1.0).abs() < 1e-12);
}

#[test]
fn soft_weight_values_and_ordering() {
    let negatives = [10, 20, 30, 40];
    let w_max = objectives::soft_weight(0, 40, &negatives).unwrap();
    assert!((w_max - 0.731_058_578_630_004_9).abs() < 1e-12);
    let w_half = objectives::soft_weight(0, 20, &negatives).unwrap();
    assert!((w_half - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-12);
    assert!((w_half - 0.62246).abs() < 1e-5);
    for pair in negatives.windows(2) {
        let a = objectives::soft_weight(0, pair[0], &negatives).unwrap();
        let b = objectives::soft_weight(0, pair[1], &negatives).unwrap();
        assert!(a < b);
        assert_eq!(a, common::soft_weight(0, pair[0], &negatives));
    }
    assert!(objectives::soft_weight(0, 0, &[]).is_err());
    assert!(objectives::soft_weight(5, 5, &[5]).is_err());
}

#[test]
fn farther_proxies_weigh_more_at_equal_similarity() {
    // own proxy at label 2; labels 1 and 4 sit at the same angle to z
    let bank = Bank {
        lo: 1,
        rows: vec![
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, -1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ],
    };
    let z = [1.0, 0.0];
    let cfg = LossConfig {
        tau: 0.5,
        ..LossConfig::default()
    };
    let negatives = [1, 3, 4];
    let term = |a: i64| {
        common::soft_weight(2, a, &negatives) * (common::cosine(&z, bank.c(a)) / cfg.tau).exp()
    };
    assert_eq!(common::cosine(&z, bank.c(1)), common::cosine(&z, bank.c(4)));
    assert!(term(4) > term(1));
    // turning a negative toward z by the same angle costs more for the
    // farther label
    let rotate = |label: i64| {
        let mut b = bank.clone();
        b.rows[(label - b.lo + 1) as usize] = vec![0.6, 0.8];
        common::library(Loss::Metric, &[z.to_vec()], &[2], &b, &cfg)
    };
    assert!(rotate(4) > rotate(1));
}

#[test]
fn order_loss_falls_as_the_pair_aligns_with_its_forward_reference() {
    // v_f = v(c_20, c_21) = e1 and v_b = v(c_20, c_19) = e2; the pair
    // direction is (cf, cb, rest) with cb held fixed while cf grows.
    let bank = Bank {
        lo: 20,
        rows: vec![vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![-2.0, 0.0, 0.0]],
    };
    let cfg = LossConfig {
        tau: 0.5,
        ..LossConfig::default()
    };
    for cb in [-0.5, 0.0, 0.3] {
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let cf = -0.8 + 1.6 * k as f64 / 20.0;
            let rest = (1.0 - cf * cf - cb * cb).sqrt();
            // v_d = z_0 - z_1
            let z = vec![vec![cf, cb, rest], vec![0.0, 0.0, 0.0]];
            let loss = common::library(Loss::Progressive, &z, &[20, 21], &bank, &cfg);
            assert!(loss < prev, "cb={cb} k={k}: {loss} >= {prev}");
            prev = loss;
        }
    }
}

#[test]
fn contrast_loss_is_affine_in_lambda() {
    for seed in 0..20 {
        let inst = common::random_instance(seed, 6, 4);
        let at = |l: f64| {
            let cfg = LossConfig {
                lambda_metric: l,
                ..inst.cfg.clone()
            };
            common::library(Loss::Contrast, &inst.z, &inst.y, &inst.bank, &cfg)
        };
        let (a, b) = (0.3, 0.8);
        assert!((at(a) + at(b) - at(0.0) - at(a + b)).abs() < 1e-10 * (1.0 + at(a + b).abs()));
        if inst.cfg.use_order {
            let o = common::library(Loss::Order, &inst.z, &inst.y, &inst.bank, &inst.cfg);
            assert_eq!(at(0.0), o);
        }
    }
}

#[test]
fn identity_loss_closed_forms() {
    let cfg = unit_cfg();
    let z = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
    assert!(common::library_identity(&z, &[4, 4], &cfg).abs() < 1e-12);
    for n in 3..7 {
        let z = vec![vec![1.0, 0.0]; n];
        let mut ids = vec![0i64; 2];
        ids.extend((1..n as i64 - 1).map(|k| k + 10));
        // anchors 0 and 1 have one positive among n - 1 others
        let got = common::library_identity(&z, &ids, &cfg);
        assert!((got - 2.0 * ((n - 1) as f64).ln()).abs() < 1e-12, "n={n}");
    }
    let mut r = common::rng(5);
    let z = common::normal_rows(&mut r, 4, 3);
    let ids = [1, 2, 1, 1];
    for include_self in [false, true] {
        let cfg = LossConfig {
            tau: 0.3,
            identity_include_self: include_self,
            ..LossConfig::default()
        };
        let got = common::library_identity(&z, &ids, &cfg);
        assert!((got - common::identity(&z, &ids, &cfg)).abs() < 1e-10);
    }
}

#[test]
fn l1_and_cross_entropy_match_oracles() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![20.0, 30.0]));
    let l = objectives::age_l1_loss(&mut tape, p, &[22.0, 27.0]).unwrap();
    assert_eq!(tape.item(l), 2.5);
    assert!(objectives::age_l1_loss(&mut tape, p, &[1.0]).is_err());

    let mut r = common::rng(9);
    for _ in 0..20 {
        let logits = common::normal_rows(&mut r, 4, 5);
        let targets = [0usize, 4, 2, 2];
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::from_rows(&logits).unwrap());
        let ce = objectives::softmax_cross_entropy(&mut tape, lv, &targets).unwrap();
        assert!((tape.item(ce) - common::cross_entropy(&logits, &targets)).abs() < 1e-12);
    }
}

#[test]
fn grl_schedule_examples() {
    assert_eq!(objectives::grl_lambda(0.0, 10.0).unwrap(), 0.0);
    let one = objectives::grl_lambda(1.0, 10.0).unwrap();
    assert!((one - common::grl_lambda(1.0, 10.0)).abs() < 1e-12);
    assert!((one - 0.99991).abs() < 1e-5);
    let tenth = objectives::grl_lambda(0.1, 10.0).unwrap();
    assert!((tenth - (2.0 / (1.0 + (-1.0f64).exp()) - 1.0)).abs() < 1e-12);
    assert!(objectives::grl_lambda(1.5, 10.0).is_err());
    assert!(objectives::grl_lambda(-0.1, 10.0).is_err());
}

#[test]
fn default_regressive_reference_agrees_with_progressive_forward() {
    // Literal regressive backward reference v(c_j, c_i) points opposite to
    // the progressive forward reference v(c_i, c_j) of the same labels.
    let lit = reference_pairs(30, 20, Relation::Regressive).unwrap();
    assert_eq!(lit.backward, (20, 30));
    let cfg = LossConfig::default();
    let ours = objectives::order_references(30, 20, Relation::Regressive, &cfg).unwrap();
    assert_eq!(ours.backward, (30, 20));
    let literal = LossConfig {
        literal_regressive: true,
        ..cfg
    };
    let back = objectives::order_references(30, 20, Relation::Regressive, &literal).unwrap();
    assert_eq!(back, lit);
}
