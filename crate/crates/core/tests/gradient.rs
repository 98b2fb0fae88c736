mod common;

use cdrisk::model::ClassWeights;
use common::*;
use ndarray::Array2;
use rand::Rng;

/// Below this magnitude the relative error is measured against a fixed scale,
/// since a central difference cannot resolve smaller gradients to 1e-4.
const FLOOR: f64 = 1e-6;

#[test]
fn oracle_forward_matches_library_forward() {
    let mut r = rng(1);
    for seed in 0..5 {
        let m = random_model(7, 9, 2, seed);
        let x = random_matrix(6, 7, 2.0, &mut r);
        let lib = m.forward_batch(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let (p, _) = oracle_forward(&m, &m.params, row.as_slice().unwrap());
            assert!((p[0] - lib[[i, 0]]).abs() < 1e-12 && (p[1] - lib[[i, 1]]).abs() < 1e-12);
        }
        let y: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
        let w = ClassWeights { w0: 0.7, w1: 1.9 };
        let (oracle, _) = oracle_loss(&m, &m.params, &x, &y, &w);
        assert!((oracle - m.batch_loss(x.view(), &y, &w).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut r = rng(7);
    for pair in 0..12u64 {
        let input = r.random_range(3..9);
        let hidden = r.random_range(4..10);
        let blocks = r.random_range(1..4);
        let m = random_model(input, hidden, blocks, 100 + pair);
        let rows = r.random_range(2..9);
        let x: Array2<f64> = random_matrix(rows, input, 2.0, &mut r);
        let y: Vec<u8> = (0..rows).map(|_| r.random_range(0..2)).collect();
        let w = ClassWeights { w0: r.random_range(0.5..2.0), w1: r.random_range(0.5..5.0) };
        let rep = fd_check(&m, &x, &y, &w, 1e-4, FLOOR);
        assert!(rep.max_rel < 1e-4, "pair {pair}: rel {} at param {}", rep.max_rel, rep.worst);
        assert!(rep.skipped * 10 < m.n_params(), "pair {pair}: {} kinks", rep.skipped);
    }
}

#[test]
fn default_architecture_gradient_spot_check() {
    let mut r = rng(3);
    let m = random_model(38, 64, 3, 5);
    let x = random_matrix(4, 38, 1.5, &mut r);
    let y = [0, 1, 1, 0];
    let rep = fd_check(&m, &x, &y, &ClassWeights { w0: 0.55, w1: 5.5 }, 1e-4, FLOOR);
    assert_eq!(m.n_params(), 31_746);
    assert!(rep.max_rel < 1e-4, "rel {} at {}", rep.max_rel, rep.worst);
}
