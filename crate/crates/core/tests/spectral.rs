mod common;

use magflow::direction::{factorize, LowRankBasis, SignalMatrix};
use magflow::spectral::{
    build_hermitian_laplacian, dense_smallest_k, lanczos_smallest_k, lift_antisymmetric, phase_tokens,
    precompute_bank, smallest_k_eigs, EigenOptions,
};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_solver_matches_real_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let g = common::random_graph(&mut rng, 40, 0.15);
        let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
        let l = build_hermitian_laplacian(&g, &a, 0.2).unwrap();
        let e = dense_smallest_k(&l, 6);
        let oracle = common::embedded_eigenvalues(&l.to_dense());
        for (x, y) in e.values.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn lanczos_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(n, p, q, k) in &[(120, 0.05, 0.2, 8), (200, 0.03, 0.15, 16), (300, 0.02, 0.25, 16)] {
        let g = common::random_graph(&mut rng, n, p);
        let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
        let l = build_hermitian_laplacian(&g, &a, q).unwrap();
        let dense = dense_smallest_k(&l, k);
        let lz = lanczos_smallest_k(&l, k, &EigenOptions::default()).unwrap();
        for (x, y) in lz.values.iter().zip(&dense.values) {
            assert!((x - y).abs() < 1e-8, "n={n}: {x} vs {y}");
        }
        let gram = lz.vectors.adjoint() * &lz.vectors;
        let err = (gram - DMatrix::<C64>::identity(k, k)).camax();
        assert!(err < 1e-8, "orthonormality {err}");
    }
}

#[test]
fn lanczos_finds_repeated_eigenvalues() {
    // disjoint copies of one component give every eigenvalue multiplicity 3
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = common::random_graph(&mut rng, 30, 0.2);
    let psi = common::random_row(&mut rng, base.n_edges());
    let mut edges = Vec::new();
    let mut row = Vec::new();
    for c in 0..3u32 {
        for (e, edge) in base.edges().iter().enumerate() {
            edges.push(magflow::geo::Edge {
                i: edge.i + 30 * c,
                j: edge.j + 30 * c,
                weight: edge.weight,
            });
            row.push(psi[e]);
        }
    }
    let g = magflow::geo::GeoGraph::from_edges(90, edges).unwrap();
    let a = lift_antisymmetric(&row, &g).unwrap();
    let l = build_hermitian_laplacian(&g, &a, 0.2).unwrap();
    let dense = dense_smallest_k(&l, 7);
    let lz = lanczos_smallest_k(&l, 7, &EigenOptions::default()).unwrap();
    for (x, y) in lz.values.iter().zip(&dense.values) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn large_graph_dispatches_to_lanczos() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = common::random_graph(&mut rng, 600, 0.01);
    let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
    let l = build_hermitian_laplacian(&g, &a, 0.2).unwrap();
    let e = smallest_k_eigs(&l, 4, &EigenOptions::default()).unwrap();
    let dense = dense_smallest_k(&l, 4);
    for (x, y) in e.values.iter().zip(&dense.values) {
        assert!((x - y).abs() < 1e-8);
    }
    assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn no_convergence_names_the_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = common::random_graph(&mut rng, 200, 0.05);
    let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
    let l = build_hermitian_laplacian(&g, &a, 0.2).unwrap();
    let opts = EigenOptions {
        max_restarts: 1,
        tol: 1e-15,
        basis: 7,
        ..EigenOptions::default()
    };
    match lanczos_smallest_k(&l, 10, &opts) {
        Err(magflow::Error::NoConvergence { basis, residual, .. }) => {
            assert_eq!(basis, 7);
            assert!(residual.is_finite());
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn zero_charge_gives_the_normalized_laplacian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = common::random_graph(&mut rng, 50, 0.1);
    let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
    let l = build_hermitian_laplacian(&g, &a, 0.0).unwrap().to_dense();
    let d = g.degrees();
    for i in 0..50 {
        for j in 0..50 {
            let w = g.weight(i, j);
            let expect = if i == j {
                1.0
            } else if w > 0.0 {
                -w / (d[i] * d[j]).sqrt()
            } else {
                0.0
            };
            assert!((l[(i, j)].re - expect).abs() < 1e-15);
            assert_eq!(l[(i, j)].im, 0.0);
        }
    }
}

#[test]
fn lift_is_antisymmetric_with_edge_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = common::random_graph(&mut rng, 30, 0.2);
    let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
    for i in 0..30 {
        for j in 0..30 {
            assert_eq!(a.get(&g, i, j), -a.get(&g, j, i));
            if g.edge_id(i, j).is_none() {
                assert_eq!(a.get(&g, i, j), 0.0);
            }
            assert!(a.get(&g, i, j).abs() <= 1.0);
        }
    }
    let zero = lift_antisymmetric(&vec![0.0; g.n_edges()], &g).unwrap();
    assert!(zero.edge_values().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_hermitian_and_phase_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let n = rng.gen_range(10..100);
        let g = common::random_graph(&mut rng, n, 0.1);
        let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
        let q = 0.2;
        let l = build_hermitian_laplacian(&g, &a, q).unwrap();
        let m = l.to_dense();
        assert_eq!((&m - m.adjoint()).camax(), 0.0);
        let d = g.degrees();
        for (e, edge) in g.edges().iter().enumerate() {
            let (i, j) = (edge.i as usize, edge.j as usize);
            let h = -m[(i, j)] * (d[i] * d[j]).sqrt();
            assert!((h.norm() - edge.weight).abs() < 1e-12);
            let phi = h.arg();
            assert!(phi.abs() <= 2.0 * std::f64::consts::PI * q + 1e-12);
            assert!((phi - 2.0 * std::f64::consts::PI * q * a.edge_values()[e]).abs() < 1e-12);
        }
    }
}

#[test]
fn swapped_endpoints_conjugate_phase_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = common::random_graph(&mut rng, 60, 0.1);
    let a = lift_antisymmetric(&common::random_row(&mut rng, g.n_edges()), &g).unwrap();
    let l = build_hermitian_laplacian(&g, &a, 0.2).unwrap();
    let e = dense_smallest_k(&l, 4);
    let tok = phase_tokens(&e.vectors);
    for edge in g.edges() {
        let (i, j) = (edge.i as usize, edge.j as usize);
        for m in 0..4 {
            let fwd = C64::from_polar(1.0, tok[j * 4 + m]) * C64::from_polar(1.0, tok[i * 4 + m]).conj();
            let bwd = C64::from_polar(1.0, tok[i * 4 + m]) * C64::from_polar(1.0, tok[j * 4 + m]).conj();
            assert!((fwd - bwd.conj()).norm() < 1e-15);
        }
    }
}

fn toy_basis(rng: &mut ChaCha8Rng, n_edges: usize, rank: usize) -> LowRankBasis {
    let s = DMatrix::from_fn(24, n_edges, |_, _| rng.gen_range(-1.0..1.0));
    factorize(&SignalMatrix { s }, rank).unwrap()
}

#[test]
fn bank_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = common::random_graph(&mut rng, 50, 0.1);
    let basis = toy_basis(&mut rng, g.n_edges(), 2);
    let (bank, report) = precompute_bank(&g, &basis, 0.2, 5, &EigenOptions::default()).unwrap();
    assert_eq!(bank.rank(), 2);
    assert_eq!(bank.basis_angles(0).len(), 50 * 5);
    assert_eq!(bank.basis_angles(1).len(), 50 * 5);
    assert_eq!(report.seconds_per_basis.len(), 2);
    assert_eq!(bank.graph_hash(), g.content_hash());
    let (again, _) = precompute_bank(&g, &basis, 0.2, 5, &EigenOptions::default()).unwrap();
    assert_eq!(bank.to_bytes(), again.to_bytes());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (threaded, _) = pool.install(|| precompute_bank(&g, &basis, 0.2, 5, &EigenOptions::default()).unwrap());
    assert_eq!(bank.to_bytes(), threaded.to_bytes());
}

#[test]
fn bank_rejects_mismatched_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = common::random_graph(&mut rng, 30, 0.1);
    let basis = toy_basis(&mut rng, g.n_edges() + 1, 2);
    assert!(precompute_bank(&g, &basis, 0.2, 3, &EigenOptions::default()).is_err());
}
