#![allow(dead_code)]

use magflow::geo::{Edge, GeoGraph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Erdos-Renyi style graph with weights in (0.2, 1].
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> GeoGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                edges.push(Edge {
                    i: i as u32,
                    j: j as u32,
                    weight: 1.0 - 0.8 * rng.gen::<f64>(),
                });
            }
        }
    }
    GeoGraph::from_edges(n, edges).unwrap()
}

pub fn random_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

use magflow::bank::PhaseTokenBank;
use magflow::model::SeqInput;
use ndarray::Array2;

/// Bank with uniformly random angles and mixing weights.
pub fn random_bank(rng: &mut ChaCha8Rng, n_pois: usize, rank: usize, k: usize, n_bins: usize) -> PhaseTokenBank {
    let angles = (0..rank)
        .map(|_| (0..n_pois * k).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect())
        .collect();
    let pi = (0..n_bins * rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PhaseTokenBank::new(n_pois, k, 0.2, 0, angles, pi, n_bins).unwrap()
}

/// Overfit corpus: every user walks a fixed cyclic route over `route_len`
/// distinct POIs, so the next POI is determined by user and current POI.
pub fn cyclic_corpus(
    rng: &mut ChaCha8Rng,
    n_pois: usize,
    n_users: usize,
    per_user: usize,
    len: usize,
    route_len: usize,
    bank: &PhaseTokenBank,
) -> Vec<SeqInput<f64>> {
    use rand::seq::SliceRandom;
    let mut out = Vec::new();
    for user in 0..n_users {
        let mut all: Vec<usize> = (0..n_pois).collect();
        all.shuffle(rng);
        let route = &all[..route_len];
        for _ in 0..per_user {
            let start = rng.gen_range(0..route_len);
            let pois: Vec<usize> = (0..len).map(|t| route[(start + t) % route_len]).collect();
            let hours: Vec<usize> = (0..len).map(|t| (8 + 2 * t) % 24).collect();
            let bins: Vec<usize> = hours.iter().map(|h| 24 + h).collect();
            let mut m = Array2::zeros((len, 2 * bank.k()));
            for t in 0..len {
                let src = if t == 0 { pois[0] } else { pois[t - 1] };
                let f = magflow::phase::step_phase_feature::<f64>(bank, pois[t], src, bins[t]).unwrap();
                for (j, v) in f.m.into_iter().enumerate() {
                    m[[t, j]] = v;
                }
            }
            out.push(SeqInput {
                user,
                cats: pois.iter().map(|p| p % 5).collect(),
                pois,
                hours,
                dows: vec![1; len],
                ell: (0..len).map(|t| if t == 0 { 0.0 } else { 3f64.ln() }).collect(),
                m,
            });
        }
    }
    out
}

use magflow::model::Model;
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;

/// Eigenvalues of the `2n x 2n` real symmetric embedding `[[Re, -Im], [Im, Re]]`;
/// each Hermitian eigenvalue appears twice.
pub fn embedded_eigenvalues(l: &DMatrix<C64>) -> Vec<f64> {
    let n = l.nrows();
    let m = DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let z = l[(r % n, c % n)];
        match (r < n, c < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().step_by(2).collect()
}

/// Relative error `||fd - g|| / ||max(|fd|, |g|)||` per parameter block,
/// with `fd` the central difference of the mean loss at step `eps`.
pub fn block_gradient_errors(model: &Model<f64>, inp: &SeqInput<f64>, eps: f64) -> Vec<(String, f64)> {
    let mut grad = vec![0.0; model.n_params()];
    model.loss_and_grad(inp, &mut grad, 1.0).unwrap();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for block in &model.layout.blocks {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in block.range() {
            let orig = probe.params[i];
            probe.params[i] = orig + eps;
            let up = probe.loss(inp).unwrap();
            probe.params[i] = orig - eps;
            let down = probe.loss(inp).unwrap();
            probe.params[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            num += (fd - grad[i]).powi(2);
            den += fd.powi(2).max(grad[i].powi(2));
        }
        let rel = if den == 0.0 { 0.0 } else { (num / den).sqrt() };
        out.push((block.name.clone(), rel));
    }
    out
}
