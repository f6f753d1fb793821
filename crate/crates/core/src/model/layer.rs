//! One rotation-decay recurrent layer: input projection, per-step
//! coefficients, the paired-rotation scan, readout and post-residual RMS
//! normalization, each with its explicit adjoint.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{LayerIdx, Layout};

pub const RMS_EPS: f64 = 1e-6;

/// Rotates each pair `(v[2d], v[2d+1])` by `phi[d]`.
pub fn rotate_pairs<T: Scalar>(v: &[T], phi: &[T]) -> Vec<T> {
    assert_eq!(v.len(), 2 * phi.len(), "rotation needs one angle per pair");
    let mut out = vec![T::zero(); v.len()];
    for (d, &p) in phi.iter().enumerate() {
        let (s, c) = p.sin_cos();
        let (a, b) = (v[2 * d], v[2 * d + 1]);
        out[2 * d] = c * a - s * b;
        out[2 * d + 1] = s * a + c * b;
    }
    out
}

#[inline]
fn rot<T: Scalar>(c: T, s: T, a: T, b: T) -> (T, T) {
    (c * a - s * b, s * a + c * b)
}

/// Per-step coefficients for a whole sequence, each `L x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients<T> {
    /// `L x D/2`
    pub theta: Array2<T>,
    /// Pre-activation of the step size, `L x D/2`.
    pub delta_pre: Array2<T>,
    pub delta_half: Array2<T>,
    /// `L x D`, pairwise copies of `delta_half`.
    pub delta: Array2<T>,
    pub alpha: Array2<T>,
    pub lambda: Array2<T>,
    pub beta: Array2<T>,
    pub gamma: Array2<T>,
    /// `L x D/2`
    pub phi: Array2<T>,
    /// False when the angles are pinned to zero.
    pub rotate: bool,
}

/// Linear map `x W^T (+ b)` over the rows of `x`.
pub(crate) fn linear<T: Scalar>(x: ArrayView2<T>, w: ArrayView2<T>, b: Option<ArrayView1<T>>) -> Array2<T> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Accumulates `dW += dy^T x` into `dw`.
pub(crate) fn accumulate_weight<T: Scalar>(dw: &mut [T], dy: ArrayView2<T>, x: ArrayView2<T>) {
    let mut dw = ndarray::ArrayViewMut2::from_shape((dy.ncols(), x.ncols()), dw).expect("weight shape");
    general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut dw);
}

pub(crate) fn accumulate_bias<T: Scalar>(db: &mut [T], dy: ArrayView2<T>) {
    for row in dy.rows() {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Computes every per-step coefficient from `u`, the phase features `m`
/// and the log gaps `ell`.
#[allow(clippy::too_many_arguments)]
pub fn step_coefficients<T: Scalar>(
    u: ArrayView2<T>,
    m: ArrayView2<T>,
    ell: &[T],
    theta_x: ArrayView2<T>,
    theta_m: ArrayView2<T>,
    delta_w: &[T],
    delta_b: &[T],
    rho: &[T],
    lambda_w: ArrayView2<T>,
    rotate: bool,
) -> StepCoefficients<T> {
    let (l, d) = u.dim();
    let half = d / 2;
    let mut theta = linear(u, theta_x, None);
    theta += &linear(m, theta_m, None);
    let delta_pre = Array2::from_shape_fn((l, half), |(t, j)| delta_w[j] * ell[t] + delta_b[j]);
    let delta_half = delta_pre.mapv(Scalar::softplus);
    let delta = Array2::from_shape_fn((l, d), |(t, j)| delta_half[[t, j / 2]]);
    let a: Vec<T> = rho.iter().map(|r| -r.exp()).collect();
    let alpha = Array2::from_shape_fn((l, d), |(t, j)| (delta[[t, j]] * a[j]).exp());
    let lambda = linear(u, lambda_w, None).mapv(Scalar::sigmoid);
    let beta = Array2::from_shape_fn((l, d), |(t, j)| (T::one() - lambda[[t, j]]) * delta[[t, j]] * alpha[[t, j]]);
    let gamma = &lambda * &delta;
    let phi = if rotate {
        &delta_half * &theta
    } else {
        Array2::zeros((l, half))
    };
    StepCoefficients {
        theta,
        delta_pre,
        delta_half,
        delta,
        alpha,
        lambda,
        beta,
        gamma,
        phi,
        rotate,
    }
}

/// `h_t = alpha_t . R_t(h_{t-1}) + beta_t . R_t(w_{t-1}) + gamma_t . w_t`
/// with `w = B . u` and `w_0 = 0`; returns `(h, y = C . h)`.
#[allow(clippy::too_many_arguments)]
pub fn scan<T: Scalar>(
    alpha: ArrayView2<T>,
    beta: ArrayView2<T>,
    gamma: ArrayView2<T>,
    phi: ArrayView2<T>,
    u: ArrayView2<T>,
    b: ArrayView2<T>,
    c: ArrayView2<T>,
    h0: Option<&[T]>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (l, d) = u.dim();
    let w = &b * &u;
    let mut h = Array2::zeros((l, d));
    let mut prev_h: Vec<T> = h0.map(|x| x.to_vec()).unwrap_or_else(|| vec![T::zero(); d]);
    let mut prev_w = vec![T::zero(); d];
    for t in 0..l {
        for j in 0..d / 2 {
            let (sn, cs) = phi[[t, j]].sin_cos();
            let (h1, h2) = rot(cs, sn, prev_h[2 * j], prev_h[2 * j + 1]);
            let (w1, w2) = rot(cs, sn, prev_w[2 * j], prev_w[2 * j + 1]);
            for (e, hr, wr) in [(2 * j, h1, w1), (2 * j + 1, h2, w2)] {
                h[[t, e]] = alpha[[t, e]] * hr + beta[[t, e]] * wr + gamma[[t, e]] * w[[t, e]];
            }
        }
        let row = h.row(t);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("scan step {t}"), "non-finite hidden state"));
        }
        prev_h.copy_from_slice(row.as_slice().expect("contiguous"));
        prev_w.copy_from_slice(w.row(t).as_slice().expect("contiguous"));
    }
    let y = &c * &h;
    Ok((h, y))
}

/// Forward intermediates of one layer for a single sequence.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub x: Array2<T>,
    /// `L x 3D`: `[u | B | C]`.
    pub proj: Array2<T>,
    pub coef: StepCoefficients<T>,
    pub h: Array2<T>,
    pub y: Array2<T>,
    pub act: Array2<T>,
    /// Normalized residual before the scale.
    pub normed: Array2<T>,
    pub rms: Array1<T>,
    pub out: Array2<T>,
}

fn silu<T: Scalar>(x: T) -> T {
    x * x.sigmoid()
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = x.sigmoid();
    s * (T::one() + x * (T::one() - s))
}

pub fn layer_forward<T: Scalar>(
    layout: &Layout,
    params: &[T],
    idx: &LayerIdx,
    x: Array2<T>,
    m: ArrayView2<T>,
    ell: &[T],
    rotate: bool,
) -> Result<LayerCache<T>> {
    let d = layout.dims.d;
    let p = |id| layout.view(params, id);
    let sl = |id| layout.slice(params, id);
    let proj = linear(x.view(), p(idx.in_w), Some(p(idx.in_b).row(0)));
    let u = proj.slice(s![.., 0..d]);
    let b = proj.slice(s![.., d..2 * d]);
    let c = proj.slice(s![.., 2 * d..3 * d]);
    let coef = step_coefficients(
        u,
        m,
        ell,
        p(idx.theta_x),
        p(idx.theta_m),
        sl(idx.delta_w),
        sl(idx.delta_b),
        sl(idx.rho),
        p(idx.lambda_w),
        rotate,
    );
    let (h, y) = scan(
        coef.alpha.view(),
        coef.beta.view(),
        coef.gamma.view(),
        coef.phi.view(),
        u,
        b,
        c,
        None,
    )?;
    let act = y.mapv(silu);
    let mut r = linear(act.view(), p(idx.out_w), Some(p(idx.out_b).row(0)));
    r += &x;
    let eps = T::of(RMS_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let rms: Array1<T> = r
        .rows()
        .into_iter()
        .map(|row| (row.iter().map(|&v| v * v).sum::<T>() * inv_d + eps).sqrt())
        .collect();
    let normed = &r / &rms.view().insert_axis(Axis(1));
    let scale = p(idx.norm).row(0).to_owned();
    let out = &normed * &scale;
    Ok(LayerCache {
        x,
        proj,
        coef,
        h,
        y,
        act,
        normed,
        rms,
        out,
    })
}

/// Adjoints of the scan. Returns `(d_alpha, d_beta, d_gamma, d_phi, d_w)`;
/// `d_y` flows in through `C`, whose gradient is `d_y . h`.
#[allow(clippy::type_complexity)]
pub fn scan_backward<T: Scalar>(
    coef: &StepCoefficients<T>,
    w: ArrayView2<T>,
    h: ArrayView2<T>,
    c: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
    let (l, d) = w.dim();
    let half = d / 2;
    let mut da = Array2::zeros((l, d));
    let mut db = Array2::zeros((l, d));
    let mut dg = Array2::zeros((l, d));
    let mut dphi = Array2::zeros((l, half));
    let mut dw = Array2::zeros((l, d));
    let mut carry_h = vec![T::zero(); d];
    let mut carry_w = vec![T::zero(); d];
    let zero = vec![T::zero(); d];
    for t in (0..l).rev() {
        let prev_h = if t > 0 { h.row(t - 1).to_vec() } else { zero.clone() };
        let prev_w = if t > 0 { w.row(t - 1).to_vec() } else { zero.clone() };
        let g: Vec<T> = (0..d).map(|e| dy[[t, e]] * c[[t, e]] + carry_h[e]).collect();
        for e in 0..d {
            dw[[t, e]] = g[e] * coef.gamma[[t, e]] + carry_w[e];
            dg[[t, e]] = g[e] * w[[t, e]];
        }
        for j in 0..half {
            let (sn, cs) = coef.phi[[t, j]].sin_cos();
            let (e0, e1) = (2 * j, 2 * j + 1);
            let (ah0, ah1) = rot(cs, sn, prev_h[e0], prev_h[e1]);
            let (aw0, aw1) = rot(cs, sn, prev_w[e0], prev_w[e1]);
            da[[t, e0]] = g[e0] * ah0;
            da[[t, e1]] = g[e1] * ah1;
            db[[t, e0]] = g[e0] * aw0;
            db[[t, e1]] = g[e1] * aw1;
            let (ga0, ga1) = (g[e0] * coef.alpha[[t, e0]], g[e1] * coef.alpha[[t, e1]]);
            let (gb0, gb1) = (g[e0] * coef.beta[[t, e0]], g[e1] * coef.beta[[t, e1]]);
            dphi[[t, j]] = ga1 * ah0 - ga0 * ah1 + gb1 * aw0 - gb0 * aw1;
            let (ch0, ch1) = rot(cs, -sn, ga0, ga1);
            let (cw0, cw1) = rot(cs, -sn, gb0, gb1);
            carry_h[e0] = ch0;
            carry_h[e1] = ch1;
            carry_w[e0] = cw0;
            carry_w[e1] = cw1;
        }
    }
    (da, db, dg, dphi, dw)
}

/// Backpropagates `d_out` through the layer, accumulating parameter
/// gradients into `grad`, and returns `d_x`.
pub fn layer_backward<T: Scalar>(
    layout: &Layout,
    params: &[T],
    idx: &LayerIdx,
    cache: &LayerCache<T>,
    m: ArrayView2<T>,
    ell: &[T],
    d_out: ArrayView2<T>,
    grad: &mut [T],
) -> Array2<T> {
    let d = layout.dims.d;
    let half = d / 2;
    let l = d_out.nrows();
    let p = |id| layout.view(params, id);
    let inv_d = T::of(1.0 / d as f64);

    // out = normed . scale
    let scale = layout.slice(params, idx.norm);
    let dscale = layout.slice_mut(grad, idx.norm);
    let mut dn = d_out.to_owned();
    for t in 0..l {
        for e in 0..d {
            dscale[e] += d_out[[t, e]] * cache.normed[[t, e]];
            dn[[t, e]] *= scale[e];
        }
    }
    // normed = r / rms(r)
    let mut dr = Array2::zeros((l, d));
    for t in 0..l {
        let n = cache.normed.row(t);
        let dot = n.iter().zip(dn.row(t)).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for e in 0..d {
            dr[[t, e]] = (dn[[t, e]] - n[e] * dot) / cache.rms[t];
        }
    }
    let mut dx = dr.clone();
    accumulate_weight(layout.slice_mut(grad, idx.out_w), dr.view(), cache.act.view());
    accumulate_bias(layout.slice_mut(grad, idx.out_b), dr.view());
    let dact = dr.dot(&p(idx.out_w));
    let dy = Array2::from_shape_fn((l, d), |(t, e)| dact[[t, e]] * silu_grad(cache.y[[t, e]]));

    let u = cache.proj.slice(s![.., 0..d]);
    let bm = cache.proj.slice(s![.., d..2 * d]);
    let c = cache.proj.slice(s![.., 2 * d..3 * d]);
    let w = &bm * &u;
    let (dalpha, dbeta, dgamma, dphi, dw) = scan_backward(&cache.coef, w.view(), cache.h.view(), c, dy.view());

    let mut dproj = Array2::zeros((l, 3 * d));
    {
        let dc = &dy * &cache.h;
        dproj.slice_mut(s![.., 2 * d..3 * d]).assign(&dc);
        let du_w = &dw * &bm;
        let db_w = &dw * &u;
        dproj.slice_mut(s![.., d..2 * d]).assign(&db_w);
        dproj.slice_mut(s![.., 0..d]).assign(&du_w);
    }

    let coef = &cache.coef;
    let rho = layout.slice(params, idx.rho);
    let a: Vec<T> = rho.iter().map(|r| -r.exp()).collect();
    let mut dlambda_pre = Array2::<T>::zeros((l, d));
    let mut ddelta_half = Array2::<T>::zeros((l, half));
    let mut drho = vec![T::zero(); d];
    for t in 0..l {
        for e in 0..d {
            let (al, de, la) = (coef.alpha[[t, e]], coef.delta[[t, e]], coef.lambda[[t, e]]);
            let (gal, gbe, gga) = (dalpha[[t, e]], dbeta[[t, e]], dgamma[[t, e]]);
            let one_m = T::one() - la;
            let dla = -gbe * de * al + gga * de;
            let da_tot = gal + gbe * one_m * de;
            let dde = gbe * one_m * al + gga * la + da_tot * al * a[e];
            drho[e] += da_tot * al * de * a[e];
            dlambda_pre[[t, e]] = dla * la * one_m;
            ddelta_half[[t, e / 2]] += dde;
        }
    }
    let mut dtheta = Array2::<T>::zeros((l, half));
    for t in (0..l).filter(|_| coef.rotate) {
        for j in 0..half {
            ddelta_half[[t, j]] += dphi[[t, j]] * coef.theta[[t, j]];
            dtheta[[t, j]] = dphi[[t, j]] * coef.delta_half[[t, j]];
        }
    }
    for (g, v) in layout.slice_mut(grad, idx.rho).iter_mut().zip(&drho) {
        *g += *v;
    }
    {
        let dw_delta = layout.slice_mut(grad, idx.delta_w);
        for t in 0..l {
            for j in 0..half {
                dw_delta[j] += ddelta_half[[t, j]] * coef.delta_pre[[t, j]].sigmoid() * ell[t];
            }
        }
        let db_delta = layout.slice_mut(grad, idx.delta_b);
        for t in 0..l {
            for j in 0..half {
                db_delta[j] += ddelta_half[[t, j]] * coef.delta_pre[[t, j]].sigmoid();
            }
        }
    }

    accumulate_weight(layout.slice_mut(grad, idx.theta_x), dtheta.view(), u);
    accumulate_weight(layout.slice_mut(grad, idx.theta_m), dtheta.view(), m);
    accumulate_weight(layout.slice_mut(grad, idx.lambda_w), dlambda_pre.view(), u);
    {
        let mut du = dproj.slice_mut(s![.., 0..d]);
        du += &dtheta.dot(&p(idx.theta_x));
        du += &dlambda_pre.dot(&p(idx.lambda_w));
    }

    accumulate_weight(layout.slice_mut(grad, idx.in_w), dproj.view(), cache.x.view());
    accumulate_bias(layout.slice_mut(grad, idx.in_b), dproj.view());
    dx += &dproj.dot(&p(idx.in_w));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn quarter_turn() {
        let r = rotate_pairs(&[1.0, 0.0], &[PI / 2.0]);
        assert!(r[0].abs() < 1e-15);
        assert!((r[1] - 1.0).abs() < 1e-15);
        assert_eq!(rotate_pairs(&[0.3, -0.2], &[0.0]), vec![0.3, -0.2]);
    }

    #[test]
    fn single_step_scan() {
        let one = Array2::from_elem((1, 2), 1.0);
        let gamma = Array2::from_shape_vec((1, 2), vec![0.5, 0.25]).unwrap();
        let u = Array2::from_shape_vec((1, 2), vec![2.0, 3.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![1.5, -1.0]).unwrap();
        let (h, _) = scan(
            one.view(),
            one.view(),
            gamma.view(),
            Array2::from_elem((1, 1), 0.7).view(),
            u.view(),
            b.view(),
            one.view(),
            None,
        )
        .unwrap();
        assert_eq!(h.row(0).to_vec(), vec![1.5, -0.75]);
    }

    #[test]
    fn scan_rejects_overflow() {
        let big = Array2::from_elem((3, 2), 1e300);
        let one = Array2::from_elem((3, 2), 1.0);
        let err = scan(
            big.view(),
            one.view(),
            big.view(),
            Array2::zeros((3, 1)).view(),
            big.view(),
            big.view(),
            one.view(),
            None,
        );
        assert!(matches!(err, Err(Error::Numerical { .. })));
    }
}
