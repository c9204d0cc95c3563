//! Training objectives. Images are `[H,W,3]` tape tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("loss weight `{0}` must be non-negative")]
    NegativeWeight(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// SSIM share of the photometric term.
    pub alpha: f64,
    /// Volume regularization weight.
    pub beta: f64,
    /// Hidden-stream trade-off: 10 for objects, 0.1 for a single image.
    pub lambda: f64,
    pub bit_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.01,
            lambda: 10.0,
            bit_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("bit_weight", self.bit_weight),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

fn image_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [h, w, 3] => Some((*h, *w)),
        _ => None,
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<(usize, usize), LossError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(LossError::ShapeMismatch(sa.to_vec(), sb.to_vec()));
    }
    image_dims(tape.value(a)).ok_or_else(|| LossError::ShapeMismatch(sa.to_vec(), vec![0, 0, 3]))
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var, LossError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(LossError::ShapeMismatch(sa.to_vec(), sb.to_vec()));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable "valid" correlation of one `h×w` plane with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h-10)×(w-10)` map back to `h×w`.
fn filter_adjoint(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(data: &[f64], c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(3).copied().collect()
}

struct SsimStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn ssim_stats(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> SsimStats {
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    SsimStats {
        mu_a: filter_valid(a, h, w, k),
        mu_b: filter_valid(b, h, w, k),
        e_aa: filter_valid(&sq(a, a), h, w, k),
        e_bb: filter_valid(&sq(b, b), h, w, k),
        e_ab: filter_valid(&sq(a, b), h, w, k),
    }
}

/// Mean SSIM over the valid region, averaged across the three channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (h, w) = image_dims(a).ok_or_else(|| LossError::ShapeMismatch(a.shape().to_vec(), vec![0, 0, 3]))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::TooSmall(w, h));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (ac, bc) = (channel(a.data(), c), channel(b.data(), c));
        let s = ssim_stats(&ac, &bc, h, w, &k);
        for i in 0..s.mu_a.len() {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let va = s.e_aa[i] - ma * ma;
            let vb = s.e_bb[i] - mb * mb;
            let cov = s.e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

struct SsimOp {
    h: usize,
    w: usize,
}

impl SsimOp {
    /// Gradient of `1 − mean SSIM` with respect to `x`, where `x` plays the
    /// role of the first argument (SSIM is symmetric, so the same routine
    /// serves both inputs with swapped roles).
    fn grad_first(&self, x: &Tensor, y: &Tensor) -> Tensor {
        let (h, w) = (self.h, self.w);
        let k = gaussian_window();
        let m = (3 * (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW)) as f64;
        let mut out = vec![0.0; h * w * 3];
        for c in 0..3 {
            let (xc, yc) = (channel(x.data(), c), channel(y.data(), c));
            let s = ssim_stats(&xc, &yc, h, w, &k);
            let n = s.mu_a.len();
            let (mut d_mu, mut d_e2, mut d_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (mx, my) = (s.mu_a[i], s.mu_b[i]);
                let vx = s.e_aa[i] - mx * mx;
                let vy = s.e_bb[i] - my * my;
                let cxy = s.e_ab[i] - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * cxy + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = vx + vy + SSIM_C2;
                let val = a1 * a2 / (b1 * b2);
                // loss is 1 - mean, hence the leading minus
                d_mu[i] = -((2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2)
                    - val * (2.0 * mx / b1 - 2.0 * mx / b2))
                    / m;
                d_e2[i] = val / b2 / m;
                d_exy[i] = -(2.0 * a1 / (b1 * b2)) / m;
            }
            let g_mu = filter_adjoint(&d_mu, h, w, &k);
            let g_e2 = filter_adjoint(&d_e2, h, w, &k);
            let g_exy = filter_adjoint(&d_exy, h, w, &k);
            for q in 0..h * w {
                out[q * 3 + c] = g_mu[q] + 2.0 * xc[q] * g_e2[q] + yc[q] * g_exy[q];
            }
        }
        Tensor::new(vec![h, w, 3], out).expect("sized")
    }
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_out.data()[0];
        let scale = |t: Tensor| {
            let data = t.data().iter().map(|v| v * g).collect();
            Tensor::new(t.shape().to_vec(), data).expect("sized")
        };
        vec![
            Some(scale(self.grad_first(inputs[0], inputs[1]))),
            Some(scale(self.grad_first(inputs[1], inputs[0]))),
        ]
    }
}

/// `1 − SSIM(a, b)` with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var, LossError> {
    let (h, w) = check_pair(tape, a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::TooSmall(w, h));
    }
    let value = 1.0 - ssim(tape.value(a), tape.value(b))?;
    Ok(tape.custom(&[a, b], Tensor::scalar(value), Box::new(SsimOp { h, w })))
}

/// Mean over Gaussians of `s_x·s_y·s_z`, for scales laid out as `[n,3]`.
pub fn vol_reg(tape: &mut Tape, scales: Var) -> Result<Var, LossError> {
    let sx = tape.slice_cols(scales, 0, 1)?;
    let sy = tape.slice_cols(scales, 1, 1)?;
    let sz = tape.slice_cols(scales, 2, 1)?;
    let p = tape.mul(sx, sy)?;
    let p = tape.mul(p, sz)?;
    Ok(tape.mean(p))
}

/// `(1−α)·ℓ1 + α·ℓ_ssim + β·ℓ_vol` for one stream.
pub fn stream_loss(
    tape: &mut Tape,
    render: Var,
    target: Var,
    scales: Var,
    w: &LossWeights,
) -> Result<Var, LossError> {
    let l1 = l1_loss(tape, render, target)?;
    let ss = ssim_loss(tape, render, target)?;
    let vol = vol_reg(tape, scales)?;
    let l1 = tape.scale(l1, 1.0 - w.alpha);
    let ss = tape.scale(ss, w.alpha);
    let vol = tape.scale(vol, w.beta);
    let s = tape.add(l1, ss)?;
    Ok(tape.add(s, vol)?)
}

/// One stream's inputs: rendered image, target image, neural-Gaussian scales.
#[derive(Clone, Copy, Debug)]
pub struct StreamInputs {
    pub render: Var,
    pub target: Var,
    pub scales: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ori: Var,
    pub hid: Option<Var>,
}

/// `ℓ_total = ℓ_ori + λ·ℓ_hid`; the hidden stream is optional.
pub fn total_loss(
    tape: &mut Tape,
    ori: StreamInputs,
    hid: Option<StreamInputs>,
    w: &LossWeights,
) -> Result<LossTerms, LossError> {
    let l_ori = stream_loss(tape, ori.render, ori.target, ori.scales, w)?;
    let Some(hid) = hid else {
        return Ok(LossTerms {
            total: l_ori,
            ori: l_ori,
            hid: None,
        });
    };
    let l_hid = stream_loss(tape, hid.render, hid.target, hid.scales, w)?;
    let weighted = tape.scale(l_hid, w.lambda);
    let total = tape.add(l_ori, weighted)?;
    Ok(LossTerms {
        total,
        ori: l_ori,
        hid: Some(l_hid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, central_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Direct (non-separable) windowed SSIM written independently of the
    /// separable implementation.
    fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut g2 = [[0.0; 11]; 11];
        let mut total = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                g2[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += g2[i][j];
            }
        }
        let mut acc = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let g = g2[i][j] / total;
                            let idx = ((y + i) * w + x + j) * 3 + c;
                            let (pa, pb) = (a.data()[idx], b.data()[idx]);
                            ma += g * pa;
                            mb += g * pb;
                            saa += g * pa * pa;
                            sbb += g * pb * pb;
                            sab += g * pa * pb;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    acc += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                        / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![4, 4, 3]));
        let b = tape.constant(Tensor::full(vec![4, 4, 3], 1.0));
        let same = l1_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
        let one = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(one).data()[0], 1.0);
        let c = tape.constant(Tensor::zeros(vec![4, 5, 3]));
        assert!(matches!(l1_loss(&mut tape, a, c), Err(LossError::ShapeMismatch(..))));
    }

    #[test]
    fn l1_gradient_is_sign_over_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = random_image(&mut rng, 4, 4);
        let b0 = random_image(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.constant(b0.clone());
        let l = l1_loss(&mut tape, a, b).unwrap();
        let g = tape.backward(l).unwrap();
        let n = 48.0;
        for (i, gv) in g.get(a).unwrap().data().iter().enumerate() {
            let want = (a0.data()[i] - b0.data()[i]).signum() / n;
            assert_eq!(*gv, want);
            let mut f = |x: &[f64]| x.iter().zip(b0.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n;
            assert_grad_close(*gv, central_diff(a0.data(), i, 1e-6, &mut f), 1e-4, "l1");
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let same = ssim_loss(&mut tape, av, av).unwrap();
        assert!(tape.value(same).data()[0].abs() < 1e-12);

        let inv = Tensor::new(vec![16, 16, 3], a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let noisy = Tensor::new(
            vec![16, 16, 3],
            a.data().iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect(),
        )
        .unwrap();
        let iv = tape.constant(inv);
        let nv = tape.constant(noisy);
        let l_inv = ssim_loss(&mut tape, av, iv).unwrap();
        let l_noise = ssim_loss(&mut tape, av, nv).unwrap();
        let (li, ln) = (tape.value(l_inv).data()[0], tape.value(l_noise).data()[0]);
        assert!(li > 0.0 && li <= 2.0);
        assert!(li > ln);

        let small = tape.constant(Tensor::zeros(vec![10, 16, 3]));
        assert_eq!(ssim_loss(&mut tape, small, small).unwrap_err(), LossError::TooSmall(16, 10));
    }

    #[test]
    fn ssim_matches_direct_window_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random_image(&mut rng, 17, 13);
            let b = random_image(&mut rng, 17, 13);
            assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = random_image(&mut rng, 12, 13);
        let b0 = random_image(&mut rng, 12, 13);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let l = ssim_loss(&mut tape, a, b).unwrap();
        let g = tape.backward(l).unwrap();
        let (ga, gb) = (g.get(a).unwrap(), g.get(b).unwrap());
        for i in (0..a0.len()).step_by(7) {
            let mut fa = |x: &[f64]| {
                1.0 - ssim(&Tensor::new(vec![12, 13, 3], x.to_vec()).unwrap(), &b0).unwrap()
            };
            assert_grad_close(ga.data()[i], central_diff(a0.data(), i, 1e-4, &mut fa), 1e-4, "ssim a");
            let mut fb = |x: &[f64]| {
                1.0 - ssim(&a0, &Tensor::new(vec![12, 13, 3], x.to_vec()).unwrap()).unwrap()
            };
            assert_grad_close(gb.data()[i], central_diff(b0.data(), i, 1e-4, &mut fb), 1e-4, "ssim b");
        }
    }

    #[test]
    fn vol_reg_examples_and_gradient() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(vec![5, 3], 1.0));
        let v = vol_reg(&mut tape, ones).unwrap();
        assert_eq!(tape.value(v).data()[0], 1.0);
        let s = tape.leaf(Tensor::matrix(1, 3, vec![2.0, 3.0, 4.0]).unwrap(), true);
        let v = vol_reg(&mut tape, s).unwrap();
        assert_eq!(tape.value(v).data()[0], 24.0);
        let g = tape.backward(v).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[12.0, 8.0, 6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::matrix(4, 3, x0.clone()).unwrap(), true);
        let v = vol_reg(&mut tape, s).unwrap();
        let g = tape.backward(v).unwrap();
        let mut f = |x: &[f64]| x.chunks(3).map(|c| c[0] * c[1] * c[2]).sum::<f64>() / 4.0;
        for i in 0..12 {
            assert_grad_close(g.get(s).unwrap().data()[i], central_diff(&x0, i, 1e-6, &mut f), 1e-4, "vol");
        }
    }

    #[test]
    fn total_loss_at_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 16, 16);
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.lambda), (0.2, 0.01, 10.0));
        let mut tape = Tape::new();
        let i = tape.constant(img);
        let s = tape.constant(Tensor::full(vec![7, 3], 1.0));
        let stream = StreamInputs { render: i, target: i, scales: s };
        let t = total_loss(&mut tape, stream, Some(stream), &w).unwrap();
        let total = tape.value(t.total).data()[0];
        assert!((total - w.beta * (1.0 + w.lambda)).abs() < 1e-12);
    }

    #[test]
    fn lambda_scales_hidden_contribution_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b, c, d) = (
            random_image(&mut rng, 16, 16),
            random_image(&mut rng, 16, 16),
            random_image(&mut rng, 16, 16),
            random_image(&mut rng, 16, 16),
        );
        let eval = |lambda: f64| {
            let w = LossWeights { lambda, ..LossWeights::default() };
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::full(vec![2, 3], 0.5));
            let ori = StreamInputs { render: tape.constant(a.clone()), target: tape.constant(b.clone()), scales: s };
            let hr = tape.leaf(c.clone(), true);
            let hid = StreamInputs { render: hr, target: tape.constant(d.clone()), scales: s };
            let t = total_loss(&mut tape, ori, Some(hid), &w).unwrap();
            let g = tape.backward(t.total).unwrap();
            (
                tape.value(t.total).data()[0],
                tape.value(t.ori).data()[0],
                g.get(hr).map(|g| g.data().iter().map(|v| v.abs()).sum::<f64>()).unwrap_or(0.0),
            )
        };
        let (t1, o1, _) = eval(1.0);
        let (t2, o2, _) = eval(2.0);
        assert_eq!(o1, o2);
        assert!(((t2 - o2) - 2.0 * (t1 - o1)).abs() < 1e-12);
        let (t0, o0, g0) = eval(0.0);
        assert_eq!(t0, o0);
        assert_eq!(g0, 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { beta: -0.1, ..LossWeights::default() };
        assert_eq!(w.validate(), Err(LossError::NegativeWeight("beta")));
        assert!(LossWeights::default().validate().is_ok());
    }
}
