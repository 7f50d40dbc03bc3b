//! Segmentation and matting losses, and the two schemes for balancing them.
//!
//! Each loss has a differentiable form over graph variables (suffix
//! `_var`, used for training) and a plain form over the domain types that
//! evaluates the same graph without recording.

use medmatting_nn::{Graph, ParamStore, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};
use crate::imaging::{check_pair, planes_to_tensor, AlphaMatte, BinaryMask};
use crate::maskgen::{GaussianLatent, ScoreMap, UncertaintyMap};

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_EPS: f64 = 1e-12;
pub const DEFAULT_GRAD_REGION_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu: f64,
    pub upsilon: f64,
    pub zeta: f64,
    pub xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 1.0,
            upsilon: 10.0,
            zeta: 1.0,
            xi: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.upsilon, self.zeta, self.xi];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MattingError::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Task noise scales, stored as `ln σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UwsState {
    pub log_sigma1: f64,
    pub log_sigma2: f64,
}

impl UwsState {
    pub const INITIAL_SIGMA: f64 = 4.0;

    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0) {
            return Err(MattingError::Domain(format!(
                "sigmas must be positive, got ({sigma1}, {sigma2})"
            )));
        }
        Ok(Self {
            log_sigma1: sigma1.ln(),
            log_sigma2: sigma2.ln(),
        })
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

impl Default for UwsState {
    fn default() -> Self {
        Self::new(Self::INITIAL_SIGMA, Self::INITIAL_SIGMA).expect("positive")
    }
}

/// Whether the cosine argument grows as `b n²` or `b n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OawsPhase {
    #[default]
    Quadratic,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OawsSchedule {
    pub a: f64,
    pub b: f64,
    pub t: f64,
    pub phase: OawsPhase,
}

impl Default for OawsSchedule {
    fn default() -> Self {
        Self {
            a: 0.05,
            b: 0.03,
            t: 0.5,
            phase: OawsPhase::Quadratic,
        }
    }
}

impl OawsSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && (0.0..=1.0).contains(&self.t)) {
            return Err(MattingError::Config(format!(
                "oaws needs a > 0, b > 0, 0 <= t <= 1: ({}, {}, {})",
                self.a, self.b, self.t
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Differentiable forms.

/// Mean over pixels of `-Σ_c target_c ln p_c`. Both inputs are `[N, C, H, W]`.
pub fn ce_var(g: &Graph, probs: Var, target: Var) -> Var {
    let shape = g.shape(probs);
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    let ll = g.sum(g.mul(target, g.ln_clamped(probs, PROB_EPS)));
    g.mul_scalar(ll, -1.0 / pixels)
}

/// KL(q ‖ p) for diagonal Gaussians given `[N, L]` means and log variances;
/// summed over dimensions, averaged over the batch.
pub fn kl_var(g: &Graph, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Var {
    let n = g.shape(mu_q)[0] as f64;
    let diff = g.sub(mu_q, mu_p);
    let ratio = g.mul(
        g.add(g.exp(logvar_q), g.square(diff)),
        g.exp(g.neg(logvar_p)),
    );
    let per_dim = g.add_scalar(g.add(g.sub(logvar_p, logvar_q), ratio), -1.0);
    g.mul_scalar(g.sum(per_dim), 0.5 / n)
}

pub fn alpha_l1_var(g: &Graph, pred: Var, gt: Var) -> Var {
    g.mean(g.abs(g.sub(pred, gt)))
}

/// Mean over region pixels of `|∂x pred − ∂x gt| + |∂y pred − ∂y gt|`
/// (Sobel). `region` is a `[N, 1, H, W]` tensor of zeros and ones; an empty
/// region gives a constant zero.
pub fn grad_loss_var(g: &Graph, pred: Var, gt: Var, region: &Tensor) -> Var {
    let count = region.sum();
    if count == 0.0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let both = Tensor::concat_channels(&[region, region]).expect("same shape");
    let diff = g.abs(g.sub(g.sobel(pred), g.sobel(gt)));
    let masked = g.mul(diff, g.constant(both));
    g.mul_scalar(g.sum(masked), 1.0 / count)
}

/// `e^{-2 s1} seg + ½ e^{-2 s2} matt + s1 + s2` with `s = ln σ`.
pub fn uws_var(g: &Graph, seg: Var, matt: Var, log_sigma1: Var, log_sigma2: Var) -> Var {
    let w1 = g.exp(g.mul_scalar(log_sigma1, -2.0));
    let w2 = g.mul_scalar(g.exp(g.mul_scalar(log_sigma2, -2.0)), 0.5);
    let weighted = g.add(g.mul(w1, seg), g.mul(w2, matt));
    g.add(weighted, g.add(log_sigma1, log_sigma2))
}

pub fn weighted_sum_var(g: &Graph, a: Var, wa: f64, b: Var, wb: f64) -> Var {
    g.add(g.mul_scalar(a, wa), g.mul_scalar(b, wb))
}

// ---------------------------------------------------------------------------
// Plain forms.

fn evaluate(f: impl FnOnce(&Graph) -> Var) -> f64 {
    let store = ParamStore::new();
    let g = Graph::inference(&store);
    let out = f(&g);
    g.value(out).item()
}

fn one_hot(mask: &BinaryMask, classes: usize) -> Tensor {
    let (h, w) = mask.dim();
    let mut data = vec![0.0; classes * h * w];
    for (i, &m) in mask.values().iter().enumerate() {
        data[usize::from(m) * h * w + i] = 1.0;
    }
    Tensor::new(&[1, classes, h, w], data).expect("sized")
}

/// Class 0 is background and class 1 is foreground.
pub fn ce_loss(score: &ScoreMap, pseudo: &BinaryMask) -> Result<f64> {
    let (c, h, w) = score.probs().dim();
    check_pair((h, w), pseudo.dim(), "score map vs pseudo mask")?;
    if c != 2 {
        return Err(MattingError::Shape(format!("{c} classes, expected 2")));
    }
    let probs = Tensor::new(&[1, c, h, w], score.probs().iter().copied().collect())?;
    let target = one_hot(pseudo, c);
    Ok(evaluate(|g| ce_var(g, g.constant(probs), g.constant(target))))
}

pub fn kl_loss(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(MattingError::Shape(format!(
            "latent dimensions {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let l = q.dim();
    let row = |v: &[f64]| Tensor::new(&[1, l], v.to_vec()).expect("sized");
    Ok(evaluate(|g| {
        kl_var(
            g,
            g.constant(row(q.mean())),
            g.constant(row(q.log_variance())),
            g.constant(row(p.mean())),
            g.constant(row(p.log_variance())),
        )
    }))
}

pub fn alpha_l1(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    check_pair(pred.dim(), gt.dim(), "alpha_l1")?;
    let p = planes_to_tensor(&[pred.values()])?;
    let t = planes_to_tensor(&[gt.values()])?;
    Ok(evaluate(|g| alpha_l1_var(g, g.constant(p), g.constant(t))))
}

/// Pixels where the uncertainty exceeds `threshold`, as a 0/1 plane.
pub fn grad_region(umap: &Array2<f64>, threshold: f64) -> Array2<f64> {
    umap.mapv(|u| if u > threshold { 1.0 } else { 0.0 })
}

pub fn grad_loss(
    pred: &AlphaMatte,
    umap: &UncertaintyMap,
    gt: &AlphaMatte,
    region_threshold: f64,
) -> Result<f64> {
    check_pair(pred.dim(), gt.dim(), "grad_loss pred vs gt")?;
    check_pair(pred.dim(), umap.values().dim(), "grad_loss pred vs umap")?;
    if !(region_threshold >= 0.0) {
        return Err(MattingError::Domain(format!("region threshold {region_threshold}")));
    }
    let region = planes_to_tensor(&[&grad_region(umap.values(), region_threshold)])?;
    let p = planes_to_tensor(&[pred.values()])?;
    let t = planes_to_tensor(&[gt.values()])?;
    Ok(evaluate(|g| grad_loss_var(g, g.constant(p), g.constant(t), &region)))
}

pub fn seg_loss(ce: f64, kl: f64, w: &LossWeights) -> f64 {
    w.mu * ce + w.upsilon * kl
}

pub fn matt_loss(l_alpha: f64, l_grad: f64, w: &LossWeights) -> f64 {
    w.zeta * l_alpha + w.xi * l_grad
}

pub fn uws_total(seg: f64, matt: f64, s: &UwsState) -> f64 {
    let (s1, s2) = (s.sigma1(), s.sigma2());
    seg / (s1 * s1) + matt / (2.0 * s2 * s2) + (s1 * s2).ln()
}

/// Weight on the segmentation loss at epoch `n`.
pub fn oaws_gamma(n: u64, sched: &OawsSchedule) -> f64 {
    let n = n as f64;
    let phase = match sched.phase {
        OawsPhase::Quadratic => sched.b * n * n,
        OawsPhase::Linear => sched.b * n,
    };
    0.5 * (-sched.a * n).exp() * phase.cos() + sched.t
}

pub fn oaws_total(seg: f64, matt: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(MattingError::Domain(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(gamma * seg + (1.0 - gamma) * matt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn score(probs_fg: &[f64], h: usize, w: usize) -> ScoreMap {
        let mut p = Array3::zeros((2, h, w));
        for (i, &f) in probs_fg.iter().enumerate() {
            p[[0, i / w, i % w]] = 1.0 - f;
            p[[1, i / w, i % w]] = f;
        }
        ScoreMap::new(p).unwrap()
    }

    fn alpha(v: Array2<f64>) -> AlphaMatte {
        AlphaMatte::new(v).unwrap()
    }

    #[test]
    fn ce_examples() {
        let perfect = score(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let mask = BinaryMask::new(Array::from_shape_vec((2, 2), vec![true, false, true, false]).unwrap());
        assert!(ce_loss(&perfect, &mask).unwrap() <= 1e-11);

        let uniform = score(&[0.5; 4], 2, 2);
        let ln2 = std::f64::consts::LN_2;
        assert!((ce_loss(&uniform, &mask).unwrap() - ln2).abs() < 1e-15);

        // Background probabilities 0.9 and 0.2, both pixels background.
        let two = score(&[0.1, 0.8], 2, 1);
        let bg = BinaryMask::new(Array2::from_elem((2, 1), false));
        let want = -0.5 * (0.9f64.ln() + 0.2f64.ln());
        assert!((ce_loss(&two, &bg).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.857_399_214).abs() < 1e-9);

        let wrong = BinaryMask::new(Array2::from_elem((1, 2), false));
        assert!(matches!(ce_loss(&two, &wrong), Err(MattingError::Shape(_))));
    }

    #[test]
    fn kl_examples() {
        let p = GaussianLatent::new(vec![0.0], vec![0.0]).unwrap();
        let q = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_loss(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_loss(&q, &q).unwrap(), 0.0);
        let short = GaussianLatent::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(kl_loss(&q, &short), Err(MattingError::Shape(_))));
    }

    #[test]
    fn alpha_l1_examples() {
        let gt = alpha(Array::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f64 / 100.0));
        assert_eq!(alpha_l1(&gt, &gt).unwrap(), 0.0);
        let shifted = alpha(gt.values() + 0.1);
        assert!((alpha_l1(&shifted, &gt).unwrap() - 0.1).abs() < 1e-12);
    }

    fn umap(values: Array2<f64>) -> UncertaintyMap {
        UncertaintyMap::new(values, 1).unwrap()
    }

    /// Sobel responses by direct 3×3 correlation with clamped indices.
    fn sobel_oracle(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = a.dim();
        let at = |r: isize, c: isize| {
            a[[r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize]]
        };
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut gx = Array2::zeros((h, w));
        let mut gy = Array2::zeros((h, w));
        for r in 0..h as isize {
            for c in 0..w as isize {
                let (mut sx, mut sy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = at(r + i as isize - 1, c + j as isize - 1);
                        sx += kx[i][j] * v;
                        sy += kx[j][i] * v;
                    }
                }
                gx[[r as usize, c as usize]] = sx;
                gy[[r as usize, c as usize]] = sy;
            }
        }
        (gx, gy)
    }

    #[test]
    fn grad_loss_examples() {
        let ramp = alpha(Array::from_shape_fn((5, 5), |(r, c)| (r + 2 * c) as f64 / 12.0));
        let flat = alpha(Array2::from_elem((5, 5), 0.3));
        let full = umap(Array2::from_elem((5, 5), 0.5));
        let none = umap(Array2::zeros((5, 5)));

        assert_eq!(grad_loss(&ramp, &full, &ramp, 0.1).unwrap(), 0.0);
        assert_eq!(grad_loss(&ramp, &none, &flat, 0.1).unwrap(), 0.0);

        let (gx, gy) = sobel_oracle(ramp.values());
        let want = (gx.mapv(f64::abs) + gy.mapv(f64::abs)).mean().unwrap();
        assert!((grad_loss(&ramp, &full, &flat, 0.1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn grad_loss_only_counts_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = alpha(Array::from_shape_fn((8, 8), |_| rng.random::<f64>()));
        let t = alpha(Array::from_shape_fn((8, 8), |_| rng.random::<f64>()));
        let u = Array::from_shape_fn((8, 8), |_| rng.random::<f64>() * 0.3);
        let (px, py) = sobel_oracle(p.values());
        let (tx, ty) = sobel_oracle(t.values());
        let per_pixel = (px - tx).mapv(f64::abs) + (py - ty).mapv(f64::abs);
        let (mut sum, mut n) = (0.0, 0.0);
        for (&d, &v) in per_pixel.iter().zip(&u) {
            if v > 0.1 {
                sum += d;
                n += 1.0;
            }
        }
        let got = grad_loss(&p, &umap(u), &t, 0.1).unwrap();
        assert!((got - sum / n).abs() < 1e-12);
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        assert!((seg_loss(0.3, 0.02, &w) - 0.5).abs() < 1e-15);
        assert_eq!(seg_loss(0.0, 0.0, &w), 0.0);
        assert!((matt_loss(0.2, 0.1, &w) - 0.3).abs() < 1e-15);
        assert!(LossWeights { mu: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn uws_examples() {
        let unit = UwsState::new(1.0, 1.0).unwrap();
        assert!((uws_total(1.0, 1.0, &unit) - 1.5).abs() < 1e-15);
        let four = UwsState::default();
        assert!((uws_total(0.0, 0.0, &four) - 16f64.ln()).abs() < 1e-15);
        assert!(UwsState::new(0.0, 1.0).is_err());

        let (seg, matt) = (2.0, 3.0);
        let mut prev_seg_term = f64::INFINITY;
        let mut prev_log_term = f64::NEG_INFINITY;
        for s1 in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let s = UwsState::new(s1, 1.0).unwrap();
            let seg_term = seg / (s.sigma1() * s.sigma1());
            let log_term = uws_total(seg, matt, &s) - seg_term - matt / 2.0;
            assert!(seg_term < prev_seg_term && log_term > prev_log_term);
            prev_seg_term = seg_term;
            prev_log_term = log_term;
        }
    }

    #[test]
    fn uws_graph_matches_closed_form() {
        let s = UwsState::new(1.7, 0.6).unwrap();
        let got = evaluate(|g| {
            let c = |v: f64| g.constant(Tensor::scalar(v));
            uws_var(g, c(0.8), c(1.3), c(s.log_sigma1), c(s.log_sigma2))
        });
        assert!((got - uws_total(0.8, 1.3, &s)).abs() < 1e-14);
    }

    #[test]
    fn oaws_examples() {
        let d = OawsSchedule::default();
        assert_eq!(oaws_gamma(0, &d), 1.0);
        assert_eq!(oaws_gamma(0, &OawsSchedule { t: 0.3, ..d }), 0.5 + 0.3);
        assert!((oaws_gamma(200, &d) - 0.5).abs() <= 0.5 * (-10.0f64).exp());
        assert!(0.5 * (-10.0f64).exp() <= 2.3e-5);
        let linear = OawsSchedule {
            phase: OawsPhase::Linear,
            ..d
        };
        let want = 0.5 * (-0.5f64).exp() * (0.3f64).cos() + 0.5;
        assert!((oaws_gamma(10, &linear) - want).abs() < 1e-15);

        assert_eq!(oaws_total(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(oaws_total(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(oaws_total(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(matches!(oaws_total(2.0, 4.0, 1.1), Err(MattingError::Domain(_))));
        assert!(OawsSchedule { a: 0.0, ..d }.validate().is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mq in proptest::collection::vec(-3.0f64..3.0, 4),
            lq in proptest::collection::vec(-3.0f64..3.0, 4),
            mp in proptest::collection::vec(-3.0f64..3.0, 4),
            lp in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let q = GaussianLatent::new(mq, lq).unwrap();
            let p = GaussianLatent::new(mp, lp).unwrap();
            prop_assert!(kl_loss(&q, &p).unwrap() >= -1e-12);
            prop_assert!(kl_loss(&q, &q).unwrap().abs() < 1e-12);
        }

        #[test]
        fn gamma_stays_in_envelope(n in 0u64..2000) {
            let d = OawsSchedule::default();
            let g = oaws_gamma(n, &d);
            prop_assert!((g - d.t).abs() <= 0.5 * (-d.a * n as f64).exp() + 1e-15);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn matting_losses_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut plane = || alpha(Array::from_shape_fn((8, 8), |_| rng.random::<f64>()));
            let (p, t) = (plane(), plane());
            let u = umap(plane().into_values() * 0.69);
            prop_assert!(alpha_l1(&p, &t).unwrap() >= 0.0);
            prop_assert!(grad_loss(&p, &u, &t, 0.1).unwrap() >= 0.0);
        }
    }
}
