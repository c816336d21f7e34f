//! Training objective and evaluation metrics. The objective combines a
//! class-weighted cross-entropy with a soft Dice term; weights come from
//! median frequency balancing so rare classes are not drowned out. All
//! gradient-bearing functions return the loss together with the gradient
//! with respect to the classifier's pre-softmax activations, so callers feed
//! them straight into the network's backward pass.

use crate::error::{Result, SefcnError};
use crate::layers::softmax_backward;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = 1e-12;
const DICE_EPS: f64 = 1e-6;

/// Interprets a stored label value as a class id, rejecting non-integral
/// values and ids outside [0, num_classes).
fn label_id(v: f32, num_classes: usize) -> Result<usize> {
    let id = v as usize;
    if v < 0.0 || v.fract() != 0.0 || id >= num_classes {
        return Err(SefcnError::input(format!(
            "label value {v} is not a class id in [0, {num_classes})"
        )));
    }
    Ok(id)
}

fn median(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Median frequency balancing over a corpus of label maps (one tensor per
/// image). A class's frequency is its pixel count divided by the total
/// pixel count of the images it appears in; its weight is the median of the
/// present classes' frequencies divided by its own. Absent classes get 0.
pub fn median_frequency_weights(
    labels: &[Tensor<f32>],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if labels.iter().map(Tensor::len).sum::<usize>() == 0 {
        return Err(SefcnError::input(
            "median_frequency_weights: no labeled pixels",
        ));
    }
    let mut class_pixels = vec![0u64; num_classes];
    let mut host_pixels = vec![0u64; num_classes];
    for map in labels {
        let mut present = vec![false; num_classes];
        for &v in map.data() {
            let id = label_id(v, num_classes)?;
            class_pixels[id] += 1;
            present[id] = true;
        }
        for (c, p) in present.iter().enumerate() {
            if *p {
                host_pixels[c] += map.len() as u64;
            }
        }
    }
    let freqs: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            (class_pixels[c] > 0).then(|| class_pixels[c] as f64 / host_pixels[c] as f64)
        })
        .collect();
    let med = median(freqs.iter().flatten().copied().collect());
    Ok(freqs
        .iter()
        .map(|f| f.map_or(0.0, |f| med / f))
        .collect())
}

fn check_pair<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<f32>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, k, h, w) = probs.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(SefcnError::shape(format!(
            "labels shape {:?} does not match probabilities {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    Ok((n, k, h, w))
}

/// Mean over pixels of `w_y * (-ln p_y)`; the gradient is taken with respect
/// to the pre-softmax activations. Probabilities are floored at 1e-12 before
/// the logarithm so an exactly-zero prediction stays finite.
pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<f32>,
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, k, h, w) = check_pair(probs, labels)?;
    if weights.len() != k {
        return Err(SefcnError::shape(format!(
            "got {} class weights for {k} classes",
            weights.len()
        )));
    }
    let hw = h * w;
    let total = (n * hw) as f64;
    let mut loss = 0.0;
    let mut dlogits = probs.zeros_like();
    for ni in 0..n {
        for pix in 0..hw {
            let y = label_id(labels.data()[ni * hw + pix], k)?;
            let wy = weights[y];
            let p = probs.data()[(ni * k + y) * hw + pix].to_f64();
            loss += wy * -(p.max(LOG_FLOOR)).ln();
            let scale = wy / total;
            for c in 0..k {
                let pc = probs.data()[(ni * k + c) * hw + pix].to_f64();
                let onehot = if c == y { 1.0 } else { 0.0 };
                dlogits.data_mut()[(ni * k + c) * hw + pix] =
                    T::from_f64(scale * (pc - onehot));
            }
        }
    }
    Ok((loss / total, dlogits))
}

/// `1 - mean_c (2*I_c + eps) / (U_c + eps)` over all classes, where I_c is
/// the batch-pooled soft intersection and U_c the sum of predicted and true
/// mass. Returns the gradient with respect to the probabilities.
pub fn soft_dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<f32>,
) -> Result<(f64, Tensor<T>)> {
    let (n, k, h, w) = check_pair(probs, labels)?;
    let hw = h * w;
    let mut inter = vec![0.0f64; k];
    let mut pred_mass = vec![0.0f64; k];
    let mut true_mass = vec![0.0f64; k];
    for ni in 0..n {
        for pix in 0..hw {
            let y = label_id(labels.data()[ni * hw + pix], k)?;
            true_mass[y] += 1.0;
            inter[y] += probs.data()[(ni * k + y) * hw + pix].to_f64();
            for c in 0..k {
                pred_mass[c] += probs.data()[(ni * k + c) * hw + pix].to_f64();
            }
        }
    }
    let dice: Vec<f64> = (0..k)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (pred_mass[c] + true_mass[c] + DICE_EPS))
        .collect();
    let loss = 1.0 - dice.iter().sum::<f64>() / k as f64;

    let mut dprobs = probs.zeros_like();
    for ni in 0..n {
        for pix in 0..hw {
            let y = label_id(labels.data()[ni * hw + pix], k)?;
            for c in 0..k {
                let g = if c == y { 1.0 } else { 0.0 };
                let u = pred_mass[c] + true_mass[c] + DICE_EPS;
                dprobs.data_mut()[(ni * k + c) * hw + pix] =
                    T::from_f64(-(2.0 * g - dice[c]) / (u * k as f64));
            }
        }
    }
    Ok((loss, dprobs))
}

/// Weighted cross-entropy plus `lambda` times the soft Dice loss; the
/// returned gradient is with respect to the pre-softmax activations.
pub fn combined_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<f32>,
    weights: &[f64],
    lambda: f64,
) -> Result<(f64, Tensor<T>)> {
    let (wce, mut dlogits) = weighted_cross_entropy(probs, labels, weights)?;
    if lambda == 0.0 {
        return Ok((wce, dlogits));
    }
    let (dice, dprobs) = soft_dice_loss(probs, labels)?;
    let ddice_logits = softmax_backward(probs, &dprobs)?;
    let lam = T::from_f64(lambda);
    for (d, s) in dlogits.data_mut().iter_mut().zip(ddice_logits.data()) {
        *d = *d + lam * *s;
    }
    Ok((wce + lambda * dice, dlogits))
}

/// Predicted class ids: per-pixel argmax over the channel axis, ties to the
/// lowest class id.
pub fn argmax_channels<T: Scalar>(probs: &Tensor<T>) -> Result<Tensor<f32>> {
    let (n, k, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, h, w])?;
    for ni in 0..n {
        for pix in 0..hw {
            let mut best = T::neg_infinity();
            let mut best_c = 0usize;
            for c in 0..k {
                let v = probs.data()[(ni * k + c) * hw + pix];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            out.data_mut()[ni * hw + pix] = best_c as f32;
        }
    }
    Ok(out)
}

/// Pooled hard-Dice accumulator: intersections and denominators are summed
/// over every map added, so a whole split aggregates into one score set.
#[derive(Clone, Debug)]
pub struct DiceAccum {
    inter: Vec<f64>,
    denom: Vec<f64>,
}

impl DiceAccum {
    pub fn new(num_classes: usize) -> Self {
        Self {
            inter: vec![0.0; num_classes],
            denom: vec![0.0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(SefcnError::shape(format!(
                "dice: prediction shape {:?} does not match truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let k = self.inter.len();
        for (p, t) in pred.data().iter().zip(truth.data()) {
            let pi = label_id(*p, k)?;
            let ti = label_id(*t, k)?;
            if pi == ti {
                self.inter[pi] += 1.0;
            }
            self.denom[pi] += 1.0;
            self.denom[ti] += 1.0;
        }
        Ok(())
    }

    /// Per-class `2|P∩T| / (|P|+|T|)`; a class absent from both maps scores
    /// a vacuous 1.0 (and is excluded from the global mean).
    pub fn per_class(&self) -> Vec<f64> {
        self.inter
            .iter()
            .zip(&self.denom)
            .map(|(i, d)| if *d == 0.0 { 1.0 } else { 2.0 * i / d })
            .collect()
    }

    /// Mean over classes present in either map.
    pub fn global(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, d) in self.inter.iter().zip(&self.denom) {
            if *d > 0.0 {
                sum += 2.0 * i / d;
                count += 1;
            }
        }
        if count == 0 {
            1.0
        } else {
            sum / count as f64
        }
    }
}

/// Hard Dice between two label maps: global mean over present classes plus
/// the per-class scores.
pub fn dice_score(
    pred: &Tensor<f32>,
    truth: &Tensor<f32>,
    num_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut acc = DiceAccum::new(num_classes);
    acc.add(pred, truth)?;
    Ok((acc.global(), acc.per_class()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_channels;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mfb_weights_from_simple_frequencies() {
        // one image, frequencies {0.5, 0.25, 0.25}
        let labels = [Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap()];
        let w = median_frequency_weights(&labels, 3).unwrap();
        assert_eq!(w, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn mfb_single_class_and_absent_class() {
        let labels = [Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap()];
        let w = median_frequency_weights(&labels, 2).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn mfb_equal_frequencies_give_unit_weights() {
        let labels = [Tensor::new(&[1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap()];
        let w = median_frequency_weights(&labels, 2).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn mfb_counts_presence_per_image() {
        let labels = [
            Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
            Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        ];
        let w = median_frequency_weights(&labels, 2).unwrap();
        // f0 = 6/8, f1 = 2/4, median = 0.625
        assert!((w[0] - 0.625 / 0.75).abs() < 1e-12);
        assert!((w[1] - 0.625 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn mfb_rejects_bad_labels() {
        let labels = [Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap()];
        assert!(median_frequency_weights(&labels, 2).is_err());
        let labels = [Tensor::new(&[1, 2], vec![0.5, 0.0]).unwrap()];
        assert!(median_frequency_weights(&labels, 2).is_err());
    }

    #[test]
    fn wce_known_pixel_loss() {
        // single pixel, p(true) = 0.5, weight 2 -> 2 ln 2
        let probs = Tensor::new(&[1, 2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        let labels = Tensor::new(&[1, 1, 1], vec![0.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &labels, &[2.0, 1.0]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wce_perfect_prediction_vanishes() {
        let probs = Tensor::new(&[1, 2, 1, 1], vec![1.0f64 - 1e-9, 1e-9]).unwrap();
        let labels = Tensor::new(&[1, 1, 1], vec![0.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &labels, &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn wce_uniform_probs_give_log_k() {
        let k = 5;
        let probs = Tensor::filled(&[1, k, 2, 2], 1.0f64 / k as f64).unwrap();
        let labels = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&probs, &labels, &[1.0; 5]).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn wce_survives_zero_probability() {
        let probs = Tensor::new(&[1, 2, 1, 1], vec![0.0f64, 1.0]).unwrap();
        let labels = Tensor::new(&[1, 1, 1], vec![0.0]).unwrap();
        let (loss, d) = weighted_cross_entropy(&probs, &labels, &[1.0, 1.0]).unwrap();
        assert!(loss.is_finite());
        assert!(d.all_finite());
    }

    #[test]
    fn dice_loss_vanishes_on_exact_onehot() {
        let probs = Tensor::new(
            &[1, 2, 1, 2],
            vec![1.0f64, 0.0, 0.0, 1.0], // class 0 then class 1
        )
        .unwrap();
        let labels = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (loss, _) = soft_dice_loss(&probs, &labels).unwrap();
        assert!(loss.abs() < 1e-5);
    }

    #[test]
    fn dice_loss_uniform_probs_brute_force() {
        // 1/K probs, balanced labels over K=2, 4 pixels:
        // per class: I = 2*0.5 = 1, pred mass = 2, true mass = 2
        // dice = (2+eps)/(4+eps), loss = 1 - that
        let probs = Tensor::filled(&[1, 2, 2, 2], 0.5f64).unwrap();
        let labels = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (loss, _) = soft_dice_loss(&probs, &labels).unwrap();
        let want = 1.0 - (2.0 + 1e-6) / (4.0 + 1e-6);
        assert!((loss - want).abs() < 1e-12);
    }

    fn fd_check(
        f: &dyn Fn(&Tensor<f64>) -> f64,
        x: &Tensor<f64>,
        grad: &Tensor<f64>,
        tol: f64,
    ) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = grad.data()[i];
            let denom = ana.abs().max(num.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < tol,
                "index {i}: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = Tensor::new(
            &[1, 3, 4, 4],
            (0..48).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let labels = Tensor::new(
            &[1, 4, 4],
            (0..16).map(|_| rng.random_range(0..3) as f32).collect(),
        )
        .unwrap();
        let (_, dprobs) = soft_dice_loss(&probs, &labels).unwrap();
        fd_check(
            &|p| soft_dice_loss(p, &labels).unwrap().0,
            &probs,
            &dprobs,
            1e-3,
        );
    }

    #[test]
    fn combined_gradient_matches_finite_differences_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::new(
            &[2, 3, 2, 2],
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = Tensor::new(
            &[2, 2, 2],
            (0..8).map(|_| rng.random_range(0..3) as f32).collect(),
        )
        .unwrap();
        let weights = [1.0, 2.0, 0.5];
        let loss_of = |l: &Tensor<f64>| {
            let probs = softmax_channels(l).unwrap();
            combined_loss(&probs, &labels, &weights, 1.0).unwrap().0
        };
        let probs = softmax_channels(&logits).unwrap();
        let (_, dlogits) = combined_loss(&probs, &labels, &weights, 1.0).unwrap();
        fd_check(&loss_of, &logits, &dlogits, 1e-4);
    }

    #[test]
    fn combined_lambda_zero_is_pure_cross_entropy() {
        let probs = Tensor::new(&[1, 2, 1, 2], vec![0.7f64, 0.4, 0.3, 0.6]).unwrap();
        let labels = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let w = [1.0, 1.0];
        let (c0, d0) = combined_loss(&probs, &labels, &w, 0.0).unwrap();
        let (wce, dw) = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        assert_eq!(c0, wce);
        assert_eq!(d0.data(), dw.data());
        let (c1, _) = combined_loss(&probs, &labels, &w, 1.0).unwrap();
        let (dice, _) = soft_dice_loss(&probs, &labels).unwrap();
        assert!((c1 - (wce + dice)).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let probs = Tensor::new(&[1, 3, 1, 2], vec![0.4, 0.1, 0.4, 0.4, 0.2, 0.5]).unwrap();
        let ids = argmax_channels(&probs).unwrap();
        assert_eq!(ids.data(), &[0.0, 2.0]);
    }

    #[test]
    fn dice_score_known_overlap() {
        let pred = Tensor::new(&[1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let truth = Tensor::new(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let (global, per_class) = dice_score(&pred, &truth, 3).unwrap();
        assert!((per_class[0] - 0.8).abs() < 1e-12);
        assert!((per_class[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(per_class[2], 1.0); // absent from both
        assert!((global - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dice_score_is_symmetric_and_perfect_on_identity() {
        let a = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let (gab, _) = dice_score(&a, &b, 3).unwrap();
        let (gba, _) = dice_score(&b, &a, 3).unwrap();
        assert_eq!(gab, gba);
        let (gaa, per) = dice_score(&a, &a, 3).unwrap();
        assert_eq!(gaa, 1.0);
        assert_eq!(per, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn dice_accum_pools_across_maps() {
        let mut acc = DiceAccum::new(2);
        acc.add(
            &Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap(),
            &Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        acc.add(
            &Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(),
            &Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        // class 0: inter 1, denom 2+1 = 3; class 1: inter 2, denom 2+3 = 5
        let per = acc.per_class();
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[1] - 4.0 / 5.0).abs() < 1e-12);
    }
}
