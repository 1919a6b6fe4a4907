use crate::micro_tensor::{Tensor4, TensorError};

/// `log(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Focal loss of one logit and its derivative w.r.t. the logit.
///
/// With `p_t` the probability of the true class and `s = +1` for positives,
/// `-1` for negatives: `FL = -a_t (1 - p_t)^g log p_t` and
/// `dFL/dx = -a_t s [(1 - p_t)^(g + 1) - g (1 - p_t)^g p_t log p_t]`.
pub fn focal_loss_scalar(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (s, a_t) = if positive { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
    let log_pt = log_sigmoid(s * logit);
    let pt = log_pt.exp();
    let q = 1.0 - pt;
    let loss = -a_t * q.powf(gamma) * log_pt;
    let grad = -a_t * s * (q.powf(gamma + 1.0) - gamma * q.powf(gamma) * pt * log_pt);
    (loss, grad)
}

/// Mean focal loss over all elements and its gradient w.r.t. the logits.
/// Targets are presence maps: values above 0.5 count as positives.
pub fn focal_loss(logits: &Tensor4, targets: &Tensor4, alpha: f64, gamma: f64) -> Result<(f64, Tensor4), TensorError> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch(format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
    }
    let n = logits.len() as f64;
    let mut grad = Tensor4::zeros(logits.shape());
    let mut total = 0.0;
    for ((g, &x), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        let (l, d) = focal_loss_scalar(x, t > 0.5, alpha, gamma);
        total += l;
        *g = d / n;
    }
    Ok((total / n, grad))
}

/// Area under the precision-recall curve, trapezoidal over distinct score
/// thresholds, starting from recall 0 at the first threshold's precision.
/// Zero when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && (scores[order[i]] == s || scores[order[i]].is_nan() && s.is_nan()) {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let (r0, p0) = prev.unwrap_or((0.0, precision));
        area += (recall - r0) * (precision + p0) / 2.0;
        prev = Some((recall, precision));
    }
    area
}

/// AP over every heatmap cell of every map, pooled.
pub fn evaluate_ap(predictions: &[Tensor4], targets: &[Tensor4]) -> Result<f64, TensorError> {
    if predictions.len() != targets.len() {
        return Err(TensorError::ShapeMismatch(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, t) in predictions.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        scores.extend_from_slice(p.data());
        labels.extend(t.data().iter().map(|&v| v > 0.5));
    }
    Ok(average_precision(&scores, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn closed_form_single_element() {
        // p_t = 0.5: 0.25 * 0.5^1.5 * ln 2
        let (l, _) = focal_loss_scalar(0.0, true, 0.25, 1.5);
        assert!((l - 0.25 * 0.5f64.powf(1.5) * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.06127).abs() < 5e-6);
    }

    #[test]
    fn gamma_zero_is_weighted_cross_entropy() {
        for &x in &[-3.0, -0.2, 0.0, 1.7, 8.0] {
            let p: f64 = 1.0 / (1.0 + (-x as f64).exp());
            let (lp, gp) = focal_loss_scalar(x, true, 0.5, 0.0);
            let (ln, gn) = focal_loss_scalar(x, false, 0.5, 0.0);
            assert!((lp - 0.5 * -p.ln()).abs() < 1e-12);
            assert!((ln - 0.5 * -(1.0 - p).ln()).abs() < 1e-12);
            assert!((gp - 0.5 * (p - 1.0)).abs() < 1e-12);
            assert!((gn - 0.5 * p).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        assert!(focal_loss_scalar(40.0, true, 0.25, 1.5).0 < 1e-15);
        assert!(focal_loss_scalar(-40.0, false, 0.25, 1.5).0 < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let eps = 1e-6;
        for &x in &[-4.0, -0.7, 0.0, 0.3, 2.5] {
            for pos in [true, false] {
                for gamma in [0.0, 1.5, 2.0] {
                    let (_, g) = focal_loss_scalar(x, pos, 0.25, gamma);
                    let num = (focal_loss_scalar(x + eps, pos, 0.25, gamma).0 - focal_loss_scalar(x - eps, pos, 0.25, gamma).0)
                        / (2.0 * eps);
                    assert!((g - num).abs() < 1e-8, "x={x} pos={pos} gamma={gamma}");
                }
            }
        }
    }

    #[test]
    fn focal_loss_checks_shapes() {
        let a = Tensor4::zeros([1, 1, 2, 2]);
        assert!(focal_loss(&a, &Tensor4::zeros([1, 1, 2, 1]), 0.25, 1.5).is_err());
    }

    #[test]
    fn ap_edge_cases() {
        let t = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(evaluate_ap(&[t.clone()], &[t.clone()]).unwrap(), 1.0);
        assert_eq!(evaluate_ap(&[t.clone()], &[Tensor4::zeros(t.shape())]).unwrap(), 0.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), 0.25);
    }

    #[test]
    fn random_scores_give_positive_rate() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = rng_from(seed);
            let labels: Vec<bool> = (0..2000).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> = (0..2000).map(|_| rng.gen()).collect();
            let ap = average_precision(&scores, &labels);
            assert!((ap - 0.5).abs() < 0.05, "{ap}");
            total += ap;
        }
        assert!((total / 10.0 - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_maps(
            data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 1..60),
            quantize in any::<bool>(),
        ) {
            let mut scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            if quantize {
                // create ties
                for s in &mut scores {
                    *s = s.round();
                }
            }
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let ap = average_precision(&scores, &labels);
            prop_assert!((0.0..=1.0).contains(&ap));
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() * 3.0 + s.powi(3)).collect();
            prop_assert!((average_precision(&mapped, &labels) - ap).abs() < 1e-12);
        }
    }
}
