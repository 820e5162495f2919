use fusionet_core::data::MetricsReport;
use fusionet_core::fusion::{dynamic_fuse, is_distribution, late_fuse, visual_weight, Posterior};
use fusionet_core::nn::{argmax, shannon_entropy, LogitVector};
use proptest::prelude::*;

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-8.0f64..8.0, c)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

proptest! {
    #[test]
    fn confident_text_decides(
        (zt, zv, top) in (2usize..12).prop_flat_map(|c| (logits(c), proptest::collection::vec(-50.0f64..50.0, c), 0..c)),
        margin in 20.0f64..60.0,
    ) {
        let mut zt = zt;
        let rest = zt.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| *v).fold(f64::MIN, f64::max);
        zt[top] = rest + margin;
        let d = dynamic_fuse(&LogitVector::from_slice(&zt).unwrap(), &LogitVector::from_slice(&zv).unwrap(), 0.5).unwrap();
        prop_assert_eq!(d.predicted, top);
    }

    #[test]
    fn visual_weight_stays_in_bounds(
        (zt, zv) in (2usize..12).prop_flat_map(|c| (logits(c), logits(c))),
        beta in 0.0f64..=1.0,
    ) {
        let c = zt.len() as f64;
        let d = dynamic_fuse(&LogitVector::from_slice(&zt).unwrap(), &LogitVector::from_slice(&zv).unwrap(), beta).unwrap();
        let wv = d.visual_weight.unwrap();
        prop_assert!(wv >= 0.5 - beta - 1e-12);
        prop_assert!(wv <= sigmoid(c.ln()) - beta + 1e-12);
        prop_assert!(is_distribution(&d.fused));
    }

    #[test]
    fn visual_weight_is_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0, beta in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(visual_weight(lo, beta) <= visual_weight(hi, beta));
    }

    #[test]
    fn late_fusion_ignores_common_scale_when_modalities_agree(
        (zt, zv) in (2usize..8).prop_flat_map(|c| (logits(c), logits(c))),
        scale in 1.0f64..50.0,
    ) {
        let post = |z: &[f64]| Posterior::from_logits(&LogitVector::from_slice(z).unwrap());
        prop_assume!(argmax(&post(&zt).probs) == argmax(&post(&zv).probs));
        let base = late_fuse(&post(&zt), &post(&zv)).unwrap().predicted;
        let st: Vec<f64> = zt.iter().map(|v| v * scale).collect();
        let sv: Vec<f64> = zv.iter().map(|v| v * scale).collect();
        prop_assert_eq!(late_fuse(&post(&st), &post(&sv)).unwrap().predicted, base);
    }

    #[test]
    fn report_equals_brute_force_recount(
        rows in (2usize..6).prop_flat_map(|c| proptest::collection::vec((0..c, proptest::collection::vec(0.0f64..1.0, c)), 1..60)),
        k in 1usize..4,
    ) {
        let c = rows[0].1.len();
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        let r = MetricsReport::from_probabilities(&labels, &probs, c, k).unwrap();
        let pred = |p: &[f64]| (0..c).fold(0, |best, j| if p[j] > p[best] { j } else { best });
        let mut correct = 0u64;
        let mut hits = 0u64;
        for (y, p) in labels.iter().zip(&probs) {
            if pred(p) == *y {
                correct += 1;
            }
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            if order[..k.min(c)].contains(y) {
                hits += 1;
            }
        }
        prop_assert_eq!(r.correct, correct);
        prop_assert_eq!(r.top_k_hits, hits);
        for j in 0..c {
            let tp = labels.iter().zip(&probs).filter(|(y, p)| **y == j && pred(p) == j).count() as u64;
            let predicted = probs.iter().filter(|p| pred(p) == j).count() as u64;
            let support = labels.iter().filter(|y| **y == j).count() as u64;
            let m = &r.per_class[j];
            prop_assert_eq!((m.true_positive, m.predicted, m.support), (tp, predicted, support));
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}

#[test]
fn entropy_grid_gives_monotone_visual_weight() {
    // two-class posteriors from certain to uniform
    let mut last = f64::NEG_INFINITY;
    for i in 0..100 {
        let p = 0.5 * i as f64 / 99.0;
        let u = shannon_entropy(&[p, 1.0 - p]).unwrap();
        let w = visual_weight(u, 0.5);
        assert!(w >= last);
        last = w;
    }
    assert!((last - (2.0 / 3.0 - 0.5)).abs() < 1e-12);
}

#[test]
fn three_class_confusion_by_hand() {
    let labels = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let preds = [0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 0, 0];
    let probs: Vec<Vec<f64>> = preds
        .iter()
        .map(|&p| (0..3).map(|j| if j == p { 0.8 } else { 0.1 }).collect())
        .collect();
    let r = MetricsReport::from_probabilities(&labels, &probs, 3, 1).unwrap();
    assert_eq!(r.confusion, vec![vec![2, 1, 1], vec![1, 3, 0], vec![2, 0, 2]]);
    assert_eq!(r.correct, 7);
    assert!((r.per_class[0].precision - 2.0 / 5.0).abs() < 1e-15);
    assert!((r.per_class[1].recall - 3.0 / 4.0).abs() < 1e-15);
    assert!((r.per_class[2].precision - 2.0 / 3.0).abs() < 1e-15);
    let f1 = 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5);
    assert!((r.per_class[2].f1 - f1).abs() < 1e-15);
}
