use std::collections::BTreeMap;

use cyten_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut c, mut n) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                n += 1.0;
                c += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    c / n
}

fn trapezoid(curve: &RocCurve) -> f64 {
    curve.points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[test]
fn auc_matches_pairwise_concordance() {
    let (curve, auc) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    assert_eq!(auc, 0.75);
    assert!((trapezoid(&curve) - 0.75).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let n = rng.random_range(2..=1000);
        let coarse = rng.random::<bool>();
        let scores: Vec<f64> =
            (0..n).map(|_| if coarse { rng.random_range(0..10) as f64 / 10.0 } else { rng.random() }).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (curve, auc) = roc_auc(&scores, &labels).unwrap();
        let oracle = pairwise(&scores, &labels);
        assert!((auc - oracle).abs() < 1e-12);
        assert!((trapezoid(&curve) - oracle).abs() < 1e-12);
    }
}

#[test]
fn auc_invariant_under_monotone_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..50) as f64 / 50.0).collect();
    let labels: Vec<u8> = (0..200).map(|i| (i % 3 == 0) as u8).collect();
    let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).tanh()).collect();
    assert_eq!(roc_auc(&scores, &labels).unwrap().1, roc_auc(&squashed, &labels).unwrap().1);
}

#[test]
fn single_class_auc_is_undefined() {
    let e = roc_auc(&[0.2, 0.3], &[1, 1]).unwrap_err();
    assert!(e.to_string().contains("AUC undefined"));
}

/// Every multiset of size 1..=5 over {0.0, 0.1, .., 1.0}.
fn multisets() -> Vec<Vec<f64>> {
    fn rec(start: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if !cur.is_empty() {
            out.push(cur.iter().map(|&k| k as f64 / 10.0).collect());
        }
        if left == 0 {
            return;
        }
        for k in start..=10 {
            cur.push(k);
            rec(k, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, 5, &mut Vec::new(), &mut out);
    out
}

#[test]
fn voting_properties_exhaustive() {
    let taus: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
    for m in multisets() {
        // monotone: raising tau never turns a negative subject positive
        let votes: Vec<u8> = taus.iter().map(|&t| vote(&m, t).unwrap()).collect();
        assert!(votes.windows(2).all(|w| w[1] <= w[0]), "{m:?}");
        let mut rev = m.clone();
        rev.reverse();
        for &t in &taus {
            assert_eq!(vote(&m, t).unwrap(), vote(&rev, t).unwrap());
            let pos = m.iter().filter(|&&s| s >= t).count();
            let expected = u8::from(2 * pos >= m.len());
            assert_eq!(vote(&m, t).unwrap(), expected);
            if 2 * pos == m.len() {
                assert_eq!(vote(&m, t).unwrap(), 1, "tie goes positive");
            }
        }
    }
}

#[test]
fn positive_set_shrinks_with_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let groups: BTreeMap<String, Vec<f64>> = (0..50)
        .map(|i| {
            (format!("s{i}"), (0..rng.random_range(1..5)).map(|_| rng.random_range(0..11) as f64 / 10.0).collect())
        })
        .collect();
    let mut prev: Option<BTreeMap<String, u8>> = None;
    for tau in [0.4, 0.5, 0.6] {
        let d = aggregate_subject(&groups, tau).unwrap();
        if let Some(p) = &prev {
            for (s, &v) in &d {
                assert!(v <= p[s]);
            }
        }
        prev = Some(d);
    }
}
