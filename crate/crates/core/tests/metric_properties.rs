use proptest::prelude::*;
use semsr::metrics::{average_precision, build_report, class_average_precision, compute_op_or, psnr, ssim, RunMeta};
use semsr::tags::{TagSet, TagVocabulary};
use semsr::{Execution, ImageTensor};

fn vocab(k: usize) -> TagVocabulary {
    TagVocabulary::new((0..k).map(|i| format!("c{i}")).collect()).unwrap()
}

fn sets(matrix: &[Vec<bool>]) -> Vec<TagSet> {
    matrix
        .iter()
        .map(|row| TagSet::from_indices(row.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)))
        .collect()
}

/// Materializes the image-by-class matrices and counts directly.
fn brute_force(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> (Option<f64>, Option<f64>) {
    let (mut np, mut nt, mut ng) = (0u64, 0u64, 0u64);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            np += *a as u64;
            ng += *b as u64;
            nt += (*a && *b) as u64;
        }
    }
    let ratio = |n: u64, d: u64| if d == 0 { None } else { Some(n as f64 / d as f64) };
    (ratio(nt, np), ratio(nt, ng))
}

fn matrices() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (1usize..=200, 1usize..=20).prop_flat_map(|(n, k)| {
        let m = prop::collection::vec(prop::collection::vec(any::<bool>(), k), n);
        (m.clone(), m)
    })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0f32..=1.0, h * w * 3).prop_map(move |d| ImageTensor::new(h, w, 3, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn op_or_matches_brute_force((pred, truth) in matrices()) {
        let k = pred[0].len();
        let r = compute_op_or(&sets(&pred), &sets(&truth), &vocab(k)).unwrap();
        let (op, or) = brute_force(&pred, &truth);
        prop_assert_eq!(r.op, op);
        prop_assert_eq!(r.or, or);
        for c in 0..k {
            prop_assert!(r.counts.correct[c] <= r.counts.predicted[c].min(r.counts.ground_truth[c]));
        }
    }

    #[test]
    fn ap_is_invariant_under_monotone_maps(
        (scores, truth) in (2usize..40).prop_flat_map(|n| (
            prop::collection::vec(0u32..=1000, n),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 1000.0).collect();
        let mapped: Vec<f64> = s.iter().map(|x| (x + x * x) / 2.0).collect();
        let a = class_average_precision(&s, &truth);
        let b = class_average_precision(&mapped, &truth);
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(12, 14), b in image(12, 14), y in any::<bool>()) {
        prop_assert_eq!(psnr(&a, &b, y).unwrap(), psnr(&b, &a, y).unwrap());
        let (s1, s2) = (ssim(&a, &b, y).unwrap(), ssim(&b, &a, y).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn report_aggregates_are_means(imgs in prop::collection::vec((image(11, 11), image(11, 11)), 1..6)) {
        let ids: Vec<String> = (0..imgs.len()).map(|i| format!("i{i}")).collect();
        let outs: Vec<ImageTensor> = imgs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<ImageTensor> = imgs.iter().map(|p| p.1.clone()).collect();
        let r = build_report("p", &ids, &outs, &refs, None, &[], RunMeta::default(), Execution::Sequential).unwrap();
        let n = r.images.len() as f64;
        prop_assert!((r.psnr - r.images.iter().map(|m| m.psnr).sum::<f64>() / n).abs() < 1e-9);
        prop_assert!((r.ssim - r.images.iter().map(|m| m.ssim).sum::<f64>() / n).abs() < 1e-9);
    }
}

#[test]
fn hand_computed_cases() {
    let v = vocab(3);
    let pred = vec![TagSet::from_indices([0, 1]), TagSet::from_indices([0])];
    let truth = vec![TagSet::from_indices([0]), TagSet::from_indices([0, 2])];
    let r = compute_op_or(&pred, &truth, &v).unwrap();
    assert!((r.op.unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!((r.or.unwrap() - 2.0 / 3.0).abs() < 1e-9);

    let ap = average_precision(&[vec![0.9], vec![0.8], vec![0.7]], &[TagSet::from_indices([0]), TagSet::empty(), TagSet::from_indices([0])], 1)
        .unwrap()
        .unwrap();
    assert!((ap - 0.8333333333333333).abs() < 1e-9);
}

#[test]
fn inverted_ranking_gives_one_over_n() {
    for n in [2usize, 5, 17] {
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let mut positive = vec![false; n];
        positive[n - 1] = true;
        let ap = class_average_precision(&scores, &positive).unwrap();
        assert!((ap - 1.0 / n as f64).abs() < 1e-12);
    }
}

#[test]
fn out_of_vocabulary_tag_is_rejected() {
    let v = vocab(2);
    let bad = vec![TagSet::from_indices([5])];
    assert!(compute_op_or(&bad, &bad, &v).is_err());
}
