mod common;

use common::*;
use proptest::prelude::*;
use tas_core::alignment::*;
use tas_core::metrics::*;
use tas_core::objectives::*;
use tas_core::rng::SplitMix64;
use tas_core::Tensor;

fn random_log_probs(frames: usize, classes: usize, rng: &mut SplitMix64) -> Tensor<f64> {
    let mut rows = Vec::new();
    for _ in 0..frames {
        let raw: Vec<f64> = (0..classes).map(|_| rng.next_f64() + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        rows.push(raw.iter().map(|p| (p / z).ln()).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn viterbi_matches_composition_enumeration() {
    let mut rng = SplitMix64::new(100);
    for frames in 1..=8 {
        for entries in 1..=4.min(frames) {
            for _ in 0..100 {
                let classes = 3;
                let lp = random_log_probs(frames, classes, &mut rng);
                let transcript: Vec<usize> = random_runs(entries, classes, (1, 1), &mut rng);
                let r = viterbi_align(&lp, &transcript).unwrap();
                let oracle = brute_force_alignment(&to_mat(&lp), &transcript);
                assert_eq!(r.score, oracle, "T={frames} N={entries}");
                assert_eq!(r.durations.iter().sum::<usize>(), frames);
                assert!(r.durations.iter().all(|&d| d >= 1));
            }
        }
    }
}

#[test]
fn viterbi_preserves_order_on_large_instances() {
    let mut rng = SplitMix64::new(101);
    for _ in 0..300 {
        let frames = rng.range_inclusive(20, 500);
        let entries = rng.range_inclusive(1, 20.min(frames));
        let classes = 6;
        let lp = random_log_probs(frames, classes, &mut rng);
        let transcript = random_runs(entries, classes, (1, 1), &mut rng);
        let r = viterbi_align(&lp, &transcript).unwrap();
        assert_eq!(collapse(&r.frame_labels), transcript);
        let again = viterbi_align(&lp, &transcript).unwrap();
        assert_eq!(r, again);
    }
}

#[test]
fn appending_a_certain_frame_never_lowers_the_score() {
    let mut rng = SplitMix64::new(102);
    for _ in 0..200 {
        let frames = rng.range_inclusive(3, 30);
        let lp = random_log_probs(frames, 4, &mut rng);
        let transcript = random_runs(rng.range_inclusive(1, 3), 4, (1, 1), &mut rng);
        let base = viterbi_align(&lp, &transcript).unwrap().score;
        let mut rows = to_mat(&lp);
        let mut extra = vec![PROB_FLOOR.ln(); 4];
        extra[*transcript.last().unwrap()] = 0.0;
        rows.push(extra);
        let longer = viterbi_align(&Tensor::from_rows(&rows).unwrap(), &transcript)
            .unwrap()
            .score;
        assert!(longer >= base);
    }
}

#[test]
fn segments_round_trip_random() {
    let mut rng = SplitMix64::new(103);
    for _ in 0..1000 {
        let len = rng.range_inclusive(1, 60);
        let labels = random_labels(len, 4, &mut rng);
        assert_eq!(frames_from_segments(&segments_from_frames(&labels)), labels);
    }
}

#[test]
fn edit_matches_independent_levenshtein() {
    let mut rng = SplitMix64::new(104);
    for _ in 0..1000 {
        let a = collapse(&random_labels(rng.below(12), 4, &mut rng));
        let b = collapse(&random_labels(rng.below(12), 4, &mut rng));
        let longest = a.len().max(b.len());
        let expect = if longest == 0 {
            100.0
        } else {
            100.0 * (1.0 - levenshtein_recursive(&a, &b) as f64 / longest as f64)
        };
        assert_eq!(edit_score(&a, &b), expect);
    }
}

#[test]
fn greedy_f1_bounded_by_optimal_matching() {
    let mut rng = SplitMix64::new(105);
    for _ in 0..2000 {
        let len = rng.range_inclusive(1, 10);
        let classes = rng.range_inclusive(1, 3);
        let pred = segments_from_frames(&random_labels(len, classes, &mut rng));
        let gt = segments_from_frames(&random_labels(len, classes, &mut rng));
        let unique = |s: &[Segment]| {
            let mut c: Vec<_> = s.iter().map(|x| x.class).collect();
            let n = c.len();
            c.sort();
            c.dedup();
            c.len() == n
        };
        for tau in F1_THRESHOLDS {
            let greedy = match_segments(&pred, &gt, tau);
            let best = optimal_true_positives(&pred, &gt, tau);
            assert!(greedy.tp <= best);
            if unique(&pred) && unique(&gt) {
                assert_eq!(greedy.tp, best);
            }
        }
    }
}

#[test]
fn aligned_frames_keep_transcript_edit_score() {
    let mut rng = SplitMix64::new(106);
    for _ in 0..200 {
        let frames = rng.range_inclusive(10, 80);
        let lp = random_log_probs(frames, 5, &mut rng);
        let transcript = random_runs(rng.range_inclusive(1, 6), 5, (1, 1), &mut rng);
        let gt = collapse(&random_runs(frames, 5, (3, 12), &mut rng));
        let aligned = viterbi_align(&lp, &transcript).unwrap().frame_labels;
        assert_eq!(
            edit_score(&collapse(&aligned), &gt),
            edit_score(&transcript, &gt)
        );
    }
}

#[test]
fn tls_changes_only_near_boundaries() {
    let mut rng = SplitMix64::new(107);
    for _ in 0..1000 {
        let len = rng.range_inclusive(1, 80);
        let labels = random_runs(len, 4, (1, 15), &mut rng);
        let eps = rng.range_inclusive(0, 6);
        let smoothed = temporal_label_smooth(&labels, eps, &mut rng);
        let boundaries: Vec<usize> = (1..len).filter(|&b| labels[b] != labels[b - 1]).collect();
        for t in 0..len {
            if smoothed[t] != labels[t] {
                assert!(boundaries.iter().any(|&b| t + eps >= b && t < b + eps));
            }
        }
    }
}

#[test]
fn tls_keeps_classes_when_segments_exceed_eps() {
    let mut rng = SplitMix64::new(108);
    for _ in 0..500 {
        let eps = rng.range_inclusive(1, 5);
        let labels = random_runs(
            rng.range_inclusive(20, 100),
            5,
            (eps + 1, eps + 10),
            &mut rng,
        );
        // the final run may have been truncated; keep only full-length inputs
        if segments_from_frames(&labels).iter().any(|s| s.len() <= eps) {
            continue;
        }
        let smoothed = temporal_label_smooth(&labels, eps, &mut rng);
        assert_eq!(collapse(&smoothed), collapse(&labels));
    }
}

proptest! {
    #[test]
    fn cls_rows_sum_to_one_and_keep_argmax(
        classes in 2usize..20,
        alpha in 0.0f64..0.999,
        labels in proptest::collection::vec(0usize..1000, 1..20),
    ) {
        let labels: Vec<usize> = labels.iter().map(|l| l % classes).collect();
        let t: Tensor<f64> = categorical_label_smooth(&labels, alpha, classes).unwrap();
        let argmax = t.argmax_rows();
        for (r, &l) in labels.iter().enumerate() {
            let s: f64 = t.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-7);
            if alpha < (classes as f64 - 1.0) / classes as f64 {
                prop_assert_eq!(argmax[r], l);
            }
        }
    }

    #[test]
    fn f1_is_monotone_in_threshold(
        a in proptest::collection::vec(0usize..3, 1..25),
        seed in any::<u64>(),
    ) {
        let mut rng = SplitMix64::new(seed);
        let b = random_labels(a.len(), 3, &mut rng);
        let (pa, pb) = (segments_from_frames(&a), segments_from_frames(&b));
        let scores: Vec<f64> = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0].iter().map(|&t| f1_at(&pa, &pb, t)).collect();
        for w in scores.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn metrics_are_perfect_on_identical_input(a in proptest::collection::vec(0usize..5, 1..40)) {
        let mut corpus = CorpusMetrics::new(None);
        let r = corpus.add_video(&a, &a).unwrap();
        prop_assert_eq!(r.accuracy, 100.0);
        prop_assert_eq!(r.edit, 100.0);
        for (_, v) in r.f1 {
            prop_assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn edit_invariant_under_relabeling(
        a in proptest::collection::vec(0usize..4, 0..12),
        b in proptest::collection::vec(0usize..4, 0..12),
    ) {
        let perm = [2usize, 0, 3, 1];
        let (a, b) = (collapse(&a), collapse(&b));
        let pa: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        let pb: Vec<usize> = b.iter().map(|&x| perm[x]).collect();
        prop_assert_eq!(edit_score(&a, &b), edit_score(&pa, &pb));
    }
}

#[test]
fn gaussian_noise_moments() {
    let mut rng = SplitMix64::new(109);
    let x = Tensor::<f64>::zeros(&[1000, 100]);
    for weight in [1.0, 0.5] {
        let noisy = add_gaussian_noise(&x, weight, &mut rng);
        let n = noisy.len() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let std = (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((std - weight).abs() <= 0.02 * weight, "std {std}");
    }
}

#[test]
fn loss_total_examples() {
    use tas_core::Tape;
    let (frames, classes) = (6, 4);
    // uniform frame logits with one-hot targets give T·ln C
    let mut tape = Tape::<f64>::new();
    let fl = tape.leaf(Tensor::zeros(&[frames, classes]));
    let tl = tape.leaf(Tensor::zeros(&[5, classes + 1]));
    let ft = categorical_label_smooth(&[0, 1, 2, 3, 0, 1], 0.0, classes).unwrap();
    let st = categorical_label_smooth(&[2, 4], 0.0, classes + 1).unwrap();
    let l = loss_total(&mut tape, fl, &ft, tl, &st, LossWeights::default()).unwrap();
    let li = tape.value(l.identification).data()[0];
    assert!((li - frames as f64 * (classes as f64).ln()).abs() < 1e-12);
    // only the two supervised slots count toward L_T
    let lt = tape.value(l.reasoning).data()[0];
    assert!((lt - 2.0 * (5f64).ln()).abs() < 1e-12);

    // equal weights scaled by two reproduce the plain sum exactly
    let l = loss_total(&mut tape, fl, &ft, tl, &st, LossWeights::equal()).unwrap();
    let doubled = tape.scale(l.total, 2.0);
    let plain = tape.add(l.identification, l.reasoning).unwrap();
    assert_eq!(tape.value(doubled).data(), tape.value(plain).data());
}

#[test]
fn loss_vanishes_with_growing_margin() {
    use tas_core::Tape;
    let labels = [0usize, 2, 1];
    let targets = categorical_label_smooth::<f64>(&labels, 0.0, 3).unwrap();
    let mut last = f64::INFINITY;
    for margin in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut logits = Tensor::zeros(&[3, 3]);
        for (r, &c) in labels.iter().enumerate() {
            logits.data_mut()[r * 3 + c] = margin;
        }
        let mut tape = Tape::new();
        let lv = tape.leaf(logits);
        let loss = tape.cross_entropy_soft(lv, &targets).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-12);
}

#[test]
fn two_frame_smoothed_loss_matches_formula() {
    use tas_core::Tape;
    let logits = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
    let targets = categorical_label_smooth::<f64>(&[0, 1], 0.1, 2).unwrap();
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let loss = tape.cross_entropy_soft(lv, &targets).unwrap();
    let mut expect = 0.0;
    for r in 0..2 {
        let (a, b) = (logits.at(r, 0), logits.at(r, 1));
        let z = (a.exp() + b.exp()).ln();
        let (ta, tb) = if r == 0 { (0.95, 0.05) } else { (0.05, 0.95) };
        expect -= ta * (a - z) + tb * (b - z);
    }
    assert!((tape.value(loss).data()[0] - expect).abs() <= 1e-7);
}
