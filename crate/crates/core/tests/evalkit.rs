use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmsst::corpus::{generate_corpus, CorpusSpec};
use vmsst::evalkit::{
    argmax, cosine, cosine_matrix, evaluate, fractional_ranks, hubness, margin_score, mine_pairs, optimal_f1_threshold,
    overall_score, pair_gap, pearson, retrieval_r_at_1, score_matrix, skewness, spearman, tatoeba_accuracy,
    threshold_sweep, EmbeddingMatrix, EvalOptions, MarginOptions, MiningMethod, ScoreInputs, ThresholdResult,
};
use vmsst::model::{Model, ModelConfig};
use vmsst::Error;

fn mat(rows: &[&[f32]]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(n, dim, data).unwrap()
}

/// Rows with strictly positive entries, so every cosine and margin
/// denominator is positive.
fn positive_matrix(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..n * dim).map(|_| rng.random_range(0.05f32..1.0)).collect();
    EmbeddingMatrix::new(n, dim, data).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn cosine_examples() {
    let u = [0.3, -1.2, 4.0];
    assert!(close(cosine(&u, &u).unwrap(), 1.0, 1e-15));
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(close(
        cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
        1.0 / 2f64.sqrt(),
        1e-15
    ));
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::Contract(_))));
}

#[test]
fn cosine_matrix_matches_pairwise_cosine_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, t) = (random_matrix(&mut rng, 7, 5), random_matrix(&mut rng, 4, 5));
    let sim = cosine_matrix(&s, &t).unwrap();
    for i in 0..7 {
        for j in 0..4 {
            let c = cosine(&s.row_f64(i), &t.row_f64(j)).unwrap();
            assert_eq!(sim.get(i, j).to_bits(), c.to_bits());
        }
    }
}

#[test]
fn pearson_examples() {
    let x = [1.0, 2.0, 3.0, 4.5];
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!(close(pearson(&x, &y).unwrap(), 1.0, 1e-12));
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!(close(pearson(&x, &neg).unwrap(), -1.0, 1e-12));
    // cov = 1, var_x = var_y = 2 (sums of squared deviations)
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, 1e-15));
    assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Contract(_))));
}

#[test]
fn spearman_examples() {
    let x = [0.1, 0.5, 0.2, 0.9, -0.3];
    let cubed: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 7.0).collect();
    assert!(close(spearman(&x, &cubed).unwrap(), 1.0, 1e-12));
    let rev: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!(close(spearman(&x, &rev).unwrap(), -1.0, 1e-12));

    // ranks of [1,1,2] are [1.5,1.5,3]; Pearson against [1,2,3] by hand:
    // deviations (-0.5,-0.5,1) and (-1,0,1) give 1.5 / sqrt(1.5 * 2)
    assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    let expected = 1.5 / (1.5f64 * 2.0).sqrt();
    assert!(close(
        spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(),
        expected,
        1e-15
    ));
}

#[test]
fn tatoeba_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_matrix(&mut rng, 6, 4);
    let acc = tatoeba_accuracy(&s, &s).unwrap();
    assert_eq!((acc.src_to_tgt, acc.tgt_to_src, acc.mean), (1.0, 1.0, 1.0));

    // each source is closest to the other row's target
    let src = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let tgt = mat(&[&[0.1, 1.0], &[1.0, 0.1]]);
    let acc = tatoeba_accuracy(&src, &tgt).unwrap();
    assert_eq!((acc.src_to_tgt, acc.tgt_to_src, acc.mean), (0.0, 0.0, 0.0));

    let short = random_matrix(&mut rng, 5, 4);
    match tatoeba_accuracy(&s, &short) {
        Err(Error::Contract(m)) => assert!(m.contains("alignment")),
        other => panic!("expected alignment error, got {other:?}"),
    }
}

#[test]
fn tatoeba_orthogonal_rows_with_distractor_mix() {
    // matched rows are the standard basis; targets add a small off-axis part
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut src = vec![vec![0.0f32; n]; n];
    let mut tgt = vec![vec![0.0f32; n]; n];
    for i in 0..n {
        src[i][i] = 1.0;
        tgt[i][i] = 1.0;
        for (j, v) in tgt[i].iter_mut().enumerate() {
            if j != i {
                *v = rng.random_range(0.0f32..0.2);
            }
        }
    }
    let (s, t) = (
        EmbeddingMatrix::from_rows(&src).unwrap(),
        EmbeddingMatrix::from_rows(&tgt).unwrap(),
    );
    let sim = cosine_matrix(&s, &t).unwrap();
    for i in 0..n {
        assert_eq!(argmax(sim.row(i)), i);
        assert_eq!(argmax(&sim.column(i)), i);
    }
    assert_eq!(tatoeba_accuracy(&s, &t).unwrap().mean, 1.0);
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
    assert_eq!(argmax(&[0.5]), 0);
}

#[test]
fn retrieval_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kb = random_matrix(&mut rng, 10, 6);
    let q = EmbeddingMatrix::from_rows(&[kb.row(3).to_vec(), kb.row(7).to_vec()]).unwrap();
    assert_eq!(retrieval_r_at_1(&q, &kb, &[3, 7]).unwrap(), 1.0);

    // orthonormal kb, query = gold row + noise of norm below 0.1
    let d = 6;
    let rows: Vec<Vec<f32>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let kb = EmbeddingMatrix::from_rows(&rows).unwrap();
    let queries: Vec<Vec<f32>> = (0..d)
        .map(|i| {
            let noise: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let norm = noise.iter().map(|x| x * x).sum::<f32>().sqrt();
            rows[i].iter().zip(&noise).map(|(r, z)| r + 0.099 * z / norm).collect()
        })
        .collect();
    let q = EmbeddingMatrix::from_rows(&queries).unwrap();
    let gold: Vec<usize> = (0..d).collect();
    assert_eq!(retrieval_r_at_1(&q, &kb, &gold).unwrap(), 1.0);

    // duplicate kb rows: the lower index wins, so gold at the higher one misses
    let kb = mat(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
    let q = mat(&[&[1.0, 0.1]]);
    assert_eq!(retrieval_r_at_1(&q, &kb, &[1]).unwrap(), 1.0);
    assert_eq!(retrieval_r_at_1(&q, &kb, &[2]).unwrap(), 0.0);

    assert!(matches!(retrieval_r_at_1(&q, &kb, &[3]), Err(Error::Contract(_))));
}

#[test]
fn margin_orthonormal_example_is_exact() {
    let e = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let m = margin_score(0, 0, &e, &e, &MarginOptions::default()).unwrap();
    assert_eq!(m, 0.5);
    let avg = MarginOptions {
        averaged: true,
        ..MarginOptions::default()
    };
    // averaged form divides each neighbour sum by 2k = 4
    assert_eq!(margin_score(0, 0, &e, &e, &avg).unwrap(), 1.0 / (0.25 + 0.25));
}

#[test]
fn margin_surfaces_non_positive_denominators() {
    let s = mat(&[&[1.0, 0.0]]);
    let t = mat(&[&[-1.0, 0.1]]);
    assert!(matches!(
        margin_score(0, 0, &s, &t, &MarginOptions::default()),
        Err(Error::Degenerate(_))
    ));
}

// Brute-force oracles built from the pairwise `cosine` primitive.

fn oracle_cos(s: &EmbeddingMatrix, t: &EmbeddingMatrix, i: usize, j: usize) -> f64 {
    cosine(&s.row_f64(i), &t.row_f64(j)).unwrap()
}

/// Sum of the `k` largest values, found by repeated selection.
fn oracle_top_sum(mut vals: Vec<f64>, k: usize) -> f64 {
    let mut total = 0.0;
    for _ in 0..k.min(vals.len()) {
        let mut best = 0;
        for (idx, v) in vals.iter().enumerate() {
            if *v > vals[best] {
                best = idx;
            }
        }
        total += vals.remove(best);
    }
    total
}

fn oracle_margin(s: &EmbeddingMatrix, t: &EmbeddingMatrix, i: usize, j: usize, k: usize) -> f64 {
    let fwd: Vec<f64> = (0..t.rows()).map(|b| oracle_cos(s, t, i, b)).collect();
    let bwd: Vec<f64> = (0..s.rows()).map(|a| oracle_cos(s, t, a, j)).collect();
    oracle_cos(s, t, i, j) / (oracle_top_sum(fwd, k) + oracle_top_sum(bwd, k))
}

fn oracle_f1(correct: usize, accepted: usize, relevant: usize) -> (f64, f64, f64) {
    let p = if accepted > 0 {
        correct as f64 / accepted as f64
    } else {
        0.0
    };
    let r = if relevant > 0 {
        correct as f64 / relevant as f64
    } else {
        0.0
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Tries every probe threshold independently and keeps the best, the later
/// (higher) threshold winning ties.
fn oracle_sweep(scores: &[f64], labels: &[bool], relevant: usize) -> ThresholdResult {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut probes = vec![f64::NEG_INFINITY];
    probes.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    probes.push(f64::INFINITY);
    let mut best: Option<ThresholdResult> = None;
    for th in probes {
        let accepted = scores.iter().filter(|&&s| s >= th).count();
        let correct = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && l).count();
        let (p, r, f) = oracle_f1(correct, accepted, relevant);
        if best.is_none_or(|b| f >= b.f1) {
            best = Some(ThresholdResult {
                threshold: th,
                precision: p,
                recall: r,
                f1: f,
                accepted,
            });
        }
    }
    best.unwrap()
}

#[test]
fn margin_and_mining_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for instance in 0..100 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=50);
        let dim = rng.random_range(2..=8);
        let (s, t) = (positive_matrix(&mut rng, n, dim), positive_matrix(&mut rng, m, dim));
        let k = MarginOptions::default().k_nn;
        let opts = MarginOptions::default();

        let margins = score_matrix(&s, &t, MiningMethod::Margin, &opts).unwrap();
        for i in 0..n {
            for j in 0..m {
                let o = oracle_margin(&s, &t, i, j, k);
                assert_eq!(
                    margins.get(i, j).to_bits(),
                    o.to_bits(),
                    "instance {instance} ({i},{j})"
                );
            }
        }
        for _ in 0..3 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..m));
            let single = margin_score(i, j, &s, &t, &opts).unwrap();
            assert_eq!(single.to_bits(), oracle_margin(&s, &t, i, j, k).to_bits());
        }

        let n_gold = rng.random_range(1..=n.min(m));
        let gold: Vec<(usize, usize)> = (0..n_gold)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..m)))
            .collect();
        let mut gold_set = gold.clone();
        gold_set.sort();
        gold_set.dedup();
        for method in MiningMethod::ALL {
            let res = mine_pairs(&s, &t, method, &gold, &opts).unwrap();
            let score = |i: usize, j: usize| match method {
                MiningMethod::Cosine => oracle_cos(&s, &t, i, j),
                MiningMethod::Margin => oracle_margin(&s, &t, i, j, k),
            };
            let mut cands: Vec<(usize, usize, f64)> = (0..n)
                .map(|i| {
                    let mut best = 0;
                    for j in 1..m {
                        if score(i, j) > score(i, best) {
                            best = j;
                        }
                    }
                    (i, best, score(i, best))
                })
                .collect();
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let got: Vec<(usize, usize, u64)> = res.pairs.iter().map(|c| (c.src, c.tgt, c.score.to_bits())).collect();
            let want: Vec<(usize, usize, u64)> = cands.iter().map(|c| (c.0, c.1, c.2.to_bits())).collect();
            assert_eq!(got, want, "instance {instance} {method}");

            let labels: Vec<bool> = cands.iter().map(|c| gold_set.contains(&(c.0, c.1))).collect();
            let scores: Vec<f64> = cands.iter().map(|c| c.2).collect();
            let o = oracle_sweep(&scores, &labels, gold_set.len());
            assert_eq!(res.threshold.to_bits(), o.threshold.to_bits());
            assert_eq!(
                (res.precision, res.recall, res.f1),
                (o.precision, o.recall, o.f1),
                "instance {instance} {method}"
            );
            assert_eq!(res.n_gold, gold_set.len());
        }
    }
}

#[test]
fn threshold_examples() {
    let r = optimal_f1_threshold(&[0.9, 0.2], &[true, false]).unwrap();
    assert_eq!((r.threshold, r.f1), (0.55, 1.0));
    let r = optimal_f1_threshold(&[0.9, 0.2, 0.4], &[true, true, true]).unwrap();
    assert_eq!((r.threshold, r.f1, r.accepted), (f64::NEG_INFINITY, 1.0, 3));
    let r = optimal_f1_threshold(&[0.3, 0.1], &[false, false]).unwrap();
    assert_eq!((r.threshold, r.f1, r.precision), (f64::INFINITY, 0.0, 0.0));
    assert!(matches!(optimal_f1_threshold(&[], &[]), Err(Error::Contract(_))));
}

#[test]
fn threshold_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        // coarse values force ties between scores
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let relevant = labels.iter().filter(|&&l| l).count() + rng.random_range(0..3);
        let got = threshold_sweep(&scores, &labels, relevant).unwrap();
        let want = oracle_sweep(&scores, &labels, relevant);
        assert_eq!(got.threshold.to_bits(), want.threshold.to_bits());
        assert_eq!(
            (got.precision, got.recall, got.f1, got.accepted),
            (want.precision, want.recall, want.f1, want.accepted)
        );
    }
}

#[test]
fn threshold_serializes_infinite_sentinels() {
    let r = optimal_f1_threshold(&[0.9, 0.2], &[true, true]).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"-inf\""), "{json}");
    let back: ThresholdResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let r = optimal_f1_threshold(&[0.3], &[false]).unwrap();
    let back: ThresholdResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back.threshold, f64::INFINITY);
}

#[test]
fn mining_perfect_geometry_and_hub_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = random_matrix(&mut rng, 12, 6);
    let gold: Vec<(usize, usize)> = (0..12).map(|i| (i, i)).collect();
    let r = mine_pairs(&s, &s, MiningMethod::Cosine, &gold, &MarginOptions::default()).unwrap();
    assert_eq!((r.f1, r.precision, r.recall), (1.0, 1.0, 1.0));
    assert!(r.threshold < r.pairs.last().unwrap().score);

    // the last target sits near the centroid and wins source 1 under cosine
    let s = mat(&[&[1.0, 0.1, 0.1], &[0.1, 1.0, 0.1], &[0.1, 0.1, 1.0]]);
    let t = mat(&[&[1.0, 0.1, 0.1], &[0.8, 0.6, 0.0], &[1.0, 1.0, 1.0]]);
    let gold = [(0, 0), (1, 1), (2, 2)];
    let opts = MarginOptions::default();
    let cos = mine_pairs(&s, &t, MiningMethod::Cosine, &gold, &opts).unwrap();
    let mar = mine_pairs(&s, &t, MiningMethod::Margin, &gold, &opts).unwrap();
    let hub_hits = cos.pairs.iter().filter(|c| c.tgt == 2).count();
    assert_eq!(hub_hits, 2);
    assert!(mar.pairs.iter().all(|c| c.gold));
    // cosine: best is accepting all three (P = R = 2/3)
    assert!(close(cos.f1, 2.0 / 3.0, 1e-15));
    assert_eq!(mar.f1, 1.0);
    assert!(mar.f1 >= cos.f1);

    assert!(matches!(
        mine_pairs(&s, &t, MiningMethod::Cosine, &[], &opts),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        mine_pairs(&s, &t, MiningMethod::Cosine, &[(0, 3)], &opts),
        Err(Error::Contract(_))
    ));
}

#[test]
fn mining_pairs_are_sorted_and_f1_is_harmonic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (s, t) = (positive_matrix(&mut rng, 15, 4), positive_matrix(&mut rng, 15, 4));
        let gold: Vec<(usize, usize)> = (0..15).map(|i| (i, i)).collect();
        for method in MiningMethod::ALL {
            let r = mine_pairs(&s, &t, method, &gold, &MarginOptions::default()).unwrap();
            assert!(r.pairs.windows(2).all(|w| w[0].score >= w[1].score));
            assert!((0.0..=1.0).contains(&r.precision) && (0.0..=1.0).contains(&r.recall));
            let h = if r.precision + r.recall > 0.0 {
                2.0 * r.precision * r.recall / (r.precision + r.recall)
            } else {
                0.0
            };
            assert_eq!(r.f1, h);
        }
    }
}

#[test]
fn optimal_threshold_beats_a_dense_uniform_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.random_range(5..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let best = optimal_f1_threshold(&scores, &labels).unwrap();
        let relevant = labels.iter().filter(|&&l| l).count();
        for step in 0..1000 {
            let th = -1.0 + 2.0 * step as f64 / 999.0;
            let acc = scores.iter().filter(|&&s| s >= th).count();
            let cor = scores.iter().zip(&labels).filter(|(&s, &l)| s >= th && l).count();
            assert!(best.f1 >= oracle_f1(cor, acc, relevant).2);
        }
    }
}

#[test]
fn hubness_examples() {
    // eight points evenly spaced on a circle: both 2-NN are the ring neighbours
    let ring: Vec<Vec<f32>> = (0..8)
        .map(|i| {
            let a = i as f32 * std::f32::consts::TAU / 8.0 + 0.1;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let h = hubness(&EmbeddingMatrix::from_rows(&ring).unwrap(), 2).unwrap();
    assert!(h.counts.iter().all(|&c| c == 2), "{:?}", h.counts);
    assert_eq!(h.skewness, 0.0);

    // rows e0 ± ej sit at cosine 0.5 or 0 from each other but 1/√2 from
    // their mean direction e0, the last row
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for j in 1..6 {
        for sign in [1.0, -1.0] {
            let mut r = vec![0.0f32; 6];
            r[0] = 1.0;
            r[j] = sign;
            rows.push(r);
        }
    }
    rows.push(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let e = EmbeddingMatrix::from_rows(&rows).unwrap();
    let h = hubness(&e, 1).unwrap();
    // brute-force nearest neighbour of every row
    let n = rows.len();
    let mut counts = vec![0usize; n];
    for i in 0..n {
        let mut best = usize::MAX;
        for j in 0..n {
            if j != i && (best == usize::MAX || oracle_cos(&e, &e, i, j) > oracle_cos(&e, &e, i, best)) {
                best = j;
            }
        }
        counts[best] += 1;
    }
    assert_eq!(h.counts, counts);
    assert_eq!(counts[n - 1], n - 1);
    assert!(h.skewness > 0.0);

    let h = hubness(&e, 4).unwrap();
    assert_eq!(h.counts.iter().sum::<usize>(), n * 4);
    assert_eq!(h.histogram.iter().sum::<usize>(), n);
    assert_eq!(h.histogram.iter().enumerate().map(|(c, k)| c * k).sum::<usize>(), n * 4);

    assert!(matches!(hubness(&e, n), Err(Error::Contract(_))));
}

#[test]
fn skewness_of_hand_data() {
    // deviations (-1,-1,2): m2 = 2, m3 = 2, skew = 2 / 2^1.5
    assert!(close(skewness(&[0.0, 0.0, 3.0]), 2.0 / 2f64.powf(1.5), 1e-15));
    assert_eq!(skewness(&[4.0, 4.0]), 0.0);
}

#[test]
fn pair_gap_of_identity_alignment() {
    let e = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let g = pair_gap(&e, &e).unwrap();
    assert_eq!((g.pair_mean, g.non_pair_mean, g.all_pairs_mean), (1.0, 0.0, 0.5));
    assert_eq!(g.gap(), 1.0);
}

#[test]
fn overall_score_examples() {
    let all = |v| ScoreInputs {
        sts_english: Some(v),
        sts_crosslingual: Some(v),
        tatoeba_acc: Some(v),
        bucc_cosine_f1: Some(v),
        bucc_margin_f1: Some(v),
        retrieval_r1_primary: Some(v),
        retrieval_r1_multilingual: Some(v),
    };
    assert_eq!(overall_score(&all(100.0)).unwrap(), 100.0);

    let table_row = ScoreInputs {
        sts_english: Some(74.6),
        sts_crosslingual: Some(79.1),
        tatoeba_acc: Some(81.1),
        bucc_cosine_f1: Some(87.8),
        bucc_margin_f1: Some(92.5),
        retrieval_r1_primary: Some(40.8),
        retrieval_r1_multilingual: Some(29.9),
    };
    let score = overall_score(&table_row).unwrap();
    assert!((score - 65.9).abs() < 0.05, "{score}");
    assert_eq!(format!("{score:.1}"), "65.9");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..100.0)).collect();
        let inputs = ScoreInputs {
            sts_english: Some(v[0]),
            sts_crosslingual: Some(v[1]),
            tatoeba_acc: Some(v[2]),
            bucc_cosine_f1: Some(v[3]),
            bucc_margin_f1: Some(v[4]),
            retrieval_r1_primary: Some(v[5]),
            retrieval_r1_multilingual: Some(v[6]),
        };
        let hand = (v[0] + v[1] + v[2] + (v[3] + v[4]) / 2.0 + v[5] + v[6]) / 6.0;
        assert!(close(overall_score(&inputs).unwrap(), hand, 1e-12));
    }

    let missing = ScoreInputs {
        bucc_margin_f1: None,
        ..table_row
    };
    match overall_score(&missing) {
        Err(Error::Contract(m)) => assert!(m.contains("bucc_margin_f1")),
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn vmsb_round_trip_and_bad_magic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut e = random_matrix(&mut rng, 5, 3);
    let bytes = e.to_bytes();
    assert_eq!(&bytes[..4], b"VMSB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 12 + 5 * 3 * 4);
    assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), e);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.vmsb");
    e.ids = Some((0..5).map(|i| format!("row{i}")).collect());
    e.write(&path).unwrap();
    assert_eq!(EmbeddingMatrix::read(&path).unwrap(), e);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(EmbeddingMatrix::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(
        EmbeddingMatrix::from_bytes(&bytes[..20]),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        EmbeddingMatrix::new(1, 2, vec![f32::NAN, 0.0]),
        Err(Error::Degenerate(_))
    ));
}

fn rotation(seed: u64, d: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a random square matrix
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &q {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

fn rotate(e: &EmbeddingMatrix, q: &[Vec<f64>]) -> EmbeddingMatrix {
    let rows: Vec<Vec<f32>> = (0..e.rows())
        .map(|i| {
            let r = e.row_f64(i);
            q.iter()
                .map(|b| b.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>() as f32)
                .collect()
        })
        .collect();
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

/// Smallest gap between the best and runner-up score of any row or column,
/// over both the cosine and margin matrices.
fn min_argmax_gap(s: &EmbeddingMatrix, t: &EmbeddingMatrix) -> f64 {
    let mut gap = f64::INFINITY;
    for method in MiningMethod::ALL {
        let m = score_matrix(s, t, method, &MarginOptions::default()).unwrap();
        let mut lines: Vec<Vec<f64>> = (0..m.n).map(|i| m.row(i).to_vec()).collect();
        lines.extend((0..m.m).map(|j| m.column(j)));
        for mut l in lines {
            l.sort_by(|a, b| b.total_cmp(a));
            if l.len() > 1 {
                gap = gap.min(l[0] - l[1]);
            }
        }
    }
    gap
}

type Metrics = (f64, f64, Vec<(usize, usize)>, Vec<(usize, usize)>);

fn argmax_metrics(s: &EmbeddingMatrix, t: &EmbeddingMatrix) -> Metrics {
    let gold: Vec<(usize, usize)> = (0..s.rows()).map(|i| (i, i)).collect();
    let g: Vec<usize> = (0..s.rows()).collect();
    let mined = |m| {
        mine_pairs(s, t, m, &gold, &MarginOptions::default())
            .unwrap()
            .pairs
            .iter()
            .map(|c| (c.src, c.tgt))
            .collect()
    };
    (
        tatoeba_accuracy(s, t).unwrap().mean,
        retrieval_r_at_1(s, t, &g).unwrap(),
        mined(MiningMethod::Cosine),
        mined(MiningMethod::Margin),
    )
}

fn positive_rows(n: usize, dim: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    prop::collection::vec(0.05f32..1.0, n * dim).prop_map(move |d| EmbeddingMatrix::new(n, dim, d).unwrap())
}

proptest! {
    #[test]
    fn argmax_metrics_invariant_under_scaling(
        s in positive_rows(8, 4),
        t in positive_rows(8, 4),
        c in 0.01f32..100.0,
    ) {
        prop_assume!(min_argmax_gap(&s, &t) > 1e-4);
        prop_assert_eq!(argmax_metrics(&s, &t), argmax_metrics(&s.scaled(c), &t.scaled(c)));
        prop_assert_eq!(argmax_metrics(&s, &t), argmax_metrics(&s.scaled(0.25), &t.scaled(0.25)));
    }

    #[test]
    fn argmax_metrics_invariant_under_rotation(
        s in positive_rows(8, 4),
        t in positive_rows(8, 4),
        seed in any::<u64>(),
    ) {
        prop_assume!(min_argmax_gap(&s, &t) > 1e-4);
        let q = rotation(seed, 4);
        prop_assert_eq!(argmax_metrics(&s, &t), argmax_metrics(&rotate(&s, &q), &rotate(&t, &q)));
    }

    #[test]
    fn correlations_are_bounded_and_rank_invariant(
        x in prop::collection::vec(-10.0f64..10.0, 3..30),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
        if let (Ok(p), Ok(r)) = (pearson(&x, &y), spearman(&x, &y)) {
            prop_assert!((-1.0..=1.0).contains(&p));
            prop_assert!((-1.0..=1.0).contains(&r));
            let warped: Vec<f64> = y.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(spearman(&x, &warped).unwrap(), r);
        }
    }
}

#[test]
fn evaluate_untrained_model_smoke() {
    let spec = CorpusSpec {
        n_languages: 3,
        n_concepts: 16,
        sentence_len: (2, 5),
        n_train_pairs: 50,
        n_fillers: 2,
        n_sts_pairs: 20,
        n_tatoeba_pairs: 20,
        n_mining_pairs: 10,
        n_mining_distractors: 5,
        n_kb: 20,
        n_queries: 10,
        seed: 13,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        model_dim: 16,
        latent_dim: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ff_dim: 32,
        n_languages: 3,
        max_len: 12,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let opts = EvalOptions {
        max_len: 12,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &corpus.eval, &opts).unwrap();
    assert_eq!(report.overall_score, overall_score(&report.inputs()).unwrap());
    assert_eq!(report.languages.len(), 2);
    for v in [
        report.tatoeba_acc,
        report.bucc_cosine_f1,
        report.bucc_margin_f1,
        report.retrieval_r1_primary,
        report.retrieval_r1_multilingual,
    ] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(evaluate(&model, &corpus.eval, &opts).unwrap(), report);
    let text = report.to_string();
    assert_eq!(text.lines().count(), 8);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(
        serde_json::from_str::<vmsst::evalkit::EvalReport>(&json).unwrap(),
        report
    );
}
