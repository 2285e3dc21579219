use std::collections::{HashMap, VecDeque};

use bingo::bagging::{bag_kmeans, bag_knn, bag_labels, BagTable, EmbeddingMatrix};
use bingo::data::{decode_bags, decode_checkpoint, decode_embeddings, decode_idx, encode_bags, encode_embeddings};
use bingo::eval::{bag_distance_embeddings, intra_class_distance, knn_predict};
use bingo::losses::info_nce;
use bingo::membank::MemoryBank;
// Oracles share the library's dot product so exact score ties rank identically.
use bingo::tensor::{dot, Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Rows snapped to a coarse grid before normalizing, so exact ties occur.
fn tied_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| f64::from(rng.random_range(-2i8..=2)))
            .collect(),
    );
    for r in 0..rows {
        let row = t.row_mut(r);
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn brute_knn_predict(train: &Tensor, labels: &[u32], test: &Tensor, k: usize) -> Vec<u32> {
    (0..test.rows())
        .map(|r| {
            let mut order: Vec<(f64, usize)> = (0..train.rows()).map(|i| (dot(test.row(r), train.row(i)), i)).collect();
            order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &(_, i) in &order[..k] {
                *counts.entry(labels[i]).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap();
            counts
                .into_iter()
                .filter(|&(_, c)| c == best)
                .map(|(l, _)| l)
                .min()
                .unwrap()
        })
        .collect()
}

fn brute_bags(e: &EmbeddingMatrix, k: usize) -> Vec<Vec<usize>> {
    (0..e.len())
        .map(|a| {
            let mut others: Vec<(f64, usize)> = (0..e.len())
                .filter(|&j| j != a)
                .map(|j| (dot(e.row(a), e.row(j)), j))
                .collect();
            others.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let mut m: Vec<usize> = others[..k].iter().map(|&(_, j)| j).collect();
            m.push(a);
            m.sort_unstable();
            m
        })
        .collect()
}

fn is_symmetric_partition(bags: &BagTable) -> bool {
    (0..bags.len()).all(|i| {
        bags.members(i).binary_search(&i).is_ok()
            && bags
                .members(i)
                .iter()
                .all(|&j| bags.members(j).binary_search(&i).is_ok())
    })
}

/// Random orthogonal matrix from Gram-Schmidt on a random square.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(t: &Tensor, q: &[Vec<f64>]) -> Tensor {
    let d = t.cols();
    let mut out = Tensor::zeros(vec![t.rows(), d]);
    for r in 0..t.rows() {
        for (c, col) in q.iter().enumerate() {
            out.row_mut(r)[c] = dot(t.row(r), col);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_predict_matches_brute_force(
        seed in any::<u64>(),
        n in 1usize..120,
        m in 1usize..40,
        d in 1usize..6,
        classes in 1u32..5,
        tied in any::<bool>(),
        k_pick in any::<prop::sample::Index>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |rng: &mut ChaCha8Rng, rows| if tied { tied_unit_rows(rng, rows, d) } else { unit_rows(rng, rows, d) };
        let train = make(&mut rng, n);
        let test = make(&mut rng, m);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let k = k_pick.index(n) + 1;
        prop_assert_eq!(knn_predict(&train, &labels, &test, k).unwrap(), brute_knn_predict(&train, &labels, &test, k));
    }

    #[test]
    fn bag_knn_matches_brute_force(
        seed in any::<u64>(),
        n in 2usize..150,
        d in 1usize..6,
        tied in any::<bool>(),
        k_pick in any::<prop::sample::Index>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = if tied { tied_unit_rows(&mut rng, n, d) } else { unit_rows(&mut rng, n, d) };
        let e = EmbeddingMatrix::from_tensor(&t).unwrap();
        let k = k_pick.index(n - 1) + 1;
        let bags = bag_knn(&e, k).unwrap();
        let oracle = brute_bags(&e, k);
        for (a, want) in oracle.iter().enumerate() {
            prop_assert_eq!(bags.members(a), want.as_slice());
        }
    }

    #[test]
    fn partition_strategies_are_symmetric(seed in any::<u64>(), n in 2usize..120, d in 1usize..6, c_pick in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EmbeddingMatrix::from_tensor(&unit_rows(&mut rng, n, d)).unwrap();
        let c = c_pick.index(n) + 1;
        let out = bag_kmeans(&e, c, 30, seed).unwrap();
        prop_assert!(is_symmetric_partition(&out.bags));
        prop_assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        prop_assert!(is_symmetric_partition(&bag_labels(&labels).unwrap()));
    }

    #[test]
    fn bank_holds_the_most_recent_keys(seed in any::<u64>(), b in 1usize..5, slots in 1usize..6, d in 1usize..5, batches in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let capacity = b * slots;
        let mut bank = MemoryBank::new(capacity, d).unwrap();
        let mut oracle: VecDeque<Vec<u64>> = VecDeque::new();
        for _ in 0..batches {
            let keys = unit_rows(&mut rng, b, d);
            bank.enqueue_batch(&keys).unwrap();
            for r in 0..b {
                oracle.push_back(keys.row(r).iter().map(|v| v.to_bits()).collect());
                if oracle.len() > capacity {
                    oracle.pop_front();
                }
            }
        }
        prop_assert_eq!(bank.filled(), oracle.len());
        prop_assert!(bank.cursor() < capacity);
        if bank.filled() > 0 {
            let view = bank.negatives_view().unwrap();
            let mut got: Vec<Vec<u64>> = (0..view.rows()).map(|r| view.row(r).iter().map(|v| v.to_bits()).collect()).collect();
            let mut want: Vec<Vec<u64>> = oracle.into_iter().collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn info_nce_is_positive_and_ignores_negative_order(seed in any::<u64>(), b in 1usize..6, m in 1usize..64, d in 1usize..8, tau in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit_rows(&mut rng, b, d);
        let k = unit_rows(&mut rng, b, d);
        let neg = unit_rows(&mut rng, m, d);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let l = info_nce(&q, &k, &neg, tau).unwrap();
        prop_assert!(l.is_finite() && l > 0.0);
        prop_assert_eq!(l.to_bits(), info_nce(&q, &k, &neg.gather_rows(&order), tau).unwrap().to_bits());
    }

    #[test]
    fn distances_survive_rotation(seed in any::<u64>(), n in 2usize..60, d in 1usize..7, k_pick in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = unit_rows(&mut rng, n, d);
        let q = orthogonal(&mut rng, d);
        let r = rotate(&t, &q);
        let bags = bag_knn(&EmbeddingMatrix::from_tensor(&t).unwrap(), k_pick.index(n - 1) + 1).unwrap();
        let before = bag_distance_embeddings(&t, &bags).unwrap().value;
        let after = bag_distance_embeddings(&r, &bags).unwrap().value;
        prop_assert!((before - after).abs() <= 1e-10, "{before} vs {after}");

        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        if let Ok(a) = intra_class_distance(&t, &labels) {
            let b = intra_class_distance(&r, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8, scale in 1e-6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let n = g.l2_normalize_rows(a).unwrap();
        let first = g.evaluate(&HashMap::new()).unwrap();
        let second = g.evaluate(&HashMap::new()).unwrap();
        prop_assert_eq!(first.value(n), second.value(n));
        for r in 0..rows {
            if dot(x.row(r), x.row(r)).sqrt() >= 1e-8 {
                let row = first.value(n).row(r);
                prop_assert!((dot(row, row).sqrt() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn bag_files_round_trip(seed in any::<u64>(), n in 2usize..80, k_pick in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EmbeddingMatrix::from_tensor(&unit_rows(&mut rng, n, 3)).unwrap();
        let k = k_pick.index(n - 1) + 1;
        for bags in [bag_knn(&e, k).unwrap(), bag_kmeans(&e, k, 20, seed).unwrap().bags] {
            let text = encode_bags(&bags);
            let back = decode_bags(&text).unwrap();
            prop_assert_eq!(encode_bags(&back), text);
            prop_assert_eq!(back, bags);
        }
    }

    #[test]
    fn loaders_never_panic_on_mutated_headers(
        seed in any::<u64>(),
        edits in prop::collection::vec((0usize..64, any::<u8>()), 1..6),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EmbeddingMatrix::from_tensor(&unit_rows(&mut rng, 10, 4)).unwrap();
        let emb = encode_embeddings(&e);
        let bags = encode_bags(&bag_knn(&e, 2).unwrap()).into_bytes();
        let idx = bingo::data::encode_idx_f64(&[5, 2], &[0.5; 10]);
        for original in [emb, bags, idx] {
            let mut b = original.clone();
            let mut changed = false;
            for &(i, v) in &edits {
                let i = i % b.len();
                changed |= b[i] != v;
                b[i] = v;
            }
            let truncated = &b[..cut.index(b.len())];
            for bytes in [&b[..], truncated] {
                // Any panic fails the test case.
                let _ = decode_checkpoint(bytes);
                let _ = decode_idx(bytes);
                let _ = std::str::from_utf8(bytes).map(decode_bags);
                let emb_result = decode_embeddings(bytes);
                if original[..4] == *b"BNGE" && changed {
                    prop_assert!(emb_result.is_err());
                }
            }
        }
    }
}
