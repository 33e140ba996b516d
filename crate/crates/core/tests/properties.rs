use proptest::prelude::*;

use personalink::linalg::Matrix;
use personalink::metrics::jaccard;
use personalink::retrieval::{Bm25Stats, RankedList};
use personalink::training::{distill_loss, inbatch_ce_loss_with_extra};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |v| {
        let mut m = Matrix::zeros(rows, cols);
        m.data = v;
        m
    })
}

fn square_plus() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..5, 0usize..3).prop_flat_map(|(b, e)| (matrix(b, b + e), matrix(b, b + e)))
}

proptest! {
    #[test]
    fn ce_is_nonnegative_and_rows_of_grad_sum_to_zero((s, _) in square_plus()) {
        let (loss, g) = inbatch_ce_loss_with_extra(&s).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for i in 0..g.rows {
            prop_assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative((s, t) in square_plus(), tau in 0.1f64..4.0) {
        let (kl, _) = distill_loss(&s, &t, tau).unwrap();
        prop_assert!(kl >= -1e-12 && kl.is_finite());
    }

    #[test]
    fn ranks_are_a_permutation(scores in prop::collection::vec(0u8..4, 1..30)) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("x{i:03}")).collect();
        let list = RankedList::from_scores(ids.clone(), scores.iter().map(|&s| s as f64));
        let mut ranks: Vec<usize> = ids.iter().map(|id| list.rank_of(id).unwrap()).collect();
        ranks.sort();
        prop_assert_eq!(ranks, (1..=scores.len()).collect::<Vec<_>>());
        prop_assert!(list.entries.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
    }

    #[test]
    fn bm25_scores_are_nonnegative(docs in prop::collection::vec("[a-f ]{1,15}", 1..6), q in "[a-f ]{1,10}") {
        let stats = Bm25Stats::build(docs.iter().map(String::as_str));
        for s in stats.scores(&q, 1.2, 0.75) {
            prop_assert!(s >= 0.0 && s.is_finite());
        }
    }
}
