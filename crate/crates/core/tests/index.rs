mod common;

use latent_rag::index::VectorIndex;
use latent_rag::Error;
use proptest::prelude::*;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_matches_full_sort(
        rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..40),
        q in prop::collection::vec(-1.0f32..1.0, 6),
        k in 1usize..12,
    ) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("d{i:03}")).collect();
        let index = VectorIndex::from_parts(6, ids.clone(), rows.concat(), 7).unwrap();
        let mut oracle: Vec<(f64, &str)> = rows.iter().zip(&ids).map(|(r, id)| (cosine(&q, r), id.as_str())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let got = index.top_k(&q, k).unwrap();
        prop_assert_eq!(got.hits.len(), k.min(rows.len()));
        for (h, (score, _)) in got.hits.iter().zip(&oracle) {
            prop_assert!((h.score as f64 - score).abs() < 1e-4);
        }
        for w in got.hits.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}

#[test]
fn save_load_and_fingerprint_checks() {
    let data = common::world(30, 4, 2, 1);
    let (model, _) = common::small_model(&data, 16, 1, 2);
    let index = VectorIndex::build(&data.corpus, &model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.lidx");
    index.save(&path).unwrap();
    let back = VectorIndex::load_for_model(&path, &model).unwrap();
    assert_eq!(back.to_bytes(), index.to_bytes());

    let (other, _) = common::small_model(&data, 16, 1, 3);
    assert!(matches!(back.check_model(&other), Err(Error::FingerprintMismatch { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(VectorIndex::load(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn hard_negatives_skip_positives() {
    let data = common::world(30, 4, 2, 1);
    let (model, _) = common::small_model(&data, 16, 1, 2);
    let index = VectorIndex::build(&data.corpus, &model).unwrap();
    let q = index.vector(0).to_vec();
    let positives = [index.doc_ids()[0].clone(), index.doc_ids()[1].clone()].into_iter().collect();
    let negs = index.mine_hard_negatives(&q, &positives, 5).unwrap();
    assert_eq!(negs.hits.len(), 5);
    assert!(negs.hits.iter().all(|h| !positives.contains(&h.doc_id)));
}

#[test]
fn rejects_bad_queries() {
    let index = VectorIndex::from_parts(2, vec!["a".into()], vec![1.0, 0.0], 0).unwrap();
    assert!(index.top_k(&[1.0, 0.0, 0.0], 1).is_err());
    assert!(index.top_k(&[0.0, 0.0], 1).is_err());
    assert!(VectorIndex::from_parts(2, vec!["a".into(), "a".into()], vec![1.0, 0.0, 0.0, 1.0], 0).is_err());
}
