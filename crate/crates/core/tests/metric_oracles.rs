use authguard_core::metrics::{auc, auc_fraction, bleu4, cider, meteor, rouge_l, vqa_average, CaptionEvalSet, CaptionItem, ScoredSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Every (positive, negative) pair: win counts 2, tie counts 1, out of 2·P·N.
fn brute_force_auc(scores: &[f64], labels: &[u8]) -> (u128, u128) {
    let (mut num, mut pairs) = (0u128, 0u128);
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            num += match sp.partial_cmp(sn).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (num, 2 * pairs)
}

#[test]
fn auc_equals_pairwise_count_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 4.0).collect();
        let (a, b) = auc_fraction(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let (c, d) = brute_force_auc(&scores, &labels);
        assert_eq!(a * d, c * b, "case {case}: {a}/{b} vs {c}/{d}");
    }
}

#[test]
fn auc_worked_examples() {
    let s = ScoredSet::new(vec![0.8, 0.6, 0.4, 0.2], vec![1, 0, 1, 0]).unwrap();
    assert_eq!(auc(&s).unwrap(), 0.75);
    let s = ScoredSet::new(vec![0.3; 6], vec![1, 0, 1, 0, 0, 1]).unwrap();
    assert_eq!(auc(&s).unwrap(), 0.5);
}

fn one(h: &str, r: &str) -> CaptionEvalSet {
    CaptionEvalSet::new(vec![CaptionItem::from_text(h, &[r])]).unwrap()
}

#[test]
fn caption_metric_hand_examples() {
    let bp = (1.0f64 - 5.0 / 4.0).exp();
    assert!((bleu4(&one("a b c d", "a b c d e")) - bp).abs() < 1e-6);
    assert!((bleu4(&one("the cat sat down", "the cat sat down")) - 1.0).abs() < 1e-6);
    assert!(bleu4(&one("w x y z", "a b c d")) <= 1e-6);

    assert!((rouge_l(&one("a b c d", "a c b d")) - 0.75).abs() < 1e-6);
    assert!((rouge_l(&one("a b", "a b")) - 1.0).abs() < 1e-6);
    assert_eq!(rouge_l(&one("a b", "c d")), 0.0);

    assert!((meteor(&one("a b c d", "a b c d")) - (1.0 - 0.5 / 64.0)).abs() < 1e-6);
    assert_eq!(meteor(&one("a b", "c d")), 0.0);
    let swapped = meteor(&one("b a d c", "a b c d"));
    assert!(swapped < meteor(&one("a b c d", "a b c d")));
}

#[derive(Deserialize)]
struct Fixture {
    items: Vec<FixtureItem>,
    cider: f64,
}

#[derive(Deserialize)]
struct FixtureItem {
    hypothesis: String,
    references: Vec<String>,
}

#[test]
fn cider_matches_independent_fixture() {
    let raw = include_str!("fixtures/cider_fixture.json");
    let f: Fixture = serde_json::from_str(raw).unwrap();
    let items = f
        .items
        .iter()
        .map(|i| CaptionItem::from_text(&i.hypothesis, &i.references.iter().map(String::as_str).collect::<Vec<_>>()))
        .collect();
    let got = cider(&CaptionEvalSet::new(items).unwrap()).unwrap();
    assert!((got - f.cider).abs() < 1e-6, "{got} vs {}", f.cider);
}

#[test]
fn cider_zero_overlap_is_zero() {
    let set = CaptionEvalSet::new(vec![
        CaptionItem::from_text("p q r", &["a b c"]),
        CaptionItem::from_text("s t u", &["d e f"]),
    ])
    .unwrap();
    assert_eq!(cider(&set).unwrap(), 0.0);
}

#[test]
fn vqa_average_table_rows() {
    assert!((vqa_average(0.4980, 3.3050, 0.6950, 0.4010).unwrap() - 1.2248).abs() < 5e-4);
    assert!((vqa_average(0.4075, 2.0567, 0.6085, 0.3463).unwrap() - 0.85475).abs() < 1e-9);
    assert_eq!(vqa_average(0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
}
