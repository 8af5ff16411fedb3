use epi_web::demo::{bleu, parse_rule, scheduler, Trainer};

#[test]
fn scheduler_reports_the_stage_row() {
    let v = scheduler("default", 0.9, 50_000, 1).unwrap();
    assert_eq!(v.stage, 3);
    assert_eq!(v.probabilities, vec![0.2; 5]);
    assert_eq!(v.counts.iter().sum::<usize>(), 50_000);
    for c in &v.counts {
        assert!((*c as f64 / 50_000.0 - 0.2).abs() < 0.01);
    }
    let early = scheduler("reversed", 0.0, 10, 1).unwrap();
    assert_eq!(early.stage, 1);
    assert!(early.probabilities.windows(2).all(|w| w[0] < w[1]));
    assert!(scheduler("sideways", 0.5, 10, 1).is_err());
    assert!(scheduler("default", 1.5, 10, 1).is_err());
}

#[test]
fn bleu_on_words() {
    let b = bleu("a b c d", "a b c d e").unwrap();
    assert!((b.score - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
    assert_eq!(bleu("x y\nz w v", "x y\nz w v").unwrap().score, 100.0);
    assert!(bleu("a\nb", "a").is_err());
}

#[test]
fn trainer_learns_its_rule() {
    assert!(parse_rule("shuffle").is_err());
    let mut t = Trainer::new("reverse", 3).unwrap();
    assert_eq!(t.reference("a b c d"), "d c b a");
    let first = t.train(20).unwrap();
    let last = {
        t.train(300).unwrap();
        t.train(20).unwrap()
    };
    assert_eq!(t.steps, 340);
    assert_eq!(t.losses.len(), 340);
    assert!(last < 0.5 * first, "{first} -> {last}");
    let out = t.translate("a b c d e").unwrap();
    assert!(out.split_whitespace().count() <= 10);
    assert!((0.0..=100.0).contains(&t.test_bleu().unwrap()));
    assert!(t.translate(&["a"; 20].join(" ")).is_err());
}
