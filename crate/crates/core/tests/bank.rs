use std::fs;
use tidewater::imaging::Image;
use tidewater::iqa::QualityScorer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidewater::bank::*;
use tidewater::iqa::FnScorer;

/// Scores an image by its first pixel value, so tests can dial in exact scores.
fn probe() -> FnScorer<impl Fn(&Image) -> tidewater::iqa::Result<f64>> {
    FnScorer::new("probe", true, |x: &Image| Ok(x.data()[0] * 10.0))
}

fn img(v: f64) -> Image {
    Image::filled(8, 8, [v, 0.5, 0.5]).unwrap()
}

#[test]
fn starts_empty_and_round_trips_empty() {
    let bank = ReliableBank::new();
    assert_eq!(bank.len(), 0);
    assert!(bank.get("any").is_none());
    let dir = tempfile::tempdir().unwrap();
    bank.persist(&dir.path().join("bank")).unwrap();
    assert_eq!(ReliableBank::load(&dir.path().join("bank")).unwrap(), bank);
}

#[test]
fn decision_table() {
    assert_eq!(decide(5.0, 3.0, 4.0).reason, UpdateReason::BeatsBoth);
    assert_eq!(decide(5.0, 6.0, 4.0).reason, UpdateReason::LosesToStudent);
    assert_eq!(decide(5.0, 3.0, 6.0).reason, UpdateReason::LosesToBank);
    assert_eq!(decide(5.0, 5.0, 4.0).reason, UpdateReason::Ties);
    assert!(decide(2.0, 1.0, f64::NEG_INFINITY).admitted);
    assert!(!decide(5.0, 5.0, f64::NEG_INFINITY).admitted);
}

#[test]
fn update_sequence() {
    let s = probe();
    let mut bank = ReliableBank::new();
    let d = bank.update("a", &img(0.2), &img(0.1), &s, 1).unwrap();
    assert!(d.admitted && d.z_b == f64::NEG_INFINITY);
    let (label, score) = bank.get("a").unwrap();
    assert_eq!(*label, img(0.2).quantized(LABEL_LEVELS));
    assert_eq!(score, s.score(label).unwrap());

    let d = bank.update("a", &img(0.5), &img(0.6), &s, 2).unwrap();
    assert_eq!(d.reason, UpdateReason::LosesToStudent);
    assert_eq!(bank.entry("a").unwrap().updated_at_step, 1);

    let stored = bank.get("a").unwrap().0.clone();
    assert_eq!(bank.update("a", &stored, &img(0.0), &s, 3).unwrap().reason, UpdateReason::Ties);

    assert!(bank.update("b", &img(0.9), &img(0.0), &s, 4).unwrap().admitted);
    assert_eq!(bank.entry("a").unwrap().label, stored);
}

#[test]
fn scorer_failure_leaves_bank_unchanged() {
    let mut bank = ReliableBank::new();
    bank.update("a", &img(0.3), &img(0.1), &probe(), 0).unwrap();
    let before = bank.clone();
    let failing = FnScorer::new("bad", true, |_: &Image| Err(tidewater::iqa::IqaError::UnparseableScore("x".into())));
    assert!(matches!(bank.update("a", &img(0.9), &img(0.1), &failing, 1), Err(BankError::ScorerFailure(_))));
    assert_eq!(bank, before);
}

#[test]
fn changed_scorer_rescores_stored_label() {
    let mut bank = ReliableBank::new();
    bank.update("a", &img(0.3), &img(0.1), &probe(), 0).unwrap();
    let inverse = FnScorer::new("inverse", true, |x: &Image| Ok(-x.data()[0]));
    let old = bank.get("a").unwrap().0.data()[0];
    let d = bank.update("a", &img(0.5), &img(0.9), &inverse, 1).unwrap();
    assert_eq!(d.z_b, -old);
    assert_eq!(d.reason, UpdateReason::LosesToBank);
    let e = bank.entry("a").unwrap();
    assert_eq!((e.score, e.scorer_name.as_str()), (-old, "inverse"));
}

#[test]
fn persist_load_and_integrity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bank = ReliableBank::new();
    for i in 0..5 {
        let t = Image::new(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap();
        bank.update(&format!("sample/{i}.png"), &t, &img(0.0), &probe(), i).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let bdir = dir.path().join("bank");
    bank.persist(&bdir).unwrap();
    let back = ReliableBank::load(&bdir).unwrap();
    assert_eq!(back, bank);

    let mut smaller = ReliableBank::new();
    smaller.update("only", &img(0.7), &img(0.1), &probe(), 9).unwrap();
    smaller.persist(&bdir).unwrap();
    assert_eq!(ReliableBank::load(&bdir).unwrap(), smaller);
    assert_eq!(fs::read_dir(&bdir).unwrap().count(), 2);

    let victim = fs::read_dir(&bdir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .unwrap();
    fs::remove_file(victim).unwrap();
    match ReliableBank::load(&bdir) {
        Err(BankError::CorruptIndex(msg)) => assert!(msg.contains("only")),
        other => panic!("expected CorruptIndex, got {other:?}"),
    }
}

/// Brute-force prefix-max replay against the bank on random score streams.
#[test]
fn prefix_max_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let mut bank = ReliableBank::new();
        let mut best = f64::NEG_INFINITY;
        for step in 0..50 {
            let z_t: f64 = (rng.gen_range(0..1000) as f64) / 100.0;
            let z_s: f64 = (rng.gen_range(0..1000) as f64) / 100.0;
            let label = img(z_t / 10.0);
            let d = bank.update_scored("x", &label, z_t, z_s, "table", step).unwrap();
            if z_t > z_s && z_t > best {
                best = z_t;
            }
            assert_eq!(d.admitted, bank.entry("x").map(|e| e.updated_at_step) == Some(step));
            assert_eq!(bank.get("x").map_or(f64::NEG_INFINITY, |e| e.1), best);
        }
    }
}
