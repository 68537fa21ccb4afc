use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidewater::eval::{
    degrade, evaluate_full_reference, evaluate_non_reference, make_synth, psnr, read_manifest, ssim, EvalError,
    FrReport, Identity, NrReport, SynthOptions, SyntheticDegradation, MANIFEST_FILE, PSNR_CAP, SSIM_K1,
};
use tidewater::imaging::Image;
use tidewater::iqa::{FnScorer, IqaError, QualityScorer, Uiqm};
use tidewater::plot::{plot_reliability, plot_training_log};

fn pattern_a(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |c, y, x| ((y * 7 + x * 13 + c * 5) % 17) as f64 / 16.0).unwrap()
}

fn pattern_b(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |c, y, x| ((y * 3 + x * 11 + c * 2) % 19) as f64 / 18.0).unwrap()
}

fn random(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
    Image::new(h, w, data).unwrap()
}

#[test]
fn psnr_values() {
    let a = Image::filled(8, 8, [0.3, 0.5, 0.7]).unwrap();
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = Image::filled(8, 8, [0.4, 0.6, 0.8]).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let zero = Image::filled(8, 8, [0.0; 3]).unwrap();
    let one = Image::filled(8, 8, [1.0; 3]).unwrap();
    assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
    assert!(matches!(psnr(&a, &Image::filled(8, 9, [0.0; 3]).unwrap()), Err(EvalError::DimensionMismatch(..))));
}

#[test]
fn psnr_symmetric_and_offset_invariant() {
    let a = random(12, 12, 1).map(|v| 0.8 * v);
    let b = random(12, 12, 2).map(|v| 0.8 * v);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    let shifted = psnr(&a.map(|v| v + 0.125), &b.map(|v| v + 0.125)).unwrap();
    assert!((shifted - psnr(&a, &b).unwrap()).abs() < 1e-12);
    // Independent oracle value for the two integer patterns.
    assert!((psnr(&pattern_a(16, 16), &pattern_b(16, 16)).unwrap() - 7.331742150624264).abs() < 1e-12);
}

#[test]
fn ssim_matches_oracle() {
    assert!((ssim(&pattern_a(16, 16), &pattern_b(16, 16)).unwrap() - -0.018407159029074666).abs() < 1e-12);
    assert!((ssim(&pattern_a(13, 20), &pattern_b(13, 20)).unwrap() - -0.024519599960966452).abs() < 1e-12);
}

#[test]
fn ssim_identities_and_errors() {
    for seed in 0..5 {
        let a = random(14, 17, seed);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random(14, 17, seed + 100);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((-1.0..=1.0).contains(&ssim(&a, &b).unwrap()));
    }
    let zero = Image::filled(12, 12, [0.0; 3]).unwrap();
    let one = Image::filled(12, 12, [1.0; 3]).unwrap();
    let c1 = SSIM_K1 * SSIM_K1;
    assert!((ssim(&zero, &one).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
    assert!(matches!(ssim(&random(10, 20, 0), &random(10, 20, 1)), Err(EvalError::ImageTooSmall(_))));
    assert!(matches!(ssim(&random(12, 12, 0), &random(12, 13, 1)), Err(EvalError::DimensionMismatch(..))));
}

#[test]
fn degradation_properties() {
    let x = random(16, 16, 3);
    assert_eq!(degrade(&x, &SyntheticDegradation::neutral()).unwrap(), x);

    let white = Image::filled(8, 8, [1.0; 3]).unwrap();
    let cast = SyntheticDegradation { color_cast: [1.0, 0.6, 0.6], ..SyntheticDegradation::neutral() };
    let y = degrade(&white, &cast).unwrap();
    for (c, want) in [1.0, 0.6, 0.6].iter().enumerate() {
        assert!(y.plane(c).iter().all(|v| (v - want).abs() < 1e-15));
    }

    for seed in 0..5 {
        let x = random(16, 16, seed);
        let mut last = f64::INFINITY;
        for h in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9] {
            let d = SyntheticDegradation { haze_strength: h, ..SyntheticDegradation::neutral() };
            let p = psnr(&degrade(&x, &d).unwrap(), &x).unwrap();
            assert!(p < last, "haze {h}: {p} !< {last}");
            last = p;
        }
    }

    let d = SyntheticDegradation::sample(9);
    assert_eq!(d, SyntheticDegradation::sample(9));
    assert_eq!(degrade(&x, &d).unwrap(), degrade(&x, &d).unwrap());
    for bad in [
        SyntheticDegradation { color_cast: [0.0, 1.0, 1.0], ..SyntheticDegradation::neutral() },
        SyntheticDegradation { haze_strength: 1.0, ..SyntheticDegradation::neutral() },
        SyntheticDegradation { blur_sigma: -0.5, ..SyntheticDegradation::neutral() },
    ] {
        assert!(matches!(degrade(&x, &bad), Err(EvalError::InvalidDegradation(_))));
    }
}

#[test]
fn make_synth_is_deterministic_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions { clean_dir: None, n: 6, size: 32, seed: 7 };
    let a = make_synth(&opts, &dir.path().join("a")).unwrap();
    let b = make_synth(&opts, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(read_manifest(&dir.path().join("a").join(MANIFEST_FILE)).unwrap(), a);
    for e in &a {
        assert_eq!(fs::read(dir.path().join("a").join(&e.degraded_path)).unwrap(), fs::read(dir.path().join("b").join(&e.degraded_path)).unwrap());
        let d: SyntheticDegradation = serde_json::from_str(&e.parameters).unwrap();
        d.validate().unwrap();
    }

    // Clean sources are cropped or resized to the requested size.
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    random(40, 50, 1).save_png(&src.join("big.png")).unwrap();
    random(20, 20, 2).save_png(&src.join("small.png")).unwrap();
    let from_files = SynthOptions { clean_dir: Some(src.clone()), n: 3, size: 32, seed: 1 };
    let entries = make_synth(&from_files, &dir.path().join("c")).unwrap();
    assert_eq!(entries.len(), 3);
    let img = tidewater::imaging::load_image(&dir.path().join("c").join(&entries[1].clean_path)).unwrap();
    assert_eq!(img.dims(), (32, 32));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let none = SynthOptions { clean_dir: Some(empty), ..from_files };
    assert!(matches!(make_synth(&none, &dir.path().join("d")), Err(EvalError::EmptyDirectory(_))));
}

#[test]
fn full_reference_report() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    let entries = make_synth(&SynthOptions { clean_dir: None, n: 4, size: 24, seed: 3 }, &pairs).unwrap();
    let report = evaluate_full_reference(&Identity, &pairs).unwrap();
    assert_eq!(report.rows.len(), entries.len());
    let mean = report.rows.iter().map(|r| r.psnr).sum::<f64>() / 4.0;
    assert!((report.mean_psnr - mean).abs() < 1e-9);
    assert!(report.rows.iter().all(|r| r.psnr < PSNR_CAP));

    let csv_path = dir.path().join("fr.csv");
    report.write_csv(&csv_path).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + entries.len() + 1);
    assert_eq!(FrReport::read_csv(&csv_path).unwrap(), report);
    assert_eq!(report.records().len(), 8);

    // Ground truth as input to an identity restorer reaches the cap.
    let gt_pairs = dir.path().join("gt_pairs");
    fs::create_dir_all(gt_pairs.join("degraded")).unwrap();
    fs::create_dir_all(gt_pairs.join("clean")).unwrap();
    for e in &entries {
        let name = e.pair_id.clone();
        fs::copy(pairs.join(&e.clean_path), gt_pairs.join("degraded").join(&name)).unwrap();
        fs::copy(pairs.join(&e.clean_path), gt_pairs.join("clean").join(&name)).unwrap();
    }
    assert_eq!(evaluate_full_reference(&Identity, &gt_pairs).unwrap().mean_psnr, PSNR_CAP);

    fs::remove_file(gt_pairs.join("clean").join(&entries[0].pair_id)).unwrap();
    assert!(matches!(evaluate_full_reference(&Identity, &gt_pairs), Err(EvalError::UnpairedFile(_))));
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("degraded")).unwrap();
    assert!(matches!(evaluate_full_reference(&Identity, &empty), Err(EvalError::EmptyDirectory(_))));
}

#[test]
fn non_reference_report() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    fs::create_dir_all(&imgs).unwrap();
    for (k, v) in [0.2, 0.5, 0.8].iter().enumerate() {
        Image::filled(16, 16, [*v; 3]).unwrap().save_png(&imgs.join(format!("{k}.png"))).unwrap();
    }
    let uiqm = Uiqm;
    let flaky = FnScorer::new("flaky", true, |x: &Image| {
        if x.get(0, 0, 0) > 0.7 {
            Err(IqaError::ProcessFailure("refused".into()))
        } else {
            Ok(x.get(0, 0, 0))
        }
    });
    let scorers: [&dyn QualityScorer; 2] = [&uiqm, &flaky];
    let report = evaluate_non_reference(&Identity, &imgs, &scorers).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.summaries.len(), 2);
    let u = report.summary("uiqm").unwrap();
    assert!(u.restored.unwrap().abs() < 1e-9 && u.input.unwrap().abs() < 1e-9 && u.failures == 0);
    let f = report.summary("flaky").unwrap();
    assert_eq!(f.failures, 1);
    let want = (0.2f64 * 255.0).round() / 255.0 / 2.0 + (0.5f64 * 255.0).round() / 255.0 / 2.0;
    assert!((f.restored.unwrap() - want).abs() < 1e-12);
    assert!(report.rows.iter().any(|r| r.scorer == "flaky" && r.restored.is_none() && !r.error.is_empty()));

    let csv_path = dir.path().join("nr.csv");
    report.write_csv(&csv_path).unwrap();
    assert_eq!(NrReport::read_csv(&csv_path).unwrap(), report);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(matches!(evaluate_non_reference(&Identity, &empty, &scorers), Err(EvalError::EmptyDirectory(_))));
}

#[test]
fn plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let mut text = tidewater::trainer::LOG_HEADER.join(",") + "\n";
    for s in 0..5 {
        text += &format!("{s},0,0.5,0.1,0.2,0.05,0.3,0.01,{},0.001,{s},1\n", 1.0 / (s + 1) as f64);
    }
    fs::write(&log, text).unwrap();
    let png = dir.path().join("log.png");
    plot_training_log(&log, &png).unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!(img.height(), 5 * tidewater::plot::PANEL_HEIGHT);

    let pairs: Vec<(Image, Image)> = (0..3).map(|k| (random(16, 16, k), random(16, 16, k + 10))).collect();
    let report = tidewater::iqa::monotonicity_reliability(&Uiqm, &pairs, &tidewater::iqa::default_alpha_grid()).unwrap();
    let rpng = dir.path().join("rel.png");
    plot_reliability(&report, &rpng).unwrap();
    assert!(image::open(&rpng).is_ok());
}
