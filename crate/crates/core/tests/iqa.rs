mod registry {
    use std::time::Duration;
    use tidewater::imaging::Image;

    use tidewater::iqa::*;

    #[test]
    fn registry_resolves_names() {
        let t = Duration::from_secs(1);
        assert_eq!(scorer_by_name("uiqm", t).unwrap().name(), "uiqm");
        assert_eq!(scorer_by_name("uciqe", t).unwrap().name(), "uciqe");
        assert!(scorer_by_name("external:echo 1 {input}", t).is_ok());
        assert!(matches!(scorer_by_name("musiq", t), Err(IqaError::UnknownScorer(_))));
    }

    #[test]
    fn analytic_scores_are_pure() {
        let a = Image::from_fn(16, 16, |c, y, x| ((x * 3 + y * 5 + c * 7) % 11) as f64 / 10.0).unwrap();
        let b = Image::from_fn(16, 16, |c, y, x| ((x + 2 * y + c) % 5) as f64 / 4.0).unwrap();
        let first = (uiqm(&a), uciqe(&a));
        for _ in 0..5 {
            uiqm(&b);
            uciqe(&b);
        }
        let again = (uiqm(&a), uciqe(&a));
        assert_eq!(first.0.to_bits(), again.0.to_bits());
        assert_eq!(first.1.to_bits(), again.1.to_bits());
    }
}

mod external {

    use std::time::Duration;
    use tidewater::imaging::Image;
    use tidewater::iqa::{IqaError, QualityScorer};

    use tidewater::iqa::*;

    fn img() -> Image {
        Image::filled(8, 8, [0.2, 0.4, 0.6]).unwrap()
    }

    fn scorer(cmd: &str) -> ExternalScorer {
        ExternalScorer::new("ext", cmd, Duration::from_secs(10)).unwrap()
    }

    #[test]
    fn passthrough_value() {
        assert_eq!(scorer("echo 7.5 # {input}").score(&img()).unwrap(), 7.5);
    }

    #[test]
    fn sees_the_written_image() {
        let s = scorer("test -s {input} && echo 1 || echo 0");
        assert_eq!(s.score(&img()).unwrap(), 1.0);
    }

    #[test]
    fn error_contracts() {
        assert!(matches!(scorer("exit 3 # {input}").score(&img()), Err(IqaError::ProcessFailure(_))));
        assert!(matches!(scorer("echo abc # {input}").score(&img()), Err(IqaError::UnparseableScore(_))));
        assert!(matches!(ExternalScorer::new("x", "echo 1", DEFAULT_TIMEOUT), Err(IqaError::MissingPlaceholder)));
        let slow = ExternalScorer::new("slow", "sleep 5 # {input}", Duration::from_millis(100)).unwrap();
        assert!(matches!(slow.score(&img()), Err(IqaError::Timeout(_))));
    }
}

mod reliability {

    use tidewater::imaging::Image;
    use tidewater::iqa::IqaError;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tidewater::iqa::FnScorer;
    use tidewater::iqa::*;

    fn pairs(n: usize, seed: u64) -> Vec<(Image, Image)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut img = || Image::new(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap();
                (img(), img())
            })
            .collect()
    }

    #[test]
    fn oracle_scorer_is_fully_reliable() {
        let ps = pairs(20, 1);
        let clean: Vec<Image> = ps.iter().map(|p| p.1.clone()).collect();
        let report = monotonicity_reliability_with("oracle", &ps, &default_alpha_grid(), |i, z| {
            Ok(-z.data().iter().zip(clean[i].data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 192.0)
        })
        .unwrap();
        assert_eq!(report.reliability, 1.0);
    }

    #[test]
    fn constant_scorer_is_never_reliable() {
        let s = FnScorer::new("const", true, |_| Ok(3.0));
        assert_eq!(monotonicity_reliability(&s, &pairs(10, 2), &default_alpha_grid()).unwrap().reliability, 0.0);
    }

    #[test]
    fn identical_pairs_score_zero_for_any_scorer() {
        let ps: Vec<(Image, Image)> = pairs(5, 3).into_iter().map(|(x, _)| (x.clone(), x)).collect();
        let r = monotonicity_reliability(&tidewater::iqa::Uiqm, &ps, &default_alpha_grid()).unwrap();
        assert_eq!(r.reliability, 0.0);
    }

    #[test]
    fn reliability_counts_monotone_pairs_exactly() {
        let ps = pairs(30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let mut k = 0;
        let report = monotonicity_reliability_with("table", &ps, &default_alpha_grid(), |_, _| {
            k += 1;
            // Every third pair gets a strictly decreasing sequence.
            let (p, i) = ((k - 1) / 10, (k - 1) % 10);
            Ok(if p % 3 == 0 { -(i as f64) } else { table[k - 1] })
        })
        .unwrap();
        let brute = report.scores.iter().filter(|s| (1..s.len()).all(|i| s[i - 1] > s[i])).count();
        assert_eq!(report.reliability, brute as f64 / 30.0);
        assert!(report.reliability >= 10.0 / 30.0);
    }

    #[test]
    fn errors() {
        let s = FnScorer::new("c", true, |_| Ok(1.0));
        assert!(matches!(monotonicity_reliability(&s, &[], &default_alpha_grid()), Err(IqaError::EmptyCorpus)));
        let bad = vec![(Image::filled(8, 8, [0.0; 3]).unwrap(), Image::filled(8, 9, [0.0; 3]).unwrap())];
        assert!(matches!(
            monotonicity_reliability(&s, &bad, &default_alpha_grid()),
            Err(IqaError::DimensionMismatch(_))
        ));
        assert!(monotonicity_reliability(&s, &pairs(1, 0), &[0.5, 0.4]).is_err());
        assert!(monotonicity_reliability(&s, &pairs(1, 0), &[0.0, 0.4]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ps = pairs(4, 6);
        let r = monotonicity_reliability(&tidewater::iqa::Uciqe, &ps, &default_alpha_grid()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4 + 2);
        assert!(text.starts_with("pair_id,s_1,"));
        let back = ReliabilityReport::read_csv(&buf[..], "uciqe", &default_alpha_grid()).unwrap();
        assert_eq!(back, r);
    }
}

mod uciqe {
    use tidewater::imaging::Image;

    use tidewater::iqa::*;

    fn two_tone() -> Image {
        Image::from_fn(8, 8, |c, _, x| if x < 4 { [0.8, 0.4, 0.2][c] } else { [0.1, 0.5, 0.7][c] }).unwrap()
    }

    #[test]
    fn constant_gray_scores_zero() {
        for v in [0.0, 0.2, 0.5, 1.0] {
            assert!(uciqe(&Image::filled(8, 8, [v; 3]).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn stretching_contrast_does_not_lower_contrast_term() {
        let x = Image::from_fn(16, 16, |c, y, x| 0.3 + 0.4 * (((x * 3 + y * 7 + c) % 9) as f64 / 8.0)).unwrap();
        let base = uciqe_components(&x).luminance_contrast;
        for k in [1.2, 1.5, 2.0, 3.0] {
            let y = x.map(|v| 0.5 + k * (v - 0.5));
            assert!(uciqe_components(&y).luminance_contrast >= base);
        }
    }

    #[test]
    fn frozen_oracle_value() {
        // tools/oracles/iqa_oracle.py
        let c = uciqe_components(&two_tone());
        assert!((c.chroma_std - ORACLE_CHROMA_STD).abs() < 1e-12, "{:e}", c.chroma_std);
        assert!((c.luminance_contrast - ORACLE_CONTRAST).abs() < 1e-12, "{:e}", c.luminance_contrast);
        assert!((c.mean_saturation - ORACLE_SATURATION).abs() < 1e-12, "{:e}", c.mean_saturation);
        assert!((uciqe(&two_tone()) - ORACLE_UCIQE).abs() < 1e-12);
    }

    const ORACLE_CHROMA_STD: f64 = 0.11601087841559868;
    const ORACLE_CONTRAST: f64 = 0.042421858160931136;
    const ORACLE_SATURATION: f64 = 0.8964146366948806;
    const ORACLE_UCIQE: f64 = 0.296854301576277;
}

mod uiqm {
    use tidewater::imaging::Image;

    use tidewater::iqa::*;

    /// Fixed 8×8 regression image shared with the reference script in `tools/oracles`.
    pub(crate) fn oracle_image() -> Image {
        Image::from_fn(8, 8, |c, y, x| (1 + (x * 7 + y * 13 + c * 29) % 17) as f64 / 20.0).unwrap()
    }

    #[test]
    fn constant_gray_scores_zero() {
        for v in [0.0, 0.3, 1.0] {
            let c = uiqm_components(&Image::filled(16, 16, [v; 3]).unwrap());
            assert_eq!((c.uicm, c.uism, c.uiconm), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn grayscale_has_no_colorfulness() {
        let g = Image::from_fn(16, 16, |_, y, x| ((x * 5 + y * 3) % 7) as f64 / 6.0).unwrap();
        assert_eq!(uiqm_components(&g).uicm, 0.0);
    }

    #[test]
    fn constant_colored_image_only_has_mean_cast() {
        let c = uiqm_components(&Image::filled(8, 8, [1.0, 0.0, 0.0]).unwrap());
        let (rg, yb) = (255.0f64, 127.5f64);
        assert!((c.uicm - (-0.0268 * (rg * rg + yb * yb).sqrt())).abs() < 1e-9);
        assert_eq!((c.uism, c.uiconm), (0.0, 0.0));
    }

    #[test]
    fn frozen_oracle_values() {
        // tools/oracles/iqa_oracle.py
        let c = uiqm_components(&oracle_image());
        assert_eq!(c.uicm.to_bits(), ORACLE_UICM.to_bits(), "uicm {:e}", c.uicm);
        assert_eq!(c.uism.to_bits(), ORACLE_UISM.to_bits(), "uism {:e}", c.uism);
        assert_eq!(c.uiconm.to_bits(), ORACLE_UICONM.to_bits(), "uiconm {:e}", c.uiconm);
        assert_eq!(uiqm(&oracle_image()).to_bits(), ORACLE_UIQM.to_bits());
    }

    const ORACLE_UICM: f64 = 21.09493101403742;
    const ORACLE_UISM: f64 = 7.787830444021251;
    const ORACLE_UICONM: f64 = 0.10469603169456311;
    const ORACLE_UIQM: f64 = 3.2689431068329022;
}
