use deepblur_core::generator::{make_identity_dataset, BlobGeneratorConfig};
use deepblur_core::obfuscation::{DeepBlurSettings, ObfuscatorSpec};
use deepblur_core::threat::{HarnessConfig, ThreatHarness, ThreatModel, ThreatReport, STANDARD_SIGMAS};

const CLEAN_MIN: f64 = 0.9;
const AVERAGE_T1_MAX: f64 = 0.2;

fn standard_reports() -> Vec<(String, Vec<ThreatReport>)> {
    let ds = make_identity_dataset(10, 10, 0.05, 7, &BlobGeneratorConfig::default()).unwrap();
    let harness = ThreatHarness::new(&ds, HarnessConfig::default()).unwrap();
    let settings = DeepBlurSettings::default();
    let mut specs = vec![("identity".to_string(), ObfuscatorSpec::Identity)];
    for sigma in STANDARD_SIGMAS {
        specs.push((
            format!("sigma={sigma}"),
            ObfuscatorSpec::deep_blur(sigma, settings.clone()).unwrap(),
        ));
    }
    specs.push((
        "average".to_string(),
        ObfuscatorSpec::deep_blur_average(settings).unwrap(),
    ));
    specs
        .into_iter()
        .map(|(name, spec)| {
            let reps = ThreatModel::ALL
                .iter()
                .map(|&t| harness.run(&spec, t).unwrap())
                .collect();
            (name, reps)
        })
        .collect()
}

#[test]
fn standard_suite_invariants() {
    let rows = standard_reports();
    for (name, reps) in &rows {
        for r in reps {
            assert!(r.top5 >= r.top1, "{name} {}: top5 {} < top1 {}", r.threat, r.top5, r.top1);
        }
    }

    let identity = &rows[0].1;
    for r in identity {
        assert!(r.top1 >= CLEAN_MIN, "clean {} top1 {}", r.threat, r.top1);
    }

    let average = &rows.last().unwrap().1;
    assert!(average[0].top1 <= AVERAGE_T1_MAX, "average T1 top1 {}", average[0].top1);

    // sigma 0, 0.5, 1, then average
    let ladder = &rows[1..];
    for (i, t) in ThreatModel::ALL.iter().enumerate() {
        let acc: Vec<f64> = ladder.iter().map(|(_, reps)| reps[i].top1).collect();
        let held = acc.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(held >= 2, "{t}: accuracies {acc:?} non-increasing in only {held} of 3 steps");
    }

    let again = standard_reports();
    assert_eq!(rows, again);
}
