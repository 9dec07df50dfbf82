use finsler_core::classify::{classify_entry, Verdict, DEFAULT_SEED, DEFAULT_SITES, DEFAULT_TOLERANCE};
use finsler_core::library::{builtin, builtin_names};

#[test]
fn library_verdicts_match_expected_flags() {
    let mut mismatches = Vec::new();
    for name in builtin_names() {
        let entry = builtin(name).unwrap();
        let report = classify_entry(&entry, DEFAULT_SEED, DEFAULT_SITES, DEFAULT_TOLERANCE).unwrap();
        assert!(report.sampling_error.is_none(), "{name}: {:?}", report.sampling_error);
        for p in &report.predicates {
            eprintln!("{name:<18} {:<24} {:<12} {:.3e}", p.name, p.verdict, p.max_residual);
        }
        for (pred, want) in &entry.expected {
            let got = report.verdict(pred).unwrap();
            if got != *want {
                mismatches.push(format!("{name}.{pred}: expected {want}, got {got}"));
            }
        }
        for a in report.violated_audits() {
            mismatches.push(format!("{name}: audit {} violated", a.name));
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:#?}");
}

#[test]
fn s_scalar_matches_dual_flatness_everywhere() {
    for name in builtin_names() {
        let report = classify_entry(&builtin(name).unwrap(), 7, 10, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(
            report.verdict("s_scalar_exists"),
            report.verdict("dually_flat"),
            "{name}"
        );
        if report.verdict("h_berwald") == Some(Verdict::Holds) {
            assert_eq!(report.verdict("h_landsberg"), Some(Verdict::Holds), "{name}");
        }
    }
}
