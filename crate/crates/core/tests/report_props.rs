use fairlm::report::{
    correlation, debias_delta_stats, fixture_records, parse_records, size_bias_summary, verify_fixture_arithmetic,
    ModelRecord, SizeBiasSummary, Transform,
};
use fairlm::Error;
use proptest::prelude::*;

fn distinct_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.1f64..100.0, 0.1f64..100.0), 3..20).prop_filter("needs spread", |pts| {
        let spread = |f: fn(&(f64, f64)) -> f64| {
            let (lo, hi) = pts.iter().map(f).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            hi - lo > 1e-3
        };
        spread(|p| p.0) && spread(|p| p.1)
    })
}

proptest! {
    #[test]
    fn coefficients_stay_in_range(pts in distinct_points()) {
        for t in [Transform::Linear, Transform::LogLog] {
            let c = correlation(&pts, t).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c.pearson));
            prop_assert!((-1.0..=1.0).contains(&c.spearman));
            prop_assert_eq!(c.n, pts.len());
        }
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(pts in distinct_points(), a in 0.01f64..50.0, b in -100.0f64..100.0, c in 0.01f64..50.0, d in -100.0f64..100.0) {
        let base = correlation(&pts, Transform::Linear).unwrap();
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (a * x + b, c * y + d)).collect();
        let m = correlation(&moved, Transform::Linear).unwrap();
        prop_assert!((base.pearson - m.pearson).abs() < 1e-9, "{} vs {}", base.pearson, m.pearson);
        prop_assert!((base.spearman - m.spearman).abs() < 1e-12);
    }

    #[test]
    fn spearman_ignores_monotone_maps(pts in distinct_points()) {
        let base = correlation(&pts, Transform::Linear).unwrap();
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x.powi(3) + x, y.ln())).collect();
        prop_assert!((base.spearman - correlation(&moved, Transform::Linear).unwrap().spearman).abs() < 1e-12);
        let flipped: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, -y.exp())).collect();
        prop_assert!((base.spearman + correlation(&flipped, Transform::Linear).unwrap().spearman).abs() < 1e-12);
    }
}

#[test]
fn perfect_and_reversed_orderings() {
    let line: Vec<(f64, f64)> = (1..=5).map(|x| (x as f64, 2.0 * x as f64)).collect();
    let c = correlation(&line, Transform::Linear).unwrap();
    assert!((c.pearson - 1.0).abs() < 1e-12);
    assert!((c.spearman - 1.0).abs() < 1e-12);
    let rev: Vec<(f64, f64)> = (1..=5).map(|x| (x as f64, (10 - x * x) as f64)).collect();
    assert!((correlation(&rev, Transform::Linear).unwrap().spearman + 1.0).abs() < 1e-12);
}

#[test]
fn correlation_error_kinds() {
    let flat = [(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)];
    assert!(matches!(correlation(&flat, Transform::Linear), Err(Error::Degenerate(_))));
    let neg = [(1.0, 2.0), (-2.0, 3.0), (3.0, 1.0)];
    assert!(matches!(correlation(&neg, Transform::LogLog), Err(Error::Domain(_))));
    assert!(correlation(&neg, Transform::Linear).is_ok());
    assert!(matches!(correlation(&neg[..2], Transform::Linear), Err(Error::Input(_))));
}

#[test]
fn scatter_csv_round_trips_exactly() {
    let recs = fixture_records().unwrap();
    let s = size_bias_summary(&recs, &["all", "gender", "race"]).unwrap();
    let back = SizeBiasSummary::parse_csv(&s.to_csv()).unwrap();
    assert_eq!(back, s.points);
    assert!(s.points.iter().all(|p| p.param_count > 0));
}

#[test]
fn svg_is_self_contained() {
    let recs: Vec<ModelRecord> = fixture_records().unwrap().into_iter().filter(|r| r.family == "OPT").collect();
    let svg = size_bias_summary(&recs, &["all"]).unwrap().to_svg();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("http://") || svg.contains("http://www.w3.org/2000/svg"));
    assert_eq!(svg.matches("<circle").count(), 2 * 5);
}

#[test]
fn llama_family_carries_small_n_note() {
    let recs: Vec<ModelRecord> = fixture_records().unwrap().into_iter().filter(|r| r.family == "LLaMA").collect();
    let s = size_bias_summary(&recs, &["all"]).unwrap();
    let sizes: Vec<u64> = s.points.iter().map(|p| p.param_count).collect();
    assert_eq!(sizes, [7_000_000_000, 13_000_000_000, 30_000_000_000]);
    assert_eq!(s.correlations[0].note.as_deref(), Some("n = 3 too small for significance"));
    let opt: Vec<ModelRecord> = fixture_records().unwrap().into_iter().filter(|r| r.family == "OPT").collect();
    assert!(size_bias_summary(&opt, &["all"]).unwrap().correlations[0].note.is_some());
}

#[test]
fn corrupted_icat_is_flagged_and_clean_rows_pass() {
    let text = fairlm::report::FIXTURE.replace("\"icat\": 63.17", "\"icat\": 64.17");
    let recs = parse_records(&text, "corrupt").unwrap();
    let check = verify_fixture_arithmetic(&recs);
    let fails = check.failures();
    assert_eq!(fails.len(), 1);
    assert_eq!((fails[0].model.as_str(), fails[0].domain.as_str()), ("LLaMA 7b", "all"));
    assert_eq!(check.rows.len() - 1, check.rows.iter().filter(|r| r.pass).count());
}

#[test]
fn deltas_need_a_pair() {
    let base: Vec<ModelRecord> = fixture_records().unwrap().into_iter().filter(|r| !r.debiased).collect();
    assert!(matches!(debias_delta_stats(&base), Err(Error::Input(_))));
}

#[test]
fn single_pair_reports_its_drop() {
    let recs: Vec<ModelRecord> = fixture_records()
        .unwrap()
        .into_iter()
        .filter(|r| r.name == "OPT 350m" || r.name == "Debias OPT 350m")
        .collect();
    let stats = debias_delta_stats(&recs).unwrap();
    for d in &stats.domains {
        assert!(d.single_pair);
        assert_eq!(d.std, 0.0);
        assert_eq!(d.mean, d.drops[0].2);
    }
    let gender = stats.domains.iter().find(|d| d.domain == "gender").unwrap();
    assert!((gender.mean - (recs[0].metrics["gender"].ss - recs[1].metrics["gender"].ss)).abs() < 1e-12);
}

#[test]
fn gender_drops_match_table_differences() {
    let stats = debias_delta_stats(&fixture_records().unwrap()).unwrap();
    let gender = stats.domains.iter().find(|d| d.domain == "gender").unwrap();
    let bases: Vec<&str> = gender.drops.iter().map(|d| d.0.as_str()).collect();
    assert_eq!(bases.len(), 4);
    for b in ["LLaMA 7b", "OPT 350m", "OPT 1.3b", "OPT 2.7b"] {
        assert!(bases.contains(&b), "{b} missing");
    }
    assert!((gender.mean - 0.98).abs() <= 0.01);
    assert!((gender.std - 0.34).abs() <= 0.01);
}
