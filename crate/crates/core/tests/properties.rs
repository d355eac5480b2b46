//! Property tests: parser round-trips, shortening structure, the deviation
//! formula against an independent oracle, unit-normalization idempotence,
//! and metric invariants.

use proptest::prelude::*;

use gscreen_core::deviation::{compute_deviation, Direction};
use gscreen_core::eval::{compute_metrics, SampleStratum};
use gscreen_core::gcode::{parse_gcode, shorten_gcode, ShorteningPolicy};
use gscreen_core::label::Label;
use gscreen_core::schema::{
    normalize_units, score_extraction, CriticalSet, ExtractedParameters, Measurement,
    ParameterKey, Tolerance, ToleranceSpec,
};

/// Independently coded three-branch reference for the deviation formula.
fn deviation_oracle(v: f64, lo: f64, hi: f64) -> (f64, Option<f64>, Direction) {
    let width = hi - lo;
    let norm = |d: f64| if width > 0.0 { Some(d / width) } else { None };
    if v < lo {
        (lo - v, norm(lo - v), Direction::Below)
    } else if v > hi {
        (v - hi, norm(v - hi), Direction::Above)
    } else {
        (0.0, norm(0.0), Direction::InRange)
    }
}

fn sorted_pair() -> impl Strategy<Value = (f64, f64)> {
    (-1.0e6_f64..1.0e6, -1.0e6_f64..1.0e6).prop_map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
}

proptest! {
    #[test]
    fn deviation_matches_oracle_exactly(v in -1.0e6_f64..1.0e6, bounds in sorted_pair()) {
        let (lo, hi) = bounds;
        let (d, n, dir) = compute_deviation(v, lo, hi).unwrap();
        let (od, on, odir) = deviation_oracle(v, lo, hi);
        prop_assert_eq!(d, od);
        prop_assert_eq!(n, on);
        prop_assert_eq!(dir, odir);
    }

    #[test]
    fn deviation_endpoints_are_in_range(bounds in sorted_pair()) {
        let (lo, hi) = bounds;
        for v in [lo, hi] {
            let (d, _, dir) = compute_deviation(v, lo, hi).unwrap();
            prop_assert_eq!(d, 0.0);
            prop_assert_eq!(dir, Direction::InRange);
        }
    }

    /// Integer-valued inputs keep float arithmetic exact, so shift
    /// invariance holds bitwise.
    #[test]
    fn deviation_shift_invariance(
        v in -100_000i64..100_000,
        lo in -100_000i64..100_000,
        span in 0i64..50_000,
        shift in -100_000i64..100_000,
    ) {
        let (v, lo, hi, c) = (v as f64, lo as f64, (lo + span) as f64, shift as f64);
        let (d0, _, dir0) = compute_deviation(v, lo, hi).unwrap();
        let (d1, _, dir1) = compute_deviation(v + c, lo + c, hi + c).unwrap();
        prop_assert_eq!(d0, d1);
        prop_assert_eq!(dir0, dir1);
    }

    /// Powers of two scale exactly in binary floating point.
    #[test]
    fn deviation_scale_covariance(
        v in -100_000i64..100_000,
        lo in -100_000i64..100_000,
        span in 0i64..50_000,
        exp in 0u32..8,
    ) {
        let s = f64::from(2u32.pow(exp));
        let (v, lo, hi) = (v as f64, lo as f64, (lo + span) as f64);
        let (d0, n0, dir0) = compute_deviation(v, lo, hi).unwrap();
        let (d1, n1, dir1) = compute_deviation(v * s, lo * s, hi * s).unwrap();
        prop_assert_eq!(d1, d0 * s);
        prop_assert_eq!(n1, n0);
        prop_assert_eq!(dir1, dir0);
    }

    #[test]
    fn parse_rejoin_round_trips_arbitrary_text(text in ".{0,400}") {
        prop_assert_eq!(parse_gcode(&text).rejoin(), text);
    }

    #[test]
    fn parse_rejoin_round_trips_gcode_like_text(
        lines in prop::collection::vec(
            prop_oneof![
                Just("G1 X10 Y5 E0.4 F1200".to_string()),
                Just("; a comment".to_string()),
                Just("; layer_height = 0.2".to_string()),
                Just(";LAYER_CHANGE".to_string()),
                Just("".to_string()),
                Just("M104 S215".to_string()),
                "[a-zA-Z0-9 ;=.]{0,30}",
            ],
            0..60,
        ),
        trailing_newline in any::<bool>(),
    ) {
        let mut text = lines.join("\n");
        if trailing_newline && !text.is_empty() {
            text.push('\n');
        }
        prop_assert_eq!(parse_gcode(&text).rejoin(), text);
    }
}

fn layered_fixture(layers: usize, lines_per_layer: usize) -> String {
    let mut text = String::from("; CONFIG_BLOCK_START\n; layer_height = 0.2\n; CONFIG_BLOCK_END\nG28\nM109 S215\n");
    for layer in 1..=layers {
        text.push_str(";LAYER_CHANGE\n");
        for line in 0..lines_per_layer {
            text.push_str(&format!("G1 X{layer} Y{line} E1\n"));
        }
    }
    text.push_str("M84\n");
    text
}

proptest! {
    #[test]
    fn shortening_is_monotone_and_order_preserving(
        layers in 0usize..12,
        lines_per_layer in 1usize..5,
        head_layers in 0usize..5,
    ) {
        let text = layered_fixture(layers, lines_per_layer);
        let doc = parse_gcode(&text);
        let policy = ShorteningPolicy { head_layers, ..Default::default() };
        let short = shorten_gcode(&doc, &policy);

        prop_assert!(short.kept_line_count <= short.original_line_count);
        let fully_kept = short.kept_line_count == short.original_line_count;
        prop_assert_eq!(fully_kept, !short.text.contains("; [elided"));

        let mut prev_end: Option<usize> = None;
        let mut total = 0usize;
        for span in &short.kept_spans {
            prop_assert!(span.start <= span.end);
            if let Some(prev) = prev_end {
                prop_assert!(span.start > prev, "spans must stay in source order");
            }
            prev_end = Some(span.end);
            total += span.end - span.start + 1;
        }
        prop_assert_eq!(total, short.kept_line_count);
        prop_assert_eq!(short.degraded, layers == 0);
    }

    /// With the default policy, layers strictly between the third and the
    /// last contribute nothing.
    #[test]
    fn middle_layers_are_fully_elided(layers in 5usize..12, lines_per_layer in 1usize..4) {
        let text = layered_fixture(layers, lines_per_layer);
        let doc = parse_gcode(&text);
        let short = shorten_gcode(&doc, &ShorteningPolicy::default());
        for layer in 4..layers {
            prop_assert!(
                !short.text.contains(&format!("G1 X{layer} ")),
                "layer {layer} of {layers} leaked into the shortened text"
            );
        }
        for layer in [1, 2, 3, layers] {
            let needle = format!("G1 X{layer} ");
            prop_assert!(short.text.contains(&needle), "missing kept layer {}", layer);
        }
    }
}

const UNIT_POOL: [&str; 8] = ["C", "mm", "um", "mm/s", "mm/min", "%", "factor", "duty255"];

proptest! {
    #[test]
    fn normalize_units_is_idempotent(
        assignments in prop::collection::vec((0usize..18, 0usize..8, 1.0f64..5000.0), 0..18),
    ) {
        let mut raw = ExtractedParameters::empty("prop");
        for (key_idx, unit_idx, value) in assignments {
            raw.set(
                ParameterKey::ALL[key_idx],
                Measurement::with_unit(value, UNIT_POOL[unit_idx]),
            );
        }
        let once = normalize_units(&raw);
        let twice = normalize_units(&once);
        prop_assert_eq!(&once, &twice);
        // Everything left non-null is unit-free after one pass.
        for value in once.values.values().flatten() {
            prop_assert!(value.unit.is_none());
        }
    }

    /// Accuracy is exactly permutation-invariant; MAPE up to summation
    /// order.
    #[test]
    fn scoring_is_permutation_invariant(seed in 0u64..1000) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut truth = ExtractedParameters::empty("t");
        let mut pred = ExtractedParameters::empty("p");
        for (i, key) in ParameterKey::ALL.iter().enumerate() {
            truth.set(*key, Measurement::canonical(100.0 + i as f64));
            pred.set(*key, Measurement::canonical(100.0 + i as f64 * 1.07));
        }
        let tol = ToleranceSpec::default();
        let critical = CriticalSet::default();
        let base = score_extraction(&pred, &truth, &tol, &critical).unwrap();
        let mut cells = base.cells.clone();
        cells.shuffle(&mut rng);
        let shuffled = gscreen_core::schema::aggregate_cells(&cells, &critical);
        prop_assert_eq!(shuffled.overall_accuracy, base.overall_accuracy);
        let (a, b) = (shuffled.overall_mape.unwrap(), base.overall_mape.unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }

    /// Scaling one key's pred and truth by a power of two preserves the
    /// relative-tolerance verdict and the MAPE contribution exactly.
    #[test]
    fn relative_tolerance_is_scale_invariant(
        truth_v in 1i64..100_000,
        delta in -2_000i64..2_000,
        exp in 0u32..10,
    ) {
        let s = f64::from(2u32.pow(exp));
        let key = ParameterKey::NozzleTemperature;
        let tol = ToleranceSpec {
            per_key: [(key, Tolerance { relative: 0.02, absolute: 0.0 })].into_iter().collect(),
        };
        let critical = CriticalSet::default();
        let score_at = |scale: f64| {
            let mut truth = ExtractedParameters::empty("t");
            truth.set(key, Measurement::canonical(truth_v as f64 * scale));
            let mut pred = ExtractedParameters::empty("p");
            pred.set(key, Measurement::canonical((truth_v + delta) as f64 * scale));
            score_extraction(&pred, &truth, &tol, &critical).unwrap()
        };
        let base = score_at(1.0);
        let scaled = score_at(s);
        prop_assert_eq!(base.cells[0].within_tolerance, scaled.cells[0].within_tolerance);
        prop_assert_eq!(base.cells[0].mape_contribution, scaled.cells[0].mape_contribution);
    }
}

fn random_pairs(seed: u64, n: usize) -> (Vec<(Label, Label)>, Vec<SampleStratum>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let pairs: Vec<(Label, Label)> = (0..n)
        .map(|_| {
            (
                Label::ALL[rng.random_range(0..5)],
                Label::ALL[rng.random_range(0..5)],
            )
        })
        .collect();
    let strata: Vec<SampleStratum> = (0..n)
        .map(|_| SampleStratum {
            printer: ["MK4S", "BMP1"][rng.random_range(0..2)].to_string(),
            material: ["PLA", "ABS"][rng.random_range(0..2)].to_string(),
        })
        .collect();
    (pairs, strata)
}

proptest! {
    #[test]
    fn macro_f1_is_invariant_under_class_relabeling(seed in 0u64..500, n in 2usize..120) {
        use rand::{seq::SliceRandom, SeedableRng};
        let (pairs, strata) = random_pairs(seed, n);
        let base = compute_metrics(&pairs, &strata).unwrap();

        let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0xABCD);
        let mut permutation: Vec<Label> = Label::ALL.to_vec();
        permutation.shuffle(&mut rng);
        let relabeled: Vec<(Label, Label)> = pairs
            .iter()
            .map(|(t, p)| (permutation[t.index()], permutation[p.index()]))
            .collect();
        let relabeled_report = compute_metrics(&relabeled, &strata).unwrap();

        prop_assert!((base.macro_f1 - relabeled_report.macro_f1).abs() < 1e-12);
        prop_assert_eq!(base.accuracy, relabeled_report.accuracy);
    }

    #[test]
    fn trace_over_total_equals_accuracy_and_strata_weight_sum(seed in 0u64..500, n in 1usize..150) {
        let (pairs, strata) = random_pairs(seed, n);
        let report = compute_metrics(&pairs, &strata).unwrap();
        let cm = &report.confusion;
        prop_assert_eq!(cm.trace() as f64 / cm.total() as f64, report.accuracy);
        for prefix in ["printer:", "material:", "combo:"] {
            let (correct, total) = report
                .strata
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .fold((0u64, 0u64), |acc, (_, s)| (acc.0 + s.correct, acc.1 + s.total));
            prop_assert_eq!(total as usize, n);
            prop_assert!((correct as f64 / total as f64 - report.accuracy).abs() < 1e-12);
        }
    }
}
