use proptest::prelude::*;

use specpipe::perf::{
    expected_tbt_general, expected_tbt_uniform, fit_accuracy_curve, select_width, AccuracyCurve,
    AccuracySample, CostModel,
};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Cost of a width by counting quantum boundaries one at a time.
fn naive_cost(c: &CostModel, w: usize) -> f64 {
    let mut leaps = 0;
    let mut covered = c.quantum;
    while covered < w {
        covered += c.quantum;
        leaps += 1;
    }
    c.base_ms + c.slope_ms_per_quantum * leaps as f64
}

/// Isotonic fit by the min-max formula: value at `i` is the largest, over
/// windows starting at or before `i`, of the smallest weighted mean over
/// windows ending at or after `i`.
fn minmax_isotonic(rates: &[(f64, f64)]) -> Vec<f64> {
    let n = rates.len();
    let mean = |a: usize, b: usize| {
        let (s, w) = rates[a..=b]
            .iter()
            .fold((0.0, 0.0), |(s, w), &(r, wt)| (s + r * wt, w + wt));
        s / w
    };
    (0..n)
        .map(|i| {
            (0..=i)
                .map(|j| (i..n).map(|k| mean(j, k)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn cost_strategy() -> impl Strategy<Value = CostModel> {
    (1.0f64..80.0, 0.0f64..20.0, 1usize..100)
        .prop_map(|(base, slope, q)| CostModel::compute_only(base, slope, q))
}

proptest! {
    #[test]
    fn general_formula_reduces_to_uniform(t in 0.1f64..500.0, p in 0.0f64..=1.0, m in 1usize..32) {
        let general = expected_tbt_general(&vec![t; m], p).unwrap();
        prop_assert!(close(general, expected_tbt_uniform(t, p, m)));
    }

    #[test]
    fn tbt_falls_with_accuracy(t in prop::collection::vec(0.1f64..100.0, 1..16), p in 0.0f64..1.0, dp in 0.0f64..1.0) {
        let q = p + (1.0 - p) * dp;
        let lo = expected_tbt_general(&t, q).unwrap();
        let hi = expected_tbt_general(&t, p).unwrap();
        prop_assert!(lo <= hi + 1e-12);
        let max = t.iter().copied().fold(0.0, f64::max);
        prop_assert!(close(expected_tbt_general(&t, 1.0).unwrap(), max));
        prop_assert!(lo >= max - 1e-12);
    }

    #[test]
    fn step_cost_counts_quantum_leaps(c in cost_strategy(), w in 1usize..2000) {
        prop_assert!(close(c.step_cost(w).unwrap(), naive_cost(&c, w)));
    }

    #[test]
    fn selected_width_minimises_expected_tbt(
        c in cost_strategy(),
        raw in prop::collection::vec(0.0f64..1.0, 1..12),
        m in 2usize..16,
    ) {
        let mut acc = raw.clone();
        acc.sort_by(f64::total_cmp);
        let widths: Vec<usize> = (0..acc.len()).map(|i| 1 << i).collect();
        let curve = AccuracyCurve::new(widths.iter().copied().zip(acc.iter().copied())).unwrap();
        let chosen = select_width(&c, &curve, m, &widths).unwrap();
        let tbt = |w: usize, p: f64| naive_cost(&c, w) * (1.0 + (1.0 - p) * m as f64);
        let best = widths
            .iter()
            .zip(&acc)
            .map(|(&w, &p)| tbt(w, p))
            .fold(f64::INFINITY, f64::min);
        let i = widths.iter().position(|&w| w == chosen).unwrap();
        prop_assert!(close(tbt(chosen, acc[i]), best));
        // Rescaling every cost leaves the choice unchanged.
        prop_assert_eq!(select_width(&c.scaled(3.7), &curve, m, &widths).unwrap(), chosen);
    }

    #[test]
    fn isotonic_fit_matches_minmax_solution(
        samples in prop::collection::vec((0u64..50, 1u64..50), 1..10),
    ) {
        let samples: Vec<AccuracySample> = samples
            .iter()
            .enumerate()
            .map(|(i, &(h, extra))| AccuracySample { width: i + 1, hits: h, trials: h + extra })
            .collect();
        let fit: Vec<f64> = fit_accuracy_curve(&samples).unwrap().points().map(|(_, p)| p).collect();
        let want = minmax_isotonic(
            &samples
                .iter()
                .map(|s| (s.hits as f64 / s.trials as f64, s.trials as f64))
                .collect::<Vec<_>>(),
        );
        prop_assert!(fit.windows(2).all(|v| v[0] <= v[1]));
        for (a, b) in fit.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", fit, want);
        }
    }
}

#[test]
fn plateau_curve_picks_the_bucket_edge() {
    let curve = AccuracyCurve::new([
        (8, 0.70),
        (16, 0.80),
        (32, 0.88),
        (48, 0.93),
        (64, 0.955),
        (80, 0.957),
        (128, 0.96),
    ])
    .unwrap();
    let widths: Vec<usize> = curve.points().map(|(w, _)| w).collect();
    let c = CostModel::compute_only(36.0, 2.5, 64);
    assert_eq!(select_width(&c, &curve, 8, &widths).unwrap(), 64);
}

#[test]
fn curve_json_round_trips_and_rejects_dips() {
    let curve = AccuracyCurve::new([(1, 0.5), (4, 0.75)]).unwrap();
    let text = serde_json::to_string(&curve).unwrap();
    assert_eq!(serde_json::from_str::<AccuracyCurve>(&text).unwrap(), curve);
    let dip = r#"{"points":[{"width":1,"accuracy":0.6},{"width":2,"accuracy":0.5}]}"#;
    assert!(serde_json::from_str::<AccuracyCurve>(dip).is_err());
}

#[test]
fn uncovered_width_is_an_error() {
    let curve = AccuracyCurve::new([(1, 0.5)]).unwrap();
    assert!(select_width(&CostModel::default(), &curve, 4, &[1, 2]).is_err());
    assert!(select_width(&CostModel::default(), &curve, 4, &[]).is_err());
}
