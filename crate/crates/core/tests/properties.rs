//! Property tests for invariants across modules.

use proptest::prelude::*;

use finevl::cli::RunConfig;
use finevl::dynamics::{ema_smooth, pearson, spearman};
use finevl::evalharness::{
    foil_accuracy, pairwise_ranking_accuracy, retrieval_recall, threshold_accuracy, winoground_scores,
};
use finevl::model::{dequantize, quantize};
use finevl::objectives::{bbox_loss, TrainData};
use finevl::synthdata::{parse_record, render_record, InterleavedSampler, BatchKind};
use finevl::tensor::{check_gradients, GradCheck, Graph, Tensor};
use finevl::BBox;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..0.9, 0.0f64..0.9, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x, y, w, h)| {
        BBox::new(x, y, (x + w * (1.0 - x)).max(x + 1e-3).min(1.0), (y + h * (1.0 - y)).max(y + 1e-3).min(1.0)).unwrap()
    })
}

/// Small integer scores, so ties are common.
fn coarse() -> impl Strategy<Value = f64> {
    (0i32..6).prop_map(f64::from)
}

/// Strictly increasing and exact on small integers.
fn increasing(x: f64) -> f64 {
    x * x * x + 3.0 * x - 7.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composite_graph_gradients(
        x in matrix(3, 4),
        w in matrix(4, 4),
        gain in matrix(1, 4),
        targets in prop::collection::vec(0usize..4, 3),
        mask in prop::collection::vec(any::<bool>(), 3),
    ) {
        let mut mask = mask;
        mask[0] = true;
        let report = check_gradients(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.gelu(h);
                let bias = g.constant(Tensor::zeros(vec![1, 4]));
                let h = g.layer_norm(h, v[2], bias)?;
                let a = g.attention(h, h, h, Some(&mask), 2)?;
                let s = g.add(a, h)?;
                g.softmax_cross_entropy(s, &targets)
            },
            &[x, w, gain],
            &GradCheck::default(),
        )
        .unwrap();
        prop_assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn hidden_keys_do_not_leak(q in matrix(2, 4), k in matrix(3, 4), v in matrix(3, 4), noise in matrix(1, 4)) {
        let mask = [true, false, true];
        let run = |v: Tensor| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v));
            let out = g.attention(qv, kv, vv, Some(&mask), 2).unwrap();
            g.value(out).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let mut changed = v.clone();
        changed.data_mut()[4..8].copy_from_slice(noise.data());
        prop_assert_eq!(run(v), run(changed));
    }

    #[test]
    fn giou_bounds(a in bbox(), b in bbox()) {
        let g = a.giou(&b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= a.iou(&b) + 1e-12);
        prop_assert!((g - b.giou(&a)).abs() < 1e-12);
        prop_assert!((a.giou(&a) - 1.0).abs() < 1e-12);
        prop_assert!(bbox_loss(&a, &b, 1.0, 1.0) >= 0.0);
        prop_assert!(bbox_loss(&a, &a, 1.0, 1.0).abs() < 1e-12);
    }

    #[test]
    fn position_bins_round_trip(x in 0.0f64..=1.0, bins in 2usize..64) {
        let b = quantize(x, bins, 256);
        prop_assert!(b < bins);
        prop_assert!((dequantize(b, bins) - x).abs() <= 1.0 / bins as f64 + 1e-12);
    }

    #[test]
    fn ema_stays_in_range(series in prop::collection::vec(-5.0f64..5.0, 1..30), alpha in 0.0f64..1.0) {
        let s = ema_smooth(&series, alpha).unwrap();
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s[0], series[0]);
        prop_assert!(s.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn correlation_invariances(
        xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
        a in 0.5f64..3.0,
        b in -2.0f64..2.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Ok(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let shifted: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&shifted, &y).unwrap() - r).abs() < 1e-9);
            let flipped: Vec<f64> = x.iter().map(|v| -a * v).collect();
            prop_assert!((pearson(&flipped, &y).unwrap() + r).abs() < 1e-9);
        }
        if let Ok(s) = spearman(&x, &y) {
            let mono: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(spearman(&mono, &y).unwrap(), s);
        }
    }

    #[test]
    fn winoground_group_bound(quads in prop::collection::vec([[coarse(), coarse()], [coarse(), coarse()]], 1..50)) {
        let w = winoground_scores(&quads).unwrap();
        prop_assert!(w.group <= w.text.min(w.image));
        let mapped: Vec<[[f64; 2]; 2]> = quads.iter().map(|q| q.map(|r| r.map(increasing))).collect();
        prop_assert_eq!(winoground_scores(&mapped).unwrap(), w);
    }

    #[test]
    fn ranking_metrics_are_order_invariant(pairs in prop::collection::vec((coarse(), coarse()), 1..40)) {
        let mapped: Vec<(f64, f64)> = pairs.iter().map(|&(p, n)| (increasing(p), increasing(n))).collect();
        prop_assert_eq!(pairwise_ranking_accuracy(&pairs).unwrap(), pairwise_ranking_accuracy(&mapped).unwrap());
        let groups: Vec<(f64, Vec<f64>)> = pairs.iter().map(|&(p, n)| (p, vec![n])).collect();
        prop_assert_eq!(foil_accuracy(&groups).unwrap(), pairwise_ranking_accuracy(&pairs).unwrap());
        let scored: Vec<(f64, bool)> = pairs.iter().map(|&(p, n)| (p / 5.0, n > 2.0)).collect();
        let acc = threshold_accuracy(&scored).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn recall_grows_with_k(table in (2usize..8).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(coarse(), n), n))) {
        let n = table.len();
        let mut last = (0.0, 0.0);
        for k in 1..=n {
            let r = retrieval_recall(&table, k).unwrap();
            prop_assert!(r.0 >= last.0 && r.1 >= last.1);
            last = r;
        }
        prop_assert_eq!(last, (1.0, 1.0));
        let mapped: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&v| increasing(v)).collect()).collect();
        prop_assert_eq!(retrieval_recall(&mapped, 1).unwrap(), retrieval_recall(&table, 1).unwrap());
    }

    #[test]
    fn sampler_streams_are_contiguous(steps in 0usize..400, detection in any::<bool>()) {
        let s = InterleavedSampler::new(detection, 1).unwrap();
        let (mut c, mut d) = (0, 0);
        for step in 0..steps {
            let next = match s.kind_at(step) {
                BatchKind::Caption => &mut c,
                BatchKind::Detection => &mut d,
            };
            prop_assert_eq!(s.stream_index(step), *next);
            *next += 1;
        }
        prop_assert_eq!(d, if detection { steps / 3 } else { 0 });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_records_round_trip(seed in any::<u64>(), scenes in 1usize..4) {
        let ab = finevl::objectives::LossArm::Full.config(finevl::synthdata::SourceSet::all());
        for r in TrainData::generate_records(seed, scenes, 4, &ab) {
            let back = parse_record(&render_record(&r)).unwrap();
            back.verify().unwrap();
            prop_assert_eq!(back, r);
        }
    }

    #[test]
    fn config_render_is_a_fixed_point(seed in any::<u64>(), blocks in 1usize..20, lr in 1e-4f64..1.0) {
        let mut c = RunConfig::new(seed);
        c.train.steps = blocks * c.train.cadence;
        c.train.lr = lr;
        let again = RunConfig::parse(&c.render(), "render").unwrap();
        prop_assert_eq!(again.render(), c.render());
        prop_assert_eq!(again.hash(), c.hash());
        c.output.dir = "elsewhere".into();
        prop_assert_eq!(again.hash(), c.hash());
    }
}
