use proptest::prelude::*;
use transhnet_core::coop::{fuse_decision, solve_weights, total_objective, view_loss, ViewWeights};
use transhnet_core::metrics::{dice, iou, mae};
use transhnet_core::{Tape, Tensor};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn binary(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(any::<bool>(), n).prop_map(move |d| {
        Tensor::new(shape, d.into_iter().map(|b| b as u8 as f64).collect()).unwrap()
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[3, 5], -50.0, 50.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_lastdim(v);
        for row in tape.value(s).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn pooling_undoes_nearest_upsampling(x in tensor(&[1, 2, 3, 4], -10.0, 10.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let u = tape.upsample2x_nearest(v).unwrap();
        let p = tape.avg_pool2x2(u).unwrap();
        prop_assert_eq!(tape.value(p), &x);
    }

    #[test]
    fn solved_weights_lie_on_the_simplex_and_are_optimal(
        l in prop::array::uniform3(0.0f64..5.0),
        lambda in 1e-3f64..1e3,
        shift in -10.0f64..10.0,
        probe in prop::array::uniform3(1e-6f64..1.0),
    ) {
        let w = solve_weights(&l, lambda).unwrap();
        prop_assert!((w.sum() - 1.0).abs() < 1e-9);
        prop_assert!(w.w.iter().all(|&v| v >= 0.0));
        let shifted = solve_weights(&l.map(|v| v + shift), lambda).unwrap();
        for k in 0..3 {
            prop_assert!((w.w[k] - shifted.w[k]).abs() < 1e-12);
        }
        let s: f64 = probe.iter().sum();
        let other = ViewWeights { w: probe.map(|p| p / s), lambda };
        prop_assert!(total_objective(&w, &l) <= total_objective(&other, &l) + 1e-12);
    }

    #[test]
    fn view_loss_is_nonnegative(p in tensor(&[2, 1, 4, 4], 0.0, 1.0), y in binary(&[2, 1, 4, 4])) {
        let l = view_loss(&p, &y).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        prop_assert!(view_loss(&y, &y).unwrap() < 1e-6);
    }

    #[test]
    fn metric_bounds_and_symmetry(p in tensor(&[1, 1, 6, 6], 0.0, 1.0), g in binary(&[1, 1, 6, 6])) {
        let pb = p.map(|v| (v >= 0.5) as u8 as f64);
        let (d, j) = (dice(pb.data(), g.data()).unwrap(), iou(pb.data(), g.data()).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(d >= j);
        prop_assert_eq!(d, dice(g.data(), pb.data()).unwrap());
        prop_assert_eq!(j, iou(g.data(), pb.data()).unwrap());
        let m = mae(p.data(), g.data()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, mae(g.data(), p.data()).unwrap());
    }

    #[test]
    fn decision_stays_between_the_views(
        a in tensor(&[1, 1, 3, 3], 0.0, 1.0),
        b in tensor(&[1, 1, 3, 3], 0.0, 1.0),
        c in tensor(&[1, 1, 3, 3], 0.0, 1.0),
        l in prop::array::uniform3(0.0f64..3.0),
    ) {
        let w = solve_weights(&l, 1.0).unwrap();
        let out = fuse_decision(&w, &[a.clone(), b.clone(), c.clone()]).unwrap();
        for i in 0..out.len() {
            let v = [a.data()[i], b.data()[i], c.data()[i]];
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[i] >= lo - 1e-15 && out.data()[i] <= hi + 1e-15);
        }
    }
}
