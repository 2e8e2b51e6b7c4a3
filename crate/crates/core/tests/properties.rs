use flexit::encoder::plan_contexts;
use flexit::lattice::{LatticeLogits, rnnt_loss, rnnt_loss_grad};
use flexit::metrics::{EditOp, ReportRow, align, parse_csv, to_csv, wer};
use proptest::prelude::*;

fn tokens(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..6, 0..max)
}

proptest! {
    #[test]
    fn wer_bounds(r in tokens(12).prop_filter("non-empty", |r| !r.is_empty()), h in tokens(12)) {
        prop_assert_eq!(wer(&r, &r).unwrap().errors(), 0);
        let b = wer(&r, &h).unwrap();
        prop_assert!(b.errors() >= r.len().abs_diff(h.len()));
        prop_assert!(b.errors() <= r.len().max(h.len()));
        prop_assert!(b.deletions <= r.len());
        let ops = align(&r, &h);
        let used_ref = ops.iter().filter(|o| !matches!(o, EditOp::Insert { .. })).count();
        let used_hyp = ops.iter().filter(|o| !matches!(o, EditOp::Delete { .. })).count();
        prop_assert_eq!((used_ref, used_hyp), (r.len(), h.len()));
    }

    #[test]
    fn loss_and_loss_grad_agree(
        t in 1usize..6,
        labels in prop::collection::vec(1usize..4, 0..4),
        seed in prop::collection::vec(-3.0f64..3.0, 6 * 5 * 4),
    ) {
        let vals = seed[..t * (labels.len() + 1) * 4].to_vec();
        let lat = LatticeLogits::from_logits(t, labels.len(), 4, vals).unwrap();
        let loss = rnnt_loss(&lat, &labels, None).unwrap();
        let lg = rnnt_loss_grad(&lat, &labels, None).unwrap();
        prop_assert!((loss - lg.loss).abs() <= 1e-9 * loss.abs().max(1.0));
        prop_assert!(lg.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn plan_covers_every_frame_once(
        frames in 1usize..80,
        base in 1usize..25,
        center_frac in 0.0f64..1.0,
        right in 0usize..3,
        cap in prop::option::of(0usize..25),
    ) {
        let center = 1 + ((base - 1) as f64 * center_frac) as usize;
        let plan = plan_contexts(frames, base, center, right, cap).unwrap();
        let mut next = 0;
        for seg in &plan.segments {
            prop_assert_eq!(seg.center.start, next);
            prop_assert!(seg.center.len() <= center && !seg.center.is_empty());
            prop_assert!(seg.base_window.len() <= base);
            prop_assert_eq!(seg.carried.end, seg.center.start);
            prop_assert!(seg.right.end <= frames && seg.right.len() <= right);
            if let Some(c) = cap {
                prop_assert!(seg.history.len() <= c);
            }
            next = seg.center.end;
        }
        prop_assert_eq!(next, frames);
        let mask = plan.attention_mask();
        for f in 0..frames {
            let seen = mask.attended_frames(f);
            let seg = &plan.segments[plan.segment_of(f)];
            prop_assert!(seen.iter().all(|&k| seg.span().contains(&k)));
        }
    }

    #[test]
    fn csv_round_trip(
        name in "[A-Z][0-9]",
        dv in any::<bool>(),
        nums in prop::array::uniform6(-1e6f64..1e6),
    ) {
        let row = ReportRow {
            experiment: name,
            emf_ctx_ms: "120".into(),
            br_vcmd_ms: "420".into(),
            br_dict_ms: "900".into(),
            domain_vec: dv,
            dict_wer: nums[0],
            vcmd_wer: nums[1],
            vcmd_del: nums[2],
            avg_fd_ms: nums[3],
            l_avg_ms: nums[4],
            rtf: nums[5],
        };
        let text = to_csv(std::slice::from_ref(&row)).unwrap();
        prop_assert_eq!(parse_csv(&text).unwrap(), vec![row]);
    }
}
