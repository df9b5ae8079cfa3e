mod common;

use common::{oracle, Entry};
use zeromotion::gop::{build_gop_plan, FrameType, GOP_SIZES};

#[test]
fn plans_match_the_recursive_split_oracle() {
    for &gop in &GOP_SIZES[1..] {
        for n in 1..=100 {
            let plan = build_gop_plan(n, gop).unwrap();
            plan.validate().unwrap();
            let got: Vec<Entry> = plan
                .slots
                .iter()
                .map(|s| (s.poc, s.ref_prev, s.ref_next, s.frame_type))
                .collect();
            assert_eq!(got, oracle(n, gop), "gop {gop}, {n} frames");
            for s in &plan.slots {
                if let (Some(p), Some(q)) = (s.ref_prev, s.ref_next) {
                    assert_eq!(s.poc - p, s.k);
                    assert_eq!(q - s.poc, s.k);
                }
            }
        }
    }
}

#[test]
fn nine_frames_gop8_order_and_types() {
    let plan = build_gop_plan(9, 8).unwrap();
    assert_eq!(plan.coding_order(), vec![0, 8, 4, 2, 6, 1, 3, 5, 7]);
    let s4 = plan.slot(4).unwrap();
    assert_eq!((s4.ref_prev, s4.ref_next, s4.k, s4.frame_type), (Some(0), Some(8), 4, FrameType::BRef));
    let s1 = plan.slot(1).unwrap();
    assert_eq!((s1.ref_prev, s1.ref_next, s1.k, s1.frame_type), (Some(0), Some(2), 1, FrameType::BNonref));
}

#[test]
fn gop2_single_split() {
    let plan = build_gop_plan(3, 2).unwrap();
    assert_eq!(plan.coding_order(), vec![0, 2, 1]);
    assert_eq!(plan.slot(1).unwrap().frame_type, FrameType::BNonref);
}

#[test]
fn short_tail_is_closed_by_intra_frames() {
    let plan = build_gop_plan(6, 8).unwrap();
    assert_eq!(plan.coding_order(), vec![0, 4, 2, 1, 3, 5]);
    assert_eq!(plan.slot(5).unwrap().frame_type, FrameType::Intra);
    assert_eq!(plan.slot(2).unwrap().k, 2);
}

#[test]
fn non_reference_frames_are_never_referenced() {
    for &gop in &GOP_SIZES {
        let plan = build_gop_plan(77, gop).unwrap();
        let nonref: Vec<usize> = plan
            .slots
            .iter()
            .filter(|s| s.frame_type == FrameType::BNonref)
            .map(|s| s.poc)
            .collect();
        for s in &plan.slots {
            for r in [s.ref_prev, s.ref_next].into_iter().flatten() {
                assert!(!nonref.contains(&r));
            }
        }
    }
}

#[test]
fn gop1_is_all_intra_and_bad_sizes_fail() {
    let plan = build_gop_plan(5, 1).unwrap();
    assert!(plan.slots.iter().all(|s| s.frame_type == FrameType::Intra));
    assert!(build_gop_plan(9, 6).is_err());
    assert!(build_gop_plan(9, 64).is_err());
    assert!(build_gop_plan(0, 8).is_err());
}
