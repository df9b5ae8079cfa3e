use zeromotion_demo::{gop_plan, rate_at, rate_curve_values, warp_preview_rgba, warp_psnr};

#[test]
fn preview_is_two_frames_side_by_side() {
    let img = warp_preview_rgba(3, 32, 0, 0.0, 0.0).unwrap();
    assert_eq!(img.len(), 2 * 32 * 32 * 4);
    assert!(img.chunks(4).all(|p| p[3] == 255));
    assert!(warp_preview_rgba(3, 4, 0, 0.0, 0.0).is_err());
    assert!(warp_preview_rgba(3, 512, 0, 0.0, 0.0).is_err());
}

#[test]
fn zero_flow_prediction_is_the_previous_frame() {
    let still = warp_psnr(1, 64, 2, 0.0, 0.0).unwrap();
    assert!(still.is_finite() && still < 100.0);
    // Ten pixels of shift is far from any texture speed in the generator.
    assert!(warp_psnr(1, 64, 2, 10.0, -10.0).unwrap() < still);
}

#[test]
fn gop_plan_json_lists_slots_in_coding_order() {
    let v: serde_json::Value = serde_json::from_str(&gop_plan(9, 8).unwrap()).unwrap();
    let order: Vec<u64> = v["slots"].as_array().unwrap().iter().map(|s| s["poc"].as_u64().unwrap()).collect();
    assert_eq!(order, vec![0, 8, 4, 2, 6, 1, 3, 5, 7]);
    assert!(gop_plan(9, 3).is_err());
}

#[test]
fn rate_grows_with_scale_and_snapping_costs_little() {
    let curve = rate_curve_values(0.2, 40.0, 12).unwrap();
    assert_eq!(curve.len(), 48);
    let mut last = -1.0;
    for p in curve.chunks(4) {
        let (ideal, coded) = (p[2], p[3]);
        assert!(ideal > last);
        assert!(coded >= ideal - 1e-3, "{coded} < {ideal}");
        assert!(coded <= ideal * 1.05 + 0.05, "{coded} vs {ideal}");
        last = ideal;
    }
    // A unit gaussian discretised to integers carries about 2.1 bits.
    assert!((rate_at(1.0).0 - 2.104).abs() < 0.01);
    assert!(rate_curve_values(1.0, 1.0, 5).is_err());
}
