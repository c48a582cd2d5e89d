use std::collections::BTreeSet;
use std::time::Instant;

use thermal_nuc::diffengine::{op_suite, SUITE_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let t = Instant::now();
    let cases = op_suite().unwrap();
    let failed: Vec<_> = cases
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| format!("{} d/d{}: rel {:.2e}", c.op, c.input, c.report.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
    for c in &cases {
        assert!(c.report.max_rel_error < SUITE_TOLERANCE);
        assert!(c.report.warnings.is_empty(), "{}: {:?}", c.op, c.report.warnings);
    }
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn suite_covers_every_op() {
    let ops: BTreeSet<String> = op_suite()
        .unwrap()
        .into_iter()
        .map(|c| c.op.split("-").take_while(|p| p.parse::<u32>().is_err()).collect::<Vec<_>>().join("-"))
        .collect();
    for name in [
        "add", "sub", "mul", "scalar-mul", "clamp-min", "leaky-relu", "sigmoid", "nearest-upsample-2x",
        "bilinear-upsample-2x", "channel-norm", "box-downsample", "charbonnier-tv", "mse", "sum", "reshape",
    ] {
        assert!(ops.contains(name), "{name} missing from {ops:?}");
    }
    for kind in ["translation", "rigid", "affine", "perspective"] {
        assert!(ops.contains(&format!("bilinear-warp-{kind}")), "warp {kind} missing");
    }
    assert!(ops.iter().any(|o| o.starts_with("conv2d")));
}

#[test]
fn warp_params_are_checked_at_every_kind() {
    let cases = op_suite().unwrap();
    let warps: Vec<_> = cases
        .iter()
        .filter(|c| c.op.starts_with("bilinear-warp") && c.input == "params")
        .collect();
    assert_eq!(warps.len(), 4);
    for c in warps {
        assert!(c.report.checked >= 2 && c.report.passed, "{c:?}");
    }
}
