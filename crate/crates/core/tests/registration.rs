mod common;

use thermal_nuc::geometry::{register_pair, warp, TransformKind, TransformParams};
use thermal_nuc::solver::{solve_average, SolveConfig};
use thermal_nuc::synth::textured_scene;

fn angle_deg(t: &TransformParams) -> f64 {
    let m = t.to_matrix();
    m[(1, 0)].atan2(m[(0, 0)]).to_degrees()
}

fn errors(est: &TransformParams, truth: &TransformParams) -> (f64, f64) {
    let (ex, ey) = est.translation_part();
    let (tx, ty) = truth.translation_part();
    ((ex - tx).hypot(ey - ty), (angle_deg(est) - angle_deg(truth)).abs())
}

#[test]
fn noiseless_rigid_self_registration() {
    let x0 = textured_scene(128, 128, 21);
    let cases = [
        (0.0, 0.37, -0.81),
        (1.2, 2.6, 1.4),
        (-1.7, -3.3, 3.9),
        (0.4, 4.0, -2.2),
    ];
    for (deg, tx, ty) in cases {
        let truth = TransformParams::rigid(f64::to_radians(deg), tx, ty);
        let (moving, _) = warp(&x0, &truth).unwrap();
        let r = register_pair(&x0, &moving, TransformKind::Rigid, 4).unwrap();
        let (dt, da) = errors(&r.transform, &truth);
        assert!(r.converged);
        assert!(dt < 0.1 && da < 0.1, "{deg} {tx} {ty}: {dt} px, {da} deg");
    }
}

#[test]
fn noiseless_translation_self_registration() {
    let x0 = textured_scene(96, 96, 5);
    let truth = TransformParams::translation(-2.45, 1.15);
    let (moving, _) = warp(&x0, &truth).unwrap();
    let r = register_pair(&x0, &moving, TransformKind::Translation, 4).unwrap();
    assert!(errors(&r.transform, &truth).0 < 0.1);
}

#[test]
fn textured_registration_under_desk_noise() {
    for seed in 1..=8 {
        let stack = common::desk_stack_of(textured_scene(128, 128, seed), seed, 4.0);
        let cfg = SolveConfig { seed, ..SolveConfig::default() };
        let report = solve_average(&stack, &cfg).unwrap();
        let truth = &stack.truth.as_ref().unwrap().transforms;
        for (r, t) in report.registration.iter().zip(truth) {
            let (dt, _) = errors(&r.transform, t);
            assert!(dt < 0.5, "seed {seed}: {dt} px");
        }
    }
}
