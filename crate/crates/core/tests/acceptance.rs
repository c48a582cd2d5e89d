//! Acceptance run. Prints one PASS/FAIL line per criterion. Failures make
//! the process exit non-zero only when `THERMAL_NUC_ACCEPTANCE_STRICT` is
//! set, so the workspace test run reports them without aborting. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 2 6`.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use thermal_nuc::diffengine::{op_suite, SUITE_TOLERANCE};
use thermal_nuc::geometry::{register_pair, warp, TransformKind, TransformParams};
use thermal_nuc::sensor::{
    random_jitter, sample_nonuniformity, simulate_capture, NoiseConfig, NonUniformity,
};
use thermal_nuc::solver::{
    averaging_variance, estimate_jitter_stats, solve_average, solve_deepir, solve_physics_tv, solve_superres,
    SolveConfig, SolveReport,
};
use thermal_nuc::metrics::psnr;
use thermal_nuc::synth::{smooth_scene, textured_scene};
use thermal_nuc::Image;

use common::{ar1_flat_stack, desk_noise, desk_stack, drift_stack, fingerprint, mc_average_variance, superres_stack};

type Outcome = Result<String, String>;

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SUPERRES_SEED: u64 = 1;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let cases = op_suite().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<_> = cases
        .iter()
        .filter(|c| !c.report.passed || c.report.max_rel_error >= SUITE_TOLERANCE)
        .map(|c| format!("{}[{}]", c.op, c.input))
        .collect();
    let warp_params = cases.iter().filter(|c| c.op.starts_with("bilinear-warp") && c.input == "params").count();
    check(
        failed.is_empty() && warp_params == 4 && secs < 60.0,
        format!(
            "{} checks, worst {:.2e} ({}[{}]), {} warp-param kinds, {secs:.1}s, failed {failed:?}",
            cases.len(),
            worst.report.max_rel_error,
            worst.op,
            worst.input,
            warp_params
        ),
    )
}

fn criterion_2() -> Outcome {
    let x0 = textured_scene(128, 128, 2);
    let cfg = NoiseConfig {
        column_gain_sigma: 0.1,
        offset_amplitude: 0.05,
        ..NoiseConfig::noiseless(2)
    };
    let nu = sample_nonuniformity(128, 128, &cfg).map_err(|e| e.to_string())?;
    let ts = vec![TransformParams::identity(TransformKind::Affine); 3];
    let stack = simulate_capture(&x0, &nu, &ts, &cfg, 1).map_err(|e| e.to_string())?;
    let worst = stack
        .frames
        .iter()
        .map(|y| {
            let inv = Image::from_fn(128, 128, |x, v| y.get(x, v) / nu.gain.get(x, v) - nu.offset.get(x, v));
            psnr(&inv, &x0).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    check(worst >= 120.0, format!("worst frame {worst:.1} dB"))
}

struct DeskRun {
    single: f64,
    average: f64,
    physics: SolveReport,
    deepir: SolveReport,
}

fn desk_config(seed: u64) -> SolveConfig {
    SolveConfig {
        seed,
        ..SolveConfig::default()
    }
}

fn desk_run(seed: u64) -> DeskRun {
    let stack = desk_stack(seed, 4.0);
    let cfg = desk_config(seed);
    let average = solve_average(&stack, &cfg).unwrap();
    DeskRun {
        single: average.single_frame_psnr.unwrap(),
        average: average.psnr.unwrap(),
        physics: solve_physics_tv(&stack, &cfg).unwrap(),
        deepir: solve_deepir(&stack, &cfg).unwrap(),
    }
}

fn desk_fingerprint(r: &DeskRun) -> Vec<u8> {
    let mut out = Vec::new();
    for s in [&r.physics, &r.deepir] {
        out.extend(fingerprint(&[&s.x0_hat, &s.nu_hat.gain, &s.nu_hat.offset]));
        out.extend(serde_json::to_vec(&s.transforms_hat).unwrap());
    }
    out
}

fn criterion_3(runs: &[DeskRun], secs: f64) -> Outcome {
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&DeskRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let single = mean(&|r| r.single);
    let average = mean(&|r| r.average);
    let physics = mean(&|r| r.physics.psnr.unwrap());
    let deepir = mean(&|r| r.deepir.psnr.unwrap());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.physics.psnr.unwrap(), r.deepir.psnr.unwrap()))
        .collect();
    check(
        deepir >= physics + 1.0 && physics >= average + 1.0 && deepir >= single + 8.0 && secs < 900.0,
        format!(
            "single {single:.2}, average {average:.2}, physics-tv {physics:.2}, deepir {deepir:.2} dB \
             (physics/deepir per seed {per_seed:?}), {secs:.0}s"
        ),
    )
}

fn criterion_4() -> Outcome {
    let (mut gains, mut corrs) = (Vec::new(), Vec::new());
    for seed in DESK_SEEDS {
        let stack = desk_stack(seed, 0.0);
        let r = solve_average(&stack, &desk_config(seed)).unwrap();
        gains.push(r.psnr.unwrap() - r.single_frame_psnr.unwrap());
        let truth = stack.truth.as_ref().unwrap();
        // The noiseless fixed pattern g(x0 + o) - x0 should survive averaging.
        let pattern = Image::from_fn(128, 128, |x, y| {
            truth.nonuniformity.gain.get(x, y) * (truth.scene.get(x, y) + truth.nonuniformity.offset.get(x, y)) - truth.scene.get(x, y)
        });
        let residual = r.x0_hat.zip_map(&truth.scene, |a, b| a - b).unwrap();
        corrs.push(correlation(residual.data(), pattern.data()));
    }
    let worst_gain = gains.iter().cloned().fold(f64::MIN, f64::max);
    let worst_corr = corrs.iter().cloned().fold(f64::MAX, f64::min);
    check(
        worst_gain < 1.0 && worst_corr > 0.9,
        format!("average minus single frame at most {worst_gain:.2} dB, residual/fixed-pattern correlation at least {worst_corr:.3}"),
    )
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn superres_run() -> (SolveReport, f64) {
    let stack = superres_stack(SUPERRES_SEED);
    let cfg = SolveConfig {
        downsample: 4,
        ..desk_config(SUPERRES_SEED)
    };
    let t = Instant::now();
    let r = solve_superres(&stack, &cfg).unwrap();
    (r, t.elapsed().as_secs_f64())
}

fn superres_fingerprint(r: &SolveReport) -> Vec<u8> {
    let mut out = fingerprint(&[&r.x0_hat, &r.nu_hat.gain, &r.nu_hat.offset]);
    out.extend(serde_json::to_vec(&r.transforms_hat).unwrap());
    out
}

fn criterion_5(r: &SolveReport, secs: f64) -> Outcome {
    let (d, b) = (r.psnr.unwrap(), r.baseline_psnr.unwrap());
    check(
        d >= b + 2.0 && secs < 1200.0,
        format!("deepir {d:.2} dB, bicubic average {b:.2} dB, margin {:.2} dB, {secs:.0}s", d - b),
    )
}

fn criterion_6() -> Outcome {
    let patterns: Vec<(f64, Vec<(usize, usize)>)> = vec![
        (0.0, (0..1).map(|k| (k, 0)).collect()),
        (0.0, (0..3).map(|k| (k, 0)).collect()),
        (0.0, (0..8).map(|k| (k, 0)).collect()),
        (5.0, vec![(0, 0), (1, 0), (0, 1)]),
        (5.0, vec![(0, 0), (3, 0), (0, 3), (3, 3)]),
        (5.0, vec![(0, 0), (2, 1), (5, 3), (1, 6), (6, 6)]),
    ];
    let mut worst: f64 = 0.0;
    for (k, (length, shifts)) in patterns.iter().enumerate() {
        let rho = |dx: f64, dy: f64| {
            if *length == 0.0 {
                if dx == 0.0 && dy == 0.0 { 1.0 } else { 0.0 }
            } else {
                (-(dx.abs() + dy.abs()) / length).exp()
            }
        };
        let s: Vec<(f64, f64)> = shifts.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let predicted = averaging_variance(rho, 0.01, 1.0, &s).map_err(|e| e.to_string())?;
        let (mc, se) = mc_average_variance(shifts, 0.1, *length, 100_000, 600 + k as u64);
        worst = worst.max((mc - predicted).abs() / se);
    }
    check(worst < 3.0, format!("worst deviation {worst:.2} standard errors over 6 patterns"))
}

fn criterion_7() -> Outcome {
    let analytic = (5.0 * 10f64.ln() / 2.0).ceil();
    let shift = estimate_jitter_stats(&ar1_flat_stack(5.0, 7), 20)
        .map_err(|e| e.to_string())?
        .recommended_shift_px
        .map_or(f64::NAN, |s| s as f64);
    let crossing = 20.5;
    let omega = 0.8f64.acos() / crossing;
    let frames = estimate_jitter_stats(&drift_stack(omega, 30, 3), 10)
        .map_err(|e| e.to_string())?
        .recommended_max_frames as f64;
    check(
        (shift - analytic).abs() <= 1.0 && (frames / crossing - 1.0).abs() <= 0.1,
        format!("shift {shift} px (analytic {analytic}), frames {frames} (analytic {crossing})"),
    )
}

fn errors(est: &TransformParams, truth: &TransformParams) -> (f64, f64) {
    let angle = |t: &TransformParams| {
        let m = t.to_matrix();
        m[(1, 0)].atan2(m[(0, 0)]).to_degrees()
    };
    let (ex, ey) = est.translation_part();
    let (tx, ty) = truth.translation_part();
    ((ex - tx).hypot(ey - ty), (angle(est) - angle(truth)).abs())
}

fn criterion_8() -> Outcome {
    let x0 = textured_scene(128, 128, 21);
    let (mut clean_t, mut clean_a) = (0.0f64, 0.0f64);
    for (deg, tx, ty) in [(0.0, 0.37, -0.81), (1.2, 2.6, 1.4), (-1.7, -3.3, 3.9), (0.4, 4.0, -2.2)] {
        let truth = TransformParams::rigid(f64::to_radians(deg), tx, ty);
        let (moving, _) = warp(&x0, &truth).map_err(|e| e.to_string())?;
        let r = register_pair(&x0, &moving, TransformKind::Rigid, 4).map_err(|e| e.to_string())?;
        let (dt, da) = errors(&r.transform, &truth);
        clean_t = clean_t.max(dt);
        clean_a = clean_a.max(da);
    }
    let mut noisy: f64 = 0.0;
    for seed in DESK_SEEDS {
        let stack = common::desk_stack_of(textured_scene(128, 128, seed), seed, 4.0);
        let r = solve_average(&stack, &desk_config(seed)).map_err(|e| e.to_string())?;
        for (reg, t) in r.registration.iter().zip(&stack.truth.as_ref().unwrap().transforms) {
            noisy = noisy.max(errors(&reg.transform, t).0);
        }
    }
    check(
        clean_t < 0.1 && clean_a < 0.1 && noisy < 0.5,
        format!("noiseless {clean_t:.3} px / {clean_a:.3} deg, desk noise {noisy:.3} px"),
    )
}

fn criterion_9(runs: &[DeskRun]) -> Outcome {
    let drift = runs
        .iter()
        .flat_map(|r| [&r.physics, &r.deepir])
        .map(|s| (s.nu_hat.gain.mean() - 1.0).abs())
        .fold(0.0, f64::max);

    let seed = DESK_SEEDS[0];
    let x0 = smooth_scene(128, 128, seed);
    let cfg = desk_noise(seed, x0.max() - x0.min());
    let nu = sample_nonuniformity(128, 128, &cfg).unwrap();
    let ts = random_jitter(3, 4.0, TransformKind::Affine, 2.0, seed);
    let scaled_nu = NonUniformity {
        gain: nu.gain.map(|g| 2.0 * g),
        offset: nu.offset.map(|o| 0.5 * o),
    };
    let base = simulate_capture(&x0, &nu, &ts, &cfg, 1).unwrap();
    let scaled = simulate_capture(&x0.map(|v| 0.5 * v), &scaled_nu, &ts, &cfg, 1).unwrap();
    let solve_cfg = desk_config(seed);
    let a = solve_physics_tv(&base, &solve_cfg).unwrap().x0_hat;
    let b = solve_physics_tv(&scaled, &solve_cfg).unwrap().x0_hat;
    let (na, nb) = (a.map(|v| v / a.mean()), b.map(|v| v / b.mean()));
    let num: f64 = na.data().iter().zip(nb.data()).map(|(u, v)| (u - v).powi(2)).sum();
    let rel = (num / na.data().iter().map(|u| u * u).sum::<f64>()).sqrt();
    check(
        drift <= 1e-6 && rel < 0.01,
        format!("max |mean(g_hat) - 1| {drift:.1e}, gauge-normalised difference after gain x2 {rel:.2e}"),
    )
}

fn criterion_10(runs: &[DeskRun]) -> Outcome {
    let mut bad = Vec::new();
    let mut checked = 0;
    for (kind, p) in [
        (TransformKind::Translation, 2),
        (TransformKind::Rigid, 3),
        (TransformKind::Affine, 6),
        (TransformKind::Perspective, 8),
    ] {
        for frames in [2usize, 3, 5] {
            let x0 = textured_scene(64, 64, frames as u64);
            let cfg = desk_noise(1, x0.max() - x0.min());
            let nu = sample_nonuniformity(64, 64, &cfg).unwrap();
            let ts = random_jitter(frames, 3.0, kind, 1.0, frames as u64);
            let stack = simulate_capture(&x0, &nu, &ts, &cfg, 1).unwrap();
            let mut sc = SolveConfig {
                transform_kind: kind,
                iters: 3,
                warmup_iters: 1,
                ..SolveConfig::default()
            };
            sc.scene.deep_decoder.channels = 4;
            for r in [
                solve_average(&stack, &sc).unwrap(),
                solve_physics_tv(&stack, &sc).unwrap(),
                solve_deepir(&stack, &sc).unwrap(),
            ] {
                checked += 1;
                if r.unknown_count != 3 * 64 * 64 + p * (frames - 1) {
                    bad.push(format!("{kind} L={frames} {:?}", r.method));
                }
            }
        }
    }
    for r in runs.iter().flat_map(|r| [&r.physics, &r.deepir]) {
        checked += 1;
        if r.unknown_count != 3 * 128 * 128 + 6 * 2 {
            bad.push(format!("desk {:?}", r.method));
        }
    }
    check(bad.is_empty(), format!("{checked} runs checked, mismatches {bad:?}"))
}

fn criterion_11(first_desk: &DeskRun, first_sr: &SolveReport) -> Outcome {
    let desk_same = desk_fingerprint(first_desk) == desk_fingerprint(&desk_run(DESK_SEEDS[0]));
    let sr_same = superres_fingerprint(first_sr) == superres_fingerprint(&superres_run().0);
    check(
        desk_same && sr_same,
        format!("desk seed {} identical: {desk_same}, super-resolution identical: {sr_same}", DESK_SEEDS[0]),
    )
}

fn report(n: usize, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
        Err(d) => {
            *failures += 1;
            println!("criterion {n:>2}: FAIL  {d}");
        }
    }
}

fn main() -> ExitCode {
    let picked: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut failures = 0;

    if want(1) {
        report(1, criterion_1(), &mut failures);
    }
    if want(2) {
        report(2, criterion_2(), &mut failures);
    }
    let needs_desk = [3, 9, 10, 11].iter().any(|&n| want(n));
    let t = Instant::now();
    let desk: Vec<DeskRun> = if needs_desk { DESK_SEEDS.iter().map(|&s| desk_run(s)).collect() } else { Vec::new() };
    let desk_secs = t.elapsed().as_secs_f64();
    if want(3) {
        report(3, criterion_3(&desk, desk_secs), &mut failures);
    }
    if want(4) {
        report(4, criterion_4(), &mut failures);
    }
    let sr = if want(5) || want(11) { Some(superres_run()) } else { None };
    if want(5) {
        let (r, secs) = sr.as_ref().unwrap();
        report(5, criterion_5(r, *secs), &mut failures);
    }
    if want(6) {
        report(6, criterion_6(), &mut failures);
    }
    if want(7) {
        report(7, criterion_7(), &mut failures);
    }
    if want(8) {
        report(8, criterion_8(), &mut failures);
    }
    if want(9) {
        report(9, criterion_9(&desk), &mut failures);
    }
    if want(10) {
        report(10, criterion_10(&desk), &mut failures);
    }
    if want(11) {
        report(11, criterion_11(&desk[0], &sr.as_ref().unwrap().0), &mut failures);
    }

    if failures == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failures} criteria failed");
    if std::env::var_os("THERMAL_NUC_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
