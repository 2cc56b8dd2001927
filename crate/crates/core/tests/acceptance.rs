//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tersim_core::campaign::{run_campaign, CohortSpec};
use tersim_core::kinematics::{
    clamp_to_workspace, forward_kinematics, inverse_kinematics, CableRig, FineStageLimits, Pose, Workspace,
};
use tersim_core::netchannel::ChannelParams;
use tersim_core::phantom::ground_truth;
use tersim_core::protocol::{decode, encode, ControlOp, FramePayload, Message, PIXEL_FORMAT_GRAY8};
use tersim_core::scenario::{Measure, Outage, Scenario};
use tersim_core::session::{run_session, SessionConfig, SessionTrace, FORCE_CAP};
use tersim_core::stats::{
    abs_diff_buckets, cohen_kappa, paired_t_test, pearson_r, relative_errors, weighted_kappa, KappaWeights,
    MeasurementPair, DEFAULT_CUTS,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn kinematics() -> Outcome {
    let start = Instant::now();
    let ws = Workspace::default();
    let fine = FineStageLimits::default();
    let rig = CableRig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (lo, hi) = (ws.min(), ws.max());
    let mut worst: f64 = 0.0;
    let mut clamp_mismatch = 0;
    for _ in 0..10_000 {
        let xy = Vector2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y));
        let fix = match inverse_kinematics(&xy, &rig).and_then(|l| forward_kinematics(&l, &rig)) {
            Ok(f) => f,
            Err(_) => return check(false, format!("FK(IK) failed at {xy:?}")),
        };
        worst = worst.max((fix.xy - xy).norm());
        // Clamp idempotence over poses well outside the reachable set too.
        let p = Pose {
            position: Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            orientation: UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            )),
        };
        let once = clamp_to_workspace(&p, &ws, &fine).expect("finite pose");
        let twice = clamp_to_workspace(&once, &ws, &fine).expect("finite pose");
        if once != twice {
            clamp_mismatch += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-9 && clamp_mismatch == 0 && elapsed < Duration::from_secs(1),
        format!(
            "10000 points: max |FK(IK(p)) - p| = {worst:.2e} m (< 1e-9), clamp non-idempotent {clamp_mismatch}, {:.0} ms (< 1000)",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.gen_range(0..6) {
        0 => Message::PoseCommand(Pose {
            position: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            orientation: UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            )),
        }),
        1 => Message::ForceSample(Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))),
        2 => {
            let (w, h) = (rng.gen_range(0..40u16), rng.gen_range(0..40u16));
            let mut pixels = vec![0u8; usize::from(w) * usize::from(h)];
            rng.fill_bytes(&mut pixels);
            Message::UsFrame(FramePayload {
                width: w,
                height: h,
                pixel_format: PIXEL_FORMAT_GRAY8,
                frame_id: rng.gen(),
                pixel_spacing_um: rng.gen_range(1..=u32::MAX),
                frozen: rng.gen(),
                pixels,
            })
        }
        3 => Message::Heartbeat,
        4 => Message::SessionControl(
            [ControlOp::Hello, ControlOp::Start, ControlOp::Stop, ControlOp::Freeze, ControlOp::Unfreeze, ControlOp::Bye]
                [rng.gen_range(0..6)],
        ),
        _ => Message::StatusReport { rx_bytes_per_s: rng.gen(), tx_bytes_per_s: rng.gen(), rtt_estimate_us: rng.gen() },
    }
}

fn protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut corrupt_accepted = 0;
    let mut encoded = Vec::new();
    for i in 0..100_000u32 {
        let m = random_message(&mut rng);
        let ts = rng.gen();
        let bytes = encode(&m, i, ts).expect("small message");
        match decode(&bytes) {
            Ok((h, back)) if back == m && h.seq == i && h.timestamp_us == ts => {}
            _ => mismatches += 1,
        }
        // One flipped bit anywhere must be caught.
        let mut bad = bytes.clone();
        let bit = rng.gen_range(0..bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        if decode(&bad).is_ok() {
            corrupt_accepted += 1;
        }
        if i < 1000 {
            encoded.push(bytes);
        }
    }
    // Random bytes, raw and behind a valid-looking prefix.
    let mut panics = 0;
    let mut random_accepted = 0;
    for i in 0..100_000 {
        let len = rng.gen_range(0..96);
        let mut buf = vec![0u8; len];
        rng.fill_bytes(&mut buf);
        if i % 2 == 0 {
            let src = &encoded[i % encoded.len()];
            let keep = rng.gen_range(0..src.len().min(20)).min(buf.len());
            buf[..keep].copy_from_slice(&src[..keep]);
        }
        match std::panic::catch_unwind(|| decode(&buf)) {
            Err(_) => panics += 1,
            Ok(Ok(_)) => random_accepted += 1,
            Ok(Err(_)) => {}
        }
    }
    let hb = encode(&Message::Heartbeat, 0, 0).expect("heartbeat").len();
    check(
        mismatches == 0 && corrupt_accepted == 0 && panics == 0 && hb == 24,
        format!(
            "100000 roundtrips: {mismatches} mismatches; 100000 bit flips: {corrupt_accepted} accepted; \
             100000 random buffers: {panics} panics ({random_accepted} decoded); heartbeat {hb} bytes"
        ),
    )
}

const PRESETS: [&str; 4] = ["direct", "vthd", "dsl", "satellite"];

/// Largest delay between the slave last hearing the master and halting,
/// measured over every tick: Some(excess) if the watchdog was late.
fn watchdog_late(trace: &SessionTrace, tick_us: u64) -> Option<u64> {
    let limit = 1_000_000 + tick_us;
    let mut live_seen = false;
    for s in &trace.samples {
        live_seen |= s.slave_last_rx > 0;
        let silent = s.t_us.saturating_sub(s.slave_last_rx);
        let closed = s.slave_link == tersim_core::protocol::LinkStatus::Closed;
        if live_seen && silent > limit && !s.halted && !closed {
            return Some(silent - limit);
        }
    }
    None
}

fn safety() -> Outcome {
    let cfg = SessionConfig::default();
    let ws = cfg.workspace;
    let (mut runs, mut ticks, mut max_force, mut halts) = (0, 0usize, 0.0f64, 0);
    let mut problems = Vec::new();
    for name in Scenario::BUNDLED {
        for preset in PRESETS {
            for outage in [None, Some(Outage { start_s: 3.0, duration_s: 2.0 })] {
                let mut s = Scenario::bundled(name).expect("bundled");
                s.outage = outage;
                let params = ChannelParams::preset(preset).expect("preset");
                let trace = match run_session(&s, params, 11) {
                    Ok(t) => t,
                    Err(e) => {
                        problems.push(format!("{name}/{preset}: {e}"));
                        continue;
                    }
                };
                runs += 1;
                for x in &trace.samples {
                    ticks += 1;
                    let f = x.rendered_force.norm();
                    max_force = max_force.max(f);
                    if f > FORCE_CAP {
                        problems.push(format!("{name}/{preset}: force {f} at {}", x.t_us));
                    }
                    if !ws.contains(&x.slave_probe.position) {
                        problems.push(format!("{name}/{preset}: slave outside workspace at {}", x.t_us));
                    }
                }
                if let Some(late) = watchdog_late(&trace, cfg.tick_us()) {
                    problems.push(format!("{name}/{preset}: watchdog late by {late} us"));
                }
                if outage.is_some() && trace.samples.iter().any(|x| x.halted) {
                    halts += 1;
                }
                if outage.is_some() && !trace.samples.iter().any(|x| x.halted) {
                    problems.push(format!("{name}/{preset}: outage did not halt the slave"));
                }
            }
        }
    }
    // Total loss: nothing ever arrives, the slave must stay put and in bounds.
    let lossy = ChannelParams { base_delay: 0.005, jitter: 0.0, loss_prob: 1.0, seed: 0 };
    let mut s = Scenario::bundled("aaa_54mm").expect("bundled");
    s.outage = None;
    let mut lossy_cfg = cfg;
    lossy_cfg.reconnect_timeout = 2.0;
    lossy_cfg.max_duration = 3.0;
    match tersim_core::session::run_session_with(&s, lossy, 1, lossy_cfg) {
        Ok(t) => {
            if t.samples.iter().any(|x| !ws.contains(&x.slave_probe.position)) {
                problems.push("100% loss: slave left the workspace".into());
            }
        }
        Err(e) => problems.push(format!("100% loss: {e}")),
    }
    let mut detail = format!(
        "{runs} runs ({} scenarios x {:?} x with/without outage), {ticks} ticks: max rendered force {max_force:.3} N (<= 6.4), \
         {halts} outage halts, {} violations",
        Scenario::BUNDLED.len(),
        PRESETS,
        problems.len()
    );
    if let Some(p) = problems.first() {
        detail.push_str(&format!("; first: {p}"));
    }
    check(problems.is_empty(), detail)
}

fn phantom_measurement() -> Outcome {
    let s = Scenario::bundled("aaa_54mm").expect("bundled");
    let truth = ground_truth(&s.phantom).max_ap_diameter;
    // Analytic oracle: the Gaussian profile peaks at its center.
    let analytic = 2.0 * s.phantom.aneurysm.expect("aneurysm").peak_radius;
    let trace = match run_session(&s, s.channel, s.seed) {
        Ok(t) => t,
        Err(e) => return check(false, e.to_string()),
    };
    let remote = trace.measurement(Measure::ApAorta).filter_map(|m| m.value).fold(f64::NAN, f64::max);
    check(
        (remote - analytic).abs() <= 0.001 && (truth - analytic).abs() < 1e-12 && trace.completed(),
        format!("remote AP {:.2} mm vs analytic {:.2} mm (±1 mm)", remote * 1e3, analytic * 1e3),
    )
}

fn synthetic_study() -> Outcome {
    let spec = CohortSpec::default();
    let start = Instant::now();
    let a = match run_campaign(&spec, SessionConfig::default()) {
        Ok(r) => r,
        Err(e) => return check(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let b = match run_campaign(&spec, SessionConfig::default()) {
        Ok(r) => r,
        Err(e) => return check(false, e.to_string()),
    };
    let deterministic = a.records == b.records && a.report == b.report;

    let mut aaa_truth = 0;
    let mut aaa_both = 0;
    let mut thr_truth = 0;
    let mut thr_both = 0;
    for (i, p) in a.patients.iter().enumerate() {
        let gt = ground_truth(&p.scenario.phantom);
        let (bed, rem) = (&a.records[2 * i], &a.records[2 * i + 1]);
        if gt.has_aaa {
            aaa_truth += 1;
            aaa_both += usize::from(bed.aaa_detected && rem.aaa_detected);
        }
        if gt.has_thrombus {
            thr_truth += 1;
            thr_both += usize::from(bed.thrombus == Some(true) && rem.thrombus == Some(true));
        }
    }
    let r = a.report.aorta.pearson.map_or(f64::NAN, |c| c.r);
    let kappa = a.report.grade.kappa.map_or(f64::NAN, |k| k.kappa);
    let buckets = &a.report.aorta.abs_diff_buckets;
    let bucketed = buckets.counts.iter().sum::<usize>() == a.report.aorta.n && a.report.aorta.n == a.report.n_completed;
    let pass = aaa_truth == 8
        && aaa_both == 8
        && thr_both == thr_truth
        && r >= 0.95
        && kappa >= 0.8
        && bucketed
        && deterministic
        && elapsed < Duration::from_secs(60);
    check(
        pass,
        format!(
            "{} patients: AAA {aaa_both}/{aaa_truth} in both arms, thrombus {thr_both}/{thr_truth}, aorta r = {r:.4} (>= 0.95), \
             grade kappa = {kappa:.4} (>= 0.8), |diff| buckets {:?} over {} pairs, deterministic {deterministic}, {:.1} s (< 60)",
            a.report.n_patients,
            buckets.counts,
            a.report.aorta.n,
            elapsed.as_secs_f64()
        ),
    )
}

fn pairs(xs: &[(f64, f64)]) -> Vec<MeasurementPair> {
    xs.iter().map(|&(b, r)| MeasurementPair::new(b, r)).collect()
}

/// The grade table implied by the published marginals and mismatch list;
/// rows bedside, columns remote, none/segmentary/diffuse.
const RECONSTRUCTED: [[i64; 3]; 3] = [[14, 0, 0], [2, 8, 1], [0, 4, 24]];

fn stats_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fails = Vec::new();
    let mut cmp = |what: &str, got: f64, want: f64| {
        let d = (got - want).abs();
        worst = worst.max(d);
        if !(d <= 1e-12) {
            fails.push(format!("{what}: {got} vs {want}"));
        }
    };

    let ex = [(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)];
    let r = pearson_r(&pairs(&ex)).map(|c| c.r).unwrap_or(f64::NAN);
    cmp("pearson example", r, common::pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]));
    cmp("pearson = 0.5", r, 0.5);

    let t22 = vec![vec![20, 5], vec![10, 15]];
    let k = cohen_kappa(&[vec![20.0, 5.0], vec![10.0, 15.0]]).map(|k| k.kappa).unwrap_or(f64::NAN);
    cmp("kappa 2x2", k, common::kappa_exact(&t22).to_f64());
    cmp("kappa 2x2 = 0.4", k, 0.4);

    let e = relative_errors(&pairs(&[(0.020, 0.022), (0.020, 0.014)])).expect("positive bedside");
    cmp("relative error +", e.errors[0], (0.022 - 0.020) / 0.020);
    cmp("relative error -", e.errors[1], (0.014 - 0.020) / 0.020);
    cmp("relative error = 0.10", e.errors[0], 0.10);
    cmp("relative error = -0.30", e.errors[1], -0.30);
    cmp("relative error median", e.median, common::median(&e.errors));

    let b = abs_diff_buckets(&pairs(&[(0.020, 0.0239), (0.020, 0.024), (0.020, 0.030), (0.020, 0.0301)]), DEFAULT_CUTS);
    let want: Vec<usize> = [3900, 4000, 10_000, 10_100].iter().map(|&d| common::bucket_um(d)).collect();
    let mut want_counts = [0usize; 3];
    for w in want {
        want_counts[w] += 1;
    }
    let bucket_fail = (b.counts != want_counts).then(|| format!("buckets {:?} vs {:?}", b.counts, want_counts));

    let t = paired_t_test(&pairs(&[(0.0, 1.0), (0.0, 2.0), (0.0, 3.0)])).expect("variance");
    cmp("t diffs 1,2,3", t.t, common::paired_t(&[1.0, 2.0, 3.0]));
    cmp("t = 2 sqrt 3", t.t, 2.0 * 3f64.sqrt());
    cmp("t p-value quadrature", t.p_value, common::t_two_sided_quadrature(t.t, 2.0));
    let t0 = paired_t_test(&pairs(&[(0.0, -1.0), (0.0, 1.0)])).expect("variance");
    cmp("t diffs -1,1", t0.t, 0.0);
    cmp("p diffs -1,1", t0.p_value, 1.0);

    let table: Vec<Vec<f64>> = RECONSTRUCTED.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
    let itable: Vec<Vec<i64>> = RECONSTRUCTED.iter().map(|r| r.to_vec()).collect();
    let simple = cohen_kappa(&table).expect("defined");
    let linear = weighted_kappa(&table, KappaWeights::Linear).expect("defined");
    cmp("simple kappa exact", simple.kappa, common::kappa_exact(&itable).to_f64());
    cmp("simple kappa se", simple.se, common::kappa_se(&itable));
    cmp("linear kappa exact", linear.kappa, common::linear_kappa_exact(&itable).to_f64());

    fails.extend(bucket_fail);
    let paper = 0.84;
    let pass = fails.is_empty() && (linear.kappa - paper).abs() <= 0.02;
    let mut detail = format!(
        "derived examples max |lib - oracle| = {worst:.1e} (<= 1e-12); reconstructed grade table: \
         linear-weighted kappa {:.4} ± {:.3} vs 0.84 ± 0.02; simple kappa {:.4} ± {:.3} (does not reach 0.84)",
        linear.kappa,
        1.96 * linear.se,
        simple.kappa,
        1.96 * simple.se
    );
    if let Some(f) = fails.first() {
        detail.push_str(&format!("; first failure: {f}"));
    }
    check(pass, detail)
}

fn latency_invariance() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for name in Scenario::BUNDLED {
        let s = Scenario::bundled(name).expect("bundled");
        let fast = run_session(&s, ChannelParams::preset("vthd").expect("preset"), s.seed);
        let slow = run_session(&s, ChannelParams::preset("satellite").expect("preset"), s.seed);
        let (fast, slow) = match (fast, slow) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return check(false, e.to_string()),
        };
        let bits = |t: &SessionTrace| t.measurements.iter().map(|m| m.value.map(f64::to_bits)).collect::<Vec<_>>();
        let same = !fast.measurements.is_empty() && bits(&fast) == bits(&slow);
        let longer = slow.duration_s > fast.duration_s;
        pass &= same && longer && fast.completed() && slow.completed();
        lines.push(format!(
            "{name}: {} values bit-identical {same}, {:.2} s vs {:.2} s",
            fast.measurements.len(),
            fast.duration_s,
            slow.duration_s
        ));
    }
    check(pass, lines.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("kinematics", kinematics),
        ("protocol", protocol),
        ("safety", safety),
        ("phantom-measurement", phantom_measurement),
        ("synthetic-study", synthetic_study),
        ("stats-oracles", stats_oracles),
        ("latency-non-distortion", latency_invariance),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
