//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command as Process;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ringveil::adversary::{
    build_view, byte_homogeneity, byte_uniformity, clone_attack, distinguish_schedules, record_attack, record_trials,
    trapdoor_control, AdversaryConfig, Verdict,
};
use ringveil::crypto::{
    gen_params, puzzle_create, puzzle_fast_eval, puzzle_fast_eval_with_work, puzzle_solve, KeyRegistry,
    SequentialSolver, SigningKey,
};
use ringveil::protocol::{
    hub_verify_order, owner_create_order, owner_verify_execution, ExecutionReport, HubConfig, HubState,
};
use ringveil::schedule::{linear_extension, PartialOrder, Switch};
use ringveil::simnet::{
    bursts, channel_view_script, inter_arrivals, latency_sweep, SimConfig, Simulation, Topology,
    CHANNEL_VIEW_DURATION,
};
use ringveil::token::{data_overwrite, encode_upload};
use ringveil::DeviceId;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Sequential squaring on machine words, independent of the bignum code.
fn square_chain_u128(a: u64, t: u64, n: u64) -> u64 {
    let n = n as u128;
    let mut x = a as u128 % n;
    for _ in 0..t {
        x = x * x % n;
    }
    x as u64
}

fn c1_totient_equivalence() -> Outcome {
    const LIMIT: Duration = Duration::from_secs(30);
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for i in 0..1000u64 {
        let params = gen_params(64, 10_000 + i).map_err(|e| e.to_string())?;
        let a = params.random_base(&mut rng);
        let k = params.random_key(&mut rng);
        let t_hat = rng.gen_range(0..=1u64 << 14);
        let p = puzzle_create(&params, &a, t_hat, b"x", &k, 0).map_err(|e| e.to_string())?;
        let fast = puzzle_fast_eval(&p, &params.phi);
        let oracle = square_chain_u128(a.to_u64().unwrap(), t_hat, params.n.to_u64().unwrap());
        ensure!(fast == BigUint::from(oracle), "puzzle {i}: fast {fast} != sequential {oracle} (t_hat {t_hat})");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < LIMIT, "took {elapsed:?}, limit {LIMIT:?}");
    Ok(format!("1000/1000 exact matches in {:.1}s", elapsed.as_secs_f64()))
}

fn c2_verifiable_delay() -> Outcome {
    let params = gen_params(64, 2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let a = params.random_base(&mut rng);
        let k = params.random_key(&mut rng);
        let t_hat = rng.gen_range(0..4096u64);
        let p = puzzle_create(&params, &a, t_hat, b"on", &k, 0).map_err(|e| e.to_string())?;
        let sol = puzzle_solve(&p).map_err(|e| e.to_string())?;
        ensure!(sol.squarings_performed == t_hat, "trial {trial}: {} squarings for t_hat {t_hat}", sol.squarings_performed);
        ensure!(sol.key == k, "trial {trial}: wrong key");

        let mut solver = SequentialSolver::new(&p);
        while !solver.is_complete() {
            solver.advance(rng.gen_range(1..600));
        }
        ensure!(solver.squarings_done() == t_hat, "trial {trial}: chunked solver overshot");

        let (v, work) = puzzle_fast_eval_with_work(&p, &params.phi);
        ensure!(v == sol.value && work.exponentiations == 2 && work.squarings == 0, "trial {trial}: trapdoor {work:?}");
    }

    let p = {
        let a = params.random_base(&mut rng);
        let k = params.random_key(&mut rng);
        puzzle_create(&params, &a, 3000, b"on", &k, 0).map_err(|e| e.to_string())?
    };
    let equal = clone_attack(&p, &AdversaryConfig::default(), 1.0).map_err(|e| e.to_string())?;
    ensure!(equal.adversary_squarings == 3000 && equal.device_squarings == 3000, "clone at equal rate: {equal:?}");
    let slow = clone_attack(&p, &AdversaryConfig { squaring_rate: 0.25, ..Default::default() }, 1.0)
        .map_err(|e| e.to_string())?;
    ensure!(slow.adversary_time_us > slow.device_time_us, "slower clone finished first: {slow:?}");
    ensure!(trapdoor_control(&p, &params.phi).exponentiations == 2, "control path work");

    let reg = KeyRegistry::generate([DeviceId(1)], 2);
    let trials = record_trials(&params, &reg, DeviceId(1), 4, 1000, 1000, &[10, 500, 5000], 7).map_err(|e| e.to_string())?;
    let outcome = record_attack(&trials, &mut ChaCha20Rng::seed_from_u64(8)).map_err(|e| e.to_string())?;
    let sigma = (0.25f64 * 0.75 / 1000.0).sqrt();
    ensure!(
        (outcome.accuracy - 0.25).abs() <= 3.0 * sigma,
        "record attack accuracy {} outside 0.25 +/- {:.4}",
        outcome.accuracy,
        3.0 * sigma
    );
    Ok(format!(
        "1000 solves at exactly t_hat squarings, trapdoor = 2 exponentiations, record-attack accuracy {:.3} (0.25 +/- {:.3})",
        outcome.accuracy,
        3.0 * sigma
    ))
}

fn permutations(items: &[DeviceId]) -> Vec<Vec<DeviceId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn c3_linear_extension_oracle() -> Outcome {
    const LIMIT: Duration = Duration::from_secs(60);
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for sample in 0..500 {
        let n = rng.gen_range(1..=7usize);
        let mut ids: BTreeSet<u32> = BTreeSet::new();
        while ids.len() < n {
            ids.insert(rng.gen_range(1..=30));
        }
        let mut hidden: Vec<u32> = ids.iter().copied().collect();
        for i in (1..hidden.len()).rev() {
            hidden.swap(i, rng.gen_range(0..=i));
        }
        let n_pairs = if n < 2 { 0 } else { rng.gen_range(0..=6) };
        let mut pairs = Vec::new();
        for _ in 0..n_pairs {
            let i = rng.gen_range(0..n - 1);
            let j = rng.gen_range(i + 1..n);
            pairs.push((hidden[i], hidden[j]));
        }
        let order = PartialOrder::new(ids.iter().copied(), &pairs);
        let devices: Vec<DeviceId> = ids.iter().map(|&d| DeviceId(d)).collect();
        let valid: Vec<Vec<DeviceId>> = permutations(&devices)
            .into_iter()
            .filter(|perm| {
                let pos: BTreeMap<DeviceId, usize> = perm.iter().enumerate().map(|(i, &d)| (d, i)).collect();
                pairs.iter().all(|&(a, b)| pos[&DeviceId(a)] < pos[&DeviceId(b)])
            })
            .collect();
        let oracle = valid.iter().min().ok_or(format!("sample {sample}: no valid extension"))?;
        let got = linear_extension(&order).map_err(|e| format!("sample {sample}: {e}"))?;
        ensure!(&got == oracle, "sample {sample}: pairs {pairs:?} got {got:?} expected {oracle:?}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < LIMIT, "took {elapsed:?}, limit {LIMIT:?}");
    Ok(format!("500 posets, 0 mismatches, {:.2}s", elapsed.as_secs_f64()))
}

fn channel_view_config(topology: Topology) -> SimConfig {
    SimConfig {
        n_physical: 3,
        n_virtual: 3,
        topology,
        hop_latency: 10_000,
        jitter: 0,
        rounds: u32::MAX,
        duration: Some(CHANNEL_VIEW_DURATION),
        modulus_bits: 256,
        seed: 4,
        ..SimConfig::default()
    }
}

fn c4_channel_view() -> Outcome {
    const SILENCE_US: u64 = 1_000_000;
    const MAX_CV: f64 = 0.05;
    let script = channel_view_script();
    let star = Simulation::new(channel_view_config(Topology::Star)).map_err(|e| e.to_string())?;
    let star_out = star.run(None, &script).map_err(|e| e.to_string())?;
    let star_bursts = bursts(&star_out.trace, SILENCE_US);
    ensure!(star_bursts.len() >= 4, "star trace has {} bursts", star_bursts.len());

    let ring = Simulation::new(channel_view_config(Topology::Ring)).map_err(|e| e.to_string())?;
    let ring_out = ring.run(None, &script).map_err(|e| e.to_string())?;
    let sizes: BTreeSet<usize> = ring_out.trace.records.iter().map(|r| r.bytes).collect();
    ensure!(sizes.len() == 1, "ring frame sizes vary: {sizes:?}");
    ensure!(ring_out.actuations.len() == 4, "ring run actuated {} commands", ring_out.actuations.len());
    let gaps = inter_arrivals(&ring_out.trace);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
    let cv = sd / mean;
    ensure!(cv < MAX_CV, "ring inter-arrival CV {cv}");
    let ring_bursts = bursts(&ring_out.trace, SILENCE_US);
    Ok(format!(
        "star: {} bursts; ring: {} frames all {} bytes, inter-arrival CV {cv:.4} (< {MAX_CV}), {} burst",
        star_bursts.len(),
        ring_out.trace.records.len(),
        sizes.first().unwrap(),
        ring_bursts.len()
    ))
}

fn four_device(topology: Topology, rounds: u32, schedule: &str) -> Result<(ringveil::simnet::SimOutput, bool), String> {
    let cfg = SimConfig {
        n_physical: 4,
        n_virtual: 4,
        topology,
        rounds,
        jitter: 200,
        modulus_bits: 128,
        seed: 5,
        ..SimConfig::default()
    };
    let order = PartialOrder::parse(schedule).map_err(|e| e.to_string())?;
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    sim.chain(&order).map_err(|e| e.to_string())?;
    let plan = sim.compile(&order, 0, 0).map_err(|e| e.to_string())?;
    let out = sim.run(Some(&plan), &[]).map_err(|e| e.to_string())?;
    let ok = owner_verify_execution(&out.reports, &sim.params, &plan);
    Ok((out, ok))
}

fn c5_indistinguishability() -> Outcome {
    const ALPHA: f64 = 0.01;
    let cfg = AdversaryConfig { significance: ALPHA, ..Default::default() };
    let sched_a = "device 1\ndevice 2\ndevice 3\ndevice 4\npair 1 2\npair 3 4\n";
    let sched_b = "device 1\ndevice 2\ndevice 3\ndevice 4\npair 4 1\npair 1 3\nstate 2 off\n";
    let (a, ok_a) = four_device(Topology::Ring, 200, sched_a)?;
    let (b, ok_b) = four_device(Topology::Ring, 200, sched_b)?;
    ensure!(ok_a && ok_b, "honest ring runs failed owner verification");
    let (star, _) = four_device(Topology::Star, 200, sched_a)?;

    let (va, vb, vs) = (build_view(&a.trace), build_view(&b.trace), build_view(&star.trace));
    let same = distinguish_schedules(&va, &vb, &cfg).map_err(|e| e.to_string())?;
    ensure!(same.verdict == Verdict::FailToReject, "ring A vs ring B rejected:\n{}", same.to_text());
    let diff = distinguish_schedules(&va, &vs, &cfg).map_err(|e| e.to_string())?;
    ensure!(diff.verdict == Verdict::Reject, "ring vs star not rejected:\n{}", diff.to_text());

    let layout = SimConfig { n_physical: 4, n_virtual: 4, modulus_bits: 128, ..SimConfig::default() }.layout();
    let reg = KeyRegistry::generate((1..=4).map(DeviceId), 5);
    let report = ExecutionReport { device_id: DeviceId(2), t_com: 123_456, t_hat: 1000, solution: BigUint::from(42u32) };
    let b_g_one = encode_upload(&report.encode(), false, layout.subfield_len).map_err(|e| e.to_string())?;
    let (mut b_r, mut b_o, mut b_g) = (Vec::new(), Vec::new(), Vec::new());
    let mut seed = 0;
    while b_r.len() < 10_000 {
        let mut hub = HubState::new(HubConfig { layout, counter_start: 4, seed }, reg.ring_key.clone());
        hub.emit_token(0);
        let field = hub.random_field_log.values().next().cloned().ok_or("no random field logged")?;
        let generated: Vec<u8> = b_g_one.iter().cycle().take(field.len()).copied().collect();
        b_o.extend(data_overwrite(&field, &generated).map_err(|e| e.to_string())?);
        b_g.extend(generated);
        b_r.extend(field);
        seed += 1;
    }
    b_r.truncate(10_000);
    b_o.truncate(10_000);
    b_g.truncate(10_000);
    let ur = byte_uniformity(&b_r, ALPHA);
    let uo = byte_uniformity(&b_o, ALPHA);
    let hom = byte_homogeneity(&b_r, &b_o, ALPHA);
    ensure!(ur.verdict == Verdict::FailToReject, "b_r not uniform: {ur:?}");
    ensure!(uo.verdict == Verdict::FailToReject, "b_o not uniform: {uo:?}");
    ensure!(hom.verdict == Verdict::FailToReject, "b_r and b_o differ: {hom:?}");
    ensure!(byte_uniformity(&b_g, ALPHA).verdict == Verdict::Reject, "plain payload looked uniform");

    let min_p = |r: &ringveil::adversary::DistinguishReport| r.tests.iter().map(|t| t.p_value).fold(1.0, f64::min);
    Ok(format!(
        "ring A vs B min p {:.3}; ring vs star min p {:.2e}; b_r p {:.3}, b_o p {:.3} over 10^4 bytes",
        min_p(&same),
        min_p(&diff),
        ur.p_value,
        uo.p_value
    ))
}

fn c6_timing_replay() -> Outcome {
    let cfg = SimConfig { n_physical: 5, n_virtual: 5, rounds: 12, modulus_bits: 128, seed: 6, ..SimConfig::default() };
    let order = PartialOrder::new([1, 2, 3, 4, 5], &[(1, 2), (2, 3)]);
    let mut sim = Simulation::new(cfg.clone()).map_err(|e| e.to_string())?;
    sim.chain(&order).map_err(|e| e.to_string())?;
    let plan = sim.compile(&order, 0, 0).map_err(|e| e.to_string())?;
    let out = sim.run(Some(&plan), &[]).map_err(|e| e.to_string())?;
    ensure!(owner_verify_execution(&out.reports, &sim.params, &plan), "owner verification rejected an honest run");

    let t: BTreeMap<DeviceId, u64> = out.actuations.iter().map(|(d, a)| (*d, a.t_com)).collect();
    ensure!(t.len() == 5, "only {} devices actuated", t.len());
    for (i, j) in [(1, 2), (2, 3), (1, 3)] {
        ensure!(t[&DeviceId(i)] <= t[&DeviceId(j)], "D{i} after D{j}: {t:?}");
    }
    let (t4, t5) = (t[&DeviceId(4)], t[&DeviceId(5)]);
    ensure!(t4.abs_diff(t5) <= cfg.tick_us, "incomparable D4/D5 at {t4} and {t5}");

    // Each actuation lands on the first tick after forward time + t_hat / S.
    let fwd = sim.expected_forward_times();
    for e in &plan.entries {
        let due = fwd[e.position] + cfg.timing().units_for(e.t_hat);
        let got = t[&e.device];
        ensure!(got >= due && got < due + cfg.tick_us, "{}: actuated {got}, due {due}", e.device);
    }
    let gap = |i: u32, j: u32| t[&DeviceId(j)] as i64 - t[&DeviceId(i)] as i64;
    Ok(format!(
        "order respected, owner verification true, |D4-D5| = {} us (tick {}), chain gaps {} / {} us",
        t4.abs_diff(t5),
        cfg.tick_us,
        gap(1, 2),
        gap(2, 3)
    ))
}

fn c7_sweep_shape() -> Outcome {
    const KNEE_INDEX: usize = 1;
    const MIN_R2: f64 = 0.99;
    let base = SimConfig { n_physical: 3, rounds: 3, modulus_bits: 256, bandwidth: Some(1.0), seed: 7, ..SimConfig::default() };
    let counts = [3usize, 15, 27, 39, 51, 63, 75];
    let rows = latency_sweep(&base, &counts, true).map_err(|e| e.to_string())?;
    let lat: Vec<f64> = rows.iter().map(|r| r.mean_latency_us).collect();
    ensure!(lat.windows(2).all(|w| w[1] > w[0]), "latency not increasing: {lat:?}");
    let second: Vec<f64> = lat.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    ensure!(second[KNEE_INDEX - 1..].iter().all(|&d| d > 0.0), "second differences {second:?}");

    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_token_bytes).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - (my + slope * (x - mx))).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    ensure!(r2 >= MIN_R2, "token length R^2 {r2}");
    Ok(format!(
        "latency {:.0}..{:.0} us strictly increasing, all second differences > 0, token bytes {:.0}..{:.0} (R^2 {r2:.5}, {slope:.1} B/device)",
        lat[0],
        lat[lat.len() - 1],
        ys[0],
        ys[ys.len() - 1]
    ))
}

fn c8_cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_ringveil");
    let schedule = dir.path().join("schedule.txt");
    std::fs::write(&schedule, "device 1\ndevice 2\ndevice 3\npair 1 2\n").map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Process::new(bin).args(args).env_remove("RINGVEIL_SEED").output().map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    let first = dir.path().join("first");
    run(&[
        "sim", "run", "--devices", "3", "--rounds", "25", "--jitter", "400", "--seed", "88",
        "--schedule", schedule.to_str().unwrap(), "--out", first.to_str().unwrap(),
    ])?;
    let manifest = first.join("manifest.json");
    let mut traces = Vec::new();
    for name in ["second", "third"] {
        let out = dir.path().join(name);
        run(&["sim", "run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        traces.push(std::fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
    }
    let original = std::fs::read(first.join("trace.csv")).map_err(|e| e.to_string())?;
    ensure!(traces[0] == traces[1], "manifest replays differ");
    ensure!(traces[0] == original, "manifest replay differs from the original run");
    Ok(format!("two manifest replays byte-identical ({} bytes of trace)", original.len()))
}

fn c9_order_authentication() -> Outcome {
    let cfg = SimConfig { n_physical: 4, n_virtual: 4, modulus_bits: 64, seed: 9, ..SimConfig::default() };
    let sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let owner_pk = sim.registry.owner_public();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let (mut accepted, mut rejected) = (0, 0);
    for i in 0..100u64 {
        let mut order = PartialOrder::new([1, 2, 3, 4], &[(1, 2), (3, 4)]);
        order.states.insert(DeviceId(1 + (i % 4) as u32), Switch::Off);
        let plan = sim.compile(&order, i, i * 4).map_err(|e| e.to_string())?;
        let honest = owner_create_order(&plan, &sim.registry);
        ensure!(hub_verify_order(&honest, &owner_pk), "honest order {i} rejected");
        accepted += 1;

        let mut forged = honest.clone();
        match i % 4 {
            0 => {
                let bit = rng.gen_range(0..forged.commands.len() * 8);
                forged.commands[bit / 8] ^= 1 << (bit % 8);
            }
            1 => {
                let bit = rng.gen_range(0..forged.digest.len() * 8);
                forged.digest[bit / 8] ^= 1 << (bit % 8);
            }
            2 => {
                let bit = rng.gen_range(0..forged.signature.len() * 8);
                forged.signature[bit / 8] ^= 1 << (bit % 8);
            }
            _ => {
                let mut impostor = sim.registry.clone();
                impostor.owner = SigningKey::from_bytes(&rng.gen());
                forged = owner_create_order(&plan, &impostor);
            }
        }
        ensure!(forged != honest, "tamper {i} was a no-op");
        ensure!(!hub_verify_order(&forged, &owner_pk), "tampered order {i} (kind {}) accepted", i % 4);
        rejected += 1;
    }
    Ok(format!("{accepted}/100 honest accepted, {rejected}/100 tampered rejected"))
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("totient verification equals sequential squaring", c1_totient_equivalence),
        ("verifiable delay and record attack", c2_verifiable_delay),
        ("linear extension matches brute force", c3_linear_extension_oracle),
        ("channel view: star bursts, ring constant", c4_channel_view),
        ("statistical indistinguishability", c5_indistinguishability),
        ("timing-constraint replay", c6_timing_replay),
        ("latency sweep shape", c7_sweep_shape),
        ("cli replay determinism", c8_cli_determinism),
        ("order authentication", c9_order_authentication),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
