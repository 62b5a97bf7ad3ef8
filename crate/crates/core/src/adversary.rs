//! Passive channel observer and the distinguishing experiments run against
//! captured traces.
//!
//! Everything here consumes `TraceLog` metadata, sealed bytes, or device
//! snapshots. No function takes a key.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::crypto::{
    puzzle_fast_eval_with_work, seal_for_device, KeyRegistry, Puzzle, PuzzleParams, SequentialSolver, Work,
};
use crate::protocol::DeviceState;
use crate::schedule::{puzzle_capacity, Command, Switch};
use crate::simnet::{TraceLog, HUB_NODE};
use crate::{DeviceId, Micros};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdversaryError {
    #[error("significance must lie in (0, 0.1], got {0}")]
    Significance(f64),
    #[error("squaring rate must be positive")]
    ZeroRate,
    #[error("view has no observations")]
    EmptyView,
    #[error("need at least one slot and one trial")]
    NoTrials,
    #[error("target slot {index} out of range for {slots} slots")]
    Target { index: usize, slots: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Observation {
    pub time_us: Micros,
    /// Destination for command observations, source for data observations.
    pub node: u32,
    pub size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AdversarialView {
    pub command_obs: Vec<Observation>,
    pub data_obs: Vec<Observation>,
}

impl AdversarialView {
    pub fn is_empty(&self) -> bool {
        self.command_obs.is_empty() && self.data_obs.is_empty()
    }

    /// Per-node activity: (commands received, data sent, first instants).
    pub fn activity_table(&self) -> BTreeMap<u32, NodeActivity> {
        let mut table: BTreeMap<u32, NodeActivity> = BTreeMap::new();
        for o in &self.command_obs {
            let row = table.entry(o.node).or_default();
            row.commands += 1;
            row.command_times.push(o.time_us);
        }
        for o in &self.data_obs {
            let row = table.entry(o.node).or_default();
            row.data += 1;
            row.data_times.push(o.time_us);
        }
        table
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NodeActivity {
    pub commands: usize,
    pub data: usize,
    pub command_times: Vec<Micros>,
    pub data_times: Vec<Micros>,
}

/// Projects a trace onto what a passive listener learns. Hub-to-device
/// frames look like commands and device-to-hub frames look like data. Once
/// any device-to-device frame shows up the trace is a ring, where every hop
/// could be either, so each record lands in both lists.
pub fn build_view(trace: &TraceLog) -> AdversarialView {
    let ring = trace.records.iter().any(|r| r.src != HUB_NODE && r.dst != HUB_NODE);
    let mut view = AdversarialView::default();
    for r in &trace.records {
        let cmd = Observation { time_us: r.time_us, node: r.dst, size: r.bytes };
        let data = Observation { time_us: r.time_us, node: r.src, size: r.bytes };
        if ring {
            view.command_obs.push(cmd);
            view.data_obs.push(data);
        } else if r.src == HUB_NODE {
            view.command_obs.push(cmd);
        } else {
            view.data_obs.push(data);
        }
    }
    view
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryConfig {
    /// Squarings per microsecond.
    pub squaring_rate: f64,
    pub significance: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { squaring_rate: 1.0, significance: 0.01 }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(self.significance > 0.0 && self.significance <= 0.1) {
            return Err(AdversaryError::Significance(self.significance));
        }
        if !(self.squaring_rate > 0.0 && self.squaring_rate.is_finite()) {
            return Err(AdversaryError::ZeroRate);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Reject,
    FailToReject,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

impl TestResult {
    fn new(test: &str, statistic: f64, p_value: f64, alpha: f64) -> Self {
        let verdict = if p_value < alpha { Verdict::Reject } else { Verdict::FailToReject };
        Self { test: test.to_string(), statistic, p_value, verdict }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistinguishReport {
    pub tests: Vec<TestResult>,
    pub verdict: Verdict,
}

impl DistinguishReport {
    pub fn distinguishable(&self) -> bool {
        self.verdict == Verdict::Reject
    }

    /// One JSON object per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tests {
            out.push_str(&serde_json::to_string(t).expect("plain struct serializes"));
            out.push('\n');
        }
        let overall = serde_json::json!({
            "test": "overall",
            "statistic": self.tests.len(),
            "p_value": self.tests.iter().map(|t| t.p_value).fold(1.0, f64::min),
            "verdict": self.verdict,
        });
        out.push_str(&overall.to_string());
        out.push('\n');
        out
    }
}

/// Asymptotic Kolmogorov tail `Q(lambda) = 2 sum (-1)^(j-1) exp(-2 j^2 lambda^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test. Returns `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    if a.is_empty() || b.is_empty() {
        return (0.0, 1.0);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let p = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
    (d, p)
}

fn chi_square_p(statistic: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    (1.0 - dist.cdf(statistic)).clamp(0.0, 1.0)
}

/// Chi-square homogeneity test on two count vectors over the same
/// categories. Categories empty in both are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "count vectors must align");
    let cols: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x + **y > 0)
        .map(|(&x, &y)| (x as f64, y as f64))
        .collect();
    let (ta, tb) = cols.iter().fold((0.0, 0.0), |s, c| (s.0 + c.0, s.1 + c.1));
    if cols.len() < 2 || ta == 0.0 || tb == 0.0 {
        return (0.0, 1.0);
    }
    let total = ta + tb;
    let mut stat = 0.0;
    for &(x, y) in &cols {
        let col = x + y;
        let ea = col * ta / total;
        let eb = col * tb / total;
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    (stat, chi_square_p(stat, cols.len() - 1))
}

/// Chi-square goodness of fit of byte values against the uniform
/// distribution over 256 bins.
pub fn byte_uniformity(bytes: &[u8], significance: f64) -> TestResult {
    let mut bins = [0u64; 256];
    for &b in bytes {
        bins[b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    let stat = if bytes.is_empty() {
        0.0
    } else {
        bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum()
    };
    TestResult::new("byte_uniformity", stat, chi_square_p(stat, 255), significance)
}

/// Two-sample byte histogram comparison.
pub fn byte_homogeneity(a: &[u8], b: &[u8], significance: f64) -> TestResult {
    let hist = |s: &[u8]| {
        let mut h = vec![0u64; 256];
        for &x in s {
            h[x as usize] += 1;
        }
        h
    };
    let (stat, p) = chi_square_homogeneity(&hist(a), &hist(b));
    TestResult::new("byte_homogeneity", stat, p, significance)
}

fn observations(view: &AdversarialView) -> Vec<Observation> {
    let mut all: BTreeSet<Observation> = view.command_obs.iter().copied().collect();
    all.extend(view.data_obs.iter().copied());
    all.into_iter().collect()
}

fn node_counts(obs: &[Observation], nodes: &BTreeSet<u32>) -> Vec<u64> {
    let mut counts: BTreeMap<u32, u64> = nodes.iter().map(|&n| (n, 0)).collect();
    for o in obs {
        *counts.entry(o.node).or_default() += 1;
    }
    counts.into_values().collect()
}

/// Compares two views with two-sample tests on frame sizes, inter-arrival
/// times and per-node command and data counts. The views are judged
/// distinguishable when any test rejects at `cfg.significance`.
pub fn distinguish_schedules(
    a: &AdversarialView,
    b: &AdversarialView,
    cfg: &AdversaryConfig,
) -> Result<DistinguishReport, AdversaryError> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(AdversaryError::EmptyView);
    }
    let alpha = cfg.significance;
    let (oa, ob) = (observations(a), observations(b));
    let sizes = |o: &[Observation]| o.iter().map(|x| x.size as f64).collect::<Vec<_>>();
    let gaps = |o: &[Observation]| {
        let mut times: Vec<Micros> = o.iter().map(|x| x.time_us).collect();
        times.dedup();
        times.windows(2).map(|w| (w[1] - w[0]) as f64).collect::<Vec<_>>()
    };
    let mut tests = Vec::new();
    let (d, p) = ks_two_sample(&sizes(&oa), &sizes(&ob));
    tests.push(TestResult::new("ks_frame_size", d, p, alpha));
    let (d, p) = ks_two_sample(&gaps(&oa), &gaps(&ob));
    tests.push(TestResult::new("ks_inter_arrival", d, p, alpha));

    for (name, xa, xb) in [
        ("chi2_command_counts", &a.command_obs, &b.command_obs),
        ("chi2_data_counts", &a.data_obs, &b.data_obs),
    ] {
        let nodes: BTreeSet<u32> = xa.iter().chain(xb.iter()).map(|o| o.node).collect();
        let (stat, p) = chi_square_homogeneity(&node_counts(xa, &nodes), &node_counts(xb, &nodes));
        tests.push(TestResult::new(name, stat, p, alpha));
    }
    let verdict = if tests.iter().any(|t| t.verdict == Verdict::Reject) {
        Verdict::Reject
    } else {
        Verdict::FailToReject
    };
    Ok(DistinguishReport { tests, verdict })
}

/// One observed command field: the sealed slots the adversary sees, and the
/// index of the slot that actually carries the target difficulty (used only
/// for scoring).
#[derive(Clone, Debug)]
pub struct RecordTrial {
    pub slots: Vec<Vec<u8>>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Standard error of random guessing among the observed slots.
    pub chance: f64,
    pub std_error: f64,
}

impl AttackOutcome {
    pub fn within_sigmas(&self, k: f64) -> bool {
        (self.accuracy - self.chance).abs() <= k * self.std_error
    }
}

/// Builds `trials` command fields of `l` slots each. Every slot holds a
/// sealed, capacity-padded puzzle; exactly one carries `target_t_hat` and
/// the rest carry `other_t_hats` drawn cyclically.
#[allow(clippy::too_many_arguments)]
pub fn record_trials(
    params: &PuzzleParams,
    registry: &KeyRegistry,
    device: DeviceId,
    l: usize,
    trials: usize,
    target_t_hat: u64,
    other_t_hats: &[u64],
    seed: u64,
) -> Result<Vec<RecordTrial>, crate::crypto::CryptoError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pk = registry.device(device)?.exchange_public();
    let cap = puzzle_capacity(params.bit_length);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let target = rng.gen_range(0..l);
        let mut slots = Vec::with_capacity(l);
        for s in 0..l {
            let t_hat = if s == target || other_t_hats.is_empty() {
                target_t_hat
            } else {
                other_t_hats[(trial + s) % other_t_hats.len()]
            };
            let cmd = Command { device, state: Switch::On, seq: (trial * l + s) as u64 };
            let a = params.random_base(&mut rng);
            let k = params.random_key(&mut rng);
            let puzzle = crate::crypto::puzzle_create(params, &a, t_hat, &cmd.encode(), &k, 0)?;
            let mut body = puzzle.to_bytes();
            body.resize(cap, 0);
            slots.push(seal_for_device(&body, &pk, &mut rng));
        }
        out.push(RecordTrial { slots, target });
    }
    Ok(out)
}

/// Game-0 adversary: knows the target difficulty was used before and tries
/// to spot its slot from ciphertext metadata. The only metadata a sealed
/// slot exposes is its length, so the guess is the slot whose length is
/// closest to the smallest one seen, ties broken uniformly.
pub fn record_attack<R: RngCore>(trials: &[RecordTrial], rng: &mut R) -> Result<AttackOutcome, AdversaryError> {
    if trials.is_empty() || trials.iter().any(|t| t.slots.is_empty()) {
        return Err(AdversaryError::NoTrials);
    }
    let mut correct = 0usize;
    let mut chance = 0.0;
    for t in trials {
        if t.target >= t.slots.len() {
            return Err(AdversaryError::Target { index: t.target, slots: t.slots.len() });
        }
        let shortest = t.slots.iter().map(Vec::len).min().unwrap_or(0);
        let candidates: Vec<usize> = (0..t.slots.len()).filter(|&i| t.slots[i].len() == shortest).collect();
        let guess = *candidates.choose(rng).expect("at least one slot");
        if guess == t.target {
            correct += 1;
        }
        chance += 1.0 / t.slots.len() as f64;
    }
    let n = trials.len() as f64;
    let chance = chance / n;
    Ok(AttackOutcome {
        trials: trials.len(),
        correct,
        accuracy: correct as f64 / n,
        chance,
        std_error: (chance * (1.0 - chance) / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CloneOutcome {
    pub adversary_squarings: u64,
    pub device_squarings: u64,
    pub adversary_time_us: f64,
    pub device_time_us: f64,
}

/// Both a clone and the real device start from the same sealed puzzle and
/// grind without the trapdoor, each at its own rate.
pub fn clone_attack(puzzle: &Puzzle, cfg: &AdversaryConfig, device_rate: f64) -> Result<CloneOutcome, AdversaryError> {
    cfg.validate()?;
    if !(device_rate > 0.0 && device_rate.is_finite()) {
        return Err(AdversaryError::ZeroRate);
    }
    let grind = |rate: f64| {
        let mut solver = SequentialSolver::new(puzzle);
        let step = (rate.ceil() as u64).max(1);
        while !solver.is_complete() {
            solver.advance(step);
        }
        let n = solver.squarings_done();
        (n, n as f64 / rate)
    };
    let (adversary_squarings, adversary_time_us) = grind(cfg.squaring_rate);
    let (device_squarings, device_time_us) = grind(device_rate);
    Ok(CloneOutcome { adversary_squarings, device_squarings, adversary_time_us, device_time_us })
}

/// Control case: the same puzzle evaluated by someone holding `phi`.
pub fn trapdoor_control(puzzle: &Puzzle, phi: &num_bigint::BigUint) -> Work {
    puzzle_fast_eval_with_work(puzzle, phi).1
}

/// Squarings still owed after a snapshot of a device mid-solve.
pub fn snapshot_remaining(device: &DeviceState) -> Option<u64> {
    device.pending_puzzle.as_ref().map(|p| p.puzzle.t_hat - device.solve_progress())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_params;
    use crate::simnet::TraceRecord;
    use proptest::prelude::*;

    fn rec(t: Micros, src: u32, dst: u32, bytes: usize) -> TraceRecord {
        TraceRecord { time_us: t, src, dst, bytes, round: 0 }
    }

    #[test]
    fn star_view_matches_table() {
        let trace = TraceLog { records: vec![rec(10, 0, 1, 90), rec(20, 0, 2, 90), rec(30, 2, 0, 40)] };
        let v = build_view(&trace);
        assert_eq!(
            v.command_obs,
            vec![Observation { time_us: 10, node: 1, size: 90 }, Observation { time_us: 20, node: 2, size: 90 }]
        );
        assert_eq!(v.data_obs, vec![Observation { time_us: 30, node: 2, size: 40 }]);
        let table = v.activity_table();
        assert_eq!(table[&2].commands, 1);
        assert_eq!(table[&2].data, 1);
        assert_eq!(table[&1].data, 0);
    }

    #[test]
    fn empty_trace_gives_empty_view() {
        let v = build_view(&TraceLog::default());
        assert!(v.is_empty());
        let err = distinguish_schedules(&v, &v, &AdversaryConfig::default()).unwrap_err();
        assert_eq!(err, AdversaryError::EmptyView);
    }

    #[test]
    fn significance_bounds() {
        for bad in [0.0, 0.2, -1.0, f64::NAN] {
            let cfg = AdversaryConfig { significance: bad, ..Default::default() };
            assert!(cfg.validate().is_err());
        }
        assert!(AdversaryConfig { significance: 0.1, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn ks_known_values() {
        let a: Vec<f64> = (0..100).map(f64::from).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
        let b: Vec<f64> = (1000..1100).map(f64::from).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert_eq!(d, 1.0);
        assert!(p < 1e-20);
        // Q(1.0) from tables.
        assert!((kolmogorov_q(1.0) - 0.27).abs() < 0.001);
        assert!((kolmogorov_q(1.36) - 0.049).abs() < 0.001);
    }

    #[test]
    fn chi_square_known_value() {
        // 2x2 table [[10, 20], [20, 10]]: statistic 20/3, df 1.
        let (stat, p) = chi_square_homogeneity(&[10, 20], &[20, 10]);
        assert!((stat - 20.0 / 3.0).abs() < 1e-9);
        assert!((p - 0.009_823).abs() < 1e-4);
        assert_eq!(chi_square_homogeneity(&[5, 0], &[7, 0]), (0.0, 1.0));
    }

    #[test]
    fn skewed_bytes_rejected() {
        let skew: Vec<u8> = (0..10_000u32).map(|i| (i % 16) as u8).collect();
        assert_eq!(byte_uniformity(&skew, 0.01).verdict, Verdict::Reject);
        let flat: Vec<u8> = (0..10_240u32).map(|i| i as u8).collect();
        assert_eq!(byte_uniformity(&flat, 0.01).verdict, Verdict::FailToReject);
    }

    #[test]
    fn report_text_has_fields() {
        let v = build_view(&TraceLog { records: vec![rec(0, 0, 1, 5), rec(5, 1, 0, 5)] });
        let r = distinguish_schedules(&v, &v, &AdversaryConfig::default()).unwrap();
        assert!(!r.distinguishable());
        for line in r.to_text().lines() {
            let j: serde_json::Value = serde_json::from_str(line).unwrap();
            for f in ["test", "statistic", "p_value", "verdict"] {
                assert!(j.get(f).is_some(), "{line}");
            }
        }
    }

    #[test]
    fn record_attack_degenerate_and_errors() {
        let params = gen_params(64, 3).unwrap();
        let reg = KeyRegistry::generate([DeviceId(1)], 3);
        let trials = record_trials(&params, &reg, DeviceId(1), 1, 20, 50, &[], 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(record_attack(&trials, &mut rng).unwrap().accuracy, 1.0);
        assert_eq!(record_attack(&[], &mut rng).unwrap_err(), AdversaryError::NoTrials);
        let bad = RecordTrial { slots: vec![vec![0]], target: 1 };
        assert!(record_attack(&[bad], &mut rng).is_err());
    }

    #[test]
    fn clone_pays_full_price() {
        let params = gen_params(64, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = params.random_base(&mut rng);
        let k = params.random_key(&mut rng);
        let p = crate::crypto::puzzle_create(&params, &a, 777, b"on", &k, 0).unwrap();
        let same = clone_attack(&p, &AdversaryConfig::default(), 1.0).unwrap();
        assert_eq!((same.adversary_squarings, same.device_squarings), (777, 777));
        let slow = clone_attack(&p, &AdversaryConfig { squaring_rate: 0.5, ..Default::default() }, 1.0).unwrap();
        assert!(slow.adversary_time_us > slow.device_time_us);
        let fast = clone_attack(&p, &AdversaryConfig { squaring_rate: 64.0, ..Default::default() }, 1.0).unwrap();
        assert_eq!(fast.adversary_squarings, 777);
        assert_eq!(trapdoor_control(&p, &params.phi).exponentiations, 2);
    }

    proptest! {
        #[test]
        fn ring_view_is_symmetric(n in 2u32..8, rounds in 1usize..5) {
            let mut records = Vec::new();
            let mut t = 0;
            for _ in 0..rounds {
                for hop in 0..=n {
                    let src = if hop == 0 { 0 } else { hop };
                    let dst = if hop == n { 0 } else { hop + 1 };
                    records.push(rec(t, src, dst, 100));
                    t += 10;
                }
            }
            let v = build_view(&TraceLog { records });
            let table = v.activity_table();
            for row in table.values() {
                prop_assert_eq!(row.commands, rounds);
                prop_assert_eq!(row.data, rounds);
            }
        }
    }
}
