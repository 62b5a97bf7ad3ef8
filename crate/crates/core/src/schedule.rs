//! Owner-side schedule compilation.
//!
//! A [`PartialOrder`] over devices is chained into a ring order, each device
//! gets a puzzle difficulty that makes comparable devices actuate in order
//! and same-level incomparable devices actuate together, and every puzzle is
//! wrapped for its device.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    self, puzzle_create, seal_for_device, CryptoError, KeyRegistry, Puzzle, PuzzleParams,
    DEVICE_SEAL_OVERHEAD,
};
use crate::{DeviceId, Micros};

/// Default difficulty of the earliest device in a chain.
pub const DEFAULT_BASELINE_T_HAT: u64 = 1000;
/// Encoded size of a [`Command`].
pub const COMMAND_LEN: usize = 13;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("device {0} is used but not declared")]
    UndeclaredDevice(DeviceId),
    #[error("device {0} declared twice")]
    DuplicateDevice(DeviceId),
    #[error("ordering contains a cycle through {0}")]
    Cycle(DeviceId),
    #[error("schedule has {scheduled} devices but the ring holds {capacity}")]
    Capacity { scheduled: usize, capacity: usize },
    #[error("device {0} is not on the ring")]
    NotOnRing(DeviceId),
    #[error("expected {expected} forward times, got {got}")]
    ForwardTimesLen { expected: usize, got: usize },
    #[error("forward times must be strictly increasing along the ring")]
    NonMonotoneForwardTimes,
    #[error("invalid round timing: {0}")]
    RoundTiming(&'static str),
    #[error("squaring rate must be positive")]
    ZeroRate,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Desired device state after actuation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Switch {
    Off,
    On,
}

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(Switch::On),
            "off" => Ok(Switch::Off),
            other => Err(format!("expected on|off, got {other:?}")),
        }
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Switch::On => "on",
            Switch::Off => "off",
        })
    }
}

/// The plaintext command `z` locked inside a puzzle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub device: DeviceId,
    pub state: Switch,
    pub seq: u64,
}

impl Command {
    /// `state(1) || device_id(4) || seq(8)`, big-endian.
    pub fn encode(&self) -> [u8; COMMAND_LEN] {
        let mut out = [0u8; COMMAND_LEN];
        out[0] = match self.state {
            Switch::Off => 0,
            Switch::On => 1,
        };
        out[1..5].copy_from_slice(&self.device.0.to_be_bytes());
        out[5..].copy_from_slice(&self.seq.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != COMMAND_LEN {
            return None;
        }
        let state = match bytes[0] {
            0 => Switch::Off,
            1 => Switch::On,
            _ => return None,
        };
        Some(Self {
            device: DeviceId(u32::from_be_bytes(bytes[1..5].try_into().ok()?)),
            state,
            seq: u64::from_be_bytes(bytes[5..].try_into().ok()?),
        })
    }
}

/// An owner schedule: devices, "no later than" pairs, and target states.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialOrder {
    pub devices: Vec<DeviceId>,
    pub pairs: Vec<(DeviceId, DeviceId)>,
    pub states: BTreeMap<DeviceId, Switch>,
}

impl PartialOrder {
    pub fn new(devices: impl IntoIterator<Item = u32>, pairs: &[(u32, u32)]) -> Self {
        Self {
            devices: devices.into_iter().map(DeviceId).collect(),
            pairs: pairs.iter().map(|&(a, b)| (DeviceId(a), DeviceId(b))).collect(),
            states: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn state_of(&self, d: DeviceId) -> Switch {
        self.states.get(&d).copied().unwrap_or(Switch::On)
    }

    /// Checks declarations and acyclicity.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let mut seen = BTreeSet::new();
        for &d in &self.devices {
            if !seen.insert(d) {
                return Err(ScheduleError::DuplicateDevice(d));
            }
        }
        for &(a, b) in &self.pairs {
            for d in [a, b] {
                if !seen.contains(&d) {
                    return Err(ScheduleError::UndeclaredDevice(d));
                }
            }
        }
        if let Some(&d) = self.states.keys().find(|d| !seen.contains(d)) {
            return Err(ScheduleError::UndeclaredDevice(d));
        }
        linear_extension(self).map(|_| ())
    }

    /// Strict comparable pairs `(i, j)`, `i != j`, of the transitive closure.
    pub fn comparable_pairs(&self) -> BTreeSet<(DeviceId, DeviceId)> {
        let mut succ: BTreeMap<DeviceId, BTreeSet<DeviceId>> = BTreeMap::new();
        for &(a, b) in &self.pairs {
            if a != b {
                succ.entry(a).or_default().insert(b);
            }
        }
        let mut out = BTreeSet::new();
        for &start in &self.devices {
            let mut stack: Vec<DeviceId> = succ.get(&start).into_iter().flatten().copied().collect();
            let mut reached = BTreeSet::new();
            while let Some(d) = stack.pop() {
                if d == start || !reached.insert(d) {
                    continue;
                }
                stack.extend(succ.get(&d).into_iter().flatten().copied());
            }
            out.extend(reached.into_iter().map(|d| (start, d)));
        }
        out
    }

    /// Number of devices that take part in at least one comparable pair.
    pub fn comparable_count(&self) -> usize {
        self.comparable_pairs()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Parses the line format: `device <id>`, `pair <id> <id>`,
    /// `state <id> on|off`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ScheduleError> {
        let mut order = PartialOrder::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScheduleError::Parse { line, message };
            let words: Vec<&str> = content.split_whitespace().collect();
            let id = |w: &str| -> Result<DeviceId, ScheduleError> {
                let digits = w.strip_prefix('D').unwrap_or(w);
                digits
                    .parse::<u32>()
                    .map(DeviceId)
                    .map_err(|_| err(format!("invalid device id {w:?}")))
            };
            match words.as_slice() {
                ["device", d] => {
                    let d = id(d)?;
                    if order.devices.contains(&d) {
                        return Err(err(format!("device {d} declared twice")));
                    }
                    order.devices.push(d);
                }
                ["pair", a, b] => order.pairs.push((id(a)?, id(b)?)),
                ["state", d, s] => {
                    let s = s.parse::<Switch>().map_err(err)?;
                    order.states.insert(id(d)?, s);
                }
                [kw, ..] => {
                    return Err(err(format!("unrecognized declaration {kw:?} or wrong arity")))
                }
                [] => unreachable!(),
            }
        }
        order.validate()?;
        Ok(order)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for d in &self.devices {
            s.push_str(&format!("device {}\n", d.0));
        }
        for (a, b) in &self.pairs {
            s.push_str(&format!("pair {} {}\n", a.0, b.0));
        }
        for (d, st) in &self.states {
            s.push_str(&format!("state {} {}\n", d.0, st));
        }
        s
    }
}

/// Lexicographically smallest linear extension, by topological sort with a
/// min-id heap.
pub fn linear_extension(order: &PartialOrder) -> Result<Vec<DeviceId>, ScheduleError> {
    let mut indegree: BTreeMap<DeviceId, usize> = order.devices.iter().map(|&d| (d, 0)).collect();
    let mut succ: BTreeMap<DeviceId, BTreeSet<DeviceId>> = BTreeMap::new();
    for &(a, b) in &order.pairs {
        if a == b {
            continue;
        }
        if !indegree.contains_key(&a) {
            return Err(ScheduleError::UndeclaredDevice(a));
        }
        if succ.entry(a).or_default().insert(b) {
            *indegree.get_mut(&b).ok_or(ScheduleError::UndeclaredDevice(b))? += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<DeviceId>> =
        indegree.iter().filter(|(_, &n)| n == 0).map(|(&d, _)| Reverse(d)).collect();
    let mut out = Vec::with_capacity(indegree.len());
    while let Some(Reverse(d)) = ready.pop() {
        out.push(d);
        for &s in succ.get(&d).into_iter().flatten() {
            let n = indegree.get_mut(&s).expect("successor declared");
            *n -= 1;
            if *n == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if out.len() < indegree.len() {
        let stuck = indegree
            .iter()
            .find(|(d, _)| !out.contains(d))
            .map(|(&d, _)| d)
            .expect("some device left unsorted");
        return Err(ScheduleError::Cycle(stuck));
    }
    Ok(out)
}

/// Ring order for a topology: the schedule's linear extension first, then
/// every other provisioned device by ascending id.
pub fn ring_layout(
    order: &PartialOrder,
    all_devices: impl IntoIterator<Item = DeviceId>,
) -> Result<Vec<DeviceId>, ScheduleError> {
    let mut ring = linear_extension(order)?;
    let chained: BTreeSet<DeviceId> = ring.iter().copied().collect();
    let mut rest: Vec<DeviceId> =
        all_devices.into_iter().filter(|d| !chained.contains(d)).collect();
    rest.sort();
    rest.dedup();
    ring.extend(rest);
    Ok(ring)
}

/// How squaring counts map onto simulated time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    /// Device squaring rate `S`, per microsecond.
    pub squarings_per_unit: u64,
    /// Difficulty of the last-forwarding device of the earliest level.
    pub baseline_t_hat: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Self { squarings_per_unit: 1, baseline_t_hat: DEFAULT_BASELINE_T_HAT }
    }
}

impl Timing {
    pub fn units_for(&self, t_hat: u64) -> Micros {
        t_hat.div_ceil(self.squarings_per_unit)
    }
}

fn ring_positions(ring: &[DeviceId]) -> BTreeMap<DeviceId, usize> {
    ring.iter().enumerate().map(|(i, &d)| (d, i)).collect()
}

/// Longest-path depth of each device in the comparability graph.
fn levels(order: &PartialOrder, ext: &[DeviceId]) -> BTreeMap<DeviceId, usize> {
    let closure = order.comparable_pairs();
    let mut level: BTreeMap<DeviceId, usize> = BTreeMap::new();
    for &d in ext {
        let l = closure
            .iter()
            .filter(|(_, b)| *b == d)
            .map(|(a, _)| level[a] + 1)
            .max()
            .unwrap_or(0);
        level.insert(d, l);
    }
    level
}

/// Assigns a difficulty to every scheduled device.
///
/// Each device's actuation instant is its forward time plus `t_hat / S`.
/// Devices on the same level of the order share one target instant, so
/// incomparable devices on that level differ in `t_hat` by exactly their
/// forward-time gap. For every comparable pair `i < j` the difficulties
/// additionally differ by at least `(N - 1)` times the forward-time gap
/// between their ring positions, where `N` is the ring size.
pub fn assign_time_bounds(
    order: &PartialOrder,
    ring: &[DeviceId],
    hop_forward_times: &[Micros],
    timing: &Timing,
) -> Result<BTreeMap<DeviceId, u64>, ScheduleError> {
    assign_time_bounds_for_size(order, ring, hop_forward_times, timing, ring.len())
}

/// Like [`assign_time_bounds`] but with an explicit ring size `N`, for rings
/// where the token counter makes more hops per round than there are
/// physical devices.
pub fn assign_time_bounds_for_size(
    order: &PartialOrder,
    ring: &[DeviceId],
    hop_forward_times: &[Micros],
    timing: &Timing,
    ring_size: usize,
) -> Result<BTreeMap<DeviceId, u64>, ScheduleError> {
    if timing.squarings_per_unit == 0 {
        return Err(ScheduleError::ZeroRate);
    }
    if hop_forward_times.len() != ring.len() {
        return Err(ScheduleError::ForwardTimesLen {
            expected: ring.len(),
            got: hop_forward_times.len(),
        });
    }
    if hop_forward_times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ScheduleError::NonMonotoneForwardTimes);
    }
    let ext = linear_extension(order)?;
    if ext.is_empty() {
        return Ok(BTreeMap::new());
    }
    let pos = ring_positions(ring);
    let fwd = |d: DeviceId| -> Result<i128, ScheduleError> {
        pos.get(&d)
            .map(|&p| hop_forward_times[p] as i128)
            .ok_or(ScheduleError::NotOnRing(d))
    };
    let level = levels(order, &ext);
    let depth = level.values().max().copied().unwrap_or(0);
    let n_ring = ring_size.max(ring.len()) as i128;
    let rate = timing.squarings_per_unit as i128;

    // Target actuation instant per level, in microseconds.
    let mut target = vec![0i128; depth + 1];
    let baseline_units = timing.units_for(timing.baseline_t_hat) as i128;
    let mut first = i128::MIN;
    for &d in ext.iter().filter(|d| level[d] == 0) {
        first = first.max(fwd(d)? + baseline_units);
    }
    target[0] = first;
    let closure = order.comparable_pairs();
    for l in 1..=depth {
        let mut t = i128::MIN;
        for &(i, j) in closure.iter().filter(|(_, j)| level[j] == l) {
            let gap = fwd(j)? - fwd(i)?;
            t = t.max(target[level[&i]] + gap + (n_ring - 1) * gap.abs());
        }
        for &d in ext.iter().filter(|d| level[d] == l) {
            t = t.max(fwd(d)?);
        }
        target[l] = t;
    }

    ext.iter()
        .map(|&d| {
            let units = target[level[&d]] - fwd(d)?;
            debug_assert!(units >= 0);
            Ok((d, (units * rate) as u64))
        })
        .collect()
}

/// `(N - k) + 1`.
pub fn slots_required(n: usize, k: usize) -> usize {
    assert!(k <= n, "comparable count exceeds device count");
    n - k + 1
}

/// `t_sum = (t_end - t_beg) - sum(t_fwd - t_rcv)`: transit time of one round
/// with device hold times removed.
pub fn round_time_sum(
    t_beg: Micros,
    t_end: Micros,
    holds: &[(Micros, Micros)],
) -> Result<Micros, ScheduleError> {
    let total = t_end.checked_sub(t_beg).ok_or(ScheduleError::RoundTiming("t_end before t_beg"))?;
    let mut held: Micros = 0;
    for &(rcv, fwd) in holds {
        held += fwd.checked_sub(rcv).ok_or(ScheduleError::RoundTiming("t_fwd before t_rcv"))?;
    }
    total.checked_sub(held).ok_or(ScheduleError::RoundTiming("holds exceed round time"))
}

/// Serialized puzzle capacity inside a command slot.
pub fn puzzle_capacity(modulus_bits: u64) -> usize {
    Puzzle::max_encoded_len(modulus_bits, COMMAND_LEN)
}

/// Size of one command slot in a token: a wrapped, padded puzzle.
pub fn command_slot_len(modulus_bits: u64) -> usize {
    puzzle_capacity(modulus_bits) + DEVICE_SEAL_OVERHEAD
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub device: DeviceId,
    pub position: usize,
    pub command: Command,
    pub t_hat: u64,
    pub puzzle: Puzzle,
    /// The puzzle wrapped for the device, exactly one command slot long.
    #[serde(with = "hex_bytes")]
    pub message: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub entries: Vec<PlanEntry>,
    pub slot_length: Micros,
    pub comparable_count: usize,
    pub comparable_pairs: Vec<(DeviceId, DeviceId)>,
    pub ring: Vec<DeviceId>,
    pub timing: Timing,
    pub modulus_bits: u64,
    pub issued_at: Micros,
}

impl SchedulePlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, d: DeviceId) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.device == d)
    }
}

/// Longest difficulty in the plan, converted to time.
pub fn slot_length(plan: &SchedulePlan) -> Micros {
    plan.entries.iter().map(|e| plan.timing.units_for(e.t_hat)).max().unwrap_or(0)
}

#[derive(Clone, Debug, Default)]
pub struct CompileOptions {
    pub timing: Timing,
    pub issued_at: Micros,
    /// First command sequence number.
    pub first_seq: u64,
    pub seed: u64,
    /// Hops per round, if larger than the physical ring.
    pub ring_size: Option<usize>,
}

/// Compiles an order into one wrapped puzzle per scheduled device.
///
/// `ring` lists device ids by ring position and `hop_forward_times` gives
/// the expected token forward time at each position. Validity deadlines are
/// set to twice the slot length after issuance.
pub fn compile(
    order: &PartialOrder,
    registry: &KeyRegistry,
    params: &PuzzleParams,
    ring: &[DeviceId],
    hop_forward_times: &[Micros],
    opts: &CompileOptions,
) -> Result<SchedulePlan, ScheduleError> {
    order.validate()?;
    if order.devices.len() > ring.len() {
        return Err(ScheduleError::Capacity { scheduled: order.devices.len(), capacity: ring.len() });
    }
    let ring_size = opts.ring_size.unwrap_or(ring.len());
    let t_hats = assign_time_bounds_for_size(order, ring, hop_forward_times, &opts.timing, ring_size)?;
    let pos = ring_positions(ring);
    let slot_units = t_hats.values().map(|&t| opts.timing.units_for(t)).max().unwrap_or(0);
    let t_val = opts.issued_at + 2 * slot_units;
    let capacity = puzzle_capacity(params.bit_length);

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(order.devices.len());
    for (i, d) in linear_extension(order)?.into_iter().enumerate() {
        let position = *pos.get(&d).ok_or(ScheduleError::NotOnRing(d))?;
        let keys = registry.device(d)?;
        let command = Command { device: d, state: order.state_of(d), seq: opts.first_seq + i as u64 };
        let t_hat = t_hats[&d];
        let a: BigUint = crypto::random_base(&params.n, &mut rng);
        let key = params.random_key(&mut rng);
        let puzzle = puzzle_create(params, &a, t_hat, &command.encode(), &key, t_val)?;
        let mut body = puzzle.to_bytes();
        body.resize(capacity, 0);
        let message = seal_for_device(&body, &keys.exchange_public(), &mut rng);
        entries.push(PlanEntry { device: d, position, command, t_hat, puzzle, message });
    }
    entries.sort_by_key(|e| e.position);
    Ok(SchedulePlan {
        entries,
        slot_length: slot_units,
        comparable_count: order.comparable_count(),
        comparable_pairs: order.comparable_pairs().into_iter().collect(),
        ring: ring.to_vec(),
        timing: opts.timing,
        modulus_bits: params.bit_length,
        issued_at: opts.issued_at,
    })
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
