//! Deterministic discrete-event simulation of the token ring and of a
//! conventional star (hub unicast) baseline.
//!
//! Time is in integer microseconds. A frame sent at `t` arrives at
//! `t + hop_latency + jitter + ceil(len / bandwidth)`. Devices hold a token
//! for a constant time before forwarding and solve puzzles in fixed ticks
//! afterwards. Jitter comes from its own seeded stream so channel timing
//! never depends on token contents.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    gen_params, open_for_device, puzzle_solve, CryptoError, KeyRegistry, Puzzle, PuzzleParams,
    DEFAULT_MODULUS_BITS, SEAL_OVERHEAD,
};
use crate::protocol::{
    owner_create_order, Actor, Actuation, DeviceState, EventKind, ExecutionReport, HubConfig,
    HubState, ProtocolError, ProtocolEvent,
};
use crate::schedule::{
    command_slot_len, compile, ring_layout, round_time_sum, CompileOptions, PartialOrder,
    SchedulePlan, ScheduleError, Switch, Timing, DEFAULT_BASELINE_T_HAT,
};
use crate::token::{DataMode, TokenLayout, UPLOAD_HEADER_LEN};
use crate::{DeviceId, Micros};

/// Node id used in traces for the hub. Devices use their own id.
pub const HUB_NODE: u32 = 0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Ring,
    Star,
}

impl std::str::FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Topology::Ring),
            "star" => Ok(Topology::Star),
            other => Err(format!("expected ring|star, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_physical: usize,
    /// Ring size emulated through the token counter.
    pub n_virtual: usize,
    pub topology: Topology,
    pub hop_latency: Micros,
    /// Per-transmission jitter bound; draws are uniform in `[0, jitter]`.
    pub jitter: Micros,
    /// Bytes per microsecond; `None` means transmission takes no time.
    pub bandwidth: Option<f64>,
    /// Device squaring rate `S` per microsecond.
    pub squarings_per_us: u64,
    pub tick_us: Micros,
    /// Constant time a node holds the token before forwarding.
    pub hold: Micros,
    /// Minimum spacing between consecutive token emissions; 0 circulates
    /// continuously.
    pub round_period: Micros,
    pub rounds: u32,
    /// Stop emitting new rounds after this time, if set.
    pub duration: Option<Micros>,
    pub modulus_bits: u64,
    pub data_mode: DataMode,
    pub t_diff: Micros,
    pub baseline_t_hat: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_physical: 3,
            n_virtual: 3,
            topology: Topology::Ring,
            hop_latency: 2_000,
            jitter: 0,
            bandwidth: Some(1.0),
            squarings_per_us: 1,
            tick_us: 100,
            hold: 500,
            round_period: 0,
            rounds: 10,
            duration: None,
            modulus_bits: DEFAULT_MODULUS_BITS,
            data_mode: DataMode::SubFields,
            t_diff: 1_000,
            baseline_t_hat: DEFAULT_BASELINE_T_HAT,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_physical == 0 {
            return bad("at least one physical device is required");
        }
        if self.n_virtual < self.n_physical {
            return bad("n_virtual must be at least n_physical");
        }
        if self.jitter > 0 && self.jitter >= self.hop_latency {
            return bad("jitter must be smaller than hop_latency");
        }
        if self.bandwidth.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            return bad("bandwidth must be positive");
        }
        if self.squarings_per_us == 0 || self.tick_us == 0 {
            return bad("squaring rate and tick must be positive");
        }
        if self.n_virtual > i32::MAX as usize {
            return bad("ring too large");
        }
        Ok(())
    }

    pub fn timing(&self) -> Timing {
        Timing { squarings_per_unit: self.squarings_per_us, baseline_t_hat: self.baseline_t_hat }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            devices: self.n_virtual,
            slot_len: command_slot_len(self.modulus_bits),
            data_mode: self.data_mode,
            subfield_len: UPLOAD_HEADER_LEN + ExecutionReport::max_encoded_len(self.modulus_bits),
        }
    }

    pub fn transmit_time(&self, bytes: usize) -> Micros {
        match self.bandwidth {
            Some(bw) => (bytes as f64 / bw).ceil() as Micros,
            None => 0,
        }
    }

    /// Time for one hop at zero jitter: link plus the receiver's hold.
    pub fn hop_time(&self) -> Micros {
        self.hop_latency + self.transmit_time(self.layout().frame_len()) + self.hold
    }

    /// Closed-form round latency at zero jitter: `n_virtual + 1` links and
    /// `n_virtual` device holds.
    pub fn expected_round_latency(&self) -> Micros {
        let link = self.hop_latency + self.transmit_time(self.layout().frame_len());
        (self.n_virtual as Micros + 1) * link + self.n_virtual as Micros * self.hold
    }
}

/// A command issued by the owner at a given time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub at: Micros,
    pub device: DeviceId,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Actuate only.
    Set,
    /// Actuate and send data back.
    Read,
}

/// The four-command, one-minute script: D1 set, D2 set, D2 read, D3 read,
/// ten seconds apart.
pub fn channel_view_script() -> Vec<ScriptedCommand> {
    [(1, Action::Set), (2, Action::Set), (2, Action::Read), (3, Action::Read)]
        .iter()
        .enumerate()
        .map(|(i, &(d, action))| ScriptedCommand {
            at: (i as Micros + 1) * 10_000_000,
            device: DeviceId(d),
            action,
        })
        .collect()
}

pub const CHANNEL_VIEW_DURATION: Micros = 60_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_us: Micros,
    pub src: u32,
    pub dst: u32,
    pub bytes: usize,
    pub round: u32,
}

/// Channel metadata as a passive listener would capture it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(["time_us", "src", "dst", "bytes", "round"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, SimError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["time_us", "src", "dst", "bytes", "round"] {
            return Err(SimError::Config(format!("unexpected trace header {headers:?}")));
        }
        let records = r.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub rounds_completed: u32,
    pub round_latencies: Vec<Micros>,
    pub mean_latency_us: f64,
    pub var_latency_us: f64,
    pub mean_t_sum_us: f64,
    pub mean_token_bytes: f64,
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub trace: TraceLog,
    pub reports: Vec<ExecutionReport>,
    pub actuations: Vec<(DeviceId, Actuation)>,
    pub events: Vec<ProtocolEvent>,
    pub stats: SimStats,
}

impl SimOutput {
    pub fn events_text(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Keys, parameters and ring wiring for one simulated home.
pub struct Simulation {
    pub config: SimConfig,
    pub registry: KeyRegistry,
    pub params: PuzzleParams,
    /// Physical devices in ring order.
    pub ring: Vec<DeviceId>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let ids: Vec<DeviceId> = (1..=config.n_physical as u32).map(DeviceId).collect();
        let registry = KeyRegistry::generate(ids.iter().copied(), config.seed);
        let params = gen_params(config.modulus_bits, config.seed)?;
        Ok(Self { config, registry, params, ring: ids })
    }

    /// Rewires the ring to follow a linear extension of `order`.
    pub fn chain(&mut self, order: &PartialOrder) -> Result<(), SimError> {
        self.ring = ring_layout(order, self.registry.device_ids())?;
        Ok(())
    }

    /// Forward time of each physical ring position on its first visit,
    /// relative to the hub's emission, at zero jitter.
    pub fn expected_forward_times(&self) -> Vec<Micros> {
        let hop = self.config.hop_time();
        (1..=self.ring.len() as Micros).map(|p| p * hop).collect()
    }

    pub fn compile(&self, order: &PartialOrder, issued_at: Micros, first_seq: u64) -> Result<SchedulePlan, SimError> {
        let timing = self.config.timing();
        let fwd = self.expected_forward_times();
        let opts = CompileOptions {
            timing,
            issued_at,
            first_seq,
            seed: self.config.seed ^ first_seq,
            ring_size: Some(self.config.n_virtual),
        };
        let mut plan = compile(order, &self.registry, &self.params, &self.ring, &fwd, &opts)?;
        self.extend_validity(&mut plan, order, issued_at, first_seq)?;
        Ok(plan)
    }

    // Deadlines of twice the slot length can be shorter than one trip round
    // the ring; recompile with a deadline covering two rounds in that case.
    fn extend_validity(
        &self,
        plan: &mut SchedulePlan,
        order: &PartialOrder,
        issued_at: Micros,
        first_seq: u64,
    ) -> Result<(), SimError> {
        let floor = issued_at + 2 * (self.config.expected_round_latency() + self.config.hold);
        if plan.entries.iter().all(|e| e.puzzle.t_val >= floor) {
            return Ok(());
        }
        let slot = plan.slot_length;
        let shifted = floor.saturating_sub(2 * slot);
        let opts = CompileOptions {
            timing: self.config.timing(),
            issued_at: shifted,
            first_seq,
            seed: self.config.seed ^ first_seq,
            ring_size: Some(self.config.n_virtual),
        };
        *plan = compile(order, &self.registry, &self.params, &self.ring, &self.expected_forward_times(), &opts)?;
        plan.issued_at = issued_at;
        Ok(())
    }

    pub fn run(&self, plan: Option<&SchedulePlan>, script: &[ScriptedCommand]) -> Result<SimOutput, SimError> {
        match self.config.topology {
            Topology::Ring => RingRun::new(self)?.run(plan, script),
            Topology::Star => StarRun::new(self).run(plan, script),
        }
    }
}

/// Runs a simulation with the default ring wiring. A plan must have been
/// compiled against `Simulation::new(config)`'s keys.
pub fn run(config: &SimConfig, plan: Option<&SchedulePlan>) -> Result<SimOutput, SimError> {
    Simulation::new(config.clone())?.run(plan, &[])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Hub,
    Device(usize),
}

#[derive(Debug)]
enum Event {
    HubEmit,
    Send { from: Node, to: Node, frame: Vec<u8>, round: u32 },
    Arrive { to: Node, frame: Vec<u8> },
    Tick(usize),
    Script(usize),
    /// Star mode: device finishes a puzzle.
    StarActuate { device: usize, report: ExecutionReport, send_data: bool },
}

#[derive(Default)]
struct Queue {
    seq: u64,
    events: BTreeMap<(Micros, u64), Event>,
}

impl Queue {
    fn push(&mut self, t: Micros, e: Event) {
        self.events.insert((t, self.seq), e);
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(Micros, Event)> {
        self.events.pop_first().map(|((t, _), e)| (t, e))
    }
}

struct Channel {
    rng: ChaCha20Rng,
    trace: TraceLog,
}

impl Channel {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6a69_7474_6572), trace: TraceLog::default() }
    }

    fn delay(&mut self, cfg: &SimConfig, bytes: usize) -> Micros {
        let jitter = if cfg.jitter > 0 { self.rng.gen_range(0..=cfg.jitter) } else { 0 };
        cfg.hop_latency + jitter + cfg.transmit_time(bytes)
    }
}

struct RingRun<'a> {
    sim: &'a Simulation,
    hub: HubState,
    devices: Vec<DeviceState>,
    ticking: Vec<bool>,
    queue: Queue,
    channel: Channel,
    events: Vec<ProtocolEvent>,
    actuations: Vec<(DeviceId, Actuation)>,
    next_seq: u64,
}

impl<'a> RingRun<'a> {
    fn new(sim: &'a Simulation) -> Result<Self, SimError> {
        let cfg = &sim.config;
        let layout = cfg.layout();
        let hub = HubState::new(
            HubConfig { layout, counter_start: cfg.n_virtual as i32, seed: cfg.seed },
            sim.registry.ring_key.clone(),
        );
        let devices = sim
            .ring
            .iter()
            .enumerate()
            .map(|(i, &d)| DeviceState::new(d, i, layout, &sim.registry, cfg.t_diff))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            sim,
            hub,
            ticking: vec![false; devices.len()],
            devices,
            queue: Queue::default(),
            channel: Channel::new(cfg.seed),
            events: Vec::new(),
            actuations: Vec::new(),
            next_seq: 1 << 32,
        })
    }

    fn node_id(&self, n: Node) -> u32 {
        match n {
            Node::Hub => HUB_NODE,
            Node::Device(i) => self.devices[i].device_id.0,
        }
    }

    fn accept(&mut self, plan: &SchedulePlan) -> Result<(), SimError> {
        let order = owner_create_order(plan, &self.sim.registry);
        self.hub.accept_order(&order, &self.sim.registry.owner_public())?;
        Ok(())
    }

    fn run(mut self, plan: Option<&SchedulePlan>, script: &[ScriptedCommand]) -> Result<SimOutput, SimError> {
        let cfg = self.sim.config.clone();
        if let Some(p) = plan {
            self.accept(p)?;
        }
        for (i, c) in script.iter().enumerate() {
            self.queue.push(c.at, Event::Script(i));
        }
        self.queue.push(0, Event::HubEmit);
        let mut last_emit: Option<Micros> = None;

        while let Some((t, ev)) = self.queue.pop() {
            match ev {
                Event::HubEmit => {
                    let frame = self.hub.emit_token(t);
                    last_emit = Some(t);
                    let round = self.hub.round;
                    self.queue.push(t, Event::Send { from: Node::Hub, to: Node::Device(0), frame, round });
                }
                Event::Send { from, to, frame, round } => {
                    let rec = TraceRecord {
                        time_us: t,
                        src: self.node_id(from),
                        dst: self.node_id(to),
                        bytes: frame.len(),
                        round,
                    };
                    self.channel.trace.records.push(rec);
                    if let Node::Device(i) = from {
                        let actor = Actor::Device(self.devices[i].device_id);
                        self.events.push(ProtocolEvent { round, actor, kind: EventKind::Fwd, t });
                        self.start_ticking(i, t);
                    }
                    let arrive = t + self.channel.delay(&cfg, frame.len());
                    self.queue.push(arrive, Event::Arrive { to, frame });
                }
                Event::Arrive { to: Node::Device(i), frame } => {
                    let fwd = self.devices[i].on_token(&frame, t)?;
                    let next = if fwd.to_hub { Node::Hub } else { Node::Device((i + 1) % self.devices.len()) };
                    self.queue.push(
                        t + cfg.hold,
                        Event::Send { from: Node::Device(i), to: next, frame: fwd.frame, round: fwd.round },
                    );
                }
                Event::Arrive { to: Node::Hub, frame } => {
                    self.hub.on_token(&frame, t)?;
                    let done = self.hub.round >= cfg.rounds
                        || cfg.duration.is_some_and(|d| t + cfg.hold >= d);
                    if !done {
                        let next = (t + cfg.hold).max(last_emit.unwrap_or(0) + cfg.round_period);
                        self.queue.push(next, Event::HubEmit);
                    }
                }
                Event::Tick(i) => {
                    let budget = cfg.squarings_per_us * cfg.tick_us;
                    self.devices[i].tick(budget, t);
                    if let Some(act) = self.devices[i].actuated.take() {
                        self.actuations.push((self.devices[i].device_id, act));
                    }
                    if self.devices[i].pending_puzzle.is_some() {
                        self.queue.push(t + cfg.tick_us, Event::Tick(i));
                    } else {
                        self.ticking[i] = false;
                    }
                }
                Event::Script(k) => {
                    let cmd = script[k];
                    let state = match cmd.action {
                        Action::Set => Switch::On,
                        Action::Read => Switch::Off,
                    };
                    let mut order = PartialOrder::new([cmd.device.0], &[]);
                    order.states.insert(cmd.device, state);
                    let plan = self.sim.compile(&order, t, self.next_seq)?;
                    self.next_seq += 1;
                    self.accept(&plan)?;
                }
                Event::StarActuate { .. } => unreachable!("star events in ring run"),
            }
        }

        Ok(self.finish())
    }

    fn start_ticking(&mut self, i: usize, t: Micros) {
        if !self.ticking[i] && self.devices[i].pending_puzzle.is_some() {
            self.ticking[i] = true;
            self.queue.push(t + self.sim.config.tick_us, Event::Tick(i));
        }
    }

    fn finish(mut self) -> SimOutput {
        let mut events = std::mem::take(&mut self.hub.events);
        for d in &mut self.devices {
            events.append(&mut d.events);
        }
        events.append(&mut self.events);
        events.sort_by_key(|e| (e.t, e.round, e.actor, e.kind));

        let reports: Vec<ExecutionReport> = self
            .hub
            .uploads
            .iter()
            .filter_map(|u| ExecutionReport::decode(&u.payload).ok())
            .collect();

        let completed: Vec<_> = self.hub.trace.iter().filter_map(|r| r.t_end.map(|e| (r.round, r.t_beg, e))).collect();
        let latencies: Vec<Micros> = completed.iter().map(|&(_, b, e)| e - b).collect();

        // Hold intervals per round from the device rcv/fwd events.
        let mut holds: BTreeMap<u32, Vec<(Micros, Micros)>> = BTreeMap::new();
        let mut open: BTreeMap<(u32, Actor), Vec<Micros>> = BTreeMap::new();
        for e in &events {
            if let Actor::Device(_) = e.actor {
                match e.kind {
                    EventKind::Rcv => open.entry((e.round, e.actor)).or_default().push(e.t),
                    EventKind::Fwd => {
                        if let Some(rcv) = open.get_mut(&(e.round, e.actor)).and_then(|v| (!v.is_empty()).then(|| v.remove(0))) {
                            holds.entry(e.round).or_default().push((rcv, e.t));
                        }
                    }
                    _ => {}
                }
            }
        }
        let t_sums: Vec<f64> = completed
            .iter()
            .filter_map(|&(r, b, e)| round_time_sum(b, e, holds.get(&r).map_or(&[][..], |v| v)).ok())
            .map(|x| x as f64)
            .collect();

        let lat_f: Vec<f64> = latencies.iter().map(|&x| x as f64).collect();
        let (mean_latency_us, var_latency_us) = mean_var(&lat_f);
        let trace = self.channel.trace;
        let bytes: Vec<f64> = trace.records.iter().map(|r| r.bytes as f64).collect();
        let stats = SimStats {
            rounds_completed: completed.len() as u32,
            round_latencies: latencies,
            mean_latency_us,
            var_latency_us,
            mean_t_sum_us: mean_var(&t_sums).0,
            mean_token_bytes: mean_var(&bytes).0,
            frames: trace.records.len(),
        };
        SimOutput { trace, reports, actuations: self.actuations, events, stats }
    }
}

/// Conventional infrastructure-mode baseline: each command is a unicast
/// from the hub and each data item a unicast back. No token.
struct StarRun<'a> {
    sim: &'a Simulation,
    queue: Queue,
    channel: Channel,
    events: Vec<ProtocolEvent>,
    actuations: Vec<(DeviceId, Actuation)>,
    reports: Vec<ExecutionReport>,
}

impl<'a> StarRun<'a> {
    fn new(sim: &'a Simulation) -> Self {
        Self {
            sim,
            queue: Queue::default(),
            channel: Channel::new(sim.config.seed),
            events: Vec::new(),
            actuations: Vec::new(),
            reports: Vec::new(),
        }
    }

    fn command_frame_len(&self) -> usize {
        command_slot_len(self.sim.config.modulus_bits) + SEAL_OVERHEAD
    }

    fn data_frame_len(&self) -> usize {
        ExecutionReport::max_encoded_len(self.sim.config.modulus_bits) + SEAL_OVERHEAD
    }

    fn index_of(&self, d: DeviceId) -> Result<usize, SimError> {
        self.sim
            .ring
            .iter()
            .position(|&x| x == d)
            .ok_or(SimError::Schedule(ScheduleError::NotOnRing(d)))
    }

    fn run(mut self, plan: Option<&SchedulePlan>, script: &[ScriptedCommand]) -> Result<SimOutput, SimError> {
        let cfg = self.sim.config.clone();
        let mut deliveries: Vec<(Micros, usize, Vec<u8>, bool)> = Vec::new();
        if let Some(plan) = plan {
            for (k, e) in plan.entries.iter().enumerate() {
                deliveries.push((k as Micros * cfg.hold, self.index_of(e.device)?, e.message.clone(), true));
            }
        }
        for (seq, c) in (1u64 << 32..).zip(script) {
            let mut order = PartialOrder::new([c.device.0], &[]);
            order.states.insert(c.device, Switch::On);
            let p = self.sim.compile(&order, c.at, seq)?;
            deliveries.push((c.at, self.index_of(c.device)?, p.entries[0].message.clone(), c.action == Action::Read));
        }
        let frame_len = self.command_frame_len();
        for (at, dev, message, send_data) in deliveries {
            let report = self.device_solve(dev, &message, at)?;
            let arrive = at + self.channel_send(at, Node::Hub, Node::Device(dev), frame_len);
            let t_com = arrive + cfg.hold + cfg.timing().units_for(report.t_hat).div_ceil(cfg.tick_us) * cfg.tick_us;
            self.queue.push(t_com, Event::StarActuate { device: dev, report: ExecutionReport { t_com, ..report }, send_data });
        }

        while let Some((t, ev)) = self.queue.pop() {
            if let Event::StarActuate { device, report, send_data } = ev {
                let id = self.sim.ring[device];
                let command = crate::schedule::Command { device: id, state: Switch::On, seq: 0 };
                self.actuations.push((id, Actuation { command, t_com: t }));
                self.events.push(ProtocolEvent { round: 0, actor: Actor::Device(id), kind: EventKind::Actuate, t });
                if send_data {
                    let len = self.data_frame_len();
                    self.channel_send(t, Node::Device(device), Node::Hub, len);
                    self.events.push(ProtocolEvent { round: 0, actor: Actor::Device(id), kind: EventKind::Upload, t });
                    self.reports.push(report);
                }
            }
        }

        self.channel.trace.records.sort_by_key(|r| r.time_us);
        self.events.sort_by_key(|e| (e.t, e.actor, e.kind));
        let bytes: Vec<f64> = self.channel.trace.records.iter().map(|r| r.bytes as f64).collect();
        let stats = SimStats {
            frames: self.channel.trace.records.len(),
            mean_token_bytes: mean_var(&bytes).0,
            ..SimStats::default()
        };
        Ok(SimOutput {
            trace: self.channel.trace,
            reports: self.reports,
            actuations: self.actuations,
            events: self.events,
            stats,
        })
    }

    fn channel_send(&mut self, t: Micros, from: Node, to: Node, bytes: usize) -> Micros {
        let id = |n: Node| match n {
            Node::Hub => HUB_NODE,
            Node::Device(i) => self.sim.ring[i].0,
        };
        let rec = TraceRecord { time_us: t, src: id(from), dst: id(to), bytes, round: 0 };
        self.channel.trace.records.push(rec);
        self.channel.delay(&self.sim.config, bytes)
    }

    fn device_solve(&self, dev: usize, message: &[u8], _at: Micros) -> Result<ExecutionReport, SimError> {
        let id = self.sim.ring[dev];
        let keys = self.sim.registry.device(id)?;
        let body = open_for_device(message, &keys.exchange)?;
        let (puzzle, _) = Puzzle::decode_prefix(&body)?;
        let sol = puzzle_solve(&puzzle)?;
        Ok(ExecutionReport { device_id: id, t_com: 0, t_hat: puzzle.t_hat, solution: sol.value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_devices: usize,
    pub mean_latency_us: f64,
    pub var_latency_us: f64,
    pub mean_token_bytes: f64,
}

/// Runs one ring simulation per device count, emulating each count through
/// the token counter over `base.n_physical` physical devices.
pub fn latency_sweep(base: &SimConfig, device_counts: &[usize], parallel: bool) -> Result<Vec<SweepRow>, SimError> {
    if device_counts.is_empty() {
        return Err(SimError::Config("no device counts given".into()));
    }
    let point = |n: usize| -> Result<SweepRow, SimError> {
        let cfg = SimConfig {
            n_physical: base.n_physical.min(n),
            n_virtual: n,
            topology: Topology::Ring,
            ..base.clone()
        };
        let out = run(&cfg, None)?;
        Ok(SweepRow {
            n_devices: n,
            mean_latency_us: out.stats.mean_latency_us,
            var_latency_us: out.stats.var_latency_us,
            mean_token_bytes: out.stats.mean_token_bytes,
        })
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = device_counts.iter().map(|&n| s.spawn(move || point(n))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    } else {
        device_counts.iter().map(|&n| point(n)).collect()
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["n_devices", "mean_latency_us", "var_latency_us", "mean_token_bytes"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Splits a trace into bursts: maximal runs whose inter-frame gaps are at
/// most `silence` microseconds.
pub fn bursts(trace: &TraceLog, silence: Micros) -> Vec<(Micros, Micros)> {
    let mut out: Vec<(Micros, Micros)> = Vec::new();
    for r in &trace.records {
        match out.last_mut() {
            Some(last) if r.time_us - last.1 <= silence => last.1 = r.time_us,
            _ => out.push((r.time_us, r.time_us)),
        }
    }
    out
}

/// Inter-arrival times between consecutive trace records.
pub fn inter_arrivals(trace: &TraceLog) -> Vec<f64> {
    trace.records.windows(2).map(|w| (w[1].time_us - w[0].time_us) as f64).collect()
}

/// Set of distinct frame sizes in a trace.
pub fn frame_sizes(trace: &TraceLog) -> BTreeSet<usize> {
    trace.records.iter().map(|r| r.bytes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SimConfig {
        SimConfig { n_physical: n, n_virtual: n, modulus_bits: 64, rounds: 3, ..SimConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { n_virtual: 2, ..small(3) }.validate().is_err());
        assert!(SimConfig { jitter: 3000, ..small(3) }.validate().is_err());
        assert!(SimConfig { bandwidth: Some(0.0), ..small(3) }.validate().is_err());
        assert!(SimConfig { n_physical: 0, ..small(3) }.validate().is_err());
        assert!(small(3).validate().is_ok());
    }

    #[test]
    fn round_latency_closed_form() {
        let cfg = SimConfig { hop_latency: 10, hold: 4, bandwidth: Some(2.0), rounds: 1, ..small(3) };
        let out = run(&cfg, None).unwrap();
        let frame = cfg.layout().frame_len() as u64;
        let expected = 4 * (10 + frame.div_ceil(2)) + 3 * 4;
        assert_eq!(out.stats.round_latencies, vec![expected]);
        assert_eq!(cfg.expected_round_latency(), expected);
        assert_eq!(out.stats.mean_t_sum_us, (expected - 3 * 4) as f64);
        assert_eq!(out.stats.frames, 4);
    }

    #[test]
    fn trace_times_are_sorted_and_conserved() {
        let cfg = SimConfig { jitter: 300, rounds: 5, ..small(4) };
        let out = run(&cfg, None).unwrap();
        assert!(out.trace.records.windows(2).all(|w| w[0].time_us <= w[1].time_us));
        assert_eq!(out.trace.records.len(), 5 * 5);
        let rcv = out.events.iter().filter(|e| e.kind == EventKind::Rcv).count();
        assert_eq!(rcv, out.trace.records.len());
    }

    #[test]
    fn replay_is_byte_identical() {
        let cfg = SimConfig { jitter: 500, rounds: 6, seed: 42, ..small(3) };
        let a = run(&cfg, None).unwrap().trace.to_csv_string();
        let b = run(&cfg, None).unwrap().trace.to_csv_string();
        assert_eq!(a, b);
        let c = run(&SimConfig { seed: 43, ..cfg }, None).unwrap().trace.to_csv_string();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_roundtrip() {
        let out = run(&small(2), None).unwrap();
        let text = out.trace.to_csv_string();
        assert!(text.starts_with("time_us,src,dst,bytes,round\n"));
        assert_eq!(TraceLog::read_csv(text.as_bytes()).unwrap(), out.trace);
        assert!(TraceLog::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn virtual_counter_matches_physical_ring() {
        let m = 7;
        let full = SimConfig { rounds: 2, ..small(m) };
        let emulated = SimConfig { n_physical: 3, ..full.clone() };
        let a = run(&full, None).unwrap();
        let b = run(&emulated, None).unwrap();
        let hops = |o: &SimOutput| {
            let mut per_round: BTreeMap<u32, usize> = BTreeMap::new();
            for r in &o.trace.records {
                *per_round.entry(r.round).or_default() += 1;
            }
            per_round
        };
        assert_eq!(hops(&a), hops(&b));
        assert_eq!(hops(&a).values().copied().collect::<Vec<_>>(), vec![m + 1; 2]);
        assert_eq!(a.stats.round_latencies, b.stats.round_latencies);
    }

    #[test]
    fn virtual_ring_solves_once() {
        let cfg = SimConfig { n_physical: 2, n_virtual: 5, rounds: 4, ..small(2) };
        let mut sim = Simulation::new(cfg).unwrap();
        let order = PartialOrder::new([1, 2], &[(1, 2)]);
        sim.chain(&order).unwrap();
        let plan = sim.compile(&order, 0, 0).unwrap();
        let out = sim.run(Some(&plan), &[]).unwrap();
        assert_eq!(out.actuations.len(), 2);
        assert!(crate::protocol::owner_verify_execution(&out.reports, &sim.params, &plan));
    }

    #[test]
    fn plan_actuates_after_difficulty() {
        let cfg = SimConfig { rounds: 6, ..small(3) };
        let mut sim = Simulation::new(cfg.clone()).unwrap();
        let order = PartialOrder::new([1, 2, 3], &[(1, 2)]);
        sim.chain(&order).unwrap();
        let plan = sim.compile(&order, 0, 0).unwrap();
        let out = sim.run(Some(&plan), &[]).unwrap();
        let fwd = sim.expected_forward_times();
        for (d, act) in &out.actuations {
            let e = plan.entry(*d).unwrap();
            let earliest = fwd[e.position] + cfg.timing().units_for(e.t_hat);
            assert!(act.t_com >= earliest);
            assert!(act.t_com < earliest + cfg.tick_us);
        }
        assert_eq!(out.reports.len(), 3);
        assert!(crate::protocol::owner_verify_execution(&out.reports, &sim.params, &plan));
    }

    #[test]
    fn star_script_bursts() {
        let cfg = SimConfig { topology: Topology::Star, ..small(3) };
        let sim = Simulation::new(cfg).unwrap();
        let out = sim.run(None, &channel_view_script()).unwrap();
        assert_eq!(out.trace.records.len(), 6);
        assert_eq!(bursts(&out.trace, 1_000_000).len(), 4);
        assert_eq!(out.reports.len(), 2);
    }

    #[test]
    fn sweep_latency_grows() {
        let base = SimConfig { rounds: 3, ..small(3) };
        let rows = latency_sweep(&base, &[3, 6, 9], false).unwrap();
        assert!(rows.windows(2).all(|w| w[1].mean_latency_us > w[0].mean_latency_us));
        let par = latency_sweep(&base, &[3, 6, 9], true).unwrap();
        assert_eq!(rows, par);
        assert!(latency_sweep(&base, &[], false).is_err());
    }

    #[test]
    fn zero_jitter_zero_variance() {
        let out = run(&SimConfig { rounds: 8, ..small(4) }, None).unwrap();
        assert_eq!(out.stats.var_latency_us, 0.0);
    }
}
