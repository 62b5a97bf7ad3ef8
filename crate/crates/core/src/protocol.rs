//! Owner, hub and device state machines.
//!
//! The owner signs a compiled plan and hands it to the hub. The hub checks
//! the order and places each device's wrapped puzzle into that device's
//! command slot of the next token; every other round carries random slots.
//! Devices unwrap their slot, forward the token, and grind through the
//! puzzle between token visits. Generated data (including execution
//! reports) goes back through the XOR-concealed data field after a
//! toggle-bit request and a hub grant one round later.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    hash_digest, open_for_device, puzzle_fast_eval, sign_order, verify_order_sig, CryptoError,
    DeviceKeys, Digest32, KeyRegistry, Puzzle, PuzzleParams, SequentialSolver, SymmetricKey,
    VerifyingKey,
};
use crate::schedule::{Command, SchedulePlan};
use crate::token::{
    data_overwrite, data_recover, decode_upload, encode_upload, token_build, token_nonce,
    token_parse, DataMode, Token, TokenError, TokenLayout,
};
use crate::{DeviceId, Micros};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("order rejected: bad digest or signature")]
    OrderRejected,
    #[error("malformed command list: {0}")]
    MalformedCommands(&'static str),
    #[error("malformed execution report")]
    MalformedReport,
    #[error("token {got} returned while {expected:?} was outstanding")]
    UnexpectedToken { expected: Option<u64>, got: u64 },
    #[error("command slot {0} is outside the ring")]
    SlotOutOfRange(usize),
}

/// Signed owner-to-hub order carrying the command list `c_l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Order {
    pub owner_id: u64,
    pub hub_id: u64,
    /// Encoded `(slot, wrapped puzzle)` list.
    pub commands: Vec<u8>,
    pub digest: Digest32,
    pub signature: Vec<u8>,
}

fn order_digest(owner_id: u64, hub_id: u64, commands: &[u8]) -> Digest32 {
    let mut buf = Vec::with_capacity(16 + commands.len());
    buf.extend_from_slice(&owner_id.to_be_bytes());
    buf.extend_from_slice(&hub_id.to_be_bytes());
    buf.extend_from_slice(commands);
    hash_digest(&buf)
}

/// `count(4) || { slot(4) || len(4) || message }*`.
pub fn encode_commands(plan: &SchedulePlan) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(plan.entries.len() as u32).to_be_bytes());
    for e in &plan.entries {
        out.extend_from_slice(&(e.position as u32).to_be_bytes());
        out.extend_from_slice(&(e.message.len() as u32).to_be_bytes());
        out.extend_from_slice(&e.message);
    }
    out
}

pub fn decode_commands(mut buf: &[u8]) -> Result<Vec<(usize, Vec<u8>)>, ProtocolError> {
    fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], ProtocolError> {
        if buf.len() < n {
            return Err(ProtocolError::MalformedCommands("truncated"));
        }
        let (h, t) = buf.split_at(n);
        *buf = t;
        Ok(h)
    }
    let count = u32::from_be_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let slot = u32::from_be_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
        let len = u32::from_be_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
        out.push((slot, take(&mut buf, len)?.to_vec()));
    }
    if !buf.is_empty() {
        return Err(ProtocolError::MalformedCommands("trailing bytes"));
    }
    Ok(out)
}

pub fn owner_create_order(plan: &SchedulePlan, registry: &KeyRegistry) -> Order {
    let commands = encode_commands(plan);
    let digest = order_digest(registry.owner_id, registry.hub_id, &commands);
    let signature = sign_order(&digest, &registry.owner);
    Order { owner_id: registry.owner_id, hub_id: registry.hub_id, commands, digest, signature }
}

/// Recomputes the digest and checks the owner's signature over it.
pub fn hub_verify_order(order: &Order, owner_pk: &VerifyingKey) -> bool {
    order_digest(order.owner_id, order.hub_id, &order.commands) == order.digest
        && verify_order_sig(&order.digest, &order.signature, owner_pk)
}

/// Protocol event kinds written to the event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Emit,
    Rcv,
    Fwd,
    SolveDone,
    Actuate,
    UploadReq,
    Upload,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Emit => "emit",
            EventKind::Rcv => "rcv",
            EventKind::Fwd => "fwd",
            EventKind::SolveDone => "solve_done",
            EventKind::Actuate => "actuate",
            EventKind::UploadReq => "upload_req",
            EventKind::Upload => "upload",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    Hub,
    Device(DeviceId),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Hub => f.write_str("H"),
            Actor::Device(d) => write!(f, "{}", d.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub round: u32,
    pub actor: Actor,
    pub kind: EventKind,
    pub t: Micros,
}

impl fmt::Display for ProtocolEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round,{},actor,{},event,{},t,{}", self.round, self.actor, self.kind, self.t)
    }
}

/// What a device proves to the owner after actuating.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionReport {
    pub device_id: DeviceId,
    pub t_com: Micros,
    pub t_hat: u64,
    /// `a^(2^t_hat) mod n` as computed by sequential squaring.
    pub solution: BigUint,
}

impl ExecutionReport {
    /// `device(4) || t_com(8) || t_hat(8) || len(4) || solution`.
    pub fn encode(&self) -> Vec<u8> {
        let sol = self.solution.to_bytes_be();
        let mut out = Vec::with_capacity(24 + sol.len());
        out.extend_from_slice(&self.device_id.0.to_be_bytes());
        out.extend_from_slice(&self.t_com.to_be_bytes());
        out.extend_from_slice(&self.t_hat.to_be_bytes());
        out.extend_from_slice(&(sol.len() as u32).to_be_bytes());
        out.extend_from_slice(&sol);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, ProtocolError> {
        if buf.len() < 24 {
            return Err(ProtocolError::MalformedReport);
        }
        let len = u32::from_be_bytes(buf[20..24].try_into().unwrap()) as usize;
        if buf.len() != 24 + len {
            return Err(ProtocolError::MalformedReport);
        }
        Ok(Self {
            device_id: DeviceId(u32::from_be_bytes(buf[0..4].try_into().unwrap())),
            t_com: u64::from_be_bytes(buf[4..12].try_into().unwrap()),
            t_hat: u64::from_be_bytes(buf[12..20].try_into().unwrap()),
            solution: BigUint::from_bytes_be(&buf[24..]),
        })
    }

    pub fn max_encoded_len(modulus_bits: u64) -> usize {
        24 + modulus_bits.div_ceil(8) as usize
    }
}

/// Owner-side check: every scheduled device reported the right residue and
/// every comparable pair actuated in order.
pub fn owner_verify_execution(reports: &[ExecutionReport], params: &PuzzleParams, plan: &SchedulePlan) -> bool {
    let mut by_device: BTreeMap<DeviceId, &ExecutionReport> = BTreeMap::new();
    for r in reports {
        let Some(entry) = plan.entry(r.device_id) else {
            return false;
        };
        if entry.puzzle.n != params.n
            || r.t_hat != entry.t_hat
            || r.solution != puzzle_fast_eval(&entry.puzzle, &params.phi)
        {
            return false;
        }
        if by_device.insert(r.device_id, r).is_some_and(|prev| prev != r) {
            return false;
        }
    }
    if plan.entries.iter().any(|e| !by_device.contains_key(&e.device)) {
        return false;
    }
    plan.comparable_pairs
        .iter()
        .all(|(i, j)| by_device[i].t_com <= by_device[j].t_com)
}

#[derive(Clone, Debug)]
pub struct HubConfig {
    pub layout: TokenLayout,
    /// Counter value the hub stamps on each token (ring hops per round).
    pub counter_start: i32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundTimes {
    pub round: u32,
    pub t_beg: Micros,
    pub t_end: Option<Micros>,
}

/// Data recovered by the hub from a granted sub-field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Upload {
    pub round: u32,
    pub device_index: usize,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct HubState {
    pub config: HubConfig,
    ring_key: SymmetricKey,
    rng: ChaCha20Rng,
    pub round: u32,
    next_token_id: u64,
    outstanding: Option<u64>,
    /// Command slots to place in the next emitted token.
    pub pending_delivery: BTreeMap<usize, Vec<u8>>,
    /// `b_r` per round, kept until that round's uploads are recovered.
    pub random_field_log: BTreeMap<u32, Vec<u8>>,
    pub pending_grants: BTreeSet<usize>,
    granted: BTreeMap<u32, BTreeSet<usize>>,
    pub trace: Vec<RoundTimes>,
    pub uploads: Vec<Upload>,
    pub events: Vec<ProtocolEvent>,
}

impl HubState {
    pub fn new(config: HubConfig, ring_key: SymmetricKey) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x0068_7562);
        let next_token_id = rng.next_u64();
        Self {
            config,
            ring_key,
            rng,
            round: 0,
            next_token_id,
            outstanding: None,
            pending_delivery: BTreeMap::new(),
            random_field_log: BTreeMap::new(),
            pending_grants: BTreeSet::new(),
            granted: BTreeMap::new(),
            trace: Vec::new(),
            uploads: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Verifies an order and queues its slots for the next token.
    pub fn accept_order(&mut self, order: &Order, owner_pk: &VerifyingKey) -> Result<(), ProtocolError> {
        if !hub_verify_order(order, owner_pk) {
            return Err(ProtocolError::OrderRejected);
        }
        let layout = self.config.layout;
        let slots = decode_commands(&order.commands)?;
        for (slot, msg) in &slots {
            if *slot >= layout.devices {
                return Err(ProtocolError::SlotOutOfRange(*slot));
            }
            if msg.len() != layout.slot_len {
                return Err(TokenError::LengthMismatch { left: msg.len(), right: layout.slot_len }.into());
            }
        }
        self.pending_delivery.extend(slots);
        Ok(())
    }

    fn grants_for_round(&self) -> BTreeSet<usize> {
        match self.config.layout.data_mode {
            DataMode::SubFields => self.pending_grants.clone(),
            DataMode::Single => self.pending_grants.iter().next().copied().into_iter().collect(),
        }
    }

    /// Starts a round: builds and seals the next token.
    pub fn emit_token(&mut self, now: Micros) -> Vec<u8> {
        let layout = self.config.layout;
        self.round += 1;
        let token_id = self.next_token_id;
        self.next_token_id = self.next_token_id.wrapping_add(1);
        let mut token = Token::random(&layout, token_id, self.round, self.config.counter_start, &mut self.rng);
        for (slot, msg) in std::mem::take(&mut self.pending_delivery) {
            token.set_slot(&layout, slot, &msg).expect("slot validated on acceptance");
        }
        let grants = self.grants_for_round();
        for &i in &grants {
            token.toggle_bits.set(i).expect("grant index within ring");
            self.pending_grants.remove(&i);
        }
        self.granted.insert(self.round, grants);
        self.random_field_log.insert(self.round, token.data_field.clone());
        self.outstanding = Some(token_id);
        self.trace.push(RoundTimes { round: self.round, t_beg: now, t_end: None });
        self.events.push(ProtocolEvent { round: self.round, actor: Actor::Hub, kind: EventKind::Emit, t: now });
        token_build(&token, &layout, &self.ring_key, token_nonce(self.round, 0)).expect("layout-consistent token")
    }

    /// Ends a round: recovers granted uploads and records new requests.
    pub fn on_token(&mut self, frame: &[u8], now: Micros) -> Result<Vec<Upload>, ProtocolError> {
        let layout = self.config.layout;
        let token = token_parse(frame, &layout, &self.ring_key)?;
        if self.outstanding != Some(token.token_id) {
            return Err(ProtocolError::UnexpectedToken { expected: self.outstanding, got: token.token_id });
        }
        self.outstanding = None;
        let round = token.round;
        if let Some(rt) = self.trace.iter_mut().rev().find(|r| r.round == round) {
            rt.t_end = Some(now);
        }
        self.events.push(ProtocolEvent { round, actor: Actor::Hub, kind: EventKind::Rcv, t: now });

        let granted = self.granted.remove(&round).unwrap_or_default();
        let b_r = self.random_field_log.remove(&round).unwrap_or_default();
        let mut recovered = Vec::new();
        let mut requests: BTreeSet<usize> = token.toggle_bits.ones().difference(&granted).copied().collect();
        for &i in &granted {
            let range = layout.subfield_range(i)?;
            let b_g = data_recover(&token.data_field[range.clone()], &b_r[range])?;
            // A granted device that had nothing left leaves b_r untouched.
            if let Ok((payload, more)) = decode_upload(&b_g) {
                if more {
                    requests.insert(i);
                }
                if !payload.is_empty() {
                    recovered.push(Upload { round, device_index: i, payload });
                }
            }
        }
        self.pending_grants.extend(requests);
        self.uploads.extend(recovered.iter().cloned());
        Ok(recovered)
    }
}

pub fn hub_emit_token(mut state: HubState, now: Micros) -> (HubState, Vec<u8>) {
    let frame = state.emit_token(now);
    (state, frame)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Actuation {
    pub command: Command,
    pub t_com: Micros,
}

#[derive(Clone, Debug)]
pub struct PendingPuzzle {
    pub puzzle: Puzzle,
    pub solver: SequentialSolver,
    pub round: u32,
}

/// Result of handling one token visit.
#[derive(Clone, Debug)]
pub struct Forward {
    pub frame: Vec<u8>,
    /// Counter exhausted: send back to the hub instead of the next device.
    pub to_hub: bool,
    pub round: u32,
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub device_id: DeviceId,
    pub ring_position: usize,
    layout: TokenLayout,
    ring_key: SymmetricKey,
    keys: DeviceKeys,
    last_token_id: Option<u64>,
    pub pending_puzzle: Option<PendingPuzzle>,
    pub actuated: Option<Actuation>,
    pub upload_queue: VecDeque<Vec<u8>>,
    requested: bool,
    /// Local clock offset from simulated true time.
    pub clock_skew: i64,
    /// Allowed clock difference when checking validity deadlines.
    pub t_diff: Micros,
    pub discarded: u64,
    pub events: Vec<ProtocolEvent>,
}

impl DeviceState {
    pub fn new(
        device_id: DeviceId,
        ring_position: usize,
        layout: TokenLayout,
        registry: &KeyRegistry,
        t_diff: Micros,
    ) -> Result<Self, ProtocolError> {
        let keys = registry.device(device_id)?;
        Ok(Self {
            device_id,
            ring_position,
            layout,
            ring_key: registry.ring_key.clone(),
            keys: keys.clone(),
            last_token_id: None,
            pending_puzzle: None,
            actuated: None,
            upload_queue: VecDeque::new(),
            requested: false,
            clock_skew: 0,
            t_diff,
            discarded: 0,
            events: Vec::new(),
        })
    }

    pub fn with_clock_skew(mut self, skew: i64) -> Self {
        assert!(skew.unsigned_abs() <= self.t_diff, "clock skew exceeds t_diff");
        self.clock_skew = skew;
        self
    }

    pub fn solve_progress(&self) -> u64 {
        self.pending_puzzle.as_ref().map_or(0, |p| p.solver.squarings_done())
    }

    fn local_time(&self, now: Micros) -> Micros {
        now.saturating_add_signed(self.clock_skew)
    }

    fn event(&mut self, round: u32, kind: EventKind, t: Micros) {
        self.events.push(ProtocolEvent { round, actor: Actor::Device(self.device_id), kind, t });
    }

    /// Queues data for anonymous upload.
    pub fn generate_data(&mut self, data: Vec<u8>) {
        self.upload_queue.push_back(data);
    }

    /// Handles one token visit and returns the re-sealed frame.
    pub fn on_token(&mut self, frame: &[u8], now: Micros) -> Result<Forward, ProtocolError> {
        let layout = self.layout;
        let mut token = token_parse(frame, &layout, &self.ring_key)?;
        let round = token.round;
        self.event(round, EventKind::Rcv, now);

        if self.last_token_id != Some(token.token_id) {
            self.last_token_id = Some(token.token_id);
            self.take_command(&token, now)?;
            self.exchange_data(&mut token, now)?;
        }

        token.counter -= 1;
        let hop = (layout.devices as i64 - token.counter as i64).max(0) as u32;
        let frame = token_build(&token, &layout, &self.ring_key, token_nonce(round, hop))?;
        Ok(Forward { frame, to_hub: token.counter <= 0, round })
    }

    fn take_command(&mut self, token: &Token, now: Micros) -> Result<(), ProtocolError> {
        let slot = token.slot(&self.layout, self.ring_position)?;
        // Every slot gets the same unwrap attempt; random padding fails it.
        let Ok(body) = open_for_device(slot, &self.keys.exchange) else {
            return Ok(());
        };
        let Ok((puzzle, _)) = Puzzle::decode_prefix(&body) else {
            self.discarded += 1;
            return Ok(());
        };
        if self.local_time(now) > puzzle.t_val.saturating_add(self.t_diff) {
            self.discarded += 1;
            return Ok(());
        }
        let solver = SequentialSolver::new(&puzzle);
        self.pending_puzzle = Some(PendingPuzzle { puzzle, solver, round: token.round });
        Ok(())
    }

    fn exchange_data(&mut self, token: &mut Token, now: Micros) -> Result<(), ProtocolError> {
        let i = self.ring_position;
        let layout = self.layout;
        if token.toggle_bits.get(i) && self.requested {
            if let Some(data) = self.upload_queue.pop_front() {
                let more = !self.upload_queue.is_empty();
                let b_g = encode_upload(&data, more, layout.subfield_len)?;
                let range = layout.subfield_range(i)?;
                let b_o = data_overwrite(&token.data_field[range.clone()], &b_g)?;
                token.data_field[range].copy_from_slice(&b_o);
                self.requested = more;
                self.event(token.round, EventKind::Upload, now);
            } else {
                self.requested = false;
            }
        } else if !self.upload_queue.is_empty() && !self.requested {
            token.toggle_bits.set(i)?;
            self.requested = true;
            self.event(token.round, EventKind::UploadReq, now);
        }
        Ok(())
    }

    /// Spends up to `budget` squarings on the pending puzzle; actuates and
    /// queues an execution report once it is solved.
    pub fn tick(&mut self, budget: u64, now: Micros) {
        let Some(pending) = self.pending_puzzle.as_mut() else {
            return;
        };
        pending.solver.advance(budget);
        if !pending.solver.is_complete() {
            return;
        }
        let pending = self.pending_puzzle.take().expect("checked above");
        let round = pending.round;
        let solved = pending.solver.finish(&pending.puzzle);
        let command = solved.ok().and_then(|s| Command::decode(&s.command).map(|c| (c, s)));
        let Some((command, solution)) = command.filter(|(c, _)| c.device == self.device_id) else {
            self.discarded += 1;
            return;
        };
        self.event(round, EventKind::SolveDone, now);
        self.event(round, EventKind::Actuate, now);
        self.actuated = Some(Actuation { command, t_com: now });
        let report = ExecutionReport {
            device_id: self.device_id,
            t_com: now,
            t_hat: pending.puzzle.t_hat,
            solution: solution.value,
        };
        self.upload_queue.push_back(report.encode());
    }
}

pub fn device_on_token(
    mut state: DeviceState,
    frame: &[u8],
    now: Micros,
) -> Result<(DeviceState, Forward), ProtocolError> {
    let fwd = state.on_token(frame, now)?;
    Ok((state, fwd))
}

pub fn device_tick(mut state: DeviceState, budget: u64, now: Micros) -> DeviceState {
    state.tick(budget, now);
    state
}
