//! Scheduler instances, the parent-child RPC protocol, and the subgraph
//! inclusion checker.
//!
//! Each instance owns one resource graph and serves requests serially. A
//! grow request first tries the local matcher; on failure it recurses to the
//! parent over a framed RPC (or, at the top / under external specialization,
//! to the configured provider), then grafts the returned subgraph into the
//! local graph on the way back down so the inclusion chain
//! `G_child ⊆ G_parent` is repaired level by level. Shrinks run the other
//! way: the initiating instance removes first, then notifies its ancestors.
//!
//! Two interchangeable transports carry the same frames: an in-process link
//! for single-process hierarchies and a length-prefixed JSON-over-TCP
//! protocol (4-byte big-endian length, then one UTF-8 JSON message).

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ClusterSpec, GraphError, JobId, ResourceGraph, VertexId};
use crate::grow::{self, GrowError, GrowOutcome, GrowResult, PhaseTimings};
use crate::jgf::{deserialize_jgf, serialize_jgf, Subgraph};
use crate::jobspec::JobSpec;
use crate::matcher::{match_allocate, MatchError, MatchPolicy};
use crate::perfmodel::{Phase, Recorder, TimingSample, Transport};
use crate::provider::{ExternalApi, ProviderError};

pub const DEFAULT_RPC_TIMEOUT: Duration = Duration::from_secs(30);

/// Precise busy-wait used for injected link latency; thread sleeps overshoot
/// by tens of microseconds, which would swamp the timing models.
fn inject_latency(latency: Duration) {
    if latency.is_zero() {
        return;
    }
    let start = Instant::now();
    while start.elapsed() < latency {
        std::hint::spin_loop();
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("rpc timed out")]
    Timeout,
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Grow(#[from] GrowError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("request cannot be satisfied: {0}")]
    Unsatisfiable(String),
    #[error("configuration error: {0}")]
    Config(String),
}

// ---- wire protocol ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpcKind {
    MatchGrowRequest,
    MatchGrowReply,
    ShrinkNotify,
    Error,
}

/// One framed message. Requests and replies pair by `request_id`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcMessage {
    pub kind: RpcKind,
    pub request_id: u64,
    pub payload: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchGrowRequestBody {
    spec: JobSpec,
    job: JobId,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchGrowReplyBody {
    outcome: GrowOutcome,
    levels: u32,
    /// Nanoseconds the replying instance spent handling the request,
    /// zero-padded to a fixed width so frame sizes depend only on the
    /// payload content. Subtracted from the round trip so comms samples
    /// measure transport alone.
    handling_ns: String,
    /// Canonical JGF document text; kept as one string so a reply costs a
    /// single serialization pass per hop.
    subgraph: Option<String>,
}

fn encode_handling(duration: Duration) -> String {
    format!("{:016}", duration.as_nanos().min(u128::from(u64::MAX)))
}

fn decode_handling(text: &str) -> Result<f64, TransportError> {
    let ns: u64 = text
        .parse()
        .map_err(|e| TransportError::Protocol(format!("bad handling field {text:?}: {e}")))?;
    Ok(ns as f64 / 1e9)
}

#[derive(Debug, Serialize, Deserialize)]
struct ShrinkNotifyBody {
    job: JobId,
    paths: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShrinkAckBody {
    removed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    message: String,
}

pub fn encode_frame(msg: &RpcMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("rpc message serializes");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

pub fn decode_frame(frame: &[u8]) -> Result<RpcMessage, TransportError> {
    if frame.len() < 4 {
        return Err(TransportError::Framing(format!(
            "frame of {} bytes is shorter than the length prefix",
            frame.len()
        )));
    }
    let declared = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    let body = &frame[4..];
    if body.len() != declared {
        return Err(TransportError::Framing(format!(
            "length prefix declares {declared} bytes, frame carries {}",
            body.len()
        )));
    }
    serde_json::from_slice(body).map_err(|e| TransportError::Protocol(format!("bad message: {e}")))
}

fn subgraph_from_text(text: &str) -> Result<Subgraph, TransportError> {
    deserialize_jgf(text).map_err(|e| TransportError::Protocol(format!("bad subgraph payload: {e}")))
}

// ---- transports ----

/// A handle to the parent instance: sends one frame, returns the reply frame.
pub trait ParentLink {
    fn call(&self, frame: &[u8]) -> Result<Vec<u8>, TransportError>;
    fn transport(&self) -> Transport;
}

/// Same-process link to a parent instance. The optional injected latency is
/// applied on each direction, which lets one host emulate an internode link.
pub struct InprocLink {
    target: Rc<RefCell<SchedulerInstance>>,
    injected_latency: Duration,
    transport: Transport,
}

impl InprocLink {
    pub fn new(target: Rc<RefCell<SchedulerInstance>>) -> Self {
        InprocLink {
            target,
            injected_latency: Duration::ZERO,
            transport: Transport::Intra,
        }
    }

    pub fn with_injected_latency(mut self, latency: Duration, transport: Transport) -> Self {
        self.injected_latency = latency;
        self.transport = transport;
        self
    }
}

impl ParentLink for InprocLink {
    fn call(&self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        inject_latency(self.injected_latency);
        let reply = self.target.borrow_mut().handle_frame(frame);
        inject_latency(self.injected_latency);
        Ok(reply)
    }

    fn transport(&self) -> Transport {
        self.transport
    }
}

/// Persistent TCP link to a parent instance.
pub struct TcpLink {
    stream: RefCell<TcpStream>,
    timeout: Duration,
    injected_latency: Duration,
    transport: Transport,
}

impl TcpLink {
    pub fn connect(
        addr: impl ToSocketAddrs,
        timeout: Duration,
        injected_latency: Duration,
        transport: Transport,
    ) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| TransportError::ConnectionLost(format!("connect: {e}")))?;
        stream
            .set_nodelay(true)
            .map_err(|e| TransportError::ConnectionLost(e.to_string()))?;
        Ok(TcpLink {
            stream: RefCell::new(stream),
            timeout,
            injected_latency,
            transport,
        })
    }
}

impl ParentLink for TcpLink {
    fn call(&self, frame: &[u8]) -> Result<Vec<u8>, TransportError> {
        inject_latency(self.injected_latency);
        let mut stream = self.stream.borrow_mut();
        stream
            .write_all(frame)
            .map_err(|e| TransportError::ConnectionLost(format!("send: {e}")))?;
        let reply = read_frame(&mut stream, self.timeout)?;
        inject_latency(self.injected_latency);
        Ok(reply)
    }

    fn transport(&self) -> Transport {
        self.transport
    }
}

/// Reads one length-prefixed frame within `timeout`. A clean close before
/// the first byte is a lost connection; a close mid-frame is a framing
/// error; running out of time is a timeout.
pub fn read_frame(stream: &mut TcpStream, timeout: Duration) -> Result<Vec<u8>, TransportError> {
    let deadline = Instant::now() + timeout;
    stream
        .set_read_timeout(Some(Duration::from_millis(50)))
        .map_err(|e| TransportError::ConnectionLost(e.to_string()))?;
    let mut header = [0u8; 4];
    read_exact_deadline(stream, &mut header, deadline, true)?;
    let declared = u32::from_be_bytes(header) as usize;
    let mut body = vec![0u8; declared];
    read_exact_deadline(stream, &mut body, deadline, false)?;
    let mut frame = Vec::with_capacity(4 + declared);
    frame.extend_from_slice(&header);
    frame.extend_from_slice(&body);
    Ok(frame)
}

fn read_exact_deadline(
    stream: &mut TcpStream,
    buf: &mut [u8],
    deadline: Instant,
    eof_is_close: bool,
) -> Result<(), TransportError> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                return if eof_is_close && filled == 0 {
                    Err(TransportError::ConnectionLost("peer closed".into()))
                } else {
                    Err(TransportError::Framing(format!(
                        "truncated frame: stream ended {} bytes short",
                        buf.len() - filled
                    )))
                };
            }
            Ok(n) => filled += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                if Instant::now() >= deadline {
                    return Err(TransportError::Timeout);
                }
            }
            Err(e) => return Err(TransportError::ConnectionLost(e.to_string())),
        }
    }
    Ok(())
}

// ---- event log ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventAction {
    MatchAttempt { success: bool },
    Add,
    Update,
    Remove,
    RpcIssue,
    RpcReturn,
    ProviderRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub level: u32,
    pub action: EventAction,
}

/// Shared, append-only event trace for protocol-order assertions.
#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<Event>>>);

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn push(&self, level: u32, action: EventAction) {
        self.0.lock().expect("event log lock").push(Event { level, action });
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.0.lock().expect("event log lock").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("event log lock").clear();
    }
}

// ---- inclusion ----

/// Plain subgraph inclusion: every child vertex (by path) and edge (by path
/// pair) exists in the parent graph.
pub fn check_inclusion(child: &ResourceGraph, parent: &ResourceGraph) -> bool {
    check_inclusion_with(child, parent, &BTreeSet::new())
}

/// Inclusion with an exemption set: paths the child holds as external
/// resources are skipped, as are edges touching them.
pub fn check_inclusion_with(
    child: &ResourceGraph,
    parent: &ResourceGraph,
    external: &BTreeSet<String>,
) -> bool {
    for v in child.vertices() {
        if external.contains(&v.path) {
            continue;
        }
        if parent.lookup_by_path(&v.path).is_none() {
            return false;
        }
    }
    for edge in child.edges() {
        let source = &child.vertex(edge.source).expect("edge source").path;
        let target = &child.vertex(edge.target).expect("edge target").path;
        if external.contains(source) || external.contains(target) {
            continue;
        }
        let (Some(ps), Some(pt)) = (parent.lookup_by_path(source), parent.lookup_by_path(target))
        else {
            return false;
        };
        if parent.parent_of(pt) != Some(ps) {
            return false;
        }
    }
    true
}

// ---- the instance ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GrowOrigin {
    Local,
    Parent,
    Provider,
}

#[derive(Debug, Clone)]
struct GrowBookkeeping {
    origin: GrowOrigin,
    /// Paths this instance inserted for the job (empty when everything was
    /// already present).
    inserted: Vec<String>,
}

/// One level of the scheduling hierarchy.
pub struct SchedulerInstance {
    level: u32,
    graph: ResourceGraph,
    parent: Option<Box<dyn ParentLink>>,
    provider: Option<Box<dyn ExternalApi>>,
    specialization: bool,
    policy: MatchPolicy,
    external_paths: BTreeSet<String>,
    grown: HashMap<JobId, GrowBookkeeping>,
    recorder: Recorder,
    events: Option<EventLog>,
    next_seq: u64,
    next_request_id: u64,
    /// Byte length of the last reply frame received from the parent.
    pub last_rpc_reply_bytes: Option<usize>,
}

impl SchedulerInstance {
    pub fn new(level: u32, graph: ResourceGraph) -> Self {
        SchedulerInstance {
            level,
            graph,
            parent: None,
            provider: None,
            specialization: false,
            policy: MatchPolicy::LowestPath,
            external_paths: BTreeSet::new(),
            grown: HashMap::new(),
            recorder: Recorder::new(),
            events: None,
            next_seq: 0,
            next_request_id: 0,
            last_rpc_reply_bytes: None,
        }
    }

    pub fn with_parent(mut self, link: Box<dyn ParentLink>) -> Self {
        self.parent = Some(link);
        self
    }

    pub fn with_provider(mut self, provider: Box<dyn ExternalApi>, specialization: bool) -> Self {
        self.provider = Some(provider);
        self.specialization = specialization;
        self
    }

    pub fn with_policy(mut self, policy: MatchPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_recorder(mut self, recorder: Recorder) -> Self {
        self.recorder = recorder;
        self
    }

    pub fn with_events(mut self, events: EventLog) -> Self {
        self.events = Some(events);
        self
    }

    pub fn set_parent(&mut self, link: Box<dyn ParentLink>) {
        self.parent = Some(link);
    }

    pub fn set_policy(&mut self, policy: MatchPolicy) {
        self.policy = policy;
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn graph(&self) -> &ResourceGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ResourceGraph {
        &mut self.graph
    }

    pub fn external_paths(&self) -> &BTreeSet<String> {
        &self.external_paths
    }

    pub fn policy(&self) -> MatchPolicy {
        self.policy
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    /// Mints a fresh job id in this instance's namespace.
    pub fn mint_job(&mut self) -> JobId {
        self.next_seq += 1;
        JobId::new(self.level, self.next_seq)
    }

    fn mint_request_id(&mut self) -> u64 {
        self.next_request_id += 1;
        self.next_request_id
    }

    fn log_event(&self, action: EventAction) {
        if let Some(events) = &self.events {
            events.push(self.level, action);
        }
    }

    fn parent_transport(&self) -> Transport {
        self.parent.as_ref().map(|p| p.transport()).unwrap_or(Transport::Intra)
    }

    /// The bottom-up then top-down grow procedure.
    ///
    /// Tries the local matcher; on failure forwards the request to the
    /// parent, and — when the whole parent chain comes back empty — falls
    /// back to the provider where one is configured (at the top level, or at
    /// a nested level running with external specialization). A subgraph
    /// returned from above is added into the local graph before this call
    /// returns, so callers below observe a repaired inclusion chain.
    pub fn match_grow(&mut self, spec: &JobSpec, job: JobId) -> Result<GrowResult, HierarchyError> {
        let mut timings = PhaseTimings::default();
        let request_n = spec.request_size();

        let t = Instant::now();
        let local = match_allocate(&mut self.graph, spec, job, &self.policy)?;
        timings.match_s = t.elapsed().as_secs_f64();
        self.recorder.record_sample(TimingSample {
            level: self.level,
            phase: Phase::Match,
            n: request_n,
            duration_s: timings.match_s,
            transport: Transport::Intra,
        });
        self.log_event(EventAction::MatchAttempt { success: local.is_some() });

        if let Some(sub) = local {
            let t = Instant::now();
            grow::run_grow(&mut self.graph, &sub, false, job)?;
            timings.add_update_s = t.elapsed().as_secs_f64();
            self.recorder.record_sample(TimingSample {
                level: self.level,
                phase: Phase::AddUpdate,
                n: sub.size() as u64,
                duration_s: timings.add_update_s,
                transport: Transport::Intra,
            });
            self.log_event(EventAction::Update);
            self.grown.insert(
                job,
                GrowBookkeeping {
                    origin: GrowOrigin::Local,
                    inserted: Vec::new(),
                },
            );
            return Ok(GrowResult {
                outcome: GrowOutcome::SatisfiedLocally,
                subgraph: Some(sub),
                levels_traversed: 1,
                timings,
            });
        }

        let mut upward_levels = 0u32;
        if self.parent.is_some() {
            let (reply, comms_s, sub) = self.rpc_match_grow(spec, job)?;
            timings.comms_s = comms_s;
            upward_levels = reply.levels;
            if let Some(sub) = sub {
                self.recorder.record_sample(TimingSample {
                    level: self.level,
                    phase: Phase::Comms,
                    n: sub.size() as u64,
                    duration_s: comms_s,
                    transport: self.parent_transport(),
                });
                let t = Instant::now();
                let stats = match grow::run_grow(&mut self.graph, &sub, true, job) {
                    Ok(stats) => stats,
                    Err(e) => {
                        // Levels above already grew: compensate before failing.
                        let paths: Vec<String> = sub.member_paths().into_iter().collect();
                        let _ = self.rpc_shrink(job, &paths);
                        return Err(e.into());
                    }
                };
                timings.add_update_s = t.elapsed().as_secs_f64();
                self.recorder.record_sample(TimingSample {
                    level: self.level,
                    phase: Phase::AddUpdate,
                    n: sub.size() as u64,
                    duration_s: timings.add_update_s,
                    transport: Transport::Intra,
                });
                self.log_event(EventAction::Add);
                self.log_event(EventAction::Update);
                self.grown.insert(
                    job,
                    GrowBookkeeping {
                        origin: GrowOrigin::Parent,
                        inserted: stats.add.map(|a| a.inserted).unwrap_or_default(),
                    },
                );
                let outcome = match reply.outcome {
                    GrowOutcome::SatisfiedByProvider => GrowOutcome::SatisfiedByProvider,
                    _ => GrowOutcome::SatisfiedByParent,
                };
                return Ok(GrowResult {
                    outcome,
                    subgraph: Some(sub),
                    levels_traversed: upward_levels + 1,
                    timings,
                });
            }
        }

        if self.provider.is_some() && (self.parent.is_none() || self.specialization) {
            return self.provider_grow(spec, job, upward_levels, timings);
        }

        Ok(GrowResult {
            outcome: GrowOutcome::Failed,
            subgraph: None,
            levels_traversed: upward_levels + 1,
            timings,
        })
    }

    fn provider_grow(
        &mut self,
        spec: &JobSpec,
        job: JobId,
        upward_levels: u32,
        mut timings: PhaseTimings,
    ) -> Result<GrowResult, HierarchyError> {
        self.log_event(EventAction::ProviderRequest);
        let attach = self
            .graph
            .vertex(self.graph.root())
            .expect("graph has a root")
            .path
            .clone();
        let provider = self.provider.as_mut().expect("caller checked");
        let sub = provider.request(spec, &attach)?;
        let t = Instant::now();
        let stats = grow::run_grow(&mut self.graph, &sub, true, job)?;
        timings.add_update_s = t.elapsed().as_secs_f64();
        self.recorder.record_sample(TimingSample {
            level: self.level,
            phase: Phase::AddUpdate,
            n: sub.size() as u64,
            duration_s: timings.add_update_s,
            transport: Transport::Intra,
        });
        self.log_event(EventAction::Add);
        self.log_event(EventAction::Update);
        let inserted = stats.add.map(|a| a.inserted).unwrap_or_default();
        self.external_paths.extend(inserted.iter().cloned());
        self.grown.insert(
            job,
            GrowBookkeeping {
                origin: GrowOrigin::Provider,
                inserted,
            },
        );
        Ok(GrowResult {
            outcome: GrowOutcome::SatisfiedByProvider,
            subgraph: Some(sub),
            levels_traversed: upward_levels + 1,
            timings,
        })
    }

    /// Shrinks a grow-acquired subgraph: removes what this instance inserted
    /// for `job`, frees any remaining local allocation, then propagates the
    /// removal to the ancestors that grew with it. Also accepts plain
    /// subtree-path sets for jobs this instance never grew.
    pub fn match_shrink(&mut self, paths: &[String], job: JobId) -> Result<usize, HierarchyError> {
        let book = self.grown.remove(&job);
        let mut removed = 0usize;
        match &book {
            Some(b) => {
                if !b.inserted.is_empty() {
                    removed = grow::remove_subgraph(&mut self.graph, &b.inserted, Some(job))?;
                }
            }
            None => {
                removed = grow::remove_subgraph(&mut self.graph, paths, Some(job))?;
            }
        }
        if self.graph.has_job(job) {
            crate::matcher::cancel(&mut self.graph, job)?;
        }
        self.log_event(EventAction::Remove);
        match book.as_ref().map(|b| b.origin) {
            Some(GrowOrigin::Parent) => {
                self.rpc_shrink(job, paths)?;
            }
            Some(GrowOrigin::Provider) => {
                let inserted = book.map(|b| b.inserted).unwrap_or_default();
                for p in &inserted {
                    self.external_paths.remove(p);
                }
                if let Some(provider) = self.provider.as_mut() {
                    provider.release(&inserted);
                }
            }
            _ => {}
        }
        Ok(removed)
    }

    fn rpc_match_grow(
        &mut self,
        spec: &JobSpec,
        job: JobId,
    ) -> Result<(MatchGrowReplyBody, f64, Option<Subgraph>), HierarchyError> {
        let request_id = self.mint_request_id();
        let msg = RpcMessage {
            kind: RpcKind::MatchGrowRequest,
            request_id,
            payload: serde_json::to_value(MatchGrowRequestBody {
                spec: spec.clone(),
                job,
            })
            .expect("request body serializes"),
        };
        let frame = encode_frame(&msg);
        self.log_event(EventAction::RpcIssue);
        let parent = self.parent.as_ref().expect("caller checked");
        let t = Instant::now();
        let reply_frame = parent.call(&frame)?;
        let rpc_elapsed = t.elapsed().as_secs_f64();
        self.last_rpc_reply_bytes = Some(reply_frame.len());
        self.log_event(EventAction::RpcReturn);
        let reply = decode_frame(&reply_frame)?;
        if reply.request_id != request_id {
            return Err(TransportError::Protocol(format!(
                "reply id {} does not pair with request id {request_id}",
                reply.request_id
            ))
            .into());
        }
        match reply.kind {
            RpcKind::MatchGrowReply => {
                let body: MatchGrowReplyBody = serde_json::from_value(reply.payload)
                    .map_err(|e| TransportError::Protocol(format!("bad reply body: {e}")))?;
                let sub = match &body.subgraph {
                    Some(text) => Some(subgraph_from_text(text)?),
                    None => None,
                };
                let handling_s = decode_handling(&body.handling_ns)?;
                let comms = (rpc_elapsed - handling_s).max(0.0);
                Ok((body, comms, sub))
            }
            RpcKind::Error => {
                let body: ErrorBody = serde_json::from_value(reply.payload)
                    .map_err(|e| TransportError::Protocol(format!("bad error body: {e}")))?;
                Err(HierarchyError::Remote(body.message))
            }
            other => Err(TransportError::Protocol(format!("unexpected reply kind {other:?}")).into()),
        }
    }

    fn rpc_shrink(&mut self, job: JobId, paths: &[String]) -> Result<usize, HierarchyError> {
        let request_id = self.mint_request_id();
        let msg = RpcMessage {
            kind: RpcKind::ShrinkNotify,
            request_id,
            payload: serde_json::to_value(ShrinkNotifyBody {
                job,
                paths: paths.to_vec(),
            })
            .expect("shrink body serializes"),
        };
        let parent = self
            .parent
            .as_ref()
            .ok_or_else(|| TransportError::Protocol("no parent to notify".into()))?;
        let reply_frame = parent.call(&encode_frame(&msg))?;
        let reply = decode_frame(&reply_frame)?;
        if reply.request_id != request_id {
            return Err(TransportError::Protocol("shrink reply id mismatch".into()).into());
        }
        match reply.kind {
            RpcKind::ShrinkNotify => {
                let ack: ShrinkAckBody = serde_json::from_value(reply.payload)
                    .map_err(|e| TransportError::Protocol(format!("bad shrink ack: {e}")))?;
                Ok(ack.removed)
            }
            RpcKind::Error => {
                let body: ErrorBody = serde_json::from_value(reply.payload)
                    .map_err(|e| TransportError::Protocol(format!("bad error body: {e}")))?;
                Err(HierarchyError::Remote(body.message))
            }
            other => Err(TransportError::Protocol(format!("unexpected reply kind {other:?}")).into()),
        }
    }

    /// Serves one framed request. Errors become error replies; the reply is
    /// always a complete frame.
    pub fn handle_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let msg = match decode_frame(frame) {
            Ok(msg) => msg,
            Err(e) => {
                return encode_frame(&RpcMessage {
                    kind: RpcKind::Error,
                    request_id: 0,
                    payload: serde_json::to_value(ErrorBody {
                        message: e.to_string(),
                    })
                    .expect("error body serializes"),
                });
            }
        };
        let reply = |kind: RpcKind, payload: serde_json::Value| {
            encode_frame(&RpcMessage {
                kind,
                request_id: msg.request_id,
                payload,
            })
        };
        let error_reply = |message: String| {
            reply(
                RpcKind::Error,
                serde_json::to_value(ErrorBody { message }).expect("error body serializes"),
            )
        };
        match msg.kind {
            RpcKind::MatchGrowRequest => {
                let body: MatchGrowRequestBody = match serde_json::from_value(msg.payload) {
                    Ok(body) => body,
                    Err(e) => return error_reply(format!("bad request body: {e}")),
                };
                let t = Instant::now();
                let result = self.match_grow(&body.spec, body.job);
                let handling = t.elapsed();
                self.recorder
                    .record_total(self.level, body.spec.request_size(), handling.as_secs_f64());
                match result {
                    Ok(res) => reply(
                        RpcKind::MatchGrowReply,
                        serde_json::to_value(MatchGrowReplyBody {
                            outcome: res.outcome,
                            levels: res.levels_traversed,
                            handling_ns: encode_handling(handling),
                            subgraph: res.subgraph.as_ref().map(serialize_jgf),
                        })
                        .expect("reply body serializes"),
                    ),
                    Err(e) => error_reply(e.to_string()),
                }
            }
            RpcKind::ShrinkNotify => {
                let body: ShrinkNotifyBody = match serde_json::from_value(msg.payload) {
                    Ok(body) => body,
                    Err(e) => return error_reply(format!("bad shrink body: {e}")),
                };
                match self.match_shrink(&body.paths, body.job) {
                    Ok(removed) => reply(
                        RpcKind::ShrinkNotify,
                        serde_json::to_value(ShrinkAckBody { removed })
                            .expect("ack body serializes"),
                    ),
                    Err(e) => error_reply(e.to_string()),
                }
            }
            RpcKind::MatchGrowReply | RpcKind::Error => {
                error_reply(format!("unexpected request kind {:?}", msg.kind))
            }
        }
    }

    /// Spawns a child instance over a satisfying allocation. The child's
    /// graph is the allocated subgraph plus its ancestor scaffolding up to
    /// the root; the child starts with no allocations and no knowledge of
    /// resources outside its graph.
    pub fn spawn_child(&mut self, spec: &JobSpec) -> Result<SchedulerInstance, HierarchyError> {
        let job = self.mint_job();
        let sub = match_allocate(&mut self.graph, spec, job, &self.policy)?;
        if sub.is_none() {
            return Err(HierarchyError::Unsatisfiable(format!(
                "spawn request {:?} has no satisfying subgraph",
                spec.to_text()
            )));
        }
        let mut closure: BTreeSet<VertexId> = self
            .graph
            .allocation(job)
            .expect("allocation just committed")
            .vertices
            .clone();
        for v in closure.clone() {
            let mut cur = self.graph.parent_of(v);
            while let Some(p) = cur {
                if !closure.insert(p) {
                    break;
                }
                cur = self.graph.parent_of(p);
            }
        }
        let doc = self.graph.extract_subgraph(&closure);
        let child_graph = ResourceGraph::from_subgraph(&doc, false)?;
        Ok(SchedulerInstance::new(self.level + 1, child_graph)
            .with_policy(self.policy)
            .with_recorder(self.recorder.clone()))
    }
}

// ---- preallocation helpers ----

/// Busy-state preload applied to a level before an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prealloc {
    None,
    All,
    FirstNodes(u64),
}

pub fn apply_prealloc(
    graph: &mut ResourceGraph,
    prealloc: Prealloc,
    job: JobId,
) -> Result<(), GraphError> {
    match prealloc {
        Prealloc::None => Ok(()),
        Prealloc::All => graph.allocate_all(job),
        Prealloc::FirstNodes(k) => {
            let root_path = graph.vertex(graph.root()).expect("root").path.clone();
            let mut members = BTreeSet::new();
            for i in 0..k {
                let path = format!("{root_path}/node{i}");
                let id = graph
                    .lookup_by_path(&path)
                    .ok_or(GraphError::UnknownPath(path))?;
                members.extend(graph.dfs_subtree(id));
            }
            graph.allocate_vertices(job, &members, crate::matcher::CreatedFrom::MatchAllocate, false)
        }
    }
}

// ---- in-process hierarchy harness ----

/// Shape of one level in a built hierarchy.
#[derive(Debug, Clone)]
pub struct LevelSetup {
    pub spec: ClusterSpec,
    pub prealloc: Prealloc,
    /// Link to the parent (ignored at level 0).
    pub link: Transport,
    pub injected_latency: Duration,
}

impl LevelSetup {
    pub fn new(spec: ClusterSpec) -> Self {
        LevelSetup {
            spec,
            prealloc: Prealloc::None,
            link: Transport::Intra,
            injected_latency: Duration::ZERO,
        }
    }
}

/// A single-process hierarchy: every level lives in this process and talks
/// over in-process links. Instances stay inspectable from tests.
pub struct InprocHierarchy {
    pub instances: Vec<Rc<RefCell<SchedulerInstance>>>,
    pub recorder: Recorder,
    pub events: EventLog,
}

impl InprocHierarchy {
    /// Builds independent per-level graphs (paths align by construction, so
    /// the inclusion chain holds for fresh levels).
    pub fn build(levels: &[LevelSetup]) -> Result<Self, HierarchyError> {
        let recorder = Recorder::new();
        let events = EventLog::new();
        let mut instances: Vec<Rc<RefCell<SchedulerInstance>>> = Vec::new();
        for (i, setup) in levels.iter().enumerate() {
            let mut graph = ResourceGraph::build_synthetic_cluster(&setup.spec)?;
            let prealloc_job = JobId::new(i as u32, u64::MAX);
            apply_prealloc(&mut graph, setup.prealloc, prealloc_job)?;
            let mut instance = SchedulerInstance::new(i as u32, graph)
                .with_recorder(recorder.clone())
                .with_events(events.clone());
            if i > 0 {
                let link = InprocLink::new(instances[i - 1].clone())
                    .with_injected_latency(setup.injected_latency, setup.link);
                instance = instance.with_parent(Box::new(link));
            }
            instances.push(Rc::new(RefCell::new(instance)));
        }
        Ok(InprocHierarchy {
            instances,
            recorder,
            events,
        })
    }

    /// Builds the hierarchy by spawning each level out of its parent's
    /// resources, the way a nested job would.
    pub fn spawn_ladder(
        root_spec: &ClusterSpec,
        child_specs: &[JobSpec],
    ) -> Result<Self, HierarchyError> {
        let recorder = Recorder::new();
        let events = EventLog::new();
        let root = ResourceGraph::build_synthetic_cluster(root_spec)?;
        let mut instances = vec![Rc::new(RefCell::new(
            SchedulerInstance::new(0, root)
                .with_recorder(recorder.clone())
                .with_events(events.clone()),
        ))];
        for spec in child_specs {
            let parent_rc = instances.last().expect("at least the root").clone();
            let child = parent_rc.borrow_mut().spawn_child(spec)?;
            let child = child
                .with_parent(Box::new(InprocLink::new(parent_rc)))
                .with_events(events.clone());
            instances.push(Rc::new(RefCell::new(child)));
        }
        Ok(InprocHierarchy {
            instances,
            recorder,
            events,
        })
    }

    pub fn leaf(&self) -> &Rc<RefCell<SchedulerInstance>> {
        self.instances.last().expect("hierarchy has levels")
    }

    pub fn level(&self, i: usize) -> std::cell::Ref<'_, SchedulerInstance> {
        self.instances[i].borrow()
    }

    /// Issues a grow at the leaf and records the leaf's total handling time.
    pub fn grow_at_leaf(&self, spec: &JobSpec) -> Result<(JobId, GrowResult), HierarchyError> {
        let leaf = self.leaf();
        let mut leaf = leaf.borrow_mut();
        let job = leaf.mint_job();
        let t = Instant::now();
        let result = leaf.match_grow(spec, job)?;
        self.recorder
            .record_total(leaf.level(), spec.request_size(), t.elapsed().as_secs_f64());
        Ok((job, result))
    }

    /// Shrinks a previous leaf grow back out of every level.
    pub fn shrink_at_leaf(&self, job: JobId, result: &GrowResult) -> Result<(), HierarchyError> {
        let paths: Vec<String> = result
            .subgraph
            .as_ref()
            .map(|s| s.member_paths().into_iter().collect())
            .unwrap_or_default();
        self.leaf().borrow_mut().match_shrink(&paths, job)?;
        Ok(())
    }

    /// Checks inclusion for every adjacent pair, exempting each child's own
    /// external set.
    pub fn inclusion_chain_holds(&self) -> bool {
        for i in 1..self.instances.len() {
            let child = self.instances[i].borrow();
            let parent = self.instances[i - 1].borrow();
            if !check_inclusion_with(child.graph(), parent.graph(), child.external_paths()) {
                return false;
            }
        }
        true
    }

    pub fn state_hashes(&self) -> Vec<String> {
        self.instances
            .iter()
            .map(|i| i.borrow().graph().state_hash())
            .collect()
    }
}

// ---- TCP hosting ----

/// Handle to an instance served on a TCP listener in a background thread.
pub struct TcpHostHandle {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl TcpHostHandle {
    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for TcpHostHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Hosts an instance built by `factory` on `listener`, serving frames until
/// shut down. Construction happens inside the thread so instances holding
/// in-process links never cross threads.
pub fn spawn_tcp_host<F>(listener: TcpListener, factory: F) -> TcpHostHandle
where
    F: FnOnce() -> SchedulerInstance + Send + 'static,
{
    let addr = listener.local_addr().expect("listener has an address");
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let join = std::thread::spawn(move || {
        let mut instance = factory();
        serve_instance(&mut instance, &listener, &flag);
    });
    TcpHostHandle {
        addr,
        shutdown,
        join: Some(join),
    }
}

/// Accept-and-serve loop: one connection at a time, frames answered in
/// order. Returns when the shutdown flag is raised.
pub fn serve_instance(
    instance: &mut SchedulerInstance,
    listener: &TcpListener,
    shutdown: &AtomicBool,
) {
    listener.set_nonblocking(true).expect("listener mode");
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                serve_connection(instance, stream, shutdown);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
}

fn serve_connection(instance: &mut SchedulerInstance, mut stream: TcpStream, shutdown: &AtomicBool) {
    let _ = stream.set_nodelay(true);
    while !shutdown.load(Ordering::Relaxed) {
        match read_frame(&mut stream, Duration::from_millis(200)) {
            Ok(frame) => {
                let reply = instance.handle_frame(&frame);
                if stream.write_all(&reply).is_err() {
                    return;
                }
            }
            Err(TransportError::Timeout) => continue,
            Err(_) => return,
        }
    }
}


impl SchedulerInstance {
    /// Test and harness hook: attach a provider after construction.
    pub fn attach_provider_for_tests(&mut self, provider: Box<dyn ExternalApi>, specialization: bool) {
        self.provider = Some(provider);
        self.specialization = specialization;
    }
}
