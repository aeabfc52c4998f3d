//! Reconfigurable per-link communication substrate. The shim buffers sender
//! output per request and emits envelopes under the link's currently
//! installed granularity, priority order, and pacing policy. Modes can be
//! switched at any time; buffered tokens re-bind to the new mode with no
//! loss or duplication.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    AgentId, EnvelopeId, Granularity, MessageEnvelope, Priority, RequestId, SegmentKind,
    SessionId, SimTime,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

/// Link knobs exposed to the controller: "comm_mode", "chunk_tokens",
/// "pacing_gap".
#[derive(Debug, Clone)]
pub struct LinkConfig {
    pub mode: Granularity,
    /// Minimum milliseconds between consecutive emissions on this link.
    pub pacing_gap_ms: f64,
    /// Per-envelope propagation delay.
    pub network_delay_ms: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            mode: Granularity::TokenStream { chunk_tokens: 16 },
            pacing_gap_ms: 0.0,
            network_delay_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Accum {
    session: SessionId,
    priority: Priority,
    tokens: u32,
}

struct LinkState {
    source: AgentId,
    destination: AgentId,
    config: LinkConfig,
    accum: BTreeMap<RequestId, Accum>,
    /// Ready envelopes: highest priority first, FIFO within a priority.
    ready: BTreeMap<(Reverse<Priority>, u64), MessageEnvelope>,
    next_ready_seq: u64,
    next_env_seq: BTreeMap<RequestId, u32>,
    last_emission: Option<SimTime>,
}

/// All links of one simulation run.
#[derive(Default)]
pub struct DataPlane {
    links: BTreeMap<LinkId, LinkState>,
    next_envelope_id: u64,
}

impl DataPlane {
    pub fn new() -> DataPlane {
        DataPlane::default()
    }

    pub fn add_link(
        &mut self,
        id: LinkId,
        source: AgentId,
        destination: AgentId,
        config: LinkConfig,
    ) {
        self.links.insert(
            id,
            LinkState {
                source,
                destination,
                config,
                accum: BTreeMap::new(),
                ready: BTreeMap::new(),
                next_ready_seq: 0,
                next_env_seq: BTreeMap::new(),
                last_emission: None,
            },
        );
    }

    pub fn mode(&self, link: LinkId) -> Result<Granularity, ShimError> {
        Ok(self.state(link)?.config.mode)
    }

    pub fn config(&self, link: LinkId) -> Result<&LinkConfig, ShimError> {
        Ok(&self.state(link)?.config)
    }

    pub fn endpoints(&self, link: LinkId) -> Result<(AgentId, AgentId), ShimError> {
        let s = self.state(link)?;
        Ok((s.source.clone(), s.destination.clone()))
    }

    fn state(&self, link: LinkId) -> Result<&LinkState, ShimError> {
        self.links.get(&link).ok_or(ShimError::UnknownLink)
    }

    fn state_mut(&mut self, link: LinkId) -> Result<&mut LinkState, ShimError> {
        self.links.get_mut(&link).ok_or(ShimError::UnknownLink)
    }

    /// Hands freshly produced tokens to the link. A `function_boundary`
    /// marker is sender-signaled; the shim never parses payloads. When
    /// `is_request_complete` is set the offer must carry the request's last
    /// produced token(s), so a final envelope always has payload.
    #[allow(clippy::too_many_arguments)]
    pub fn offer_tokens(
        &mut self,
        link: LinkId,
        request: RequestId,
        session: SessionId,
        priority: Priority,
        n_tokens: u32,
        function_boundary: bool,
        is_request_complete: bool,
        now: SimTime,
    ) -> Result<usize, ShimError> {
        let mut emitted = 0;
        let mut env_id = self.next_envelope_id;
        {
            let state = self.links.get_mut(&link).ok_or(ShimError::UnknownLink)?;
            let entry = state.accum.entry(request).or_insert(Accum {
                session,
                priority,
                tokens: 0,
            });
            entry.tokens += n_tokens;
            entry.priority = priority;

            match state.config.mode {
                Granularity::TokenStream { chunk_tokens } => {
                    if is_request_complete {
                        debug_assert!(
                            state.accum[&request].tokens > 0,
                            "completion must ride the final token offer"
                        );
                        while state.accum[&request].tokens > chunk_tokens {
                            emit(state, &mut env_id, request, chunk_tokens, SegmentKind::Chunk, false, now);
                            emitted += 1;
                        }
                        let rest = state.accum[&request].tokens;
                        emit(state, &mut env_id, request, rest, SegmentKind::Chunk, true, now);
                        emitted += 1;
                        state.accum.remove(&request);
                    } else {
                        while state.accum[&request].tokens >= chunk_tokens {
                            emit(state, &mut env_id, request, chunk_tokens, SegmentKind::Chunk, false, now);
                            emitted += 1;
                        }
                    }
                }
                Granularity::PerFunction => {
                    if function_boundary || is_request_complete {
                        let all = state.accum[&request].tokens;
                        if all > 0 {
                            emit(
                                state,
                                &mut env_id,
                                request,
                                all,
                                SegmentKind::FunctionBoundary,
                                is_request_complete,
                                now,
                            );
                            emitted += 1;
                        }
                        if is_request_complete {
                            state.accum.remove(&request);
                        } else {
                            state.accum.get_mut(&request).unwrap().tokens = 0;
                        }
                    }
                }
                Granularity::BatchAll => {
                    if is_request_complete {
                        let all = state.accum[&request].tokens;
                        debug_assert!(all > 0, "completion must ride the final token offer");
                        emit(state, &mut env_id, request, all, SegmentKind::FunctionBoundary, true, now);
                        emitted += 1;
                        state.accum.remove(&request);
                    }
                }
            }
        }
        self.next_envelope_id = env_id;
        Ok(emitted)
    }

    /// Installs a new granularity. Tokens already buffered are retained and
    /// re-emitted under the new mode; in-flight envelopes are unaffected.
    pub fn set_mode(&mut self, link: LinkId, mode: Granularity, now: SimTime) -> Result<(), ShimError> {
        mode.validate().map_err(|_| ShimError::InvalidGranularity)?;
        let mut env_id = self.next_envelope_id;
        {
            let state = self.links.get_mut(&link).ok_or(ShimError::UnknownLink)?;
            state.config.mode = mode;
            // Buffered tokens re-bind immediately: under token_stream any full
            // chunks become ready; other modes hold until their trigger.
            if let Granularity::TokenStream { chunk_tokens } = mode {
                let requests: Vec<RequestId> = state.accum.keys().copied().collect();
                for request in requests {
                    while state.accum[&request].tokens >= chunk_tokens {
                        emit(state, &mut env_id, request, chunk_tokens, SegmentKind::Chunk, false, now);
                    }
                }
            }
        }
        self.next_envelope_id = env_id;
        Ok(())
    }

    pub fn set_pacing_gap(&mut self, link: LinkId, gap_ms: f64) -> Result<(), ShimError> {
        if gap_ms < 0.0 {
            return Err(ShimError::InvalidGranularity);
        }
        self.state_mut(link)?.config.pacing_gap_ms = gap_ms;
        Ok(())
    }

    /// Pops ready envelopes in priority order, spacing emissions by the
    /// pacing gap. Each envelope arrives at the destination `network_delay`
    /// after its emission instant.
    pub fn dispatch(
        &mut self,
        link: LinkId,
        now: SimTime,
    ) -> Result<Vec<(MessageEnvelope, SimTime)>, ShimError> {
        let state = self.links.get_mut(&link).ok_or(ShimError::UnknownLink)?;
        let mut out = Vec::new();
        while let Some((&key, _)) = state.ready.iter().next() {
            let envelope = state.ready.remove(&key).unwrap();
            let emit_at = match state.last_emission {
                Some(last) if state.config.pacing_gap_ms > 0.0 => {
                    last.add_ms(state.config.pacing_gap_ms).max(now)
                }
                _ => now,
            };
            state.last_emission = Some(emit_at);
            let arrival = emit_at.add_ms(state.config.network_delay_ms);
            out.push((envelope, arrival));
        }
        Ok(out)
    }

    /// Tokens buffered (not yet packaged into envelopes) for a request.
    pub fn buffered_tokens(&self, link: LinkId, request: RequestId) -> Result<u32, ShimError> {
        Ok(self
            .state(link)?
            .accum
            .get(&request)
            .map(|a| a.tokens)
            .unwrap_or(0))
    }

    pub fn ready_len(&self, link: LinkId) -> Result<usize, ShimError> {
        Ok(self.state(link)?.ready.len())
    }
}

fn emit(
    state: &mut LinkState,
    next_envelope_id: &mut u64,
    request: RequestId,
    payload: u32,
    segment: SegmentKind,
    is_final: bool,
    now: SimTime,
) {
    debug_assert!(payload > 0, "envelopes carry at least one token");
    let accum = state.accum.get_mut(&request).expect("accumulator exists");
    accum.tokens -= payload;
    let seq = {
        let counter = state.next_env_seq.entry(request).or_insert(0);
        let s = *counter;
        *counter += 1;
        s
    };
    let envelope = MessageEnvelope {
        id: EnvelopeId(*next_envelope_id),
        request_id: request,
        session: accum.session,
        source: state.source.clone(),
        destination: state.destination.clone(),
        payload_tokens: payload,
        seq,
        is_final,
        segment,
        priority: accum.priority,
        created: now,
    };
    *next_envelope_id += 1;
    let ready_seq = state.next_ready_seq;
    state.next_ready_seq += 1;
    state.ready.insert((Reverse(accum.priority), ready_seq), envelope);
}

#[derive(Debug, Error, PartialEq)]
pub enum ShimError {
    #[error("unknown link")]
    UnknownLink,
    #[error("invalid granularity")]
    InvalidGranularity,
}
