//! Two-party execution of the on-the-fly protocol over a classical link.
//!
//! Alice owns the source and simulates the quantum channel; each round she
//! sends Bob a `DELIVERY` frame carrying the state that reaches his
//! detector. Bob measures in the basis derived from the shared seed and
//! answers with `ROUND_RESULT`. After `N + 1` rounds Alice either aborts or
//! reveals `r` and sends the verdict.
//!
//! Frames are a 4-byte big-endian length followed by a UTF-8 JSON body.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, CMatrix};
use crate::simkit::{
    self, AbortReason, ChannelModel, ChannelStrategy, CorrelationCounts, DetectorModel, ProtocolParams, SessionKeys,
    SimError, SourceModel, Verdict,
};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("malformed frame body: {0}")]
    Malformed(String),
    #[error("truncated frame")]
    Truncated,
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer disconnected")]
    Closed,
    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),
    #[error("session parameters differ between peers")]
    ParamsMismatch,
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

/// Parameters both peers must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub session_id: String,
    pub shared_seed: u64,
    #[serde(rename = "F_i")]
    pub f_i: f64,
    #[serde(flatten)]
    pub protocol: ProtocolParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WireMessage {
    Hello {
        v: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role: Option<Role>,
    },
    Params {
        params: SessionParams,
    },
    /// Simulated quantum delivery of round `k`; `state` is Bob's system
    /// when it arrived.
    Delivery {
        k: u64,
        arrived: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<Vec<Vec<[f64; 2]>>>,
    },
    RoundResult {
        k: u64,
        detected: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outcome: Option<u8>,
    },
    RevealR {
        r: u64,
    },
    Abort {
        verdict: Verdict,
    },
    Verdict {
        verdict: Verdict,
    },
}

impl WireMessage {
    fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::Params { .. } => "PARAMS",
            WireMessage::Delivery { .. } => "DELIVERY",
            WireMessage::RoundResult { .. } => "ROUND_RESULT",
            WireMessage::RevealR { .. } => "REVEAL_R",
            WireMessage::Abort { .. } => "ABORT",
            WireMessage::Verdict { .. } => "VERDICT",
        }
    }
}

pub fn encode_frame(msg: &WireMessage) -> std::result::Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(msg).map_err(|e| FrameError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(FrameError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<(WireMessage, usize), FrameError> {
    let header: [u8; 4] = bytes
        .get(..4)
        .ok_or(FrameError::Truncated)?
        .try_into()
        .expect("4 bytes");
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::Oversize(len));
    }
    let body = bytes.get(4..4 + len).ok_or(FrameError::Truncated)?;
    let msg = serde_json::from_slice(body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    Ok((msg, 4 + len))
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::Oversize(len).into());
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&header);
    reader.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => RunnerError::Frame(FrameError::Truncated),
        _ => RunnerError::Io(e),
    })?;
    Ok(Some(frame))
}

/// Ordered, reliable delivery of encoded frames.
pub trait Transport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        self.send_frame(encode_frame(msg)?)
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let frame = self.recv_frame()?;
        let (msg, used) = decode_frame(&frame)?;
        if used != frame.len() {
            return Err(FrameError::Malformed("trailing bytes".into()).into());
        }
        Ok(msg)
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        (**self).send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        (**self).recv_frame()
    }
}

/// In-memory queue transport.
pub struct InProcessTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

pub fn in_process_pair() -> (InProcessTransport, InProcessTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        InProcessTransport { tx: a_tx, rx: a_rx },
        InProcessTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for InProcessTransport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx.send(frame).map_err(|_| RunnerError::Closed)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx.recv().map_err(|_| RunnerError::Closed)
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    /// Accepts a single peer.
    pub fn accept(listener: &TcpListener) -> Result<Self> {
        Self::new(listener.accept()?.0)
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.writer.write_all(&frame)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        read_frame(&mut self.reader)?.ok_or(RunnerError::Closed)
    }
}

/// Wraps a transport and keeps a copy of every frame sent.
pub struct RecordingTransport<T> {
    pub inner: T,
    pub sent: Vec<Vec<u8>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            sent: Vec::new(),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.sent.push(frame.clone());
        self.inner.send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.inner.recv_frame()
    }
}

/// Frames up to the first `REVEAL_R` whose JSON contains a key named `r`.
pub fn frames_leaking_r(frames: &[Vec<u8>]) -> Vec<usize> {
    fn has_r(v: &serde_json::Value) -> bool {
        match v {
            serde_json::Value::Object(map) => map.iter().any(|(k, v)| k == "r" || has_r(v)),
            serde_json::Value::Array(items) => items.iter().any(has_r),
            _ => false,
        }
    }
    let mut leaks = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let Ok((msg, _)) = decode_frame(frame) else { continue };
        if matches!(msg, WireMessage::RevealR { .. }) {
            break;
        }
        let value: serde_json::Value = serde_json::from_slice(&frame[4..]).unwrap_or_default();
        if has_r(&value) {
            leaks.push(i);
        }
    }
    leaks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub verdict: Verdict,
    /// Message position; Bob only learns it on reveal.
    pub r: Option<u64>,
    /// Bob's copy of the message-round system, kept on reveal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_state: Option<Vec<Vec<[f64; 2]>>>,
}

fn unexpected(expected: &str, got: &WireMessage) -> RunnerError {
    RunnerError::ProtocolOrder(format!("expected {expected}, got {}", got.kind()))
}

/// Alice's side: handshake, `N + 1` rounds, abort or reveal and verdict.
pub fn alice_session<T: Transport>(
    params: &SessionParams,
    source: &SourceModel,
    strategy: &ChannelStrategy,
    detector: &DetectorModel,
    mut transport: T,
) -> Result<SessionOutcome> {
    match transport.recv()? {
        WireMessage::Hello {
            v: PROTOCOL_VERSION, ..
        } => {}
        other => return Err(unexpected("HELLO", &other)),
    }
    transport.send(&WireMessage::Hello {
        v: PROTOCOL_VERSION,
        role: Some(Role::Alice),
    })?;
    transport.send(&WireMessage::Params { params: params.clone() })?;
    match transport.recv()? {
        WireMessage::Params { params: echo } if echo == *params => {}
        WireMessage::Params { .. } => return Err(RunnerError::ParamsMismatch),
        other => return Err(unexpected("PARAMS", &other)),
    }

    let resolved = strategy.resolve().map_err(RunnerError::Sim)?;
    let models = resolved
        .palette
        .iter()
        .map(|ch| ChannelModel::new(ch, source))
        .collect::<simkit::Result<Vec<_>>>()?;
    let protocol = &params.protocol;
    let n = protocol.probe_rounds()?;
    let keys = SessionKeys::new(params.shared_seed);
    let r = keys.message_position(n + 1);

    let mut counts = CorrelationCounts::default();
    let mut detected = 0u64;
    let mut message_delivered = false;
    let mut prev_arrived = None;
    for k in 1..=n + 1 {
        let model = &models[resolved.select(k, prev_arrived)];
        let q = keys.basis(k, protocol.basis_block);
        let draws = keys.alice_draws(k);
        let (arrived, state, alice) = if k == r {
            let arrived = draws.pass < model.t_message;
            (arrived, &model.message_state, None)
        } else {
            let ar = simkit::alice_probe_round(model.t_probe, model.alice_probs(q), detector, draws);
            (ar.arrived, &model.split[q as usize][ar.outcome as usize].1, Some(ar))
        };
        transport.send(&WireMessage::Delivery {
            k,
            arrived,
            state: arrived.then(|| linalg::to_pairs(state)),
        })?;
        let (bob_detected, outcome) = match transport.recv()? {
            WireMessage::RoundResult {
                k: got,
                detected,
                outcome,
            } if got == k => (detected, outcome),
            WireMessage::RoundResult { k: got, .. } => {
                return Err(RunnerError::ProtocolOrder(format!(
                    "ROUND_RESULT for round {got}, expected {k}"
                )))
            }
            other => return Err(unexpected("ROUND_RESULT", &other)),
        };
        match alice {
            None => message_delivered = arrived && bob_detected,
            Some(ar) => {
                if ar.arrived && ar.clicked && bob_detected {
                    let b = outcome.filter(|&b| b < 2).ok_or_else(|| {
                        RunnerError::ProtocolOrder(format!("round {k}: detection without a valid outcome"))
                    })?;
                    counts.record(q, ar.outcome, b);
                    detected += 1;
                }
            }
        }
        prev_arrived = Some(arrived);
    }

    let verdict = simkit::decide_verdict(&counts, detected, n, message_delivered, protocol, params.f_i);
    let pre_reveal_abort = matches!(
        verdict.abort_reason,
        Some(AbortReason::MessageLost) | Some(AbortReason::InsufficientDetections { .. })
    );
    if pre_reveal_abort {
        transport.send(&WireMessage::Abort {
            verdict: verdict.clone(),
        })?;
    } else {
        transport.send(&WireMessage::RevealR { r })?;
        if verdict.certified {
            transport.send(&WireMessage::Verdict {
                verdict: verdict.clone(),
            })?;
        } else {
            transport.send(&WireMessage::Abort {
                verdict: verdict.clone(),
            })?;
        }
    }
    Ok(SessionOutcome {
        verdict,
        r: Some(r),
        message_state: None,
    })
}

/// Bob's side: answers every delivery, keeps the revealed message system.
pub fn bob_session<T: Transport>(
    params: &SessionParams,
    detector: &DetectorModel,
    mut transport: T,
) -> Result<SessionOutcome> {
    transport.send(&WireMessage::Hello {
        v: PROTOCOL_VERSION,
        role: Some(Role::Bob),
    })?;
    match transport.recv()? {
        WireMessage::Hello {
            v: PROTOCOL_VERSION, ..
        } => {}
        other => return Err(unexpected("HELLO", &other)),
    }
    match transport.recv()? {
        WireMessage::Params { params: theirs } => {
            transport.send(&WireMessage::Params { params: params.clone() })?;
            if theirs != *params {
                return Err(RunnerError::ParamsMismatch);
            }
        }
        other => return Err(unexpected("PARAMS", &other)),
    }

    let n = params.protocol.probe_rounds()?;
    let keys = SessionKeys::new(params.shared_seed);
    let mut states: Vec<Option<CMatrix>> = Vec::new();
    let mut revealed = None;
    loop {
        match transport.recv()? {
            WireMessage::Delivery { k, arrived, state } => {
                if revealed.is_some() || k != states.len() as u64 + 1 || k > n + 1 {
                    return Err(RunnerError::ProtocolOrder(format!("unexpected DELIVERY for round {k}")));
                }
                let sigma = match (arrived, state) {
                    (true, Some(rows)) => Some(
                        linalg::from_pairs(&rows)
                            .filter(|m| m.nrows() == 2 && m.ncols() == 2)
                            .ok_or_else(|| RunnerError::ProtocolOrder(format!("round {k}: bad state")))?,
                    ),
                    (true, None) => return Err(RunnerError::ProtocolOrder(format!("round {k}: missing state"))),
                    (false, _) => None,
                };
                let outcome = sigma.as_ref().and_then(|s| {
                    let q = keys.basis(k, params.protocol.basis_block);
                    simkit::bob_measure(simkit::bob_outcome_probs(s, q), detector, keys.bob_draws(k))
                });
                states.push(sigma);
                transport.send(&WireMessage::RoundResult {
                    k,
                    detected: outcome.is_some(),
                    outcome,
                })?;
            }
            WireMessage::RevealR { r } => {
                if states.len() as u64 != n + 1 || r == 0 || r > n + 1 {
                    return Err(RunnerError::ProtocolOrder("REVEAL_R before all rounds".into()));
                }
                revealed = Some(r);
            }
            WireMessage::Verdict { verdict } | WireMessage::Abort { verdict } => {
                if verdict.certified && revealed.is_none() {
                    return Err(RunnerError::ProtocolOrder("VERDICT before REVEAL_R".into()));
                }
                let message_state = revealed
                    .and_then(|r| states[(r - 1) as usize].as_ref())
                    .map(linalg::to_pairs);
                return Ok(SessionOutcome {
                    verdict,
                    r: revealed,
                    message_state,
                });
            }
            other => return Err(unexpected("DELIVERY, REVEAL_R, VERDICT or ABORT", &other)),
        }
    }
}
