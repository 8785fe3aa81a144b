//! Two-party session layer: framing, handshake, phase machine, traces.
//!
//! Frame: "MSH1" | msg_type u8 | session_id u64 LE | payload length u64 LE |
//! payload.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::RngCore;

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::phe::{Ciphertext, Party, PheContext};

pub const FRAME_MAGIC: &[u8; 4] = b"MSH1";
pub const HEADER_LEN: usize = 21;
pub const PROTOCOL_VERSION: u32 = 1;
const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Ack = 2,
    Abort = 3,
    OfflineCtH = 10,
    OfflineCtHbarHtilde = 11,
    OfflineDone = 12,
    OnlineCtA = 20,
    OnlineCtHacute = 21,
    OnlineCtC = 22,
    TreeLevel = 23,
    Reshare = 24,
    Result = 25,
    OtBase = 30,
    OtExt = 31,
    Dealer = 32,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Result<Self> {
        use MsgType::*;
        Ok(match b {
            1 => Hello,
            2 => Ack,
            3 => Abort,
            10 => OfflineCtH,
            11 => OfflineCtHbarHtilde,
            12 => OfflineDone,
            20 => OnlineCtA,
            21 => OnlineCtHacute,
            22 => OnlineCtC,
            23 => TreeLevel,
            24 => Reshare,
            25 => Result,
            30 => OtBase,
            31 => OtExt,
            32 => Dealer,
            _ => return Err(Error::Framing(format!("unknown message type {b}"))),
        })
    }

    fn class(self) -> MsgClass {
        use MsgType::*;
        match self {
            Hello | Ack | Abort => MsgClass::Handshake,
            OfflineCtH | OfflineCtHbarHtilde | OfflineDone => MsgClass::Offline,
            OtBase | OtExt | Dealer => MsgClass::Any,
            _ => MsgClass::Online,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MsgClass {
    Handshake,
    Offline,
    Online,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Handshake,
    Offline,
    Online,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u64, u64)> {
        if &h[..4] != FRAME_MAGIC {
            return Err(Error::Framing("bad magic".into()));
        }
        let t = MsgType::from_u8(h[4])?;
        let sid = u64::from_le_bytes(h[5..13].try_into().expect("8 bytes"));
        let len = u64::from_le_bytes(h[13..21].try_into().expect("8 bytes"));
        if len > MAX_PAYLOAD {
            return Err(Error::Framing(format!("payload length {len}")));
        }
        Ok((t, sid, len))
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let h: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Framing("short header".into()))?;
        let (msg_type, session_id, len) = Self::parse_header(h)?;
        if bytes.len() as u64 != HEADER_LEN as u64 + len {
            return Err(Error::Framing("length field disagrees with frame".into()));
        }
        Ok(Frame {
            msg_type,
            session_id,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// A duplex byte pipe carrying whole frames.
pub trait Conn: Send {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

pub struct LoopbackConn {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Connected in-memory pair (client end, server end).
pub fn loopback_pair() -> (LoopbackConn, LoopbackConn) {
    let (a_tx, a_rx) = channel();
    let (b_tx, b_rx) = channel();
    (
        LoopbackConn { tx: a_tx, rx: b_rx },
        LoopbackConn { tx: b_tx, rx: a_rx },
    )
}

impl Conn for LoopbackConn {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.tx
            .send(bytes)
            .map_err(|_| Error::Connection("peer hung up".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| Error::Connection("peer hung up".into()))
    }
}

/// TCP connection with a dedicated writer thread so that both parties may
/// push large batches at the same time.
pub struct TcpConn {
    reader: TcpStream,
    tx: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<std::io::Result<()>>>,
}

impl TcpConn {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let mut w = stream.try_clone()?;
        let (tx, rx) = channel::<Vec<u8>>();
        let writer = std::thread::spawn(move || {
            for frame in rx {
                w.write_all(&frame)?;
            }
            w.flush()
        });
        Ok(TcpConn {
            reader: stream,
            tx: Some(tx),
            writer: Some(writer),
        })
    }
}

impl Conn for TcpConn {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.tx
            .as_ref()
            .expect("open")
            .send(bytes)
            .map_err(|_| Error::Connection("writer stopped".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut h = [0u8; HEADER_LEN];
        self.reader
            .read_exact(&mut h)
            .map_err(|e| Error::Connection(e.to_string()))?;
        let (_, _, len) = Frame::parse_header(&h)?;
        let mut buf = h.to_vec();
        buf.resize(HEADER_LEN + len as usize, 0);
        self.reader
            .read_exact(&mut buf[HEADER_LEN..])
            .map_err(|e| Error::Connection(e.to_string()))?;
        Ok(buf)
    }
}

impl Drop for TcpConn {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Message {
        dir: Direction,
        msg_type: MsgType,
        bytes: u64,
        block: Option<usize>,
    },
    Mark {
        label: &'static str,
        block: Option<usize>,
    },
}

pub struct Session {
    pub role: Party,
    pub session_id: u64,
    pub params_digest: [u8; 32],
    pub plan_digest: [u8; 32],
    phase: Phase,
    conn: Box<dyn Conn>,
    counters: Arc<Counters>,
    pending: VecDeque<Frame>,
    trace: Vec<TraceEvent>,
    block: Option<usize>,
    peer_offline_done: bool,
    /// Number of blocking receive calls made so far.
    pub recv_calls: u64,
}

fn hello_payload(params: &[u8; 32], plan: &[u8; 32]) -> Vec<u8> {
    let mut v = PROTOCOL_VERSION.to_le_bytes().to_vec();
    v.extend_from_slice(params);
    v.extend_from_slice(plan);
    v
}

/// Establish a session. The client proposes its digests; the server checks
/// them against its own and either acknowledges with a fresh session id or
/// aborts with a reason.
pub fn handshake(
    conn: Box<dyn Conn>,
    role: Party,
    params_digest: [u8; 32],
    plan_digest: [u8; 32],
    counters: Arc<Counters>,
    rng: &mut impl RngCore,
) -> Result<Session> {
    let mut s = Session {
        role,
        session_id: 0,
        params_digest,
        plan_digest,
        phase: Phase::Handshake,
        conn,
        counters,
        pending: VecDeque::new(),
        trace: Vec::new(),
        block: None,
        peer_offline_done: false,
        recv_calls: 0,
    };
    match role {
        Party::Client => {
            s.send(MsgType::Hello, hello_payload(&params_digest, &plan_digest))?;
            let f = s.recv_any()?;
            match f.msg_type {
                MsgType::Ack if f.payload.len() == 8 => {
                    s.session_id = u64::from_le_bytes(f.payload[..8].try_into().expect("8"));
                }
                MsgType::Abort => {
                    return Err(Error::Handshake(String::from_utf8_lossy(&f.payload).into()))
                }
                t => return Err(Error::Handshake(format!("unexpected {t:?}"))),
            }
        }
        Party::Server => {
            let f = s.recv_any()?;
            if f.msg_type != MsgType::Hello || f.payload.len() != 68 {
                return Err(Error::Handshake("expected hello".into()));
            }
            let version = u32::from_le_bytes(f.payload[..4].try_into().expect("4"));
            let reason = if version != PROTOCOL_VERSION {
                Some(format!("version {version} != {PROTOCOL_VERSION}"))
            } else if f.payload[4..36] != params_digest {
                Some("protocol parameter digest mismatch".to_string())
            } else if f.payload[36..68] != plan_digest {
                Some("model plan digest mismatch".to_string())
            } else {
                None
            };
            if let Some(r) = reason {
                s.send(MsgType::Abort, r.clone().into_bytes())?;
                return Err(Error::Handshake(r));
            }
            let sid = rng.next_u64() | 1;
            s.send(MsgType::Ack, sid.to_le_bytes().to_vec())?;
            s.session_id = sid;
        }
    }
    s.phase = Phase::Offline;
    Ok(s)
}

impl Session {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn set_block(&mut self, block: Option<usize>) {
        self.block = block;
    }

    pub fn mark(&mut self, label: &'static str) {
        self.trace.push(TraceEvent::Mark {
            label,
            block: self.block,
        });
    }

    fn admits(&self, t: MsgType) -> bool {
        match t.class() {
            MsgClass::Handshake => self.phase == Phase::Handshake,
            MsgClass::Offline => self.phase == Phase::Offline,
            MsgClass::Online => self.phase == Phase::Online,
            MsgClass::Any => matches!(self.phase, Phase::Offline | Phase::Online),
        }
    }

    pub fn send(&mut self, msg_type: MsgType, payload: Vec<u8>) -> Result<()> {
        if !self.admits(msg_type) {
            return Err(Error::Phase(format!(
                "{msg_type:?} cannot be sent in phase {:?}",
                self.phase
            )));
        }
        let bytes = Frame {
            msg_type,
            session_id: self.session_id,
            payload,
        }
        .encode();
        let len = bytes.len() as u64;
        self.conn.send_frame(bytes)?;
        Counters::bump(&self.counters.bytes_sent, len);
        Counters::bump(&self.counters.messages_sent, 1);
        if matches!(msg_type, MsgType::OtBase | MsgType::OtExt) {
            Counters::bump(&self.counters.ot_messages, 1);
        }
        self.trace.push(TraceEvent::Message {
            dir: Direction::Sent,
            msg_type,
            bytes: len,
            block: self.block,
        });
        Ok(())
    }

    fn recv_any(&mut self) -> Result<Frame> {
        self.recv_calls += 1;
        let f = Frame::decode(&self.conn.recv_frame()?)?;
        if self.phase != Phase::Handshake {
            if f.msg_type == MsgType::Hello {
                return Err(Error::Handshake("replayed handshake on a live session".into()));
            }
            if f.session_id != self.session_id {
                return Err(Error::Framing(format!("foreign session id {}", f.session_id)));
            }
            let early = f.msg_type.class() == MsgClass::Online && !self.peer_offline_done;
            if early || f.msg_type.class() == MsgClass::Handshake {
                return Err(Error::Phase(format!("{:?} arrived out of phase", f.msg_type)));
            }
        }
        if f.msg_type == MsgType::OfflineDone {
            self.peer_offline_done = true;
        }
        self.trace.push(TraceEvent::Message {
            dir: Direction::Received,
            msg_type: f.msg_type,
            bytes: (HEADER_LEN + f.payload.len()) as u64,
            block: self.block,
        });
        Ok(f)
    }

    /// Next payload of the given type; other types are held for later.
    pub fn recv(&mut self, msg_type: MsgType) -> Result<Vec<u8>> {
        if let Some(i) = self.pending.iter().position(|f| f.msg_type == msg_type) {
            return Ok(self.pending.remove(i).expect("index").payload);
        }
        loop {
            let f = self.recv_any()?;
            if f.msg_type == msg_type {
                return Ok(f.payload);
            }
            if f.msg_type == MsgType::Abort {
                return Err(Error::Protocol(String::from_utf8_lossy(&f.payload).into()));
            }
            self.pending.push_back(f);
        }
    }

    /// Exchange completion markers and enter the online phase.
    pub fn finish_offline(&mut self) -> Result<()> {
        self.send(MsgType::OfflineDone, Vec::new())?;
        self.recv(MsgType::OfflineDone)?;
        self.phase = Phase::Online;
        Ok(())
    }

    pub fn finish(&mut self) {
        self.phase = Phase::Done;
    }

    pub fn send_cts(&mut self, msg_type: MsgType, phe: &PheContext, cts: &[Ciphertext]) -> Result<()> {
        let mut out = (cts.len() as u32).to_le_bytes().to_vec();
        for ct in cts {
            let w = phe.serialize(ct);
            out.extend_from_slice(&ct.noise.to_le_bytes());
            out.extend_from_slice(&(w.len() as u64).to_le_bytes());
            out.extend_from_slice(&w);
        }
        self.send(msg_type, out)?;
        Counters::bump(&self.counters.ciphertexts_sent, cts.len() as u64);
        Ok(())
    }

    pub fn recv_cts(&mut self, msg_type: MsgType, phe: &PheContext) -> Result<Vec<Ciphertext>> {
        let b = self.recv(msg_type)?;
        let bad = || Error::Malformed("ciphertext batch".into());
        let mut pos = 4;
        let count = u32::from_le_bytes(b.get(..4).ok_or_else(bad)?.try_into().expect("4"));
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let hdr = b.get(pos..pos + 16).ok_or_else(bad)?;
            let noise = f64::from_le_bytes(hdr[..8].try_into().expect("8"));
            let len = u64::from_le_bytes(hdr[8..].try_into().expect("8")) as usize;
            pos += 16;
            out.push(phe.deserialize(b.get(pos..pos + len).ok_or_else(bad)?, noise)?);
            pos += len;
        }
        if pos != b.len() {
            return Err(bad());
        }
        Ok(out)
    }

    pub fn send_u64s(&mut self, msg_type: MsgType, v: &[u64]) -> Result<()> {
        self.send(msg_type, u64s_to_bytes(v))
    }

    pub fn recv_u64s(&mut self, msg_type: MsgType) -> Result<Vec<u64>> {
        bytes_to_u64s(&self.recv(msg_type)?)
    }
}

pub fn u64s_to_bytes(v: &[u64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_u64s(b: &[u8]) -> Result<Vec<u64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Malformed("u64 vector length".into()));
    }
    Ok(b.chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8")))
        .collect())
}

/// Half-rounds in a party's trace: maximal runs of same-direction messages.
pub fn half_rounds<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> usize {
    let mut last = None;
    let mut runs = 0;
    for e in events {
        if let TraceEvent::Message { dir, .. } = e {
            if last != Some(*dir) {
                runs += 1;
                last = Some(*dir);
            }
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::prng;

    fn pair(plan_c: [u8; 32], plan_s: [u8; 32]) -> (Result<Session>, Result<Session>) {
        let (a, b) = loopback_pair();
        std::thread::scope(|sc| {
            let h = sc.spawn(move || {
                handshake(
                    Box::new(b),
                    Party::Server,
                    [1; 32],
                    plan_s,
                    Arc::default(),
                    &mut prng(1, "s"),
                )
            });
            let c = handshake(
                Box::new(a),
                Party::Client,
                [1; 32],
                plan_c,
                Arc::default(),
                &mut prng(1, "c"),
            );
            (c, h.join().unwrap())
        })
    }

    #[test]
    fn handshake_agrees_or_aborts() {
        let (c, s) = pair([2; 32], [2; 32]);
        let (c, s) = (c.unwrap(), s.unwrap());
        assert_eq!(c.session_id, s.session_id);
        assert_eq!(c.phase(), Phase::Offline);
        let (c, s) = pair([2; 32], [3; 32]);
        assert!(matches!(c, Err(Error::Handshake(ref m)) if m.contains("plan")));
        assert!(matches!(s, Err(Error::Handshake(_))));
    }

    #[test]
    fn frames_and_phases() {
        let (c, s) = pair([0; 32], [0; 32]);
        let (mut c, mut s) = (c.unwrap(), s.unwrap());
        assert!(matches!(
            c.send(MsgType::OnlineCtA, vec![]),
            Err(Error::Phase(_))
        ));
        c.send(MsgType::OfflineCtH, vec![]).unwrap();
        assert_eq!(s.recv(MsgType::OfflineCtH).unwrap(), Vec::<u8>::new());
        std::thread::scope(|sc| {
            let h = sc.spawn(move || {
                s.finish_offline().unwrap();
                s
            });
            c.finish_offline().unwrap();
            let mut s = h.join().unwrap();
            let big = vec![7u8; 10 << 20];
            let before = c.counters().snapshot().bytes_sent;
            c.send(MsgType::OnlineCtA, big.clone()).unwrap();
            assert_eq!(
                c.counters().snapshot().bytes_sent - before,
                (HEADER_LEN + big.len()) as u64
            );
            assert_eq!(s.recv(MsgType::OnlineCtA).unwrap(), big);
            // a second hello on a live session
            let replay = Frame {
                msg_type: MsgType::Hello,
                session_id: 0,
                payload: vec![],
            };
            c.conn.send_frame(replay.encode()).unwrap();
            assert!(matches!(s.recv(MsgType::OnlineCtA), Err(Error::Handshake(_))));
        });
    }

    #[test]
    fn corrupt_frames_rejected() {
        let f = Frame {
            msg_type: MsgType::TreeLevel,
            session_id: 9,
            payload: vec![1, 2, 3],
        };
        let mut b = f.encode();
        assert_eq!(Frame::decode(&b).unwrap(), f);
        b[4] = 99;
        assert!(matches!(Frame::decode(&b), Err(Error::Framing(_))));
        let mut b = f.encode();
        b[0] = b'X';
        assert!(Frame::decode(&b).is_err());
        assert!(Frame::decode(&f.encode()[..22]).is_err());
    }

    #[test]
    fn online_frame_before_peer_marker_is_rejected() {
        let (c, s) = pair([0; 32], [0; 32]);
        let (mut c, mut s) = (c.unwrap(), s.unwrap());
        let rogue = Frame {
            msg_type: MsgType::OnlineCtC,
            session_id: c.session_id,
            payload: vec![],
        };
        c.conn.send_frame(rogue.encode()).unwrap();
        assert!(matches!(s.recv(MsgType::OfflineCtH), Err(Error::Phase(_))));
    }
}
