//! Binary message format for client uploads and the multi-process runner.
//!
//! Every frame is `len: u32 LE | tag: u8 | payload`, where `len` counts the
//! tag byte plus the payload. Numbers inside payloads are little-endian;
//! coordinates and scalars are f32, model weights f64. See `PROTOCOL.md`.

use std::io::{self, Read, Write};

use crate::error::{FerretError, Result};
use crate::rand_basis::RandomSeed;
use crate::subspace::ProjectedUpdate;
use crate::zoo::ScalarGrads;

pub const TAG_PROJECTED: u8 = 0x01;
pub const TAG_SCALARS: u8 = 0x02;
pub const TAG_RAW: u8 = 0x03;
pub const TAG_CLIENT_UPDATE: u8 = 0x10;
pub const TAG_HELLO: u8 = 0x20;
pub const TAG_ROUND_TASK: u8 = 0x21;
pub const TAG_SHUTDOWN: u8 = 0x22;
pub const TAG_FAILURE: u8 = 0x23;

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 30;

/// What a client uploads after its local work.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Projected(ProjectedUpdate),
    Scalars(ScalarGrads),
    /// A full update vector (FedAvg, FedZO).
    Raw(Vec<f32>),
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::Projected(_) => TAG_PROJECTED,
            Payload::Scalars(_) => TAG_SCALARS,
            Payload::Raw(_) => TAG_RAW,
        }
    }

    /// Count of transmitted numbers; a seed counts as one.
    pub fn numeric_units(&self) -> u64 {
        match self {
            Payload::Projected(p) => p.numeric_units(),
            Payload::Scalars(s) => s.numeric_units(),
            Payload::Raw(v) => v.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateMsg {
    pub client_id: u32,
    pub round: u32,
    pub upload_units: u64,
    /// Mini-batch model evaluations spent producing this update.
    pub grad_evals: u64,
    pub payload: Payload,
}

impl ClientUpdateMsg {
    pub fn new(client_id: u32, round: u32, grad_evals: u64, payload: Payload) -> Self {
        ClientUpdateMsg {
            client_id,
            round,
            upload_units: payload.numeric_units(),
            grad_evals,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureKind {
    Diverged { iteration: u32 },
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ClientUpdate(ClientUpdateMsg),
    /// Worker greeting; `config_digest` must match the server's.
    Hello { worker_id: u32, config_digest: u64 },
    /// Run `clients` for `round` starting from `weights`.
    RoundTask {
        round: u32,
        clients: Vec<u32>,
        weights: Vec<f64>,
    },
    Shutdown,
    Failure {
        round: u32,
        client_id: u32,
        kind: FailureKind,
        message: String,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ClientUpdate(_) => TAG_CLIENT_UPDATE,
            Message::Hello { .. } => TAG_HELLO,
            Message::RoundTask { .. } => TAG_ROUND_TASK,
            Message::Shutdown => TAG_SHUTDOWN,
            Message::Failure { .. } => TAG_FAILURE,
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Body of a payload without its tag.
pub fn encode_payload(p: &Payload, out: &mut Vec<u8>) {
    match p {
        Payload::Projected(u) => {
            out.push(u.version);
            out.extend_from_slice(&u.partition_id.to_le_bytes());
            out.extend_from_slice(&u.seed.0.to_le_bytes());
            out.extend_from_slice(&(u.coords.len() as u32).to_le_bytes());
            for block in &u.coords {
                out.extend_from_slice(&(block.len() as u32).to_le_bytes());
                put_f32s(out, block);
            }
        }
        Payload::Scalars(s) => {
            out.push(s.version);
            out.extend_from_slice(&s.seed.0.to_le_bytes());
            out.extend_from_slice(&(s.values.len() as u32).to_le_bytes());
            put_f32s(out, &s.values);
        }
        Payload::Raw(v) => {
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            put_f32s(out, v);
        }
    }
}

/// Tag and payload of `msg`, without the length prefix.
pub fn encode_body(msg: &Message) -> Vec<u8> {
    let mut out = vec![msg.tag()];
    match msg {
        Message::ClientUpdate(m) => {
            out.extend_from_slice(&m.client_id.to_le_bytes());
            out.extend_from_slice(&m.round.to_le_bytes());
            out.extend_from_slice(&m.upload_units.to_le_bytes());
            out.extend_from_slice(&m.grad_evals.to_le_bytes());
            out.push(m.payload.tag());
            encode_payload(&m.payload, &mut out);
        }
        Message::Hello {
            worker_id,
            config_digest,
        } => {
            out.extend_from_slice(&worker_id.to_le_bytes());
            out.extend_from_slice(&config_digest.to_le_bytes());
        }
        Message::RoundTask {
            round,
            clients,
            weights,
        } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&(clients.len() as u32).to_le_bytes());
            for c in clients {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
            for w in weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        Message::Shutdown => {}
        Message::Failure {
            round,
            client_id,
            kind,
            message,
        } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&client_id.to_le_bytes());
            match kind {
                FailureKind::Diverged { iteration } => {
                    out.push(1);
                    out.extend_from_slice(&iteration.to_le_bytes());
                }
                FailureKind::Other => {
                    out.push(0);
                    out.extend_from_slice(&0u32.to_le_bytes());
                }
            }
            out.extend_from_slice(&(message.len() as u32).to_le_bytes());
            out.extend_from_slice(message.as_bytes());
        }
    }
    out
}

/// Full frame: length prefix, tag and payload.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let body = encode_body(msg);
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FerretError::Protocol(format!(
                "truncated message: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, n: u64, width: usize) -> Result<usize> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(width as u64) > remaining {
            return Err(FerretError::Protocol(format!(
                "length {n} exceeds remaining {remaining} bytes"
            )));
        }
        Ok(n as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FerretError::Protocol(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_payload(tag: u8, c: &mut Cursor<'_>) -> Result<Payload> {
    match tag {
        TAG_PROJECTED => {
            let version = c.u8()?;
            let partition_id = c.u32()?;
            let seed = RandomSeed(c.u64()?);
            let blocks = c.u32()? as u64;
            let blocks = c.count(blocks, 4)?;
            let mut coords = Vec::with_capacity(blocks);
            for _ in 0..blocks {
                let n = c.u32()? as u64;
                let n = c.count(n, 4)?;
                coords.push(c.f32s(n)?);
            }
            Ok(Payload::Projected(ProjectedUpdate {
                version,
                partition_id,
                seed,
                coords,
            }))
        }
        TAG_SCALARS => {
            let version = c.u8()?;
            let seed = RandomSeed(c.u64()?);
            let n = c.u32()? as u64;
            let n = c.count(n, 4)?;
            Ok(Payload::Scalars(ScalarGrads {
                version,
                seed,
                values: c.f32s(n)?,
            }))
        }
        TAG_RAW => {
            let n = c.u64()?;
            let n = c.count(n, 4)?;
            Ok(Payload::Raw(c.f32s(n)?))
        }
        other => Err(FerretError::Protocol(format!("unknown payload tag {other:#04x}"))),
    }
}

/// A payload with its leading tag, as embedded in a client update.
pub fn encode_tagged_payload(p: &Payload) -> Vec<u8> {
    let mut out = vec![p.tag()];
    encode_payload(p, &mut out);
    out
}

/// Inverse of [`encode_tagged_payload`].
pub fn decode_tagged_payload(bytes: &[u8]) -> Result<Payload> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let tag = c.u8()?;
    let p = decode_payload(tag, &mut c)?;
    c.finish()?;
    Ok(p)
}

/// Decodes a tag-plus-payload body.
pub fn decode_body(body: &[u8]) -> Result<Message> {
    let mut c = Cursor { buf: body, pos: 0 };
    let tag = c.u8()?;
    let msg = match tag {
        TAG_CLIENT_UPDATE => {
            let client_id = c.u32()?;
            let round = c.u32()?;
            let upload_units = c.u64()?;
            let grad_evals = c.u64()?;
            let payload_tag = c.u8()?;
            let payload = decode_payload(payload_tag, &mut c)?;
            if payload.numeric_units() != upload_units {
                return Err(FerretError::Protocol(format!(
                    "upload_units {upload_units} disagrees with payload ({})",
                    payload.numeric_units()
                )));
            }
            Message::ClientUpdate(ClientUpdateMsg {
                client_id,
                round,
                upload_units,
                grad_evals,
                payload,
            })
        }
        TAG_HELLO => Message::Hello {
            worker_id: c.u32()?,
            config_digest: c.u64()?,
        },
        TAG_ROUND_TASK => {
            let round = c.u32()?;
            let n = c.u32()? as u64;
            let n = c.count(n, 4)?;
            let clients = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let d = c.u64()?;
            let d = c.count(d, 8)?;
            let weights = (0..d)
                .map(|_| c.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            Message::RoundTask {
                round,
                clients,
                weights,
            }
        }
        TAG_SHUTDOWN => Message::Shutdown,
        TAG_FAILURE => {
            let round = c.u32()?;
            let client_id = c.u32()?;
            let kind_tag = c.u8()?;
            let iteration = c.u32()?;
            let kind = match kind_tag {
                0 => FailureKind::Other,
                1 => FailureKind::Diverged { iteration },
                k => return Err(FerretError::Protocol(format!("unknown failure kind {k}"))),
            };
            let n = c.u32()? as u64;
            let n = c.count(n, 1)?;
            let message = String::from_utf8(c.take(n)?.to_vec())
                .map_err(|_| FerretError::Protocol("failure message is not UTF-8".into()))?;
            Message::Failure {
                round,
                client_id,
                kind,
                message,
            }
        }
        other => return Err(FerretError::Protocol(format!("unknown message tag {other:#04x}"))),
    };
    c.finish()?;
    Ok(msg)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a frame.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(FerretError::Protocol(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rand_basis::SEED_DERIVATION_VERSION;

    fn projected() -> Payload {
        Payload::Projected(ProjectedUpdate {
            version: SEED_DERIVATION_VERSION,
            partition_id: 0xDEAD_BEEF,
            seed: RandomSeed(42),
            coords: vec![vec![1.5, -2.0], vec![0.25]],
        })
    }

    #[test]
    fn projected_layout_is_exact() {
        let msg = Message::ClientUpdate(ClientUpdateMsg::new(3, 7, 10, projected()));
        let frame = encode_frame(&msg);
        let mut want = Vec::new();
        let body_len: u32 = 1 + 4 + 4 + 8 + 8 + 1 + (1 + 4 + 8 + 4 + (4 + 8) + (4 + 4));
        want.extend_from_slice(&body_len.to_le_bytes());
        want.push(0x10);
        want.extend_from_slice(&3u32.to_le_bytes());
        want.extend_from_slice(&7u32.to_le_bytes());
        want.extend_from_slice(&4u64.to_le_bytes());
        want.extend_from_slice(&10u64.to_le_bytes());
        want.push(0x01);
        want.push(1);
        want.extend_from_slice(&0xDEAD_BEEFu32.to_le_bytes());
        want.extend_from_slice(&42u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.5f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&0.25f32.to_le_bytes());
        assert_eq!(frame, want);
    }

    #[test]
    fn every_message_round_trips() {
        let msgs = vec![
            Message::ClientUpdate(ClientUpdateMsg::new(0, 1, 2, projected())),
            Message::ClientUpdate(ClientUpdateMsg::new(
                5,
                2,
                34,
                Payload::Scalars(ScalarGrads {
                    version: 1,
                    seed: RandomSeed(u64::MAX),
                    values: vec![0.5; 16],
                }),
            )),
            Message::ClientUpdate(ClientUpdateMsg::new(1, 3, 0, Payload::Raw(vec![1.0, f32::MIN]))),
            Message::Hello {
                worker_id: 9,
                config_digest: 77,
            },
            Message::RoundTask {
                round: 4,
                clients: vec![0, 2, 5],
                weights: vec![1.0, -0.0, f64::MAX, 1e-300],
            },
            Message::Shutdown,
            Message::Failure {
                round: 2,
                client_id: 1,
                kind: FailureKind::Diverged { iteration: 3 },
                message: "boom".into(),
            },
        ];
        let mut stream = Vec::new();
        for m in &msgs {
            write_message(&mut stream, m).unwrap();
        }
        let mut r = &stream[..];
        for m in &msgs {
            assert_eq!(&read_message(&mut r).unwrap().unwrap(), m);
        }
        assert!(read_message(&mut r).unwrap().is_none());
    }

    #[test]
    fn units_mismatch_rejected() {
        let mut msg = ClientUpdateMsg::new(0, 0, 0, projected());
        msg.upload_units = 3;
        let body = encode_body(&Message::ClientUpdate(msg));
        assert!(matches!(decode_body(&body), Err(FerretError::Protocol(_))));
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let body = encode_body(&Message::ClientUpdate(ClientUpdateMsg::new(0, 0, 0, projected())));
        for cut in 0..body.len() {
            assert!(decode_body(&body[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = body.clone();
        extra.push(0);
        assert!(decode_body(&extra).is_err());
        assert!(decode_body(&[0x7f]).is_err());
        // Huge declared lengths fail before allocating.
        let mut lie = vec![TAG_RAW];
        lie.extend_from_slice(&u64::MAX.to_le_bytes());
        let mut c = Cursor { buf: &lie, pos: 1 };
        assert!(decode_payload(TAG_RAW, &mut c).is_err());
    }
}
