//! Localhost socket runner: one server process owns the global model and
//! the aggregation, worker processes run client updates.
//!
//! Every worker builds the same [`Federation`] from the same config and
//! proves it with a digest in its `Hello`. Per round the server sends each
//! worker a `RoundTask` for a round-robin share of the sampled clients and
//! waits for one `ClientUpdate` (or `Failure`) per client. Updates are
//! reduced in ascending client order, so a socket run reproduces the
//! in-process run bit for bit.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{FerretError, Result};
use crate::federation::{Federation, RoundRecord};
use crate::rand_basis::mix64;
use crate::wire::{read_message, write_message, ClientUpdateMsg, FailureKind, Message};

/// Stable 64-bit digest of a config text.
pub fn config_digest(bytes: &[u8]) -> u64 {
    bytes
        .chunks(8)
        .fold(mix64(bytes.len() as u64), |h, c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            mix64(h ^ u64::from_le_bytes(b))
        })
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, msg)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        read_message(&mut self.reader)?
            .ok_or_else(|| FerretError::Protocol("peer closed the connection".into()))
    }
}

fn failure_error(round: u32, client_id: u32, kind: FailureKind, message: String) -> FerretError {
    let inner = match kind {
        FailureKind::Diverged { iteration } => FerretError::Diverged {
            iteration: iteration as usize,
        },
        FailureKind::Other => FerretError::Protocol(format!("client {client_id}: {message}")),
    };
    FerretError::Round {
        round: round as usize,
        source: Box::new(inner),
    }
}

/// Accepts `workers` connections on `listener`, then drives the remaining
/// rounds of `fed`. Workers get a `Shutdown` when the run ends, also on
/// error.
pub fn run_server(
    fed: &mut Federation,
    listener: &TcpListener,
    workers: usize,
    digest: u64,
) -> Result<Vec<RoundRecord>> {
    if workers == 0 {
        return Err(FerretError::Config("need at least one worker".into()));
    }
    let mut conns = Vec::with_capacity(workers);
    while conns.len() < workers {
        let (stream, _) = listener.accept()?;
        let mut conn = Conn::new(stream)?;
        match conn.recv()? {
            Message::Hello { config_digest, .. } if config_digest == digest => conns.push(conn),
            Message::Hello { worker_id, .. } => {
                let _ = conn.send(&Message::Shutdown);
                return Err(FerretError::Protocol(format!(
                    "worker {worker_id} runs a different config"
                )));
            }
            other => {
                return Err(FerretError::Protocol(format!(
                    "expected hello, got tag {:#04x}",
                    other.tag()
                )))
            }
        }
    }
    let result = drive(fed, &mut conns);
    for c in &mut conns {
        let _ = c.send(&Message::Shutdown);
    }
    result
}

fn drive(fed: &mut Federation, conns: &mut [Conn]) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::new();
    while fed.round() < fed.config().rounds {
        let round = fed.round() + 1;
        let sampled = fed.sample_clients(round);
        let started = Instant::now();
        let n = conns.len();
        let mut expected = vec![0usize; n];
        for (i, conn) in conns.iter_mut().enumerate() {
            let clients: Vec<u32> = sampled
                .iter()
                .enumerate()
                .filter(|(j, _)| j % n == i)
                .map(|(_, &c)| c as u32)
                .collect();
            expected[i] = clients.len();
            conn.send(&Message::RoundTask {
                round: round as u32,
                clients,
                weights: fed.weights().to_vec(),
            })?;
        }
        let mut msgs: Vec<ClientUpdateMsg> = Vec::with_capacity(sampled.len());
        let mut failure = None;
        for (conn, &count) in conns.iter_mut().zip(&expected) {
            for _ in 0..count {
                match conn.recv()? {
                    Message::ClientUpdate(m) => msgs.push(m),
                    Message::Failure {
                        round,
                        client_id,
                        kind,
                        message,
                    } => {
                        let err = failure_error(round, client_id, kind, message);
                        failure.get_or_insert((client_id, err));
                    }
                    other => {
                        return Err(FerretError::Protocol(format!(
                            "unexpected tag {:#04x} during round {round}",
                            other.tag()
                        )))
                    }
                }
            }
        }
        if let Some((_, err)) = failure {
            return Err(err);
        }
        let local = started.elapsed().as_secs_f64();
        let rec = fed
            .apply_round(round, &sampled, msgs, local)
            .map_err(|e| FerretError::Round {
                round,
                source: Box::new(e),
            })?;
        records.push(rec);
    }
    Ok(records)
}

/// Connects to `addr`, retrying for up to `wait`.
pub fn connect_with_retry<A: ToSocketAddrs + Copy>(addr: A, wait: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + wait;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Serves round tasks on `stream` until the server shuts it down.
pub fn run_worker(stream: TcpStream, fed: &Federation, worker_id: u32, digest: u64) -> Result<()> {
    let mut conn = Conn::new(stream)?;
    conn.send(&Message::Hello {
        worker_id,
        config_digest: digest,
    })?;
    loop {
        let msg = match read_message(&mut conn.reader)? {
            None | Some(Message::Shutdown) => return Ok(()),
            Some(m) => m,
        };
        let Message::RoundTask {
            round,
            clients,
            weights,
        } = msg
        else {
            return Err(FerretError::Protocol(format!(
                "worker expected a round task, got tag {:#04x}",
                msg.tag()
            )));
        };
        let replies: Vec<Message> = clients
            .par_iter()
            .map(|&c| match fed.client_update(&weights, round as usize, c as usize) {
                Ok(m) => Message::ClientUpdate(m),
                Err(e) => {
                    let kind = match e.root_cause() {
                        FerretError::Diverged { iteration } => FailureKind::Diverged {
                            iteration: *iteration as u32,
                        },
                        _ => FailureKind::Other,
                    };
                    Message::Failure {
                        round,
                        client_id: c,
                        kind,
                        message: e.to_string(),
                    }
                }
            })
            .collect();
        for r in &replies {
            write_message(&mut conn.writer, r)?;
        }
        conn.writer.flush()?;
    }
}

/// Runs `fed` with `workers` worker threads talking to a server over
/// loopback sockets. The CLI uses processes instead; this is the same
/// protocol without the process management.
pub fn run_loopback(fed: &mut Federation, workers: usize) -> Result<Vec<RoundRecord>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let digest = 0x5eed;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|i| {
                let worker_fed = fed.clone();
                s.spawn(move || {
                    let stream = connect_with_retry(addr, Duration::from_secs(10))?;
                    run_worker(stream, &worker_fed, i as u32, digest)
                })
            })
            .collect();
        let out = run_server(fed, &listener, workers, digest);
        for h in handles {
            match h.join() {
                Ok(r) => r?,
                Err(_) => return Err(FerretError::Protocol("worker thread panicked".into())),
            }
        }
        out
    })
}
