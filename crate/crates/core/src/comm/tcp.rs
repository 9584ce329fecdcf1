//! TCP transport and rendezvous.
//!
//! Bootstrap:
//!
//! 1. Rank 0 listens on the rendezvous address. Every other rank binds its
//!    own listener, connects to rank 0 and sends a hello carrying
//!    `(rank, size, listen port)`.
//! 2. Once all ranks have reported, rank 0 sends each one the address table.
//!    If the deadline passes first, rank 0 tells the ranks that did arrive
//!    which ranks are missing and everyone fails with a startup error.
//! 3. Each rank `r ≥ 1` connects to every rank in `1..r` and accepts from
//!    every rank above it, giving a full mesh. The rendezvous connection is
//!    reused as the link to rank 0.
//!
//! One reader thread per socket decodes frames into a shared inbox, so
//! writers never block on a peer that is itself blocked writing.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{self, Frame, FrameKind, Hello};
use super::Transport;
use crate::error::{Error, Result};

pub const DEFAULT_RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(30);

pub const ENV_RANK: &str = "MDP_RANK";
pub const ENV_WORLD_SIZE: &str = "MDP_WORLD_SIZE";
pub const ENV_RENDEZVOUS: &str = "MDP_RENDEZVOUS";
pub const ENV_TIMEOUT_SECS: &str = "MDP_TIMEOUT_SECS";

const POLL: Duration = Duration::from_millis(5);
const VERDICT_GRACE: Duration = Duration::from_secs(2);

#[derive(Clone, Debug)]
pub struct TcpConfig {
    pub rank: usize,
    pub size: usize,
    /// `host:port` where rank 0 listens.
    pub rendezvous: String,
    /// Deadline for the whole bootstrap.
    pub timeout: Duration,
    /// Interface the non-root listeners bind to.
    pub bind_host: String,
}

impl TcpConfig {
    pub fn new(rank: usize, size: usize, rendezvous: impl Into<String>) -> Self {
        TcpConfig {
            rank,
            size,
            rendezvous: rendezvous.into(),
            timeout: DEFAULT_RENDEZVOUS_TIMEOUT,
            bind_host: "0.0.0.0".into(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Reads `MDP_RANK`, `MDP_WORLD_SIZE`, `MDP_RENDEZVOUS` and the optional
    /// `MDP_TIMEOUT_SECS`.
    pub fn from_env() -> Result<Self> {
        fn var(name: &str) -> Result<String> {
            std::env::var(name).map_err(|_| Error::Config(format!("{name} is not set")))
        }
        fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{name}={v:?} is not a valid number")))
        }
        let rank = parse(ENV_RANK, &var(ENV_RANK)?)?;
        let size = parse(ENV_WORLD_SIZE, &var(ENV_WORLD_SIZE)?)?;
        let mut cfg = TcpConfig::new(rank, size, var(ENV_RENDEZVOUS)?);
        if let Ok(t) = std::env::var(ENV_TIMEOUT_SECS) {
            cfg.timeout = Duration::from_secs_f64(parse(ENV_TIMEOUT_SECS, &t)?);
        }
        Ok(cfg)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.size == 0 || self.rank >= self.size {
            return Err(Error::Config(format!(
                "rank {} is outside a world of size {}",
                self.rank, self.size
            )));
        }
        if self.size > u32::MAX as usize {
            return Err(Error::Config("world size too large".into()));
        }
        Ok(())
    }
}

pub(crate) struct TcpTransport {
    rank: usize,
    writers: Vec<Option<BufWriter<TcpStream>>>,
    inbox: Receiver<(usize, Frame)>,
}

impl TcpTransport {
    fn new(rank: usize, streams: Vec<Option<TcpStream>>) -> Result<Self> {
        let (tx, inbox) = mpsc::channel();
        let mut writers = Vec::with_capacity(streams.len());
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else {
                writers.push(None);
                continue;
            };
            stream.set_nodelay(true)?;
            stream.set_read_timeout(None)?;
            let reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::Builder::new()
                .name(format!("mdp-rx-{rank}<-{peer}"))
                .spawn(move || read_loop(peer, reader, tx))?;
            writers.push(Some(BufWriter::with_capacity(1 << 16, stream)));
        }
        Ok(TcpTransport {
            rank,
            writers,
            inbox,
        })
    }
}

fn read_loop(peer: usize, stream: TcpStream, tx: Sender<(usize, Frame)>) {
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    loop {
        let (frame, last) = match wire::read_frame(&mut reader) {
            Ok(Some(f)) => (f, false),
            Ok(None) => (
                Frame::control(FrameKind::Hangup, b"connection closed".to_vec()),
                true,
            ),
            Err(e) => (
                Frame::control(FrameKind::Hangup, e.to_string().into_bytes()),
                true,
            ),
        };
        if tx.send((peer, frame)).is_err() || last {
            return;
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        let w = self.writers[to].as_mut().ok_or_else(|| Error::Transport {
            peer: to,
            detail: "no connection".into(),
        })?;
        wire::write_frame(w, &frame).map_err(|e| Error::Transport {
            peer: to,
            detail: e.to_string(),
        })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<(usize, Frame)>> {
        match timeout {
            None => Ok(self.inbox.recv().ok()),
            Some(t) => match self.inbox.recv_timeout(t) {
                Ok(m) => Ok(Some(m)),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => Ok(None),
            },
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for w in self.writers.iter_mut().flatten() {
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
        let _ = self.rank;
    }
}

fn startup(cfg: &TcpConfig, missing: Vec<usize>, detail: impl Into<String>) -> Error {
    Error::Startup {
        timeout: cfg.timeout,
        missing,
        detail: detail.into(),
    }
}

fn remaining(deadline: Instant) -> Option<Duration> {
    deadline
        .checked_duration_since(Instant::now())
        .filter(|d| !d.is_zero())
}

fn resolve(addr: &str) -> Result<Vec<SocketAddr>> {
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| Error::Config(format!("cannot resolve {addr}: {e}")))?
        .collect();
    if addrs.is_empty() {
        return Err(Error::Config(format!("{addr} resolves to nothing")));
    }
    Ok(addrs)
}

/// Connects with retries until `deadline`.
fn connect_until(addr: &str, deadline: Instant) -> Result<Option<TcpStream>> {
    let addrs = resolve(addr)?;
    loop {
        for a in &addrs {
            let Some(left) = remaining(deadline) else {
                return Ok(None);
            };
            if let Ok(s) = TcpStream::connect_timeout(a, left.min(Duration::from_secs(1))) {
                return Ok(Some(s));
            }
        }
        if remaining(deadline).is_none() {
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Accepts one connection and reads its hello, or `None` at the deadline.
fn accept_hello(
    listener: &TcpListener,
    deadline: Instant,
) -> Result<Option<(TcpStream, SocketAddr, Hello)>> {
    loop {
        match listener.accept() {
            Ok((stream, addr)) => {
                stream.set_nonblocking(false)?;
                let left = remaining(deadline).unwrap_or(POLL);
                stream.set_read_timeout(Some(left))?;
                let mut s = &stream;
                match Hello::read(&mut s) {
                    Ok(hello) => return Ok(Some((stream, addr, hello))),
                    // A stray connection that never spoke the protocol.
                    Err(_) => continue,
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if remaining(deadline).is_none() {
                    return Ok(None);
                }
                thread::sleep(POLL);
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn send_control(stream: &TcpStream, kind: FrameKind, payload: Vec<u8>) {
    let mut s = stream;
    let _ = wire::write_frame(&mut s, &Frame::control(kind, payload));
}

pub(crate) fn establish(cfg: &TcpConfig) -> Result<TcpTransport> {
    cfg.validate()?;
    let deadline = Instant::now() + cfg.timeout;
    if cfg.size == 1 {
        return TcpTransport::new(0, vec![None]);
    }
    let streams = if cfg.rank == 0 {
        establish_root(cfg, deadline)?
    } else {
        establish_peer(cfg, deadline)?
    };
    TcpTransport::new(cfg.rank, streams)
}

fn establish_root(cfg: &TcpConfig, deadline: Instant) -> Result<Vec<Option<TcpStream>>> {
    let n = cfg.size;
    let listener = TcpListener::bind(cfg.rendezvous.as_str())
        .map_err(|e| Error::Config(format!("cannot listen on {}: {e}", cfg.rendezvous)))?;
    listener.set_nonblocking(true)?;

    let mut peers: Vec<Option<(TcpStream, String, u16)>> = (0..n).map(|_| None).collect();
    let fail_all = |peers: &[Option<(TcpStream, String, u16)>], missing: &[usize], detail: &str| {
        for (s, _, _) in peers.iter().flatten() {
            send_control(
                s,
                FrameKind::StartupFailed,
                wire::encode_startup_failure(missing, detail),
            );
        }
    };
    let missing_of = |peers: &[Option<(TcpStream, String, u16)>]| -> Vec<usize> {
        (1..n).filter(|&r| peers[r].is_none()).collect()
    };

    while !missing_of(&peers).is_empty() {
        let Some((stream, addr, hello)) = accept_hello(&listener, deadline)? else {
            let missing = missing_of(&peers);
            let detail = format!(
                "ranks {missing:?} never reached rendezvous {}",
                cfg.rendezvous
            );
            fail_all(&peers, &missing, &detail);
            return Err(startup(cfg, missing, detail));
        };
        let (rank, size) = (hello.rank as usize, hello.size as usize);
        let problem = if size != n {
            Some(format!(
                "rank {rank} believes the world size is {size}, rank 0 has {n}"
            ))
        } else if rank == 0 || rank >= n {
            Some(format!(
                "a peer claimed invalid rank {rank} in a world of size {n}"
            ))
        } else if peers[rank].is_some() {
            Some(format!("rank {rank} connected twice"))
        } else {
            None
        };
        if let Some(detail) = problem {
            send_control(
                &stream,
                FrameKind::StartupFailed,
                wire::encode_startup_failure(&[], &detail),
            );
            fail_all(&peers, &[], &detail);
            return Err(Error::Protocol { rank: 0, detail });
        }
        peers[rank] = Some((stream, addr.ip().to_string(), hello.listen_port));
    }

    let table: Vec<(String, u16)> = peers
        .iter()
        .map(|p| {
            p.as_ref()
                .map(|(_, h, port)| (h.clone(), *port))
                .unwrap_or_default()
        })
        .collect();
    let wiring = wire::encode_wiring(&table);
    let mut streams: Vec<Option<TcpStream>> = vec![None];
    for (rank, p) in peers.into_iter().enumerate().skip(1) {
        let (stream, _, _) = p.expect("all ranks present");
        let mut s = &stream;
        wire::write_frame(&mut s, &Frame::control(FrameKind::Wiring, wiring.clone())).map_err(
            |e| Error::Transport {
                peer: rank,
                detail: e.to_string(),
            },
        )?;
        streams.push(Some(stream));
    }
    Ok(streams)
}

fn establish_peer(cfg: &TcpConfig, deadline: Instant) -> Result<Vec<Option<TcpStream>>> {
    let (n, me) = (cfg.size, cfg.rank);
    let listener = TcpListener::bind((cfg.bind_host.as_str(), 0))?;
    listener.set_nonblocking(true)?;
    let hello = Hello {
        rank: me as u32,
        size: n as u32,
        listen_port: listener.local_addr()?.port(),
    };

    let Some(root) = connect_until(&cfg.rendezvous, deadline)? else {
        return Err(startup(
            cfg,
            vec![0],
            format!("rank 0 never opened rendezvous {}", cfg.rendezvous),
        ));
    };
    (&root).write_all(&hello.to_bytes())?;

    // Rank 0 reports missing ranks at the deadline; wait a little past it so
    // that verdict arrives rather than a local timeout.
    let left = remaining(deadline).unwrap_or(POLL) + VERDICT_GRACE;
    root.set_read_timeout(Some(left))?;
    let frame = match wire::read_frame(&mut &root) {
        Ok(Some(f)) => f,
        Ok(None) => {
            return Err(startup(
                cfg,
                vec![],
                "rank 0 closed the rendezvous connection",
            ))
        }
        Err(Error::Io(e))
            if matches!(
                e.kind(),
                std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
            ) =>
        {
            return Err(startup(
                cfg,
                vec![0],
                "rank 0 did not send the address table in time",
            ))
        }
        Err(e) => return Err(e),
    };
    let table = match frame.kind {
        FrameKind::Wiring => wire::decode_wiring(&frame.payload)?,
        FrameKind::StartupFailed => {
            let (missing, detail) = wire::decode_startup_failure(&frame.payload);
            return Err(startup(cfg, missing, format!("rank 0: {detail}")));
        }
        other => {
            return Err(Error::Protocol {
                rank: me,
                detail: format!("expected the address table, got {other:?}"),
            })
        }
    };
    if table.len() != n {
        return Err(Error::Protocol {
            rank: me,
            detail: format!("address table has {} entries for {n} ranks", table.len()),
        });
    }

    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
    streams[0] = Some(root);
    for (lower, (host, port)) in table.iter().enumerate().take(me).skip(1) {
        let addr = if host.contains(':') {
            format!("[{host}]:{port}")
        } else {
            format!("{host}:{port}")
        };
        let Some(s) = connect_until(&addr, deadline)? else {
            return Err(startup(
                cfg,
                vec![lower],
                format!("cannot reach rank {lower} at {addr}"),
            ));
        };
        (&s).write_all(&hello.to_bytes())?;
        streams[lower] = Some(s);
    }
    while let Some(missing) = Some(
        (me + 1..n)
            .filter(|&r| streams[r].is_none())
            .collect::<Vec<_>>(),
    )
    .filter(|m| !m.is_empty())
    {
        let Some((s, _, h)) = accept_hello(&listener, deadline)? else {
            return Err(startup(
                cfg,
                missing,
                "higher ranks did not connect in time",
            ));
        };
        let r = h.rank as usize;
        if r <= me || r >= n || h.size as usize != n || streams[r].is_some() {
            return Err(Error::Protocol {
                rank: me,
                detail: format!("unexpected mesh connection from rank {r} (size {})", h.size),
            });
        }
        streams[r] = Some(s);
    }
    Ok(streams)
}
