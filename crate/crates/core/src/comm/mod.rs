//! Worker identity and blocking collectives.
//!
//! A [`Communicator`] is one rank's handle on a group of `size` ranks. Every
//! collective must be entered by all ranks in the same order with compatible
//! arguments. Each frame carries the collective kind, a per-communicator call
//! index, a per-pair sequence number and the element count, so a rank that
//! disagrees is detected on the first frame it sends rather than producing a
//! wrong answer. The detecting rank sends `Abort` to everyone and the
//! communicator is unusable from then on.
//!
//! Allreduce is a ring: reduce-scatter then all-gather over `size` segments.
//! Segment `s` is accumulated starting at rank `s` and moving forward, so the
//! reduction order, and therefore every bit of the result, is fixed.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Duration;

use crate::element::Element;
use crate::error::{Error, Result};

mod inproc;
pub mod tcp;
pub mod wire;

pub use tcp::TcpConfig;
use wire::{Frame, FrameKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    InProcess,
    Tcp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::InProcess => "inproc",
            Backend::Tcp => "tcp",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" | "in-process" => Ok(Backend::InProcess),
            "tcp" => Ok(Backend::Tcp),
            _ => Err(Error::Config(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum = 1,
    Average = 2,
    Max = 3,
    Min = 4,
}

/// Point-to-point message passing underneath a communicator.
pub trait Transport: Send {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()>;

    /// Next frame from any peer. `None` if `timeout` expires.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<(usize, Frame)>>;
}

/// Splits `len` elements into `parts` contiguous segments of `len / parts`
/// elements; the last segment also takes the remainder.
pub fn segment_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(parts > 0);
    let base = len / parts;
    (0..parts)
        .map(|s| {
            let end = if s + 1 == parts { len } else { (s + 1) * base };
            s * base..end
        })
        .collect()
}

struct Expect {
    kind: FrameKind,
    dtype: u8,
    flags: u8,
    count: Option<u64>,
}

pub struct Communicator {
    rank: usize,
    size: usize,
    backend: Backend,
    transport: Box<dyn Transport>,
    send_seq: Vec<u64>,
    recv_seq: Vec<u64>,
    stash: Vec<VecDeque<Frame>>,
    hung_up: Vec<Option<String>>,
    call: u64,
    timeout: Option<Duration>,
    poisoned: Option<String>,
}

impl fmt::Debug for Communicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("backend", &self.backend)
            .finish_non_exhaustive()
    }
}

impl Communicator {
    fn with_transport(
        rank: usize,
        size: usize,
        backend: Backend,
        transport: Box<dyn Transport>,
    ) -> Self {
        Communicator {
            rank,
            size,
            backend,
            transport,
            send_seq: vec![0; size],
            recv_seq: vec![0; size],
            stash: (0..size).map(|_| VecDeque::new()).collect(),
            hung_up: vec![None; size],
            call: 0,
            timeout: None,
            poisoned: None,
        }
    }

    /// `size` connected communicators for threads of this process, index = rank.
    pub fn in_process_group(size: usize) -> Result<Vec<Communicator>> {
        if size == 0 {
            return Err(Error::Config("a group needs at least one rank".into()));
        }
        Ok(inproc::mesh(size)
            .into_iter()
            .enumerate()
            .map(|(rank, t)| {
                Communicator::with_transport(rank, size, Backend::InProcess, Box::new(t))
            })
            .collect())
    }

    /// Joins a TCP group. Returns once every rank is connected and a barrier
    /// has passed.
    pub fn tcp(config: &TcpConfig) -> Result<Communicator> {
        let transport = tcp::establish(config)?;
        let mut comm = Communicator::with_transport(
            config.rank,
            config.size,
            Backend::Tcp,
            Box::new(transport),
        );
        comm.barrier()?;
        Ok(comm)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Upper bound on waiting for any single message. `None` (the default)
    /// waits forever; peer failures still surface through abort and hangup.
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    /// Sum, mean, max or min of `buf` across ranks, written back into `buf`
    /// on every rank.
    pub fn allreduce<T: Element>(&mut self, buf: &mut [T], op: ReduceOp) -> Result<()> {
        self.collective(|c| c.ring_allreduce(buf, op))
    }

    pub fn allreduce_average<T: Element>(&mut self, buf: &mut [T]) -> Result<()> {
        self.allreduce(buf, ReduceOp::Average)
    }

    /// Rank 0 passes one chunk per rank; rank `i` gets chunk `i`. `chunks` is
    /// ignored on other ranks.
    pub fn scatter(&mut self, chunks: Option<Vec<Vec<u8>>>) -> Result<Vec<u8>> {
        self.collective(|c| c.scatter_inner(chunks))
    }

    /// Root's bytes on every rank. `data` is only read on `root`.
    pub fn broadcast_bytes(&mut self, data: Option<Vec<u8>>, root: usize) -> Result<Vec<u8>> {
        self.collective(|c| c.broadcast_inner(data, root))
    }

    /// Overwrites `buf` with root's contents. Lengths must agree.
    pub fn broadcast<T: Element>(&mut self, buf: &mut [T], root: usize) -> Result<()> {
        self.collective(|c| {
            let payload = (c.rank == root).then(|| {
                let mut b = Vec::with_capacity(buf.len() * T::DTYPE.size_of());
                T::extend_le_bytes(buf, &mut b);
                b
            });
            let expect = Expect {
                kind: FrameKind::Broadcast,
                dtype: T::DTYPE as u8,
                flags: 0,
                count: Some(buf.len() as u64),
            };
            let bytes = c.broadcast_frames(payload, root, expect)?;
            if c.rank != root {
                T::copy_from_le_bytes(&bytes, buf);
            }
            Ok(())
        })
    }

    /// Returns only after every rank has entered.
    pub fn barrier(&mut self) -> Result<()> {
        self.collective(|c| {
            let expect = || Expect {
                kind: FrameKind::Barrier,
                dtype: 0,
                flags: 0,
                count: Some(0),
            };
            if c.rank == 0 {
                for peer in 1..c.size {
                    c.recv_from(peer, expect())?;
                }
                for peer in 1..c.size {
                    c.send_to(peer, FrameKind::Barrier, 0, 0, 0, Vec::new())?;
                }
            } else {
                c.send_to(0, FrameKind::Barrier, 0, 0, 0, Vec::new())?;
                c.recv_from(0, expect())?;
            }
            Ok(())
        })
    }

    /// Tells every peer this rank is giving up and poisons the handle. Used
    /// when a rank fails locally while the others may be blocked waiting.
    pub fn abort(&mut self, reason: &str) {
        if self.poisoned.is_some() {
            return;
        }
        for peer in (0..self.size).filter(|&p| p != self.rank) {
            let _ = self.transport.send(
                peer,
                Frame::control(FrameKind::Abort, reason.as_bytes().to_vec()),
            );
        }
        self.poisoned = Some(reason.to_string());
    }

    fn collective<R>(&mut self, body: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        if let Some(why) = &self.poisoned {
            return Err(Error::Protocol {
                rank: self.rank,
                detail: format!("communicator unusable after an earlier failure: {why}"),
            });
        }
        let out = body(self);
        self.call += 1;
        if let Err(e) = &out {
            self.abort(&e.to_string());
        }
        out
    }

    fn send_to(
        &mut self,
        to: usize,
        kind: FrameKind,
        dtype: u8,
        flags: u8,
        count: u64,
        payload: Vec<u8>,
    ) -> Result<()> {
        let frame = Frame {
            kind,
            dtype,
            flags,
            seq: self.send_seq[to],
            call: self.call,
            count,
            payload,
        };
        self.send_seq[to] += 1;
        self.transport
            .send(to, frame)
            .map_err(|e| self.pending_abort().unwrap_or(e))
    }

    /// A peer that aborted and then exited makes our sends fail; its abort
    /// is the better explanation, and it is already in the inbox.
    fn pending_abort(&mut self) -> Option<Error> {
        while let Ok(Some((from, frame))) = self.transport.recv(Some(Duration::ZERO)) {
            match frame.kind {
                FrameKind::Abort => {
                    return Some(self.protocol(format!("rank {from} aborted: {}", frame.text())))
                }
                FrameKind::Hangup => self.hung_up[from] = Some(frame.text()),
                _ => self.stash[from].push_back(frame),
            }
        }
        None
    }

    fn protocol(&self, detail: String) -> Error {
        Error::Protocol {
            rank: self.rank,
            detail,
        }
    }

    /// Next data frame from `peer`, validated against `expect`. Frames from
    /// other peers are stashed for later.
    fn recv_from(&mut self, peer: usize, expect: Expect) -> Result<Frame> {
        let frame = loop {
            if let Some(f) = self.stash[peer].pop_front() {
                break f;
            }
            if let Some(why) = &self.hung_up[peer] {
                return Err(Error::Transport {
                    peer,
                    detail: format!("connection lost: {why}"),
                });
            }
            let Some((from, frame)) = self.transport.recv(self.timeout)? else {
                return Err(Error::Transport {
                    peer,
                    detail: match self.timeout {
                        Some(t) => format!("no message within {t:?}"),
                        None => "transport closed".into(),
                    },
                });
            };
            match frame.kind {
                FrameKind::Abort => {
                    return Err(self.protocol(format!("rank {from} aborted: {}", frame.text())));
                }
                // A peer that finished and left is only a problem if we
                // still need something from it.
                FrameKind::Hangup => self.hung_up[from] = Some(frame.text()),
                _ => self.stash[from].push_back(frame),
            }
        };

        if frame.kind != expect.kind {
            return Err(self.protocol(format!(
                "collective #{} is {:?} here but rank {peer} sent {:?}",
                self.call, expect.kind, frame.kind
            )));
        }
        if frame.call != self.call {
            return Err(self.protocol(format!(
                "rank {peer} is at collective #{}, this rank at #{}",
                frame.call, self.call
            )));
        }
        if frame.seq != self.recv_seq[peer] {
            return Err(self.protocol(format!(
                "sequence gap from rank {peer}: expected {}, got {}",
                self.recv_seq[peer], frame.seq
            )));
        }
        self.recv_seq[peer] += 1;
        if frame.dtype != expect.dtype {
            return Err(self.protocol(format!(
                "element type mismatch with rank {peer}: code {} here, {} there",
                expect.dtype, frame.dtype
            )));
        }
        if frame.flags != expect.flags {
            return Err(self.protocol(format!(
                "rank {peer} uses flags {:#x}, this rank {:#x}",
                frame.flags, expect.flags
            )));
        }
        if let Some(count) = expect.count {
            if frame.count != count {
                return Err(self.protocol(format!(
                    "buffer length mismatch: {count} elements here, {} on rank {peer}",
                    frame.count
                )));
            }
        }
        Ok(frame)
    }

    fn ring_allreduce<T: Element>(&mut self, buf: &mut [T], op: ReduceOp) -> Result<()> {
        let n = self.size;
        if n == 1 {
            return Ok(());
        }
        let (r, next, prev) = (self.rank, (self.rank + 1) % n, (self.rank + n - 1) % n);
        let segs = segment_ranges(buf.len(), n);
        let elem = T::DTYPE.size_of();
        let count = buf.len() as u64;
        let expect = || Expect {
            kind: FrameKind::Allreduce,
            dtype: T::DTYPE as u8,
            flags: op as u8,
            count: Some(count),
        };
        let mut scratch = vec![T::zero(); segs[n - 1].len()];

        let exchange = |c: &mut Self,
                        buf: &[T],
                        scratch: &mut [T],
                        send: usize,
                        recv: usize|
         -> Result<usize> {
            let mut payload = Vec::with_capacity(segs[send].len() * elem);
            T::extend_le_bytes(&buf[segs[send].clone()], &mut payload);
            c.send_to(
                next,
                FrameKind::Allreduce,
                T::DTYPE as u8,
                op as u8,
                count,
                payload,
            )?;
            let frame = c.recv_from(prev, expect())?;
            let want = segs[recv].len();
            if frame.payload.len() != want * elem {
                return Err(c.protocol(format!(
                    "segment {recv} from rank {prev} has {} bytes, expected {}",
                    frame.payload.len(),
                    want * elem
                )));
            }
            T::copy_from_le_bytes(&frame.payload, &mut scratch[..want]);
            Ok(want)
        };

        // Reduce-scatter: after n-1 steps rank r holds the full segment r+1.
        for t in 0..n - 1 {
            let send = (r + n - t) % n;
            let recv = (r + 2 * n - t - 1) % n;
            let len = exchange(self, buf, &mut scratch, send, recv)?;
            let own = &mut buf[segs[recv].clone()];
            for (acc, &theirs) in own.iter_mut().zip(&scratch[..len]) {
                *acc = match op {
                    ReduceOp::Sum | ReduceOp::Average => theirs + *acc,
                    ReduceOp::Max => theirs.max(*acc),
                    ReduceOp::Min => theirs.min(*acc),
                };
            }
        }
        if op == ReduceOp::Average {
            let inv = T::from_f64(1.0 / n as f64);
            buf[segs[(r + 1) % n].clone()]
                .iter_mut()
                .for_each(|v| *v = *v * inv);
        }

        // All-gather the finished segments around the ring.
        for t in 0..n - 1 {
            let send = (r + 1 + n - t) % n;
            let recv = (r + n - t) % n;
            let len = exchange(self, buf, &mut scratch, send, recv)?;
            buf[segs[recv].clone()].copy_from_slice(&scratch[..len]);
        }
        Ok(())
    }

    fn scatter_inner(&mut self, chunks: Option<Vec<Vec<u8>>>) -> Result<Vec<u8>> {
        if self.rank != 0 {
            let expect = Expect {
                kind: FrameKind::Scatter,
                dtype: 0,
                flags: 0,
                count: None,
            };
            let frame = self.recv_from(0, expect)?;
            if frame.payload.len() as u64 != frame.count {
                return Err(self.protocol("scatter chunk length disagrees with its header".into()));
            }
            return Ok(frame.payload);
        }
        let chunks =
            chunks.ok_or_else(|| Error::contract("scatter root must supply the chunks"))?;
        if chunks.len() != self.size {
            return Err(Error::contract(format!(
                "scatter root supplied {} chunks for {} ranks",
                chunks.len(),
                self.size
            )));
        }
        let mut chunks = chunks.into_iter();
        let own = chunks.next().unwrap();
        for (peer, chunk) in chunks.enumerate() {
            self.send_to(
                peer + 1,
                FrameKind::Scatter,
                0,
                0,
                chunk.len() as u64,
                chunk,
            )?;
        }
        Ok(own)
    }

    fn broadcast_inner(&mut self, data: Option<Vec<u8>>, root: usize) -> Result<Vec<u8>> {
        if self.rank == root && data.is_none() {
            return Err(Error::contract("broadcast root must supply the data"));
        }
        let expect = Expect {
            kind: FrameKind::Broadcast,
            dtype: 0,
            flags: 0,
            count: None,
        };
        self.broadcast_frames(data, root, expect)
    }

    /// Root sends `payload` to every other rank; `count` is taken from
    /// `expect` when given, otherwise the byte length.
    fn broadcast_frames(
        &mut self,
        payload: Option<Vec<u8>>,
        root: usize,
        expect: Expect,
    ) -> Result<Vec<u8>> {
        if root >= self.size {
            return Err(Error::contract(format!(
                "broadcast root {root} outside 0..{}",
                self.size
            )));
        }
        if self.rank == root {
            let payload = payload.expect("root payload");
            let count = expect.count.unwrap_or(payload.len() as u64);
            for peer in (0..self.size).filter(|&p| p != root) {
                self.send_to(
                    peer,
                    expect.kind,
                    expect.dtype,
                    expect.flags,
                    count,
                    payload.clone(),
                )?;
            }
            Ok(payload)
        } else {
            let elem = match expect.dtype {
                0 => 1,
                code => crate::element::DType::from_code(code).map_or(0, |d| d.size_of()),
            };
            let frame = self.recv_from(root, expect)?;
            if frame.payload.len() as u64 != frame.count * elem as u64 {
                return Err(self.protocol(format!(
                    "broadcast from rank {root} carries {} bytes for {} elements",
                    frame.payload.len(),
                    frame.count
                )));
            }
            Ok(frame.payload)
        }
    }
}

/// Runs `f` on `size` threads, one per rank of an in-process group, and
/// returns the results in rank order. A panic on any rank is re-raised.
pub fn run_in_process<R, F>(size: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(Communicator) -> R + Sync,
{
    let comms = Communicator::in_process_group(size)?;
    let f = &f;
    Ok(std::thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                std::thread::Builder::new()
                    .name(format!("mdp-rank-{}", c.rank()))
                    .spawn_scoped(s, move || f(c))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    }))
}

/// Like [`run_in_process`], but the ranks talk over loopback TCP sockets.
pub fn run_tcp_loopback<R, F>(size: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(Communicator) -> R + Sync,
{
    let port = std::net::TcpListener::bind("127.0.0.1:0")?
        .local_addr()?
        .port();
    let rendezvous = format!("127.0.0.1:{port}");
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..size)
            .map(|rank| {
                let mut cfg = TcpConfig::new(rank, size, rendezvous.clone());
                cfg.bind_host = "127.0.0.1".into();
                s.spawn(move || Communicator::tcp(&cfg).map(f))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Joins the TCP group described by `config`.
pub fn create_communicator(config: &TcpConfig) -> Result<Communicator> {
    Communicator::tcp(config)
}
