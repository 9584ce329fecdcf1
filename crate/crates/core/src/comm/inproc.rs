use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::wire::{Frame, FrameKind};
use super::Transport;
use crate::error::{Error, Result};

/// Channel mesh between threads of one process. Each rank owns one inbox;
/// every rank holds a sender into every inbox.
pub(crate) struct InProcTransport {
    rank: usize,
    peers: Vec<Sender<(usize, Frame)>>,
    inbox: Receiver<(usize, Frame)>,
}

pub(crate) fn mesh(size: usize) -> Vec<InProcTransport> {
    let (senders, inboxes): (Vec<_>, Vec<_>) = (0..size).map(|_| mpsc::channel()).unzip();
    inboxes
        .into_iter()
        .enumerate()
        .map(|(rank, inbox)| InProcTransport {
            rank,
            peers: senders.clone(),
            inbox,
        })
        .collect()
}

impl Transport for InProcTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        self.peers[to]
            .send((self.rank, frame))
            .map_err(|_| Error::Transport {
                peer: to,
                detail: "peer has shut down".into(),
            })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<(usize, Frame)>> {
        // The inbox can never disconnect: this rank holds a sender to itself.
        match timeout {
            None => Ok(self.inbox.recv().ok()),
            Some(t) => match self.inbox.recv_timeout(t) {
                Ok(m) => Ok(Some(m)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Ok(None),
            },
        }
    }
}

impl Drop for InProcTransport {
    fn drop(&mut self) {
        for (peer, tx) in self.peers.iter().enumerate() {
            if peer != self.rank {
                let _ = tx.send((
                    self.rank,
                    Frame::control(FrameKind::Hangup, b"peer communicator dropped".to_vec()),
                ));
            }
        }
    }
}
