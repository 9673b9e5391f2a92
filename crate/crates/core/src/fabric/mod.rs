//! Deterministic in-process multi-rank fabric.
//!
//! Logical ranks run as OS threads, but a baton-passing scheduler guarantees
//! exactly one rank executes at any moment: a rank runs until it finishes or
//! blocks on [`RankCtx::recv`], at which point the scheduler resumes the next
//! runnable rank in round-robin order. Sends are buffered and never block.
//! Message delivery per `(sender, receiver, tag)` channel is FIFO, nothing is
//! lost, and the whole execution — including the message transcript — is a
//! deterministic function of the rank program.
//!
//! If every live rank is blocked on `recv`, the run aborts and reports the
//! wait-for graph, including the cycle when one exists.

pub mod collective;
pub mod topology;

use crate::scalar::Scalar;
use std::collections::{HashMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Message tag. Subsystems carve up the tag space; collectives use a small
/// contiguous block starting at the tag passed in.
pub type Tag = u32;

/// Payload types the fabric can carry; `wire_bytes` feeds transcript stats.
pub trait Wire: Send + 'static {
    fn wire_bytes(&self) -> usize;
}

impl<T: Scalar> Wire for Vec<T> {
    fn wire_bytes(&self) -> usize {
        self.len() * T::BYTES
    }
}

/// One buffered send, in global send order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub seq: u64,
    pub from: usize,
    pub to: usize,
    pub tag: Tag,
    pub bytes: usize,
}

/// Global send log of a fabric run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<MessageRecord>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    pub fn with_tag(&self, tag: Tag) -> impl Iterator<Item = &MessageRecord> {
        self.messages.iter().filter(move |m| m.tag == tag)
    }

    pub fn in_tag_range(&self, lo: Tag, hi: Tag) -> impl Iterator<Item = &MessageRecord> {
        self.messages
            .iter()
            .filter(move |m| m.tag >= lo && m.tag < hi)
    }
}

/// A rank blocked on `recv(from, tag)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedWait {
    pub rank: usize,
    pub from: usize,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("deadlock: all live ranks blocked on recv; waits {waits:?}, cycle {cycle:?}")]
    Deadlock {
        waits: Vec<BlockedWait>,
        /// Ranks forming a wait-for cycle, when one exists (empty means a
        /// rank is waiting on an already-finished peer).
        cycle: Vec<usize>,
    },
    #[error("fabric needs at least one rank")]
    NoRanks,
}

/// Completed run: per-rank results in rank order plus the send transcript.
#[derive(Debug)]
pub struct FabricRun<R> {
    pub results: Vec<R>,
    pub transcript: Transcript,
}

struct Shared<M> {
    mailboxes: HashMap<(usize, usize, Tag), VecDeque<M>>,
    transcript: Transcript,
    seq: u64,
}

enum Event {
    Blocked { from: usize, tag: Tag },
    Finished,
    Panicked,
}

enum Wake {
    Go,
    Abort,
}

/// Sentinel panic payload used to unwind blocked ranks during an abort.
struct AbortUnwind;

/// Per-rank handle used inside a rank program to talk to peers.
pub struct RankCtx<M> {
    rank: usize,
    n_ranks: usize,
    shared: Arc<Mutex<Shared<M>>>,
    wake_rx: Receiver<Wake>,
    event_tx: Sender<(usize, Event)>,
}

impl<M: Wire> RankCtx<M> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    /// Buffered, non-blocking send. Panics on an out-of-range destination —
    /// that is a bug in the rank program, not a runtime condition.
    pub fn send(&mut self, to: usize, tag: Tag, msg: M) {
        assert!(to < self.n_ranks, "send to nonexistent rank {to}");
        let mut shared = self.shared.lock().unwrap();
        let bytes = msg.wire_bytes();
        let seq = shared.seq;
        shared.seq += 1;
        shared.transcript.messages.push(MessageRecord {
            seq,
            from: self.rank,
            to,
            tag,
            bytes,
        });
        shared
            .mailboxes
            .entry((self.rank, to, tag))
            .or_default()
            .push_back(msg);
    }

    /// Blocking receive of the next message on the `(from, self, tag)`
    /// channel. Yields control to the scheduler while waiting.
    pub fn recv(&mut self, from: usize, tag: Tag) -> M {
        assert!(from < self.n_ranks, "recv from nonexistent rank {from}");
        loop {
            {
                let mut shared = self.shared.lock().unwrap();
                if let Some(queue) = shared.mailboxes.get_mut(&(from, self.rank, tag)) {
                    if let Some(msg) = queue.pop_front() {
                        return msg;
                    }
                }
            }
            self.event_tx
                .send((self.rank, Event::Blocked { from, tag }))
                .expect("scheduler gone");
            match self.wake_rx.recv().expect("scheduler gone") {
                Wake::Go => continue,
                Wake::Abort => panic::resume_unwind(Box::new(AbortUnwind)),
            }
        }
    }
}

impl<M: Wire + Default> RankCtx<M> {
    /// Barrier over all ranks: everyone checks in at rank 0, which then
    /// releases everyone. Consumes the given tag.
    pub fn barrier(&mut self, tag: Tag) {
        if self.rank == 0 {
            for r in 1..self.n_ranks {
                self.recv(r, tag);
            }
            for r in 1..self.n_ranks {
                self.send(r, tag, M::default());
            }
        } else {
            self.send(0, tag, M::default());
            self.recv(0, tag);
        }
    }
}

#[derive(Clone)]
enum RankState {
    Startable,
    Blocked { from: usize, tag: Tag },
    Done,
}

/// Run the same program on `n_ranks` logical ranks to completion.
///
/// The program distinguishes ranks through [`RankCtx::rank`]. Panics inside a
/// rank program propagate to the caller; a full deadlock returns
/// [`FabricError::Deadlock`].
pub fn run_fabric<M, R, F>(n_ranks: usize, program: F) -> Result<FabricRun<R>, FabricError>
where
    M: Wire,
    R: Send,
    F: Fn(&mut RankCtx<M>) -> R + Send + Sync,
{
    if n_ranks == 0 {
        return Err(FabricError::NoRanks);
    }
    let shared = Arc::new(Mutex::new(Shared::<M> {
        mailboxes: HashMap::new(),
        transcript: Transcript::default(),
        seq: 0,
    }));
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n_ranks).map(|_| None).collect());
    let (event_tx, event_rx) = channel::<(usize, Event)>();

    let mut wake_txs = Vec::with_capacity(n_ranks);
    let mut wake_rxs = Vec::with_capacity(n_ranks);
    for _ in 0..n_ranks {
        let (tx, rx) = channel::<Wake>();
        wake_txs.push(tx);
        wake_rxs.push(Some(rx));
    }

    let mut outcome: Result<(), FabricError> = Ok(());
    let mut panic_payload: Option<Box<dyn std::any::Any + Send>> = None;

    std::thread::scope(|scope| {
        for (rank, wake_rx_slot) in wake_rxs.iter_mut().enumerate() {
            let mut ctx = RankCtx {
                rank,
                n_ranks,
                shared: Arc::clone(&shared),
                wake_rx: wake_rx_slot.take().unwrap(),
                event_tx: event_tx.clone(),
            };
            let program = &program;
            let results = &results;
            scope.spawn(move || {
                // Every rank waits for its first turn before touching state.
                match ctx.wake_rx.recv() {
                    Ok(Wake::Go) => {}
                    _ => return,
                }
                let event_tx = ctx.event_tx.clone();
                let rank = ctx.rank;
                match panic::catch_unwind(AssertUnwindSafe(|| program(&mut ctx))) {
                    Ok(value) => {
                        results.lock().unwrap()[rank] = Some(value);
                        let _ = event_tx.send((rank, Event::Finished));
                    }
                    Err(payload) => {
                        if payload.downcast_ref::<AbortUnwind>().is_some() {
                            // Scheduler-initiated abort; exit quietly.
                            return;
                        }
                        PANICS.lock().unwrap().push(payload);
                        let _ = event_tx.send((rank, Event::Panicked));
                    }
                }
            });
        }

        // Scheduler: resume runnable ranks round-robin until all finish.
        let mut states = vec![RankState::Startable; n_ranks];
        let mut cursor = 0usize;
        loop {
            let runnable = {
                let shared = shared.lock().unwrap();
                (0..n_ranks)
                    .map(|off| (cursor + off) % n_ranks)
                    .find(|&r| match states[r] {
                        RankState::Startable => true,
                        RankState::Blocked { from, tag } => shared
                            .mailboxes
                            .get(&(from, r, tag))
                            .is_some_and(|q| !q.is_empty()),
                        RankState::Done => false,
                    })
            };
            let Some(next) = runnable else {
                if states.iter().all(|s| matches!(s, RankState::Done)) {
                    break;
                }
                // Everybody alive is stuck: report waits and any cycle.
                let waits: Vec<BlockedWait> = states
                    .iter()
                    .enumerate()
                    .filter_map(|(rank, s)| match *s {
                        RankState::Blocked { from, tag } => Some(BlockedWait { rank, from, tag }),
                        _ => None,
                    })
                    .collect();
                let cycle = find_wait_cycle(&states);
                abort_live_ranks(&states, &wake_txs);
                outcome = Err(FabricError::Deadlock { waits, cycle });
                break;
            };

            wake_txs[next].send(Wake::Go).expect("rank thread gone");
            let (who, event) = event_rx.recv().expect("rank threads gone");
            debug_assert_eq!(who, next, "only the resumed rank may report");
            match event {
                Event::Blocked { from, tag } => states[next] = RankState::Blocked { from, tag },
                Event::Finished => states[next] = RankState::Done,
                Event::Panicked => {
                    states[next] = RankState::Done;
                    abort_live_ranks(&states, &wake_txs);
                    panic_payload = Some(PANICS.lock().unwrap().pop().expect("payload stored"));
                    break;
                }
            }
            cursor = (next + 1) % n_ranks;
        }
    });

    if let Some(payload) = panic_payload {
        panic::resume_unwind(payload);
    }
    outcome?;

    let results = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("rank finished without result"))
        .collect();
    let shared = Arc::try_unwrap(shared)
        .unwrap_or_else(|_| panic!("rank context leaked"))
        .into_inner()
        .unwrap();
    Ok(FabricRun {
        results,
        transcript: shared.transcript,
    })
}

/// Unblock every rank that has not finished so the thread scope can join.
fn abort_live_ranks(states: &[RankState], wake_txs: &[std::sync::mpsc::Sender<Wake>]) {
    for (rank, state) in states.iter().enumerate() {
        if !matches!(state, RankState::Done) {
            let _ = wake_txs[rank].send(Wake::Abort);
        }
    }
}

/// Panic payloads are not `Sync`, so they hop threads through a static.
static PANICS: Mutex<Vec<Box<dyn std::any::Any + Send>>> = Mutex::new(Vec::new());

fn find_wait_cycle(states: &[RankState]) -> Vec<usize> {
    // Each blocked rank has exactly one outgoing wait-for edge; walk from
    // every blocked rank until a repeat or a non-blocked rank.
    for start in 0..states.len() {
        if !matches!(states[start], RankState::Blocked { .. }) {
            continue;
        }
        let mut path = Vec::new();
        let mut seen = vec![false; states.len()];
        let mut cur = start;
        loop {
            if seen[cur] {
                let pos = path.iter().position(|&r| r == cur).unwrap();
                return path[pos..].to_vec();
            }
            seen[cur] = true;
            path.push(cur);
            match states[cur] {
                RankState::Blocked { from, .. } => cur = from,
                _ => break,
            }
        }
    }
    Vec::new()
}
