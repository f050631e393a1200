//! Minimal collectives built on the active-message transport: reduce,
//! broadcast (their composition stands in for allreduce), alltoall,
//! alltoallv, and a barrier.
//!
//! Topology is flat: the root gathers from all ranks, then sends to all.
//! Every collective runs on device 0 with a dedicated handler id per kind;
//! messages carry a generation counter so back-to-back collectives cannot
//! mix, plus chunk framing so vectors larger than one packet are split and
//! reassembled. All arithmetic is on integers, so results are deterministic
//! regardless of arrival order (contributions are folded in rank order).
//!
//! Each rank drives its collectives from one designated thread; other
//! threads of the rank may call `progress` concurrently, in which case
//! inbound collective fragments are parked in the shared inbox until the
//! designated thread collects them.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::amnet::{CompletionCounter, Delivery, Endpoint, HandlerId, TransportError};

/// Handler-id block reserved for collective traffic.
pub const COLLECTIVE_HANDLER_BASE: HandlerId = 0xC011_0000;

const KIND_REDUCE: u32 = 0;
const KIND_BCAST: u32 = 1;
const KIND_ALLTOALL: u32 = 2;
const KIND_ALLTOALLV: u32 = 3;
const KIND_BARRIER: u32 = 4;
const NUM_KINDS: u32 = 5;

/// Collectives keep their traffic off the sort's devices.
const COLLECTIVE_DEVICE: usize = 0;

/// Generous bug detector: a blocking collective that waits this long is a
/// lost-message or deadlock bug, not a slow machine.
const WAIT_TIMEOUT: Duration = Duration::from_secs(120);

/// Subheader carried inside each collective payload:
/// generation (8), chunk_index (4), total_chunks (4).
const SUBHEADER_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("contribution from rank {src} has length {got}, expected {expected}")]
    LengthMismatch {
        src: usize,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{what} timed out after {waited_ms} ms (lost message or deadlock)")]
    Timeout { what: &'static str, waited_ms: u64 },
    #[error("packet capacity {0} too small for collective framing")]
    PacketTooSmall(usize),
}

#[derive(Default)]
struct Assembly {
    total_chunks: u32,
    received: u32,
    parts: Vec<Option<Vec<u8>>>,
}

type MessageKey = (u32, u64, usize); // (kind, generation, src)

#[derive(Default)]
struct Inbox {
    assembling: Mutex<HashMap<MessageKey, Assembly>>,
    ready: Mutex<HashMap<MessageKey, Vec<u8>>>,
}

impl Inbox {
    fn deposit(&self, kind: u32, delivery: &Delivery<'_>) {
        let payload = delivery.payload;
        let generation = u64::from_le_bytes(payload[0..8].try_into().unwrap());
        let chunk_index = u32::from_le_bytes(payload[8..12].try_into().unwrap());
        let total_chunks = u32::from_le_bytes(payload[12..16].try_into().unwrap());
        let data = payload[SUBHEADER_BYTES..].to_vec();
        let key = (kind, generation, delivery.src_rank);

        let mut assembling = self.assembling.lock().unwrap();
        let entry = assembling.entry(key).or_default();
        if entry.parts.is_empty() {
            entry.total_chunks = total_chunks;
            entry.parts = (0..total_chunks).map(|_| None).collect();
        }
        debug_assert_eq!(entry.total_chunks, total_chunks);
        debug_assert!(entry.parts[chunk_index as usize].is_none());
        entry.parts[chunk_index as usize] = Some(data);
        entry.received += 1;
        if entry.received == entry.total_chunks {
            let entry = assembling.remove(&key).unwrap();
            let mut whole = Vec::new();
            for part in entry.parts {
                whole.extend(part.unwrap());
            }
            self.ready.lock().unwrap().insert(key, whole);
        }
    }

    fn take(&self, key: MessageKey) -> Option<Vec<u8>> {
        self.ready.lock().unwrap().remove(&key)
    }
}

/// Per-rank collective state: one per rank, driven by one designated thread.
pub struct CollectiveContext {
    ep: Arc<Endpoint>,
    inbox: Arc<Inbox>,
    generation: AtomicU64,
    counter: CompletionCounter,
    chunk_bytes: usize,
}

impl CollectiveContext {
    /// Registers the collective handlers on `ep`. Call on every rank before
    /// any rank starts a collective.
    pub fn new(ep: Arc<Endpoint>) -> Result<Self, CollectiveError> {
        let capacity = ep.config().packet_capacity;
        let chunk_bytes = (capacity.saturating_sub(SUBHEADER_BYTES)) / 8 * 8;
        if chunk_bytes == 0 {
            return Err(CollectiveError::PacketTooSmall(capacity));
        }
        let inbox = Arc::new(Inbox::default());
        for kind in 0..NUM_KINDS {
            let sink = Arc::clone(&inbox);
            ep.register_handler(COLLECTIVE_HANDLER_BASE + kind, move |delivery| {
                sink.deposit(kind, delivery);
            })?;
        }
        Ok(CollectiveContext {
            ep,
            inbox,
            generation: AtomicU64::new(0),
            counter: CompletionCounter::new(),
            chunk_bytes,
        })
    }

    pub fn endpoint(&self) -> &Arc<Endpoint> {
        &self.ep
    }

    pub fn rank(&self) -> usize {
        self.ep.rank()
    }

    pub fn num_ranks(&self) -> usize {
        self.ep.num_ranks()
    }

    fn next_generation(&self) -> u64 {
        self.generation.fetch_add(1, Ordering::AcqRel)
    }

    fn send_chunked(
        &self,
        dest: usize,
        kind: u32,
        generation: u64,
        data: &[u8],
    ) -> Result<(), CollectiveError> {
        let total_chunks = data.len().div_ceil(self.chunk_bytes).max(1) as u32;
        let mut frame = Vec::with_capacity(SUBHEADER_BYTES + self.chunk_bytes.min(data.len()));
        let chunks: Box<dyn Iterator<Item = (usize, &[u8])>> = if data.is_empty() {
            // Control messages (barrier) still need one frame on the wire.
            Box::new(std::iter::once((0usize, &[] as &[u8])))
        } else {
            Box::new(data.chunks(self.chunk_bytes).enumerate())
        };
        for (index, chunk) in chunks {
            frame.clear();
            frame.extend_from_slice(&generation.to_le_bytes());
            frame.extend_from_slice(&(index as u32).to_le_bytes());
            frame.extend_from_slice(&total_chunks.to_le_bytes());
            frame.extend_from_slice(chunk);
            self.ep.send_am_bytes_on_device(
                dest,
                COLLECTIVE_DEVICE,
                COLLECTIVE_HANDLER_BASE + kind,
                &frame,
                &self.counter,
            )?;
        }
        Ok(())
    }

    fn wait(
        &self,
        kind: u32,
        generation: u64,
        src: usize,
        what: &'static str,
    ) -> Result<Vec<u8>, CollectiveError> {
        let start = Instant::now();
        loop {
            if let Some(bytes) = self.inbox.take((kind, generation, src)) {
                return Ok(bytes);
            }
            self.ep.progress(COLLECTIVE_DEVICE)?;
            if start.elapsed() > WAIT_TIMEOUT {
                return Err(CollectiveError::Timeout {
                    what,
                    waited_ms: start.elapsed().as_millis() as u64,
                });
            }
            std::thread::yield_now();
        }
    }

    /// Elementwise sum of equal-length vectors at `root`. Returns `Some` at
    /// the root, `None` elsewhere.
    pub fn reduce_sum(
        &self,
        root: usize,
        contribution: &[u64],
    ) -> Result<Option<Vec<u64>>, CollectiveError> {
        let generation = self.next_generation();
        if self.rank() != root {
            self.send_chunked(root, KIND_REDUCE, generation, &to_bytes(contribution))?;
            return Ok(None);
        }
        let mut sum = contribution.to_vec();
        // Fold in rank order, not arrival order: collect everything first.
        let mut received: Vec<(usize, Vec<u64>)> = Vec::with_capacity(self.num_ranks() - 1);
        for src in (0..self.num_ranks()).filter(|&s| s != root) {
            let bytes = self.wait(KIND_REDUCE, generation, src, "reduce_sum")?;
            received.push((src, from_bytes(&bytes)));
        }
        for (src, vec) in received {
            if vec.len() != sum.len() {
                return Err(CollectiveError::LengthMismatch {
                    src,
                    expected: sum.len(),
                    got: vec.len(),
                });
            }
            for (acc, v) in sum.iter_mut().zip(vec) {
                *acc += v;
            }
        }
        Ok(Some(sum))
    }

    /// Every rank receives `root`'s vector verbatim. The root passes
    /// `Some(data)`, all others `None`.
    pub fn broadcast(
        &self,
        root: usize,
        data: Option<&[u64]>,
    ) -> Result<Vec<u64>, CollectiveError> {
        let generation = self.next_generation();
        if self.rank() == root {
            let data = data.ok_or_else(|| {
                CollectiveError::ShapeMismatch("broadcast root must supply data".into())
            })?;
            let bytes = to_bytes(data);
            for dest in (0..self.num_ranks()).filter(|&d| d != root) {
                self.send_chunked(dest, KIND_BCAST, generation, &bytes)?;
            }
            Ok(data.to_vec())
        } else {
            let bytes = self.wait(KIND_BCAST, generation, root, "broadcast")?;
            Ok(from_bytes(&bytes))
        }
    }

    /// Reduce to rank 0 followed by a broadcast from rank 0; the allreduce
    /// stand-in both sort engines use.
    pub fn allreduce_sum(&self, contribution: &[u64]) -> Result<Vec<u64>, CollectiveError> {
        let reduced = self.reduce_sum(0, contribution)?;
        self.broadcast(0, reduced.as_deref())
    }

    /// Personalized single-value exchange: on return, `result[p]` equals
    /// `send_counts[self]` as supplied on rank `p`.
    pub fn alltoall(&self, send_counts: &[u64]) -> Result<Vec<u64>, CollectiveError> {
        let num_ranks = self.num_ranks();
        if send_counts.len() != num_ranks {
            return Err(CollectiveError::ShapeMismatch(format!(
                "alltoall needs {} send counts, got {}",
                num_ranks,
                send_counts.len()
            )));
        }
        let generation = self.next_generation();
        for (dest, &count) in send_counts.iter().enumerate() {
            self.send_chunked(dest, KIND_ALLTOALL, generation, &count.to_le_bytes())?;
        }
        let mut recv = vec![0u64; num_ranks];
        for (src, slot) in recv.iter_mut().enumerate() {
            let bytes = self.wait(KIND_ALLTOALL, generation, src, "alltoall")?;
            *slot = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        }
        Ok(recv)
    }

    /// Personalized key exchange. Rank `p`'s segment for rank `q` is
    /// `send_buf[send_displs[q] .. send_displs[q] + send_counts[q]]`; the
    /// result concatenates inbound segments in ascending source-rank order.
    pub fn alltoallv(
        &self,
        send_buf: &[u64],
        send_counts: &[u64],
        send_displs: &[u64],
        recv_counts: &[u64],
    ) -> Result<Vec<u64>, CollectiveError> {
        let num_ranks = self.num_ranks();
        if send_counts.len() != num_ranks
            || send_displs.len() != num_ranks
            || recv_counts.len() != num_ranks
        {
            return Err(CollectiveError::ShapeMismatch(format!(
                "alltoallv shapes must all be {num_ranks}"
            )));
        }
        for dest in 0..num_ranks {
            let lo = send_displs[dest] as usize;
            let hi = lo + send_counts[dest] as usize;
            if hi > send_buf.len() {
                return Err(CollectiveError::ShapeMismatch(format!(
                    "segment [{lo}, {hi}) for rank {dest} exceeds send_buf length {}",
                    send_buf.len()
                )));
            }
        }

        let generation = self.next_generation();
        for dest in 0..num_ranks {
            let lo = send_displs[dest] as usize;
            let segment = &send_buf[lo..lo + send_counts[dest] as usize];
            if !segment.is_empty() {
                self.send_chunked(dest, KIND_ALLTOALLV, generation, &to_bytes(segment))?;
            }
        }

        let total: u64 = recv_counts.iter().sum();
        let mut recv = Vec::with_capacity(total as usize);
        for (src, &count) in recv_counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let bytes = self.wait(KIND_ALLTOALLV, generation, src, "alltoallv")?;
            let segment = from_bytes(&bytes);
            if segment.len() as u64 != count {
                return Err(CollectiveError::LengthMismatch {
                    src,
                    expected: count as usize,
                    got: segment.len(),
                });
            }
            recv.extend(segment);
        }
        Ok(recv)
    }

    /// No rank exits before all ranks have entered.
    pub fn barrier(&self) -> Result<(), CollectiveError> {
        let generation = self.next_generation();
        let root = 0;
        if self.rank() == root {
            for src in 1..self.num_ranks() {
                self.wait(KIND_BARRIER, generation, src, "barrier enter")?;
            }
            for dest in 1..self.num_ranks() {
                self.send_chunked(dest, KIND_BARRIER, generation, &[])?;
            }
        } else {
            self.send_chunked(root, KIND_BARRIER, generation, &[])?;
            self.wait(KIND_BARRIER, generation, root, "barrier release")?;
        }
        Ok(())
    }
}

fn to_bytes(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
