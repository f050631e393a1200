//! In-process active-message transport.
//!
//! Ranks are groups of threads inside one OS process; the per-(rank, device)
//! queues owned by a [`Fabric`] are the only channel between them. The
//! transport reproduces the contracts the sort engines rely on:
//!
//! * pooled fixed-capacity packets, assembled in place on the zero-copy path;
//! * eager-only delivery: every message fits in one packet, senders split
//!   larger transfers;
//! * handler-driven receives: messages are consumed by explicit [`progress`]
//!   calls (or the loopback fast path) which invoke the registered handler;
//! * multiple devices per rank, progressable independently by distinct
//!   threads;
//! * completion counters for local send completion.
//!
//! Sends choose a destination device from the sending thread's slot (set via
//! [`set_thread_slot`]), so distinct sender threads spread load over the
//! receiver's devices. With `loopback_enabled`, self-destined sends bypass
//! the queues and run the handler synchronously in the caller. With
//! `zero_copy_enabled` off, `acquire_packet` is unavailable: sends copy from
//! a caller buffer into an internal packet, and delivery copies the payload
//! to a scratch buffer before the handler runs, emulating the two copies the
//! optimization removes.
//!
//! [`progress`]: Endpoint::progress

mod packet;

pub use packet::{Packet, PacketPool};

use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use packet::FrameHeader;

pub type HandlerId = u32;

/// Bytes of framing before the payload in every packet buffer.
pub const HEADER_BYTES: usize = 20;

/// How long `acquire_packet` keeps retrying (draining its own devices to
/// recycle packets) before reporting exhaustion.
const ACQUIRE_RETRY_WINDOW: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid transport config: {0}")]
    InvalidConfig(String),
    #[error("rank {0} already claimed on this fabric")]
    RankAlreadyClaimed(usize),
    #[error("rank {rank} out of range for {num_ranks} ranks")]
    InvalidRank { rank: usize, num_ranks: usize },
    #[error("destination {dest} out of range for {num_ranks} ranks")]
    InvalidDest { dest: usize, num_ranks: usize },
    #[error("device {device} out of range for {num_devices} devices")]
    InvalidDevice { device: usize, num_devices: usize },
    #[error("handler {0} is already registered")]
    HandlerAlreadyRegistered(HandlerId),
    #[error("handler {0} is not registered")]
    UnregisteredHandler(HandlerId),
    #[error("sends require a non-empty payload")]
    EmptyPacket,
    #[error("payload of {len} bytes exceeds packet capacity {capacity}")]
    PayloadTooLarge { len: usize, capacity: usize },
    #[error("zero-copy packet operations are disabled by config")]
    ZeroCopyDisabled,
    #[error(
        "packet pool of rank {rank} exhausted after {waited_ms} ms of progress-assisted retries"
    )]
    PoolExhausted { rank: usize, waited_ms: u64 },
    #[error("handler {handler_id} panicked: {message}")]
    HandlerPanicked { handler_id: HandlerId, message: String },
}

/// Transport tuning and the two ablation toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransportConfig {
    /// Payload bytes per packet.
    pub packet_capacity: usize,
    /// Independently progressable queues per rank.
    pub num_devices: usize,
    /// Self-destined sends invoke the handler directly instead of queueing.
    pub loopback_enabled: bool,
    /// Senders assemble payloads in pooled packets; disabling forces a copy
    /// on each side of the transfer.
    pub zero_copy_enabled: bool,
    /// Packets per endpoint pool.
    pub pool_size: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            packet_capacity: 65_536,
            num_devices: 1,
            loopback_enabled: true,
            zero_copy_enabled: true,
            pool_size: 256,
        }
    }
}

impl TransportConfig {
    /// Pool size with room for one open aggregation packet per
    /// (worker thread, destination) plus in-flight slack.
    pub fn recommended_pool_size(num_ranks: usize, worker_threads: usize) -> usize {
        2 * num_ranks * worker_threads + 64
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if self.packet_capacity == 0 {
            return Err(TransportError::InvalidConfig(
                "packet_capacity must be positive".into(),
            ));
        }
        if self.num_devices == 0 {
            return Err(TransportError::InvalidConfig(
                "num_devices must be at least 1".into(),
            ));
        }
        if self.pool_size == 0 {
            return Err(TransportError::InvalidConfig(
                "pool_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Counts locally completed sends. Monotone within a superstep; reset
/// between supersteps.
#[derive(Clone, Debug, Default)]
pub struct CompletionCounter(Arc<AtomicU64>);

impl CompletionCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Release);
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::AcqRel);
    }
}

/// What a handler sees for one delivered message: a payload view valid only
/// for the duration of the call, plus the frame metadata.
pub struct Delivery<'a> {
    pub payload: &'a [u8],
    pub src_rank: usize,
    pub handler_id: HandlerId,
    pub sequence: u64,
}

type Handler = Arc<dyn Fn(&Delivery<'_>) + Send + Sync>;

struct FabricShared {
    num_ranks: usize,
    config: TransportConfig,
    /// Inbound queues, indexed `[dest_rank][device]`.
    queues: Vec<Vec<Mutex<VecDeque<Packet>>>>,
    pools: Vec<PacketPool>,
    claimed: Vec<AtomicBool>,
}

/// The shared in-process "network": per-rank packet pools plus the
/// per-(rank, device) message queues. One fabric per job; every rank opens
/// its endpoint on the same fabric, which is what makes the configuration
/// consistent across ranks by construction.
#[derive(Clone)]
pub struct Fabric {
    shared: Arc<FabricShared>,
}

impl Fabric {
    pub fn new(num_ranks: usize, config: TransportConfig) -> Result<Fabric, TransportError> {
        config.validate()?;
        if num_ranks == 0 {
            return Err(TransportError::InvalidConfig(
                "num_ranks must be at least 1".into(),
            ));
        }
        let queues = (0..num_ranks)
            .map(|_| {
                (0..config.num_devices)
                    .map(|_| Mutex::new(VecDeque::new()))
                    .collect()
            })
            .collect();
        let pools = (0..num_ranks)
            .map(|rank| PacketPool::new(rank, config.packet_capacity, config.pool_size))
            .collect();
        let claimed = (0..num_ranks).map(|_| AtomicBool::new(false)).collect();
        Ok(Fabric {
            shared: Arc::new(FabricShared {
                num_ranks,
                config,
                queues,
                pools,
                claimed,
            }),
        })
    }

    /// Claim rank `rank`'s endpoint. Each rank may be claimed once.
    pub fn endpoint(&self, rank: usize) -> Result<Endpoint, TransportError> {
        let shared = &self.shared;
        if rank >= shared.num_ranks {
            return Err(TransportError::InvalidRank {
                rank,
                num_ranks: shared.num_ranks,
            });
        }
        if shared.claimed[rank].swap(true, Ordering::AcqRel) {
            return Err(TransportError::RankAlreadyClaimed(rank));
        }
        Ok(Endpoint {
            fabric: Arc::clone(shared),
            rank,
            handlers: RwLock::new(HashMap::new()),
            next_sequence: AtomicU64::new(0),
        })
    }

    pub fn num_ranks(&self) -> usize {
        self.shared.num_ranks
    }

    pub fn config(&self) -> &TransportConfig {
        &self.shared.config
    }

    /// Pool of rank `rank`, for conservation checks.
    pub fn pool(&self, rank: usize) -> &PacketPool {
        &self.shared.pools[rank]
    }

    /// True when every pool is full and every queue is empty.
    pub fn is_quiescent(&self) -> bool {
        self.shared
            .pools
            .iter()
            .all(|p| p.available() == p.pool_size())
            && self
                .shared
                .queues
                .iter()
                .flatten()
                .all(|q| q.lock().unwrap().is_empty())
    }
}

thread_local! {
    static THREAD_SLOT: Cell<Option<usize>> = const { Cell::new(None) };
}

static NEXT_THREAD_SLOT: AtomicUsize = AtomicUsize::new(0);

/// Pin the calling thread's send-affinity slot. Sends from this thread go to
/// destination device `slot % num_devices`. Threads that never call this get
/// a distinct slot assigned on first send.
pub fn set_thread_slot(slot: usize) {
    THREAD_SLOT.with(|s| s.set(Some(slot)));
}

fn current_thread_slot() -> usize {
    THREAD_SLOT.with(|s| match s.get() {
        Some(slot) => slot,
        None => {
            let slot = NEXT_THREAD_SLOT.fetch_add(1, Ordering::Relaxed);
            s.set(Some(slot));
            slot
        }
    })
}

/// One rank's attachment to the fabric: its handler table, its packet pool,
/// and its send/progress operations. Thread-safe; worker threads of the
/// owning rank share it behind an `Arc`.
pub struct Endpoint {
    fabric: Arc<FabricShared>,
    rank: usize,
    handlers: RwLock<HashMap<HandlerId, Handler>>,
    next_sequence: AtomicU64,
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_ranks(&self) -> usize {
        self.fabric.num_ranks
    }

    pub fn config(&self) -> &TransportConfig {
        &self.fabric.config
    }

    pub fn num_devices(&self) -> usize {
        self.fabric.config.num_devices
    }

    /// Register `handler` for `id` on this endpoint. Must happen (with the
    /// same ids on every rank) before the first send that uses `id`.
    /// Handlers may run concurrently on multiple progressing threads and
    /// must be reentrant.
    pub fn register_handler<F>(&self, id: HandlerId, handler: F) -> Result<(), TransportError>
    where
        F: Fn(&Delivery<'_>) + Send + Sync + 'static,
    {
        let mut table = self.handlers.write().unwrap();
        if table.contains_key(&id) {
            return Err(TransportError::HandlerAlreadyRegistered(id));
        }
        table.insert(id, Arc::new(handler));
        Ok(())
    }

    /// Take an empty packet to assemble a payload in place (the zero-copy
    /// path). When the pool is empty, retries for a bounded window while
    /// progressing this rank's devices, then reports exhaustion.
    pub fn acquire_packet(&self) -> Result<Packet, TransportError> {
        if !self.fabric.config.zero_copy_enabled {
            return Err(TransportError::ZeroCopyDisabled);
        }
        self.acquire_internal()
    }

    fn acquire_internal(&self) -> Result<Packet, TransportError> {
        let pool = &self.fabric.pools[self.rank];
        if let Some(p) = pool.try_take() {
            return Ok(p);
        }
        let start = Instant::now();
        loop {
            for device in 0..self.fabric.config.num_devices {
                self.progress(device)?;
                if let Some(p) = pool.try_take() {
                    return Ok(p);
                }
            }
            if start.elapsed() >= ACQUIRE_RETRY_WINDOW {
                return Err(TransportError::PoolExhausted {
                    rank: self.rank,
                    waited_ms: start.elapsed().as_millis() as u64,
                });
            }
            std::thread::yield_now();
        }
    }

    /// Send a filled packet to `dest`, to be consumed by `handler_id` there.
    /// `local_counter` is bumped when the packet is handed off. Self-destined
    /// sends with loopback enabled run the handler synchronously and return
    /// the packet to the pool before this call returns.
    pub fn send_am(
        &self,
        dest: usize,
        handler_id: HandlerId,
        packet: Packet,
        local_counter: &CompletionCounter,
    ) -> Result<(), TransportError> {
        self.check_send(dest, handler_id)?;
        if packet.is_empty() {
            return Err(TransportError::EmptyPacket);
        }
        let device = current_thread_slot() % self.fabric.config.num_devices;
        self.dispatch(dest, device, handler_id, packet, local_counter)
    }

    /// Copying send path: stages `payload` into an internal packet. This is
    /// the only send available when zero-copy is disabled; it works (and
    /// still copies) in either mode.
    pub fn send_am_bytes(
        &self,
        dest: usize,
        handler_id: HandlerId,
        payload: &[u8],
        local_counter: &CompletionCounter,
    ) -> Result<(), TransportError> {
        let device = current_thread_slot() % self.fabric.config.num_devices;
        self.send_am_bytes_on_device(dest, device, handler_id, payload, local_counter)
    }

    /// Copying send pinned to a destination device; collectives use this to
    /// keep their traffic on device 0.
    pub(crate) fn send_am_bytes_on_device(
        &self,
        dest: usize,
        device: usize,
        handler_id: HandlerId,
        payload: &[u8],
        local_counter: &CompletionCounter,
    ) -> Result<(), TransportError> {
        self.check_send(dest, handler_id)?;
        if payload.is_empty() {
            return Err(TransportError::EmptyPacket);
        }
        if payload.len() > self.fabric.config.packet_capacity {
            return Err(TransportError::PayloadTooLarge {
                len: payload.len(),
                capacity: self.fabric.config.packet_capacity,
            });
        }
        let mut packet = self.acquire_internal()?;
        packet.write(payload);
        self.dispatch(dest, device, handler_id, packet, local_counter)
    }

    fn check_send(&self, dest: usize, handler_id: HandlerId) -> Result<(), TransportError> {
        if dest >= self.fabric.num_ranks {
            return Err(TransportError::InvalidDest {
                dest,
                num_ranks: self.fabric.num_ranks,
            });
        }
        if !self.handlers.read().unwrap().contains_key(&handler_id) {
            return Err(TransportError::UnregisteredHandler(handler_id));
        }
        Ok(())
    }

    fn dispatch(
        &self,
        dest: usize,
        device: usize,
        handler_id: HandlerId,
        mut packet: Packet,
        local_counter: &CompletionCounter,
    ) -> Result<(), TransportError> {
        let header = FrameHeader {
            handler_id,
            payload_len: packet.len() as u32,
            src_rank: self.rank as u32,
            sequence: self.next_sequence.fetch_add(1, Ordering::Relaxed),
        };
        packet.seal(header);

        if self.fabric.config.loopback_enabled && dest == self.rank {
            local_counter.bump();
            return self.deliver(packet);
        }

        self.fabric.queues[dest][device]
            .lock()
            .unwrap()
            .push_back(packet);
        local_counter.bump();
        Ok(())
    }

    /// Drain every message currently queued on `device`, invoking the
    /// registered handler for each in the calling thread. Packets go back to
    /// their home pool as they are consumed. Returns the number delivered.
    pub fn progress(&self, device: usize) -> Result<usize, TransportError> {
        if device >= self.fabric.config.num_devices {
            return Err(TransportError::InvalidDevice {
                device,
                num_devices: self.fabric.config.num_devices,
            });
        }
        let queue = &self.fabric.queues[self.rank][device];
        let mut delivered = 0;
        loop {
            let packet = queue.lock().unwrap().pop_front();
            match packet {
                Some(packet) => {
                    self.deliver(packet)?;
                    delivered += 1;
                }
                None => return Ok(delivered),
            }
        }
    }

    fn deliver(&self, packet: Packet) -> Result<(), TransportError> {
        let header = packet.header();
        let handler = self
            .handlers
            .read()
            .unwrap()
            .get(&header.handler_id)
            .cloned()
            .ok_or(TransportError::UnregisteredHandler(header.handler_id))?;

        let scratch;
        let payload: &[u8] = if self.fabric.config.zero_copy_enabled {
            packet.payload()
        } else {
            // Emulate the receive-side copy of the plain eager protocol:
            // stage the payload and release the packet before the handler.
            scratch = packet.payload().to_vec();
            drop(packet);
            &scratch
        };

        let delivery = Delivery {
            payload,
            src_rank: header.src_rank as usize,
            handler_id: header.handler_id,
            sequence: header.sequence,
        };
        let result = panic::catch_unwind(AssertUnwindSafe(|| handler(&delivery)));
        result.map_err(|cause| TransportError::HandlerPanicked {
            handler_id: header.handler_id,
            message: panic_message(cause.as_ref()),
        })
    }
}

fn panic_message(cause: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = cause.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = cause.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}
