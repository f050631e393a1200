//! Pooled fixed-capacity message buffers.
//!
//! A packet is the unit of eager transfer. Its buffer holds a small frame
//! header followed by up to `capacity` payload bytes; callers on the
//! zero-copy path assemble payloads directly in place. Every packet belongs
//! to exactly one party at a time (pool, sender, in-flight queue, or the
//! progress call running its handler) and returns to its home pool when
//! dropped, so pool population is conserved.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{HandlerId, HEADER_BYTES};

/// Wire framing written into the first [`HEADER_BYTES`] of each buffer,
/// little-endian: handler_id (4), payload_length (4), src_rank (4),
/// sequence (8).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct FrameHeader {
    pub handler_id: HandlerId,
    pub payload_len: u32,
    pub src_rank: u32,
    pub sequence: u64,
}

impl FrameHeader {
    pub fn write_to(&self, buf: &mut [u8]) {
        buf[0..4].copy_from_slice(&self.handler_id.to_le_bytes());
        buf[4..8].copy_from_slice(&self.payload_len.to_le_bytes());
        buf[8..12].copy_from_slice(&self.src_rank.to_le_bytes());
        buf[12..20].copy_from_slice(&self.sequence.to_le_bytes());
    }

    pub fn read_from(buf: &[u8]) -> FrameHeader {
        FrameHeader {
            handler_id: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            payload_len: u32::from_le_bytes(buf[4..8].try_into().unwrap()),
            src_rank: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
            sequence: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
        }
    }
}

struct PoolState {
    free: Vec<Box<[u8]>>,
    /// Buffers materialized so far; never exceeds `pool_size`.
    allocated: usize,
}

pub(crate) struct PoolInner {
    state: Mutex<PoolState>,
    pub capacity: usize,
    pub pool_size: usize,
    acquired_total: AtomicU64,
}

/// Per-endpoint packet pool. `capacity` is payload bytes; each buffer also
/// reserves room for the frame header. Buffers materialize on first use up
/// to `pool_size`; unmaterialized headroom still counts as available.
#[derive(Clone)]
pub struct PacketPool {
    inner: Arc<PoolInner>,
    home_rank: usize,
}

impl PacketPool {
    pub(crate) fn new(home_rank: usize, capacity: usize, pool_size: usize) -> Self {
        PacketPool {
            inner: Arc::new(PoolInner {
                state: Mutex::new(PoolState {
                    free: Vec::new(),
                    allocated: 0,
                }),
                capacity,
                pool_size,
                acquired_total: AtomicU64::new(0),
            }),
            home_rank,
        }
    }

    /// Take a packet if one is free. Back-pressure (progress-assisted
    /// retrying) lives in the endpoint, not here.
    pub(crate) fn try_take(&self) -> Option<Packet> {
        let buf = {
            let mut state = self.inner.state.lock().unwrap();
            match state.free.pop() {
                Some(buf) => buf,
                None if state.allocated < self.inner.pool_size => {
                    state.allocated += 1;
                    vec![0u8; HEADER_BYTES + self.inner.capacity].into_boxed_slice()
                }
                None => return None,
            }
        };
        self.inner.acquired_total.fetch_add(1, Ordering::Relaxed);
        Some(Packet {
            buf: Some(buf),
            payload_len: 0,
            home: self.clone(),
        })
    }

    fn put_back(&self, buf: Box<[u8]>) {
        self.inner.state.lock().unwrap().free.push(buf);
    }

    /// Packets currently at rest in the pool (materialized free buffers
    /// plus untouched headroom).
    pub fn available(&self) -> usize {
        let state = self.inner.state.lock().unwrap();
        state.free.len() + (self.inner.pool_size - state.allocated)
    }

    pub fn pool_size(&self) -> usize {
        self.inner.pool_size
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    pub fn home_rank(&self) -> usize {
        self.home_rank
    }
}

/// An owned message buffer. Fill the payload in place, then hand it to
/// `send_am`; dropping an unsent packet returns it to its pool.
pub struct Packet {
    buf: Option<Box<[u8]>>,
    payload_len: usize,
    home: PacketPool,
}

impl std::fmt::Debug for Packet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Packet")
            .field("payload_len", &self.payload_len)
            .field("capacity", &self.capacity())
            .field("home_rank", &self.home.home_rank)
            .finish()
    }
}

impl Packet {
    /// Payload bytes written so far.
    pub fn len(&self) -> usize {
        self.payload_len
    }

    pub fn is_empty(&self) -> bool {
        self.payload_len == 0
    }

    /// Payload capacity in bytes (excludes the frame header).
    pub fn capacity(&self) -> usize {
        self.home.capacity()
    }

    pub fn remaining(&self) -> usize {
        self.capacity() - self.payload_len
    }

    pub fn payload(&self) -> &[u8] {
        let buf = self.buf.as_ref().unwrap();
        &buf[HEADER_BYTES..HEADER_BYTES + self.payload_len]
    }

    /// Append raw bytes. Panics if `bytes` exceeds the remaining capacity;
    /// callers size their writes to `remaining()`.
    pub fn write(&mut self, bytes: &[u8]) {
        assert!(
            bytes.len() <= self.remaining(),
            "packet overflow: {} bytes into {} remaining",
            bytes.len(),
            self.remaining()
        );
        let start = HEADER_BYTES + self.payload_len;
        self.buf.as_mut().unwrap()[start..start + bytes.len()].copy_from_slice(bytes);
        self.payload_len += bytes.len();
    }

    /// Append one little-endian u64 (the key encoding both sort engines use).
    pub fn push_u64(&mut self, value: u64) {
        self.write(&value.to_le_bytes());
    }

    pub fn clear(&mut self) {
        self.payload_len = 0;
    }

    pub(crate) fn seal(&mut self, header: FrameHeader) {
        header.write_to(&mut self.buf.as_mut().unwrap()[..HEADER_BYTES]);
    }

    pub(crate) fn header(&self) -> FrameHeader {
        FrameHeader::read_from(&self.buf.as_ref().unwrap()[..HEADER_BYTES])
    }
}

impl Drop for Packet {
    fn drop(&mut self) {
        if let Some(buf) = self.buf.take() {
            self.home.put_back(buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_conserves_on_drop() {
        let pool = PacketPool::new(0, 64, 3);
        assert_eq!(pool.available(), 3);
        {
            let _a = pool.try_take().unwrap();
            let _b = pool.try_take().unwrap();
            assert_eq!(pool.available(), 1);
        }
        assert_eq!(pool.available(), 3);
    }

    #[test]
    fn exhausted_pool_yields_none() {
        let pool = PacketPool::new(0, 64, 1);
        let held = pool.try_take().unwrap();
        assert!(pool.try_take().is_none());
        drop(held);
        assert!(pool.try_take().is_some());
    }

    #[test]
    fn header_roundtrip() {
        let header = FrameHeader {
            handler_id: 7,
            payload_len: 4096,
            src_rank: 13,
            sequence: u64::MAX - 5,
        };
        let mut buf = [0u8; HEADER_BYTES];
        header.write_to(&mut buf);
        assert_eq!(FrameHeader::read_from(&buf), header);
    }

    #[test]
    fn packet_write_tracks_len() {
        let pool = PacketPool::new(2, 64, 1);
        let mut pkt = pool.try_take().unwrap();
        pkt.push_u64(0xDEAD_BEEF);
        pkt.write(&[1, 2, 3]);
        assert_eq!(pkt.len(), 11);
        assert_eq!(pkt.remaining(), 53);
        assert_eq!(&pkt.payload()[8..], &[1, 2, 3]);
        pkt.clear();
        assert!(pkt.is_empty());
    }
}
