//! Datagram framing for benchmark messages.
//!
//! Every datagram starts with a fixed 32-byte header, all integers big-endian:
//!
//! ```text
//!  0      4    5    6        8                16         18         20            24             28          32
//!  +------+----+----+--------+----------------+----------+----------+-------------+--------------+-----------+
//!  | RTTB | v1 |kind|topic_id|      seq       |frag_index|frag_count| payload_len | chunk_offset | chunk_len |
//!  +------+----+----+--------+----------------+----------+----------+-------------+--------------+-----------+
//! ```
//!
//! followed by `chunk_len` payload bytes. A message whose payload fits in one
//! datagram is sent as a single `DATA` frame; larger payloads are split into
//! `FRAGMENT` frames of `max_datagram - 32` bytes (the last one shorter).

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RTTB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
/// Largest payload a single message may carry (128 KiB).
pub const MAX_PAYLOAD: usize = 131_072;
pub const MIN_DATAGRAM: usize = 64;
/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;
pub const DEFAULT_MAX_DATAGRAM: usize = 1400;
/// Upper bound on fragments per message, reached at `MIN_DATAGRAM`.
pub const MAX_FRAGMENTS: usize = MAX_PAYLOAD / (MIN_DATAGRAM - HEADER_LEN);

pub const DEFAULT_REASSEMBLY_TIMEOUT_NS: u64 = 100_000_000;
pub const DEFAULT_MAX_IN_PROGRESS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("max datagram size {0} outside {MIN_DATAGRAM}..={MAX_DATAGRAM}")]
    DatagramSize(usize),
    #[error("truncated header: {0} bytes, need {HEADER_LEN}")]
    TruncatedHeader(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnknownVersion(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

/// Payload byte `i` of message `seq`.
#[inline]
pub fn pattern_byte(seq: u64, i: usize) -> u8 {
    seq.wrapping_add(i as u64) as u8
}

/// One benchmark sample in flight.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Message {
    pub topic_id: u16,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(topic_id: u16, seq: u64, payload: Vec<u8>) -> Self {
        Self { topic_id, seq, payload }
    }

    /// Message whose payload follows the deterministic integrity pattern.
    pub fn with_pattern(topic_id: u16, seq: u64, len: usize) -> Self {
        let mut msg = Self::with_capacity(topic_id, len);
        msg.fill_pattern(seq, len);
        msg
    }

    pub fn with_capacity(topic_id: u16, capacity: usize) -> Self {
        Self { topic_id, seq: 0, payload: Vec::with_capacity(capacity) }
    }

    /// Rewrites seq and payload in place. Does not reallocate when the
    /// buffer already has `len` bytes of capacity.
    pub fn fill_pattern(&mut self, seq: u64, len: usize) {
        self.seq = seq;
        self.payload.clear();
        self.payload.extend((0..len).map(|i| pattern_byte(seq, i)));
    }

    pub fn has_pattern(&self) -> bool {
        self.payload.iter().enumerate().all(|(i, &b)| b == pattern_byte(self.seq, i))
    }

    /// Copies `other` into this message, reusing the payload buffer.
    pub fn copy_from(&mut self, other: &Message) {
        self.topic_id = other.topic_id;
        self.seq = other.seq;
        self.payload.clear();
        self.payload.extend_from_slice(&other.payload);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Data = 0,
    Fragment = 1,
}

/// A decoded datagram. The chunk borrows from the datagram buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame<'a> {
    pub kind: FrameKind,
    pub topic_id: u16,
    pub seq: u64,
    pub frag_index: u16,
    pub frag_count: u16,
    /// Total payload length of the message this frame belongs to.
    pub payload_len: u32,
    /// Offset of `chunk` within the message payload.
    pub chunk_offset: u32,
    pub chunk: &'a [u8],
}

impl Frame<'_> {
    fn write_header(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.kind as u8;
        out[6..8].copy_from_slice(&self.topic_id.to_be_bytes());
        out[8..16].copy_from_slice(&self.seq.to_be_bytes());
        out[16..18].copy_from_slice(&self.frag_index.to_be_bytes());
        out[18..20].copy_from_slice(&self.frag_count.to_be_bytes());
        out[20..24].copy_from_slice(&self.payload_len.to_be_bytes());
        out[24..28].copy_from_slice(&self.chunk_offset.to_be_bytes());
        out[28..32].copy_from_slice(&(self.chunk.len() as u32).to_be_bytes());
    }

    /// Serializes header and chunk into a fresh datagram.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_LEN + self.chunk.len()];
        self.write_header(&mut out[..HEADER_LEN]);
        out[HEADER_LEN..].copy_from_slice(self.chunk);
        out
    }
}

/// Number of datagrams `encode` produces for a payload of `payload_len` bytes.
pub fn fragment_count(payload_len: usize, max_datagram: usize) -> usize {
    let chunk = max_datagram - HEADER_LEN;
    if payload_len <= chunk {
        1
    } else {
        payload_len.div_ceil(chunk)
    }
}

/// Reusable encoder that writes each datagram into an internal scratch buffer.
#[derive(Debug)]
pub struct Encoder {
    max_datagram: usize,
    scratch: Vec<u8>,
}

impl Encoder {
    pub fn new(max_datagram: usize) -> Result<Self, WireError> {
        if !(MIN_DATAGRAM..=MAX_DATAGRAM).contains(&max_datagram) {
            return Err(WireError::DatagramSize(max_datagram));
        }
        Ok(Self { max_datagram, scratch: vec![0u8; max_datagram] })
    }

    pub fn max_datagram(&self) -> usize {
        self.max_datagram
    }

    pub fn chunk_capacity(&self) -> usize {
        self.max_datagram - HEADER_LEN
    }

    /// Hands every datagram of `msg` to `sink`, in fragment order. Returns
    /// the number of datagrams produced.
    pub fn encode_with(&mut self, msg: &Message, mut sink: impl FnMut(&[u8])) -> Result<usize, WireError> {
        let len = msg.payload.len();
        if len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(len));
        }
        let chunk_cap = self.chunk_capacity();
        let count = fragment_count(len, self.max_datagram);
        let kind = if count == 1 { FrameKind::Data } else { FrameKind::Fragment };
        for index in 0..count {
            let start = index * chunk_cap;
            let end = (start + chunk_cap).min(len);
            let frame = Frame {
                kind,
                topic_id: msg.topic_id,
                seq: msg.seq,
                frag_index: index as u16,
                frag_count: count as u16,
                payload_len: len as u32,
                chunk_offset: start as u32,
                chunk: &msg.payload[start..end],
            };
            let total = HEADER_LEN + frame.chunk.len();
            frame.write_header(&mut self.scratch[..HEADER_LEN]);
            self.scratch[HEADER_LEN..total].copy_from_slice(frame.chunk);
            sink(&self.scratch[..total]);
        }
        Ok(count)
    }
}

/// Splits `msg` into datagrams of at most `max_datagram` bytes.
pub fn encode(msg: &Message, max_datagram: usize) -> Result<Vec<Vec<u8>>, WireError> {
    let mut encoder = Encoder::new(max_datagram)?;
    let mut out = Vec::with_capacity(fragment_count(msg.payload.len(), max_datagram));
    encoder.encode_with(msg, |d| out.push(d.to_vec()))?;
    Ok(out)
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses and validates one datagram.
pub fn decode(datagram: &[u8]) -> Result<Frame<'_>, WireError> {
    if datagram.len() < HEADER_LEN {
        return Err(WireError::TruncatedHeader(datagram.len()));
    }
    let magic = [datagram[0], datagram[1], datagram[2], datagram[3]];
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if datagram[4] != VERSION {
        return Err(WireError::UnknownVersion(datagram[4]));
    }
    let kind = match datagram[5] {
        0 => FrameKind::Data,
        1 => FrameKind::Fragment,
        _ => return Err(WireError::Malformed("unknown frame kind")),
    };
    let topic_id = be_u16(&datagram[6..8]);
    let seq = u64::from_be_bytes(datagram[8..16].try_into().expect("8-byte slice"));
    let frag_index = be_u16(&datagram[16..18]);
    let frag_count = be_u16(&datagram[18..20]);
    let payload_len = be_u32(&datagram[20..24]);
    let chunk_offset = be_u32(&datagram[24..28]);
    let chunk_len = be_u32(&datagram[28..32]) as usize;
    let chunk = &datagram[HEADER_LEN..];

    if chunk_len != chunk.len() {
        return Err(WireError::Malformed("chunk length inconsistent with datagram length"));
    }
    if payload_len as usize > MAX_PAYLOAD {
        return Err(WireError::Malformed("payload length above limit"));
    }
    if chunk_offset as u64 + chunk_len as u64 > payload_len as u64 {
        return Err(WireError::Malformed("chunk extends past payload"));
    }
    match kind {
        FrameKind::Data => {
            if frag_index != 0 || frag_count != 1 {
                return Err(WireError::Malformed("data frame with fragment indices"));
            }
            if chunk_offset != 0 || chunk_len != payload_len as usize {
                return Err(WireError::Malformed("data frame does not carry the whole payload"));
            }
        }
        FrameKind::Fragment => {
            if frag_count < 2 || frag_count as usize > MAX_FRAGMENTS {
                return Err(WireError::Malformed("fragment count out of range"));
            }
            if frag_index >= frag_count {
                return Err(WireError::Malformed("fragment index out of range"));
            }
            if chunk_len == 0 {
                return Err(WireError::Malformed("empty fragment"));
            }
        }
    }
    Ok(Frame { kind, topic_id, seq, frag_index, frag_count, payload_len, chunk_offset, chunk })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReassemblyConfig {
    pub timeout_ns: u64,
    pub max_in_progress: usize,
}

impl Default for ReassemblyConfig {
    fn default() -> Self {
        Self { timeout_ns: DEFAULT_REASSEMBLY_TIMEOUT_NS, max_in_progress: DEFAULT_MAX_IN_PROGRESS }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReassemblyCounters {
    pub completed: u64,
    /// Messages discarded before all fragments arrived.
    pub incomplete: u64,
    /// Frames for a message that was already emitted, or a repeated fragment.
    pub duplicates: u64,
    /// Frames for a message older than the newest emitted one.
    pub stale: u64,
    /// Fragments whose header disagrees with earlier fragments of the same seq.
    pub inconsistent: u64,
}

#[derive(Debug)]
struct Slot {
    active: bool,
    seq: u64,
    topic_id: u16,
    payload_len: u32,
    frag_count: u16,
    received: Vec<bool>,
    received_count: usize,
    bytes: usize,
    started_ns: u64,
    buf: Vec<u8>,
}

impl Slot {
    fn new() -> Self {
        Self {
            active: false,
            seq: 0,
            topic_id: 0,
            payload_len: 0,
            frag_count: 0,
            received: Vec::with_capacity(MAX_FRAGMENTS),
            received_count: 0,
            bytes: 0,
            started_ns: 0,
            buf: Vec::with_capacity(MAX_PAYLOAD),
        }
    }

    fn start(&mut self, frame: &Frame, now_ns: u64) {
        self.active = true;
        self.seq = frame.seq;
        self.topic_id = frame.topic_id;
        self.payload_len = frame.payload_len;
        self.frag_count = frame.frag_count;
        self.received.clear();
        self.received.resize(frame.frag_count as usize, false);
        self.received_count = 0;
        self.bytes = 0;
        self.started_ns = now_ns;
        self.buf.clear();
        self.buf.resize(frame.payload_len as usize, 0);
    }
}

/// Rebuilds messages from frames arriving in any order, with gaps and
/// duplicates. All buffers are allocated up front.
#[derive(Debug)]
pub struct Reassembler {
    cfg: ReassemblyConfig,
    slots: Vec<Slot>,
    out: Message,
    newest_emitted: Option<u64>,
    counters: ReassemblyCounters,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(ReassemblyConfig::default())
    }
}

impl Reassembler {
    pub fn new(cfg: ReassemblyConfig) -> Self {
        let slots = (0..cfg.max_in_progress.max(1)).map(|_| Slot::new()).collect();
        Self {
            cfg,
            slots,
            out: Message::with_capacity(0, MAX_PAYLOAD),
            newest_emitted: None,
            counters: ReassemblyCounters::default(),
        }
    }

    pub fn counters(&self) -> ReassemblyCounters {
        self.counters
    }

    pub fn in_progress(&self) -> usize {
        self.slots.iter().filter(|s| s.active).count()
    }

    /// Discards in-progress messages older than the reassembly timeout.
    pub fn expire(&mut self, now_ns: u64) {
        for slot in self.slots.iter_mut().filter(|s| s.active) {
            if now_ns.saturating_sub(slot.started_ns) > self.cfg.timeout_ns {
                slot.active = false;
                self.counters.incomplete += 1;
            }
        }
    }

    /// Feeds one frame. Returns the completed message, if this frame
    /// completed one.
    pub fn push(&mut self, frame: &Frame, now_ns: u64) -> Option<&Message> {
        self.expire(now_ns);
        match self.newest_emitted {
            Some(newest) if frame.seq == newest => {
                self.counters.duplicates += 1;
                return None;
            }
            Some(newest) if frame.seq < newest => {
                self.counters.stale += 1;
                return None;
            }
            _ => {}
        }

        if frame.kind == FrameKind::Data {
            self.out.topic_id = frame.topic_id;
            self.out.seq = frame.seq;
            self.out.payload.clear();
            self.out.payload.extend_from_slice(frame.chunk);
            self.complete(frame.seq);
            return Some(&self.out);
        }

        let idx = match self.slots.iter().position(|s| s.active && s.seq == frame.seq) {
            Some(i) => {
                let slot = &self.slots[i];
                if slot.payload_len != frame.payload_len
                    || slot.frag_count != frame.frag_count
                    || slot.topic_id != frame.topic_id
                {
                    self.counters.inconsistent += 1;
                    return None;
                }
                i
            }
            None => {
                // With every slot busy, a fragment older than all of them
                // would only evict a newer message.
                let full = self.slots.iter().all(|s| s.active);
                if full && self.slots.iter().all(|s| s.seq > frame.seq) {
                    self.counters.stale += 1;
                    return None;
                }
                let i = self.free_slot();
                self.slots[i].start(frame, now_ns);
                i
            }
        };

        let slot = &mut self.slots[idx];
        let fi = frame.frag_index as usize;
        if slot.received[fi] {
            self.counters.duplicates += 1;
            return None;
        }
        let start = frame.chunk_offset as usize;
        slot.buf[start..start + frame.chunk.len()].copy_from_slice(frame.chunk);
        slot.received[fi] = true;
        slot.received_count += 1;
        slot.bytes += frame.chunk.len();

        if slot.received_count < slot.frag_count as usize {
            return None;
        }
        slot.active = false;
        if slot.bytes != slot.payload_len as usize {
            self.counters.inconsistent += 1;
            self.counters.incomplete += 1;
            return None;
        }
        self.out.topic_id = slot.topic_id;
        self.out.seq = slot.seq;
        std::mem::swap(&mut self.out.payload, &mut slot.buf);
        let seq = frame.seq;
        self.complete(seq);
        Some(&self.out)
    }

    fn free_slot(&mut self) -> usize {
        if let Some(i) = self.slots.iter().position(|s| !s.active) {
            return i;
        }
        // Evict the oldest in-progress message.
        let (i, _) = self.slots.iter().enumerate().min_by_key(|(_, s)| s.seq).expect("at least one slot");
        self.slots[i].active = false;
        self.counters.incomplete += 1;
        i
    }

    fn complete(&mut self, seq: u64) {
        for slot in self.slots.iter_mut().filter(|s| s.active && s.seq < seq) {
            slot.active = false;
            self.counters.incomplete += 1;
        }
        self.newest_emitted = Some(seq);
        self.counters.completed += 1;
    }
}

/// Runs a batch of frames through a fresh reassembler with the default
/// configuration and no timeouts.
pub fn reassemble<'a, I>(frames: I) -> Vec<Message>
where
    I: IntoIterator<Item = Frame<'a>>,
{
    let mut r = Reassembler::new(ReassemblyConfig { timeout_ns: u64::MAX, ..Default::default() });
    frames.into_iter().filter_map(|f| r.push(&f, 0).cloned()).collect()
}
