//! Classic libpcap capture files.
//!
//! Both byte orders and both timestamp resolutions (microsecond magic
//! `0xa1b2c3d4`, nanosecond magic `0xa1b23c4d`) are read. pcapng is not
//! supported and is rejected as an unknown magic.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::time::Timestamp;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

/// Upper bound on a single record body, independent of the declared snaplen.
const MAX_RECORD_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    UnknownMagic(u32),
    #[error("truncated pcap global header ({got} of {GLOBAL_HEADER_LEN} bytes)")]
    TruncatedHeader { got: usize },
    #[error("i/o error reading capture: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
    Other(u32),
}

impl LinkType {
    pub fn from_code(code: u32) -> Self {
        match code {
            1 => LinkType::Ethernet,
            // LINKTYPE_RAW, plus the BSD DLT_RAW values and LINKTYPE_IPV4.
            101 | 12 | 14 | 228 => LinkType::RawIp,
            other => LinkType::Other(other),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
            LinkType::Other(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsPrecision {
    Micros,
    Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHeader {
    pub big_endian: bool,
    pub precision: TsPrecision,
    pub version_major: u16,
    pub version_minor: u16,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub link: LinkType,
}

/// One record as stored in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub ts_seconds: u32,
    /// Microseconds or nanoseconds, per the file's magic.
    pub ts_subsec: u32,
    pub captured_len: u32,
    pub original_len: u32,
    pub payload: Vec<u8>,
}

impl CapturedFrame {
    pub fn timestamp(&self, precision: TsPrecision) -> Timestamp {
        let base = u64::from(self.ts_seconds) * 1_000_000_000;
        let sub = match precision {
            TsPrecision::Micros => u64::from(self.ts_subsec) * 1_000,
            TsPrecision::Nanos => u64::from(self.ts_subsec),
        };
        Timestamp::from_nanos(base + sub)
    }
}

/// Why iteration stopped before end of file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncation {
    /// Byte offset of the record header that could not be completed.
    pub offset: u64,
    pub reason: &'static str,
}

/// Streaming reader over a classic pcap file.
///
/// A record that is cut short (or declares an impossible length) ends the
/// stream; the remainder of the file is skipped and the event is reported
/// through [`PcapReader::truncated_records`] and [`PcapReader::truncation`].
pub struct PcapReader<R> {
    inner: R,
    header: GlobalHeader,
    offset: u64,
    truncation: Option<Truncation>,
    frames: u64,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut buf = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut buf)?;
        if got >= 4 {
            // Report a bad magic even for short files.
            let magic = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
            detect_magic(magic)?;
        }
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader { got });
        }
        let header = parse_global_header(&buf)?;
        Ok(PcapReader {
            inner,
            header,
            offset: GLOBAL_HEADER_LEN as u64,
            truncation: None,
            frames: 0,
        })
    }

    pub fn header(&self) -> &GlobalHeader {
        &self.header
    }

    pub fn link_type(&self) -> LinkType {
        self.header.link
    }

    pub fn precision(&self) -> TsPrecision {
        self.header.precision
    }

    /// 0 or 1: a truncated record ends the stream.
    pub fn truncated_records(&self) -> u64 {
        u64::from(self.truncation.is_some())
    }

    pub fn truncation(&self) -> Option<&Truncation> {
        self.truncation.as_ref()
    }

    pub fn frames_read(&self) -> u64 {
        self.frames
    }

    pub fn next_frame(&mut self) -> Result<Option<CapturedFrame>, PcapError> {
        if self.truncation.is_some() {
            return Ok(None);
        }
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Ok(self.truncate("record header"));
        }
        let be = self.header.big_endian;
        let ts_seconds = read_u32(&hdr[0..4], be);
        let ts_subsec = read_u32(&hdr[4..8], be);
        let captured_len = read_u32(&hdr[8..12], be);
        let original_len = read_u32(&hdr[12..16], be);
        if captured_len > MAX_RECORD_LEN || captured_len > self.header.snaplen.max(65_535) {
            return Ok(self.truncate("record length exceeds snaplen"));
        }
        let mut payload = vec![0u8; captured_len as usize];
        let body = read_full(&mut self.inner, &mut payload)?;
        if body < payload.len() {
            return Ok(self.truncate("record body"));
        }
        self.offset += (RECORD_HEADER_LEN + payload.len()) as u64;
        self.frames += 1;
        Ok(Some(CapturedFrame {
            ts_seconds,
            ts_subsec,
            captured_len,
            original_len,
            payload,
        }))
    }

    fn truncate(&mut self, reason: &'static str) -> Option<CapturedFrame> {
        self.truncation = Some(Truncation {
            offset: self.offset,
            reason,
        });
        None
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<CapturedFrame, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Reads a whole in-memory capture. Returns the frames, the link type, and
/// the number of truncated records encountered.
pub fn parse_pcap_stream(raw: &[u8]) -> Result<(Vec<CapturedFrame>, GlobalHeader, u64), PcapError> {
    let mut reader = PcapReader::new(raw)?;
    let mut frames = Vec::new();
    while let Some(frame) = reader.next_frame()? {
        frames.push(frame);
    }
    Ok((frames, reader.header, reader.truncated_records()))
}

fn detect_magic(magic_le: u32) -> Result<(bool, TsPrecision), PcapError> {
    match magic_le {
        MAGIC_MICROS => Ok((false, TsPrecision::Micros)),
        MAGIC_NANOS => Ok((false, TsPrecision::Nanos)),
        m if m == MAGIC_MICROS.swap_bytes() => Ok((true, TsPrecision::Micros)),
        m if m == MAGIC_NANOS.swap_bytes() => Ok((true, TsPrecision::Nanos)),
        // Report the magic as it reads big-endian on disk, the way tools print it.
        other => Err(PcapError::UnknownMagic(other.swap_bytes())),
    }
}

fn parse_global_header(buf: &[u8; GLOBAL_HEADER_LEN]) -> Result<GlobalHeader, PcapError> {
    let magic = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let (big_endian, precision) = detect_magic(magic)?;
    let be = big_endian;
    Ok(GlobalHeader {
        big_endian,
        precision,
        version_major: read_u16(&buf[4..6], be),
        version_minor: read_u16(&buf[6..8], be),
        thiszone: read_u32(&buf[8..12], be) as i32,
        sigfigs: read_u32(&buf[12..16], be),
        snaplen: read_u32(&buf[16..20], be),
        link: LinkType::from_code(read_u32(&buf[20..24], be)),
    })
}

fn read_u16(b: &[u8], be: bool) -> u16 {
    let a = [b[0], b[1]];
    if be {
        u16::from_be_bytes(a)
    } else {
        u16::from_le_bytes(a)
    }
}

fn read_u32(b: &[u8], be: bool) -> u32 {
    let a = [b[0], b[1], b[2], b[3]];
    if be {
        u32::from_be_bytes(a)
    } else {
        u32::from_le_bytes(a)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes little-endian, microsecond-resolution classic pcap.
pub struct PcapWriter<W> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, link: LinkType, snaplen: u32) -> io::Result<Self> {
        let mut hdr = Vec::with_capacity(GLOBAL_HEADER_LEN);
        hdr.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&snaplen.to_le_bytes());
        hdr.extend_from_slice(&link.code().to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner })
    }

    pub fn write_frame(&mut self, ts: Timestamp, frame: &[u8]) -> io::Result<()> {
        let secs = u32::try_from(ts.secs())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "timestamp beyond 2106"))?;
        let micros = ts.subsec_nanos() / 1_000;
        let len = frame.len() as u32;
        let mut rec = [0u8; RECORD_HEADER_LEN];
        rec[0..4].copy_from_slice(&secs.to_le_bytes());
        rec[4..8].copy_from_slice(&micros.to_le_bytes());
        rec[8..12].copy_from_slice(&len.to_le_bytes());
        rec[12..16].copy_from_slice(&len.to_le_bytes());
        self.inner.write_all(&rec)?;
        self.inner.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
