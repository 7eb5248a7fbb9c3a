//! DNS query parsing.
//!
//! Only the header and the first question are decoded. Names are rendered in
//! presentation form, lowercased, with `\.`, `\\` and `\DDD` escapes for
//! bytes that cannot appear bare. The root name is rendered as `"."`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DNS_HEADER_LEN: usize = 12;
pub const MAX_LABEL_LEN: usize = 63;
/// Wire length of a name including the terminating root label.
pub const MAX_NAME_WIRE_LEN: usize = 255;
pub const MAX_POINTER_JUMPS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DnsError {
    #[error("malformed DNS message: {0}")]
    MalformedDns(&'static str),
    #[error("compression pointer loop in question name")]
    CompressionLoop,
}

/// DNS RR type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QType(pub u16);

impl QType {
    pub const A: QType = QType(1);
    pub const NS: QType = QType(2);
    pub const CNAME: QType = QType(5);
    pub const SOA: QType = QType(6);
    pub const PTR: QType = QType(12);
    pub const HINFO: QType = QType(13);
    pub const MX: QType = QType(15);
    pub const TXT: QType = QType(16);
    pub const AAAA: QType = QType(28);
    pub const SRV: QType = QType(33);
    pub const NAPTR: QType = QType(35);
    pub const OPT: QType = QType(41);
    pub const DS: QType = QType(43);
    pub const RRSIG: QType = QType(46);
    pub const NSEC: QType = QType(47);
    pub const DNSKEY: QType = QType(48);
    pub const SVCB: QType = QType(64);
    pub const HTTPS: QType = QType(65);
    pub const IXFR: QType = QType(251);
    pub const AXFR: QType = QType(252);
    pub const ANY: QType = QType(255);
    pub const CAA: QType = QType(257);

    const NAMED: [(QType, &'static str); 22] = [
        (QType::A, "A"),
        (QType::NS, "NS"),
        (QType::CNAME, "CNAME"),
        (QType::SOA, "SOA"),
        (QType::PTR, "PTR"),
        (QType::HINFO, "HINFO"),
        (QType::MX, "MX"),
        (QType::TXT, "TXT"),
        (QType::AAAA, "AAAA"),
        (QType::SRV, "SRV"),
        (QType::NAPTR, "NAPTR"),
        (QType::OPT, "OPT"),
        (QType::DS, "DS"),
        (QType::RRSIG, "RRSIG"),
        (QType::NSEC, "NSEC"),
        (QType::DNSKEY, "DNSKEY"),
        (QType::SVCB, "SVCB"),
        (QType::HTTPS, "HTTPS"),
        (QType::IXFR, "IXFR"),
        (QType::AXFR, "AXFR"),
        (QType::ANY, "ANY"),
        (QType::CAA, "CAA"),
    ];

    pub fn code(self) -> u16 {
        self.0
    }

    pub fn mnemonic(self) -> Option<&'static str> {
        Self::NAMED.iter().find(|(t, _)| *t == self).map(|(_, n)| *n)
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mnemonic() {
            Some(name) => f.write_str(name),
            None => write!(f, "TYPE{}", self.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown query type {0:?}")]
pub struct UnknownQType(pub String);

impl FromStr for QType {
    type Err = UnknownQType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        if let Some((t, _)) = Self::NAMED.iter().find(|(_, n)| *n == upper) {
            return Ok(*t);
        }
        if upper == "*" {
            return Ok(QType::ANY);
        }
        upper
            .strip_prefix("TYPE")
            .and_then(|n| n.parse::<u16>().ok())
            .map(QType)
            .ok_or_else(|| UnknownQType(s.to_string()))
    }
}

impl Serialize for QType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuerySummary {
    pub transaction_id: u16,
    pub is_query: bool,
    pub opcode: u8,
    pub recursion_desired: bool,
    pub qname: String,
    pub qtype: QType,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DnsOutcome {
    Query(DnsQuerySummary),
    /// QR bit set; not analysed further.
    Response,
    /// A query with QDCOUNT = 0.
    NoQuestion,
}

impl DnsOutcome {
    pub fn into_query(self) -> Option<DnsQuerySummary> {
        match self {
            DnsOutcome::Query(q) => Some(q),
            _ => None,
        }
    }
}

/// Parses the header and first question of a DNS message.
pub fn parse_dns_query(payload: &[u8]) -> Result<DnsOutcome, DnsError> {
    if payload.len() < DNS_HEADER_LEN {
        return Err(DnsError::MalformedDns("shorter than header"));
    }
    let transaction_id = u16::from_be_bytes([payload[0], payload[1]]);
    let flags = u16::from_be_bytes([payload[2], payload[3]]);
    if flags & 0x8000 != 0 {
        return Ok(DnsOutcome::Response);
    }
    let qdcount = u16::from_be_bytes([payload[4], payload[5]]);
    if qdcount == 0 {
        return Ok(DnsOutcome::NoQuestion);
    }
    let (qname, end) = read_name(payload, DNS_HEADER_LEN)?;
    let tail = payload
        .get(end..end + 4)
        .ok_or(DnsError::MalformedDns("truncated question"))?;
    Ok(DnsOutcome::Query(DnsQuerySummary {
        transaction_id,
        is_query: true,
        opcode: ((flags >> 11) & 0x0f) as u8,
        recursion_desired: flags & 0x0100 != 0,
        qname,
        qtype: QType(u16::from_be_bytes([tail[0], tail[1]])),
        qclass: u16::from_be_bytes([tail[2], tail[3]]),
    }))
}

/// Decodes the name at `start`, returning its presentation form and the
/// offset just past the name in the original byte stream.
///
/// Each compression pointer must target an offset strictly below the
/// previous jump (or below the pointer itself for the first jump), and at
/// most [`MAX_POINTER_JUMPS`] are followed.
pub fn read_name(msg: &[u8], start: usize) -> Result<(String, usize), DnsError> {
    let mut out = String::new();
    let mut pos = start;
    let mut end_after: Option<usize> = None;
    let mut ceiling = usize::MAX;
    let mut jumps = 0usize;
    let mut wire_len = 0usize;

    loop {
        let len = *msg
            .get(pos)
            .ok_or(DnsError::MalformedDns("truncated name"))? as usize;
        match len & 0xc0 {
            0xc0 => {
                let low = *msg
                    .get(pos + 1)
                    .ok_or(DnsError::MalformedDns("truncated compression pointer"))?
                    as usize;
                let target = ((len & 0x3f) << 8) | low;
                if target >= pos || target >= ceiling {
                    return Err(DnsError::CompressionLoop);
                }
                jumps += 1;
                if jumps > MAX_POINTER_JUMPS {
                    return Err(DnsError::CompressionLoop);
                }
                end_after.get_or_insert(pos + 2);
                ceiling = target;
                pos = target;
            }
            0x00 => {
                if len == 0 {
                    let end = end_after.unwrap_or(pos + 1);
                    if out.is_empty() {
                        out.push('.');
                    }
                    return Ok((out, end));
                }
                let label = msg
                    .get(pos + 1..pos + 1 + len)
                    .ok_or(DnsError::MalformedDns("label runs past end of message"))?;
                wire_len += len + 1;
                if wire_len + 1 > MAX_NAME_WIRE_LEN {
                    return Err(DnsError::MalformedDns("name longer than 255 bytes"));
                }
                if !out.is_empty() {
                    out.push('.');
                }
                push_label(&mut out, label);
                pos += 1 + len;
            }
            _ => return Err(DnsError::MalformedDns("unsupported label type")),
        }
    }
}

fn push_label(out: &mut String, label: &[u8]) {
    for &b in label {
        match b {
            b'.' | b'\\' => {
                out.push('\\');
                out.push(b as char);
            }
            0x21..=0x7e => out.push(b.to_ascii_lowercase() as char),
            _ => {
                out.push('\\');
                out.push_str(&format!("{b:03}"));
            }
        }
    }
}

/// Canonical form used for all name comparisons: ASCII-lowercased, with a
/// trailing unescaped dots removed. The root stays `"."`.
pub fn normalize_qname(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase();
    if lower.is_empty() || lower == "." {
        return ".".to_string();
    }
    let mut s = lower;
    while s.ends_with('.') && !ends_with_escaped_dot(&s) {
        s.pop();
    }
    if s.is_empty() {
        s.push('.');
    }
    s
}

fn ends_with_escaped_dot(s: &str) -> bool {
    let bytes = s.as_bytes();
    let backslashes = bytes[..bytes.len() - 1]
        .iter()
        .rev()
        .take_while(|&&b| b == b'\\')
        .count();
    backslashes % 2 == 1
}

/// Splits a presentation-form name into raw label bytes, resolving escapes.
/// The root (`"."` or `""`) yields no labels.
pub fn name_to_labels(name: &str) -> Result<Vec<Vec<u8>>, &'static str> {
    if name.is_empty() || name == "." {
        return Ok(Vec::new());
    }
    let bytes = name.as_bytes();
    let mut labels = Vec::new();
    let mut current = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                let rest = &bytes[i + 1..];
                if rest.len() >= 3 && rest[..3].iter().all(u8::is_ascii_digit) {
                    let v = u32::from(rest[0] - b'0') * 100
                        + u32::from(rest[1] - b'0') * 10
                        + u32::from(rest[2] - b'0');
                    current.push(u8::try_from(v).map_err(|_| "escape value above 255")?);
                    i += 4;
                } else if let Some(&c) = rest.first() {
                    current.push(c);
                    i += 2;
                } else {
                    return Err("dangling escape");
                }
            }
            b'.' => {
                if current.is_empty() {
                    return Err("empty label");
                }
                labels.push(std::mem::take(&mut current));
                i += 1;
            }
            c => {
                current.push(c);
                i += 1;
            }
        }
    }
    if !current.is_empty() {
        labels.push(current);
    }
    Ok(labels)
}

/// Rightmost label of a normalized name, unescaped dots respected.
/// Returns `None` for the root.
pub fn rightmost_label(name: &str) -> Option<&str> {
    if name == "." || name.is_empty() {
        return None;
    }
    let bytes = name.as_bytes();
    let mut cut = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'.' => {
                cut = i + 1;
                i += 1;
            }
            _ => i += 1,
        }
    }
    Some(&name[cut.min(name.len())..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(question: &[u8]) -> Vec<u8> {
        let mut m = vec![0xab, 0xcd, 0x01, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0];
        m.extend_from_slice(question);
        m
    }

    #[test]
    fn ripe_net_any() {
        let msg = query(&[
            0x04, 0x72, 0x69, 0x70, 0x65, 0x03, 0x6e, 0x65, 0x74, 0x00, 0x00, 0xff, 0x00, 0x01,
        ]);
        let q = parse_dns_query(&msg).unwrap().into_query().unwrap();
        assert_eq!(q.qname, "ripe.net");
        assert_eq!(q.qtype, QType::ANY);
        assert_eq!(q.transaction_id, 0xabcd);
        assert!(q.recursion_desired);
        assert_eq!(q.qclass, 1);
    }

    #[test]
    fn root_any() {
        let msg = query(&[0x00, 0x00, 0xff, 0x00, 0x01]);
        let q = parse_dns_query(&msg).unwrap().into_query().unwrap();
        assert_eq!(q.qname, ".");
        assert_eq!(q.qtype.to_string(), "ANY");
    }

    #[test]
    fn self_pointer_is_a_loop() {
        let msg = query(&[0xc0, 0x0c, 0x00, 0xff, 0x00, 0x01]);
        assert_eq!(parse_dns_query(&msg), Err(DnsError::CompressionLoop));
    }

    #[test]
    fn forward_pointer_is_rejected() {
        let msg = query(&[0xc0, 0x20, 0x00, 0xff, 0x00, 0x01]);
        assert_eq!(parse_dns_query(&msg), Err(DnsError::CompressionLoop));
    }

    #[test]
    fn backward_pointer_is_followed() {
        let mut msg = vec![0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0];
        msg.extend_from_slice(&[0x03, b'n', b'e', b't', 0x00]); // "net" at offset 12
        let question_at = msg.len();
        msg.extend_from_slice(&[0x04, b'r', b'i', b'p', b'e', 0xc0, 0x0c, 0x00, 0xff, 0x00, 0x01]);
        let (name, end) = read_name(&msg, question_at).unwrap();
        assert_eq!(name, "ripe.net");
        assert_eq!(end, question_at + 7);
    }

    #[test]
    fn pointer_chain_must_strictly_decrease() {
        // offset 12: label "a" then pointer back to 12: target 12 < 14 but the
        // second visit hits the same pointer with ceiling 12.
        let mut msg = vec![0u8; 12];
        msg.extend_from_slice(&[0x01, b'a', 0xc0, 0x0c]);
        assert_eq!(read_name(&msg, 12), Err(DnsError::CompressionLoop));
    }

    #[test]
    fn responses_and_empty_questions() {
        let mut msg = query(&[0x00, 0x00, 0xff, 0x00, 0x01]);
        msg[2] |= 0x80;
        assert_eq!(parse_dns_query(&msg), Ok(DnsOutcome::Response));
        let mut none = query(&[]);
        none[5] = 0;
        assert_eq!(parse_dns_query(&none), Ok(DnsOutcome::NoQuestion));
    }

    #[test]
    fn malformed_questions() {
        assert!(matches!(parse_dns_query(&[0; 5]), Err(DnsError::MalformedDns(_))));
        assert!(matches!(
            parse_dns_query(&query(&[0x05, b'a', b'b'])),
            Err(DnsError::MalformedDns(_))
        ));
        assert!(matches!(
            parse_dns_query(&query(&[0x00, 0x00])),
            Err(DnsError::MalformedDns("truncated question"))
        ));
        assert!(matches!(
            parse_dns_query(&query(&[0x41, 0x00])),
            Err(DnsError::MalformedDns("unsupported label type"))
        ));
    }

    #[test]
    fn overlong_name_is_rejected() {
        let mut q = Vec::new();
        for _ in 0..5 {
            q.push(63);
            q.extend_from_slice(&[b'x'; 63]);
        }
        q.extend_from_slice(&[0, 0, 1, 0, 1]);
        assert_eq!(
            parse_dns_query(&query(&q)),
            Err(DnsError::MalformedDns("name longer than 255 bytes"))
        );
    }

    #[test]
    fn case_and_escapes() {
        let msg = query(&[0x04, b'R', b'I', b'.', 0x07, 0x03, b'N', b'E', b'T', 0x00, 0x00, 0x01, 0x00, 0x01]);
        let q = parse_dns_query(&msg).unwrap().into_query().unwrap();
        assert_eq!(q.qname, "ri\\.\\007.net");
        assert_eq!(rightmost_label(&q.qname), Some("net"));
        assert_eq!(
            name_to_labels(&q.qname).unwrap(),
            vec![b"ri.\x07".to_vec(), b"net".to_vec()]
        );
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_qname("RIPE.NET"), "ripe.net");
        assert_eq!(normalize_qname("ripe.net."), "ripe.net");
        assert_eq!(normalize_qname(""), ".");
        assert_eq!(normalize_qname("."), ".");
        assert_eq!(normalize_qname("a\\."), "a\\.");
        assert_eq!(rightmost_label("."), None);
        assert_eq!(rightmost_label("x\\.y"), Some("x\\.y"));
    }

    #[test]
    fn qtype_names() {
        assert_eq!("any".parse::<QType>().unwrap(), QType::ANY);
        assert_eq!("TYPE999".parse::<QType>().unwrap(), QType(999));
        assert_eq!(QType(999).to_string(), "TYPE999");
        assert_eq!(QType(46).to_string(), "RRSIG");
        assert!("BOGUS".parse::<QType>().is_err());
        for t in ["ANY", "A", "TXT", "MX", "PTR", "AAAA", "RRSIG"] {
            assert_eq!(t.parse::<QType>().unwrap().to_string(), t);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parsing_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
                let _ = parse_dns_query(&bytes);
            }

            #[test]
            fn normalization_is_idempotent_and_case_blind(name in "[a-zA-Z0-9.-]{0,40}") {
                let once = normalize_qname(&name);
                prop_assert_eq!(normalize_qname(&once), once.clone());
                prop_assert_eq!(normalize_qname(&name.to_ascii_uppercase()), once);
            }
        }
    }
}
