//! Link, IPv4 and UDP decoding of captured frames.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::{CapturedFrame, LinkType, TsPrecision};
use crate::time::Timestamp;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const DNS_PORT: u16 = 53;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed IPv4 header: {0}")]
    MalformedIpHeader(&'static str),
}

/// Frames that are not IPv4/UDP are skipped and tallied by reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Arp,
    Ipv6,
    OtherEthertype,
    UnsupportedLinkType,
    NonUdp,
    Fragment,
    TruncatedLink,
    TruncatedUdp,
}

/// A decoded IPv4/UDP packet borrowed from its frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord<'a> {
    pub timestamp: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: u8,
    pub src_port: u16,
    pub dst_port: u16,
    /// Full captured frame length, link header included.
    pub frame_bytes: u32,
    pub udp_payload: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded<'a> {
    Packet(PacketRecord<'a>),
    Skipped(SkipReason),
}

pub fn decode_frame<'a>(
    frame: &'a CapturedFrame,
    link: LinkType,
    precision: TsPrecision,
) -> Result<Decoded<'a>, DecodeError> {
    decode_bytes(&frame.payload, frame.timestamp(precision), link)
}

/// Decodes a raw frame buffer; `frame_bytes` is taken from the buffer length.
pub fn decode_bytes(bytes: &[u8], timestamp: Timestamp, link: LinkType) -> Result<Decoded<'_>, DecodeError> {
    let ip = match link {
        LinkType::Ethernet => match strip_ethernet(bytes) {
            Ok(ip) => ip,
            Err(reason) => return Ok(Decoded::Skipped(reason)),
        },
        LinkType::RawIp => {
            if bytes.first().map(|b| b >> 4) == Some(6) {
                return Ok(Decoded::Skipped(SkipReason::Ipv6));
            }
            bytes
        }
        LinkType::Other(_) => return Ok(Decoded::Skipped(SkipReason::UnsupportedLinkType)),
    };

    if ip.len() < IPV4_MIN_HEADER_LEN {
        return Err(DecodeError::MalformedIpHeader("shorter than 20 bytes"));
    }
    if ip[0] >> 4 != 4 {
        return Err(DecodeError::MalformedIpHeader("version is not 4"));
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < IPV4_MIN_HEADER_LEN {
        return Err(DecodeError::MalformedIpHeader("IHL below 5"));
    }
    if ihl > ip.len() {
        return Err(DecodeError::MalformedIpHeader("header exceeds captured bytes"));
    }
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if total_len < ihl {
        return Err(DecodeError::MalformedIpHeader("total length below header length"));
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x1fff != 0 {
        return Ok(Decoded::Skipped(SkipReason::Fragment));
    }
    let protocol = ip[9];
    if protocol != IPPROTO_UDP {
        return Ok(Decoded::Skipped(SkipReason::NonUdp));
    }
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    // Ethernet padding past the IP total length is not payload; snaplen
    // truncation can leave fewer bytes than the total length declares.
    let ip_end = total_len.min(ip.len());
    let udp = &ip[ihl..ip_end];
    if udp.len() < UDP_HEADER_LEN {
        return Ok(Decoded::Skipped(SkipReason::TruncatedUdp));
    }
    let src_port = u16::from_be_bytes([udp[0], udp[1]]);
    let dst_port = u16::from_be_bytes([udp[2], udp[3]]);
    let udp_len = usize::from(u16::from_be_bytes([udp[4], udp[5]]));
    let payload_end = if udp_len >= UDP_HEADER_LEN {
        udp_len.min(udp.len())
    } else {
        udp.len()
    };

    Ok(Decoded::Packet(PacketRecord {
        timestamp,
        src_ip,
        dst_ip,
        protocol,
        src_port,
        dst_port,
        frame_bytes: bytes.len() as u32,
        udp_payload: &udp[UDP_HEADER_LEN..payload_end],
    }))
}

fn strip_ethernet(bytes: &[u8]) -> Result<&[u8], SkipReason> {
    if bytes.len() < ETHERNET_HEADER_LEN {
        return Err(SkipReason::TruncatedLink);
    }
    let mut offset = 12;
    let mut ethertype = u16::from_be_bytes([bytes[offset], bytes[offset + 1]]);
    // Up to two stacked VLAN tags.
    for _ in 0..2 {
        if ethertype != ETHERTYPE_VLAN && ethertype != ETHERTYPE_QINQ {
            break;
        }
        offset += 4;
        if bytes.len() < offset + 2 {
            return Err(SkipReason::TruncatedLink);
        }
        ethertype = u16::from_be_bytes([bytes[offset], bytes[offset + 1]]);
    }
    match ethertype {
        ETHERTYPE_IPV4 => Ok(&bytes[offset + 2..]),
        ETHERTYPE_ARP => Err(SkipReason::Arp),
        ETHERTYPE_IPV6 => Err(SkipReason::Ipv6),
        _ => Err(SkipReason::OtherEthertype),
    }
}
