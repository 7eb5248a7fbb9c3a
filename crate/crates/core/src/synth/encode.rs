//! Wire encoding for generated traffic: DNS queries and Ethernet/IPv4/UDP frames.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::dns::{name_to_labels, QType, DNS_HEADER_LEN, MAX_LABEL_LEN, MAX_NAME_WIRE_LEN};
use crate::packet::{DNS_PORT, ETHERNET_HEADER_LEN, IPV4_MIN_HEADER_LEN, UDP_HEADER_LEN};

/// Ethernet frames shorter than this (FCS excluded) are zero-padded.
pub const ETHERNET_MIN_FRAME: usize = 60;

const DST_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x00, 0x00, 0x01];
const SRC_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x00, 0x00, 0x02];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("invalid domain name {name:?}: {reason}")]
    InvalidName { name: String, reason: &'static str },
}

/// Wire form of a presentation-format name.
pub fn encode_name(qname: &str) -> Result<Vec<u8>, EncodeError> {
    let invalid = |reason| EncodeError::InvalidName {
        name: qname.to_string(),
        reason,
    };
    let labels = name_to_labels(qname).map_err(invalid)?;
    let mut out = Vec::with_capacity(qname.len() + 2);
    for label in labels {
        if label.len() > MAX_LABEL_LEN {
            return Err(invalid("label longer than 63 bytes"));
        }
        out.push(label.len() as u8);
        out.extend_from_slice(&label);
    }
    out.push(0);
    if out.len() > MAX_NAME_WIRE_LEN {
        return Err(invalid("name longer than 255 bytes"));
    }
    Ok(out)
}

/// A single-question, recursion-desired query in class IN.
pub fn encode_dns_query(qname: &str, qtype: QType, txid: u16) -> Result<Vec<u8>, EncodeError> {
    let name = encode_name(qname)?;
    let mut msg = Vec::with_capacity(DNS_HEADER_LEN + name.len() + 4);
    msg.extend_from_slice(&txid.to_be_bytes());
    msg.extend_from_slice(&0x0100u16.to_be_bytes());
    msg.extend_from_slice(&1u16.to_be_bytes());
    msg.extend_from_slice(&[0; 6]);
    msg.extend_from_slice(&name);
    msg.extend_from_slice(&qtype.code().to_be_bytes());
    msg.extend_from_slice(&1u16.to_be_bytes());
    Ok(msg)
}

/// Ethernet II + IPv4 + UDP to port 53 around `dns`, padded to the
/// Ethernet minimum.
pub fn build_query_frame(src: Ipv4Addr, dst: Ipv4Addr, src_port: u16, ip_id: u16, dns: &[u8]) -> Vec<u8> {
    let udp_len = UDP_HEADER_LEN + dns.len();
    let ip_len = IPV4_MIN_HEADER_LEN + udp_len;
    let mut f = Vec::with_capacity((ETHERNET_HEADER_LEN + ip_len).max(ETHERNET_MIN_FRAME));
    f.extend_from_slice(&DST_MAC);
    f.extend_from_slice(&SRC_MAC);
    f.extend_from_slice(&0x0800u16.to_be_bytes());

    let ip_start = f.len();
    f.extend_from_slice(&[0x45, 0x00]);
    f.extend_from_slice(&(ip_len as u16).to_be_bytes());
    f.extend_from_slice(&ip_id.to_be_bytes());
    f.extend_from_slice(&[0x00, 0x00, 64, 17, 0, 0]);
    f.extend_from_slice(&src.octets());
    f.extend_from_slice(&dst.octets());
    let csum = internet_checksum(&[&f[ip_start..ip_start + IPV4_MIN_HEADER_LEN]]);
    f[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

    let udp_start = f.len();
    f.extend_from_slice(&src_port.to_be_bytes());
    f.extend_from_slice(&DNS_PORT.to_be_bytes());
    f.extend_from_slice(&(udp_len as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(dns);
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&src.octets());
    pseudo.extend_from_slice(&dst.octets());
    pseudo.extend_from_slice(&[0, 17]);
    pseudo.extend_from_slice(&(udp_len as u16).to_be_bytes());
    let mut udp_csum = internet_checksum(&[&pseudo, &f[udp_start..]]);
    if udp_csum == 0 {
        udp_csum = 0xffff;
    }
    f[udp_start + 6..udp_start + 8].copy_from_slice(&udp_csum.to_be_bytes());

    if f.len() < ETHERNET_MIN_FRAME {
        f.resize(ETHERNET_MIN_FRAME, 0);
    }
    f
}

fn internet_checksum(parts: &[&[u8]]) -> u16 {
    let mut sum = 0u32;
    let mut odd: Option<u8> = None;
    for part in parts {
        for &b in *part {
            match odd.take() {
                Some(hi) => sum += u32::from(u16::from_be_bytes([hi, b])),
                None => odd = Some(b),
            }
        }
    }
    if let Some(hi) = odd {
        sum += u32::from(u16::from_be_bytes([hi, 0]));
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}
