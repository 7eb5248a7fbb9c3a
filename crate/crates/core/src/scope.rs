//! The monitored dark address space.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScopeError {
    #[error("invalid CIDR {0:?}")]
    InvalidCidr(String),
    #[error("darknet scope has no prefixes")]
    EmptyScope,
}

/// An IPv4 prefix with host bits clear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ipv4Prefix {
    network: u32,
    len: u8,
}

impl Ipv4Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, ScopeError> {
        let invalid = || ScopeError::InvalidCidr(format!("{addr}/{len}"));
        if len > 32 {
            return Err(invalid());
        }
        let network = u32::from(addr);
        if network & !mask(len) != 0 {
            return Err(invalid());
        }
        Ok(Ipv4Prefix { network, len })
    }

    pub fn network(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network)
    }

    pub fn prefix_len(&self) -> u8 {
        self.len
    }

    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.len))
    }

    pub fn first(&self) -> u32 {
        self.network
    }

    pub fn last(&self) -> u32 {
        self.network | !mask(self.len)
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & mask(self.len) == self.network
    }
}

pub(crate) fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl FromStr for Ipv4Prefix {
    type Err = ScopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || ScopeError::InvalidCidr(s.to_string());
        let (addr, len) = s.trim().split_once('/').ok_or_else(invalid)?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| invalid())?;
        let len: u8 = len.parse().map_err(|_| invalid())?;
        Ipv4Prefix::new(addr, len).map_err(|_| invalid())
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.len)
    }
}

impl Serialize for Ipv4Prefix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Prefix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Union of dark prefixes, stored as sorted, disjoint, non-adjacent
/// inclusive address ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DarknetScope {
    ranges: Vec<(u32, u32)>,
}

impl DarknetScope {
    pub fn from_prefixes(prefixes: &[Ipv4Prefix]) -> Result<Self, ScopeError> {
        if prefixes.is_empty() {
            return Err(ScopeError::EmptyScope);
        }
        let mut spans: Vec<(u32, u32)> = prefixes.iter().map(|p| (p.first(), p.last())).collect();
        spans.sort_unstable();
        let mut ranges: Vec<(u32, u32)> = Vec::with_capacity(spans.len());
        for (lo, hi) in spans {
            match ranges.last_mut() {
                Some(last) if u64::from(lo) <= u64::from(last.1) + 1 => last.1 = last.1.max(hi),
                _ => ranges.push((lo, hi)),
            }
        }
        Ok(DarknetScope { ranges })
    }

    /// Inclusive address ranges after merging.
    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn address_count(&self) -> u64 {
        self.ranges
            .iter()
            .map(|&(lo, hi)| u64::from(hi) - u64::from(lo) + 1)
            .sum()
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        let x = u32::from(ip);
        // Index of the first range starting after x; the candidate precedes it.
        let idx = self.ranges.partition_point(|&(lo, _)| lo <= x);
        idx > 0 && x <= self.ranges[idx - 1].1
    }

    /// The `index`-th covered address in ascending order.
    pub fn nth_address(&self, mut index: u64) -> Option<Ipv4Addr> {
        for &(lo, hi) in &self.ranges {
            let size = u64::from(hi) - u64::from(lo) + 1;
            if index < size {
                return Some(Ipv4Addr::from(lo + index as u32));
            }
            index -= size;
        }
        None
    }
}

pub fn load_scope<S: AsRef<str>>(cidrs: &[S]) -> Result<DarknetScope, ScopeError> {
    let prefixes = cidrs
        .iter()
        .map(|s| s.as_ref().parse())
        .collect::<Result<Vec<Ipv4Prefix>, _>>()?;
    DarknetScope::from_prefixes(&prefixes)
}

pub fn scope_contains(scope: &DarknetScope, ip: Ipv4Addr) -> bool {
    scope.contains(ip)
}
