//! 128-bit identifiers for classes (CLSIDs) and interfaces (IIDs).
//!
//! A [`Guid`] is sixteen raw octets. The canonical text form is the braced,
//! uppercase, 8-4-4-4-12 grouping, e.g.
//! `{C56A4180-65AA-42EC-A945-5FD21DEC0538}`. Parsing is lenient about case
//! and braces; formatting always produces the canonical form.

use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng, TryRngCore};

use crate::error::{ComError, Result};

/// Length of the canonical text rendering, braces included.
pub const CANONICAL_LEN: usize = 38;

/// Hyphen offsets inside the brace-less 36 character form.
const HYPHENS: [usize; 4] = [8, 13, 18, 23];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Guid([u8; 16]);

impl Guid {
    pub const NIL: Guid = Guid([0; 16]);

    pub const fn from_bytes(octets: [u8; 16]) -> Guid {
        Guid(octets)
    }

    /// Builds a Guid whose octets are the big-endian bytes of `v`.
    pub const fn from_u128(v: u128) -> Guid {
        Guid(v.to_be_bytes())
    }

    pub const fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn parse(text: &str) -> Result<Guid> {
        let malformed = || ComError::MalformedGuid(text.to_owned());
        let inner = match (text.strip_prefix('{'), text.ends_with('}')) {
            (Some(rest), true) => &rest[..rest.len() - 1],
            (None, false) => text,
            _ => return Err(malformed()),
        };
        let raw = inner.as_bytes();
        if raw.len() != 36 {
            return Err(malformed());
        }
        let mut octets = [0u8; 16];
        let mut nibbles = 0usize;
        for (i, &c) in raw.iter().enumerate() {
            if HYPHENS.contains(&i) {
                if c != b'-' {
                    return Err(malformed());
                }
                continue;
            }
            let v = (c as char).to_digit(16).ok_or_else(malformed)? as u8;
            octets[nibbles / 2] |= if nibbles.is_multiple_of(2) { v << 4 } else { v };
            nibbles += 1;
        }
        Ok(Guid(octets))
    }

    /// A fresh random identifier from the OS entropy source, with the
    /// version nibble set to 4 and the RFC 4122 variant bits.
    pub fn new_unique() -> Result<Guid> {
        let mut octets = [0u8; 16];
        rand::rngs::OsRng
            .try_fill_bytes(&mut octets)
            .map_err(|_| ComError::RandomnessUnavailable)?;
        Ok(Guid::stamp_v4(octets))
    }

    fn stamp_v4(mut octets: [u8; 16]) -> Guid {
        octets[6] = (octets[6] & 0x0F) | 0x40;
        octets[8] = (octets[8] & 0x3F) | 0x80;
        Guid(octets)
    }
}

/// Deterministic source of v4 identifiers, for reproducible runs and tests.
pub struct GuidGenerator {
    rng: StdRng,
}

impl GuidGenerator {
    pub fn from_seed(seed: u64) -> GuidGenerator {
        GuidGenerator {
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn next_guid(&mut self) -> Guid {
        let mut octets = [0u8; 16];
        self.rng.fill_bytes(&mut octets);
        Guid::stamp_v4(octets)
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.0;
        write!(
            f,
            "{{{:02X}{:02X}{:02X}{:02X}-{:02X}{:02X}-{:02X}{:02X}-{:02X}{:02X}-",
            o[0], o[1], o[2], o[3], o[4], o[5], o[6], o[7], o[8], o[9]
        )?;
        for b in &o[10..] {
            write!(f, "{b:02X}")?;
        }
        f.write_str("}")
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Guid {
    type Err = ComError;

    fn from_str(s: &str) -> Result<Guid> {
        Guid::parse(s)
    }
}
