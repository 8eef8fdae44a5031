//! Time tags and their on-disk formats.
//!
//! Binary `QTT1` layout (little-endian): the 4-byte magic, a `u32` tag
//! resolution in ps, then 9-byte records `{u8 detector, u64 time_ps}`.
//! The CSV mirror has the header `detector,time_ps`; lines starting with
//! `#` are comments.

use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockoptics::BsmDetector;

pub const QTT_MAGIC: &[u8; 4] = b"QTT1";

/// Detector channels: D1..D4 at the BSM, D5/D6 at Bob, and the herald.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Detector {
    D1 = 0,
    D2 = 1,
    D3 = 2,
    D4 = 3,
    D5 = 4,
    D6 = 5,
    Trig = 6,
}

impl Detector {
    pub const ALL: [Detector; 7] = [Self::D1, Self::D2, Self::D3, Self::D4, Self::D5, Self::D6, Self::Trig];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown detector id {id}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::D1 => "D1",
            Self::D2 => "D2",
            Self::D3 => "D3",
            Self::D4 => "D4",
            Self::D5 => "D5",
            Self::D6 => "D6",
            Self::Trig => "TRIG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|d| d.label().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Format(format!("unknown detector '{t}'")))
    }

    pub fn bsm(self) -> Option<BsmDetector> {
        match self {
            Self::D1 => Some(BsmDetector::D1),
            Self::D2 => Some(BsmDetector::D2),
            Self::D3 => Some(BsmDetector::D3),
            Self::D4 => Some(BsmDetector::D4),
            _ => None,
        }
    }

    pub fn is_bob(self) -> bool {
        matches!(self, Self::D5 | Self::D6)
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One detector click. Streams are ordered by time, then detector id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeTag {
    pub time_ps: u64,
    pub detector: Detector,
}

impl TimeTag {
    pub fn new(detector: Detector, time_ps: u64) -> Self {
        Self { time_ps, detector }
    }
}

pub fn is_sorted(tags: &[TimeTag]) -> bool {
    tags.windows(2).all(|w| w[0] <= w[1])
}

pub fn write_qtt<W: Write>(mut w: W, resolution_ps: u32, tags: &[TimeTag]) -> Result<()> {
    w.write_all(QTT_MAGIC)?;
    w.write_all(&resolution_ps.to_le_bytes())?;
    for t in tags {
        w.write_all(&[t.detector.id()])?;
        w.write_all(&t.time_ps.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the stream resolution and the tags.
pub fn read_qtt<R: Read>(mut r: R) -> Result<(u32, Vec<TimeTag>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != QTT_MAGIC {
        return Err(Error::Format("missing QTT1 magic".into()));
    }
    let res = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    let body = &buf[8..];
    if body.len() % 9 != 0 {
        return Err(Error::Format(format!("truncated tag record ({} trailing bytes)", body.len() % 9)));
    }
    let tags = body
        .chunks_exact(9)
        .map(|rec| {
            let det = Detector::from_id(rec[0])?;
            let t = u64::from_le_bytes(rec[1..9].try_into().expect("8 bytes"));
            Ok(TimeTag::new(det, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((res, tags))
}

pub fn write_tags_csv<W: Write>(mut w: W, comment: Option<&str>, tags: &[TimeTag]) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "detector,time_ps")?;
    for t in tags {
        writeln!(w, "{},{}", t.detector, t.time_ps)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tags_csv<R: BufRead>(r: R) -> Result<Vec<TimeTag>> {
    let mut out = Vec::new();
    let mut header = false;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line.replace(' ', "") != "detector,time_ps" {
                return Err(Error::Format(format!("line {}: expected header 'detector,time_ps'", n + 1)));
            }
            header = true;
            continue;
        }
        let (d, t) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected 'detector,time_ps'", n + 1)))?;
        let t: u64 = t
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad time '{t}': {e}", n + 1)))?;
        out.push(TimeTag::new(Detector::parse(d)?, t));
    }
    if !header {
        return Err(Error::Format("empty tag CSV".into()));
    }
    Ok(out)
}
