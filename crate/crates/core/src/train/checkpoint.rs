//! Binary checkpoint file.
//!
//! Layout (little-endian): `"SRPC"`, `u32` version, then the payload:
//! `u32` JSON length and the UTF-8 JSON header (config echo, step counters,
//! random-stream positions), `u32` entry count and the entries (`u32` name
//! length, name, `u32` rank, `u32` extents, `f32` values). A CRC32 of the
//! payload closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 7] = [
    "student",
    "projector",
    "ema",
    "adam.student.m",
    "adam.student.v",
    "adam.projector.m",
    "adam.projector.v",
];

/// Word positions of the four training random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamState {
    #[serde(with = "u128_text")]
    pub data: u128,
    #[serde(with = "u128_text")]
    pub noise: u128,
    #[serde(with = "u128_text")]
    pub time: u128,
    #[serde(with = "u128_text")]
    pub dropout: u128,
}

mod u128_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    streams: StreamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_step: u64,
    pub streams: StreamState,
    pub student: ParamSet<f32>,
    pub projector: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub adam_student: (ParamSet<f32>, ParamSet<f32>),
    pub adam_projector: (ParamSet<f32>, ParamSet<f32>),
}

impl Checkpoint {
    fn groups(&self) -> [&ParamSet<f32>; 7] {
        [
            &self.student,
            &self.projector,
            &self.ema,
            &self.adam_student.0,
            &self.adam_student.1,
            &self.adam_projector.0,
            &self.adam_projector.1,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.adam_step,
            streams: self.streams,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut payload = Vec::new();
        put_u32(&mut payload, json.len());
        payload.extend_from_slice(&json);
        let count: usize = self.groups().iter().map(|g| g.len()).sum();
        put_u32(&mut payload, count);
        for (group, set) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in set.iter() {
                let full = format!("{group}/{name}");
                put_u32(&mut payload, full.len());
                payload.extend_from_slice(full.as_bytes());
                put_u32(&mut payload, t.rank());
                for &d in t.shape() {
                    put_u32(&mut payload, d);
                }
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 12);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: usize, reason: String| Error::Format { offset, reason };
        if bytes.len() < 12 {
            return Err(fail(bytes.len(), "file too short for a checkpoint".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic, expected \"SRPC\"".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let crc_at = bytes.len() - 4;
        let payload = &bytes[8..crc_at];
        let stored = u32::from_le_bytes(bytes[crc_at..].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(fail(crc_at, "CRC32 mismatch; file is corrupted or truncated".into()));
        }

        let mut r = Reader {
            bytes: payload,
            pos: 0,
            base: 8,
        };
        let json_len = r.u32("header length")?;
        let json = r.take(json_len, "header")?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| fail(12, format!("malformed header JSON: {e}")))?;
        let count = r.u32("entry count")?;
        let mut sets: Vec<ParamSet<f32>> = vec![ParamSet::default(); GROUPS.len()];
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| fail(at, "entry name is not UTF-8".into()))?;
            let (group, local) = name
                .split_once('/')
                .ok_or_else(|| fail(at, format!("entry '{name}' has no group prefix")))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| fail(at, format!("unknown entry group '{group}'")))?;
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
            let n = crate::tensor::numel(&shape);
            let raw = r.take(n.checked_mul(4).ok_or_else(|| fail(at, "entry too large".into()))?, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| fail(at, e.to_string()))?;
            if sets[gi].get(local).is_some() {
                return Err(fail(at, format!("duplicate entry '{name}'")));
            }
            sets[gi].push(local, tensor);
        }
        if r.pos != payload.len() {
            return Err(fail(r.offset(), "trailing bytes after entry table".into()));
        }
        let mut it = sets.into_iter();
        let mut next = || it.next().expect("seven groups");
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            adam_step: header.adam_step,
            streams: header.streams,
            student: next(),
            projector: next(),
            ema: next(),
            adam_student: (next(), next()),
            adam_projector: (next(), next()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| e.context(format!("checkpoint {}", path.display())))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::Format {
                offset: self.offset(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    }
}
