//! Split files.
//!
//! ```text
//! "TSKDDATA" u32 version
//! str split_name, str config_echo, u64 seed, u32 vocab_size, u32 sample_rate, u32 count
//! record* : u32 payload_len, payload
//! payload : u32 id, u32 target_spk, u32 interferer_spk, f64 sir_db, f64 snr_db,
//!           u32 n, u32 token*n,
//!           4 x (u32 n, f32 sample*n)   mixture, target+noise, target, enrollment
//! ```
//!
//! Integers and floats are little-endian; signals are stored as `f32`.

use std::fs;
use std::path::Path;

use super::{MixtureRecord, Signal};
use crate::diffcore::checkpoint::{write_str, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSKDDATA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFile {
    pub split: String,
    /// `key = value` lines of the corpus configuration that produced it.
    pub config_echo: String,
    pub seed: u64,
    pub vocab_size: u32,
    pub sample_rate: u32,
    pub records: Vec<MixtureRecord>,
}

fn put_signal(out: &mut Vec<u8>, s: &Signal) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    for &v in &s.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn encode_record(r: &MixtureRecord) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&r.id.to_le_bytes());
    p.extend_from_slice(&r.target_speaker.to_le_bytes());
    p.extend_from_slice(&r.interferer_speaker.to_le_bytes());
    p.extend_from_slice(&r.sir_db.to_le_bytes());
    p.extend_from_slice(&r.snr_db.to_le_bytes());
    p.extend_from_slice(&(r.transcript.len() as u32).to_le_bytes());
    for &t in &r.transcript {
        p.extend_from_slice(&(t as u32).to_le_bytes());
    }
    for s in [&r.mixture, &r.target_plus_noise, &r.target_clean, &r.enrollment] {
        put_signal(&mut p, s);
    }
    p
}

impl SplitFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.split);
        write_str(&mut out, &self.config_echo);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let payload = encode_record(r);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        if r.u32()? != VERSION {
            return Err(r.err("unsupported version"));
        }
        let split = r.string()?;
        let config_echo = r.string()?;
        let seed = r.u64()?;
        let vocab_size = r.u32()?;
        let sample_rate = r.u32()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let start = r.pos;
            let id = r.u32()?;
            let target_speaker = r.u32()?;
            let interferer_speaker = r.u32()?;
            let sir_db = r.f64()?;
            let snr_db = r.f64()?;
            let n = r.u32()? as usize;
            let mut transcript = Vec::with_capacity(n);
            for _ in 0..n {
                transcript.push(r.u32()? as usize);
            }
            let mut signals = Vec::with_capacity(4);
            for _ in 0..4 {
                let n = r.u32()? as usize;
                let mut s = Vec::with_capacity(n);
                for _ in 0..n {
                    s.push(r.f32()? as f64);
                }
                signals.push(Signal::new(s, sample_rate));
            }
            if r.pos - start != len {
                return Err(r.err("record length prefix disagrees with payload"));
            }
            let enrollment = signals.pop().unwrap();
            let target_clean = signals.pop().unwrap();
            let target_plus_noise = signals.pop().unwrap();
            let mixture = signals.pop().unwrap();
            records.push(MixtureRecord {
                id,
                target_speaker,
                interferer_speaker,
                mixture,
                target_plus_noise,
                target_clean,
                enrollment,
                transcript,
                sir_db,
                snr_db,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(SplitFile {
            split,
            config_echo,
            seed,
            vocab_size,
            sample_rate,
            records,
        })
    }
}

pub fn write_split(path: &Path, split: &SplitFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, split.to_bytes())?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format {
            path: path.display().to_string(),
            detail: "file not found".into(),
        },
        _ => Error::Io(e),
    })?;
    SplitFile::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MixtureRecord {
        let s = |v: &[f64]| Signal::new(v.to_vec(), 8000);
        MixtureRecord {
            id: 7,
            target_speaker: 1,
            interferer_speaker: 2,
            mixture: s(&[0.5, -0.25]),
            target_plus_noise: s(&[0.25, 0.0]),
            target_clean: s(&[0.125, 1.0]),
            enrollment: s(&[1.0, 2.0, 3.0]),
            transcript: vec![3, 1, 4],
            sir_db: -2.5,
            snr_db: 10.0,
        }
    }

    #[test]
    fn split_bytes_round_trip() {
        let f = SplitFile {
            split: "dev".into(),
            config_echo: "corpus.vocab_size = 8\n".into(),
            seed: 42,
            vocab_size: 8,
            sample_rate: 8000,
            records: vec![record(), record()],
        };
        let back = SplitFile::from_bytes(&f.to_bytes(), "mem").unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn corrupt_length_prefix_detected() {
        let f = SplitFile {
            split: "dev".into(),
            config_echo: String::new(),
            seed: 1,
            vocab_size: 8,
            sample_rate: 8000,
            records: vec![record()],
        };
        let mut bytes = f.to_bytes();
        // header: 8 magic + 4 version + (4+3) split + 4 echo + 8 seed + 4 + 4 + 4 count
        let off = 8 + 4 + 7 + 4 + 8 + 4 + 4 + 4;
        bytes[off] = bytes[off].wrapping_add(1);
        assert!(SplitFile::from_bytes(&bytes, "mem").is_err());
    }
}
