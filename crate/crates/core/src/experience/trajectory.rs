//! Episode-structured learning trajectories and their on-disk format.
//!
//! File layout (`LTRJ`): magic, version (u16 LE), metadata block, episode
//! count (u64 LE), then per episode a length-prefixed event array followed by
//! its CRC32. Trajectories round-trip bit-exactly; corruption is detected per
//! episode.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::env::{EnvAction, ACTION_DIM};

const MAGIC: &[u8; 4] = b"LTRJ";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error in {section}: {source}")]
    Io {
        section: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"LTRJ\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported trajectory version {found}")]
    UnsupportedVersion { found: u16 },
    #[error("truncated file while reading {section}")]
    Truncated { section: String },
    #[error("episode {episode} checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch {
        episode: usize,
        stored: u32,
        computed: u32,
    },
    #[error("episode has {got} events, expected exactly {expected}")]
    WrongEpisodeLength { expected: usize, got: usize },
    #[error("episode already holds {len} events; close it before recording more")]
    EpisodeFull { len: usize },
    #[error("cannot write a record with an unclosed episode of {len} events")]
    UnclosedEpisode { len: usize },
    #[error("invalid UTF-8 in {section}")]
    BadString { section: String },
    #[error("invalid action in {section}: {source}")]
    BadAction {
        section: String,
        #[source]
        source: crate::env::EnvError,
    },
}

fn io_err(section: &str) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        section: section.to_string(),
        source,
    }
}

/// One time step as the modelling agent records it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub obs: Vec<f64>,
    pub action: EnvAction,
    pub reward: f64,
    pub opp_action: EnvAction,
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opp_obs: Option<Vec<f64>>,
}

impl Event {
    /// Flat vector [obs, action, reward, opp_action, done] consumed by the
    /// episode summariser. The opponent observation is never part of it.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obs.len() + 2 * ACTION_DIM + 2);
        out.extend_from_slice(&self.obs);
        out.extend_from_slice(self.action.weights());
        out.push(self.reward);
        out.extend_from_slice(self.opp_action.weights());
        out.push(if self.done { 1.0 } else { 0.0 });
        out
    }

    pub fn flat_dim(obs_dim: usize) -> usize {
        obs_dim + 2 * ACTION_DIM + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub episode_len: usize,
}

/// A full learning trajectory: ordered episodes of exactly `episode_len`
/// events each, with an explicit in-progress episode buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub meta: TrajectoryMeta,
    episodes: Vec<Vec<Event>>,
    current: Vec<Event>,
}

impl TrajectoryRecord {
    pub fn new(meta: TrajectoryMeta) -> Self {
        Self {
            meta,
            episodes: Vec::new(),
            current: Vec::new(),
        }
    }

    pub fn record_event(&mut self, event: Event) -> Result<(), StoreError> {
        if self.current.len() >= self.meta.episode_len {
            return Err(StoreError::EpisodeFull {
                len: self.current.len(),
            });
        }
        self.current.push(event);
        Ok(())
    }

    pub fn close_episode(&mut self) -> Result<(), StoreError> {
        if self.current.len() != self.meta.episode_len {
            return Err(StoreError::WrongEpisodeLength {
                expected: self.meta.episode_len,
                got: self.current.len(),
            });
        }
        self.episodes.push(std::mem::take(&mut self.current));
        Ok(())
    }

    pub fn episodes(&self) -> &[Vec<Event>] {
        &self.episodes
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn total_events(&self) -> usize {
        self.episodes.len() * self.meta.episode_len
    }

    pub fn open_events(&self) -> usize {
        self.current.len()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.episodes.first().map(|ep| ep[0].obs.len())
    }
}

// ---- binary encoding ----

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_vec(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f64s(out, values);
}

fn encode_event(out: &mut Vec<u8>, event: &Event) {
    put_vec(out, &event.obs);
    put_f64s(out, event.action.weights());
    out.extend_from_slice(&event.reward.to_le_bytes());
    put_f64s(out, event.opp_action.weights());
    out.push(u8::from(event.done));
    match &event.opp_obs {
        Some(obs) => {
            out.push(1);
            put_vec(out, obs);
        }
        None => out.push(0),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.buf.len() {
            return Err(StoreError::Truncated {
                section: section.to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, section: &str) -> Result<u8, StoreError> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f64(&mut self, section: &str) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, section: &str) -> Result<Vec<f64>, StoreError> {
        let raw = self.take(n * 8, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vec(&mut self, section: &str) -> Result<Vec<f64>, StoreError> {
        let n = self.u32(section)? as usize;
        self.f64s(n, section)
    }

    fn action(&mut self, section: &str) -> Result<EnvAction, StoreError> {
        let raw = self.f64s(ACTION_DIM, section)?;
        EnvAction::from_distribution(&raw).map_err(|source| StoreError::BadAction {
            section: section.to_string(),
            source,
        })
    }

    fn string(&mut self, section: &str) -> Result<String, StoreError> {
        let len = self.u32(section)? as usize;
        let raw = self.take(len, section)?;
        String::from_utf8(raw.to_vec()).map_err(|_| StoreError::BadString {
            section: section.to_string(),
        })
    }
}

fn decode_event(r: &mut Reader<'_>, section: &str) -> Result<Event, StoreError> {
    let obs = r.vec(section)?;
    let action = r.action(section)?;
    let reward = r.f64(section)?;
    let opp_action = r.action(section)?;
    let done = r.u8(section)? != 0;
    let opp_obs = if r.u8(section)? != 0 {
        Some(r.vec(section)?)
    } else {
        None
    };
    Ok(Event {
        obs,
        action,
        reward,
        opp_action,
        done,
        opp_obs,
    })
}

/// Writes one record to a `.ltrj` file. Unclosed episodes are rejected.
pub fn store_write(path: &Path, record: &TrajectoryRecord) -> Result<(), StoreError> {
    if !record.current.is_empty() {
        return Err(StoreError::UnclosedEpisode {
            len: record.current.len(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = &record.meta;
    out.extend_from_slice(&(meta.run_id.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.run_id.as_bytes());
    out.extend_from_slice(&(meta.variant.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.variant.as_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&(meta.episode_len as u64).to_le_bytes());
    out.extend_from_slice(&(record.episodes.len() as u64).to_le_bytes());
    for episode in &record.episodes {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(episode.len() as u64).to_le_bytes());
        for event in episode {
            encode_event(&mut payload, event);
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err("create"))?;
    file.write_all(&out).map_err(io_err("write"))?;
    Ok(())
}

/// Reads one record, validating magic, version and per-episode checksums.
pub fn store_read(path: &Path) -> Result<TrajectoryRecord, StoreError> {
    let bytes = fs::read(path).map_err(io_err(&format!("read {}", path.display())))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion { found: version });
    }
    let run_id = r.string("meta.run_id")?;
    let variant = r.string("meta.variant")?;
    let seed = r.u64("meta.seed")?;
    let episode_len = r.u64("meta.episode_len")? as usize;
    let episode_count = r.u64("episode count")? as usize;
    let mut record = TrajectoryRecord::new(TrajectoryMeta {
        run_id,
        variant,
        seed,
        episode_len,
    });
    for episode in 0..episode_count {
        let section = format!("episode {episode}");
        let payload_len = r.u64(&section)? as usize;
        let payload = r.take(payload_len, &section)?;
        let stored = r.u32(&section)?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(StoreError::ChecksumMismatch {
                episode,
                stored,
                computed,
            });
        }
        let mut er = Reader {
            buf: payload,
            pos: 0,
        };
        let event_count = er.u64(&section)? as usize;
        if event_count != episode_len {
            return Err(StoreError::WrongEpisodeLength {
                expected: episode_len,
                got: event_count,
            });
        }
        for _ in 0..event_count {
            record.record_event(decode_event(&mut er, &section)?)?;
        }
        record.close_episode()?;
    }
    Ok(record)
}

/// Writes a record as JSON Lines, one event per line. Floats render in the
/// shortest form that round-trips, so the export loses nothing in practice.
pub fn export_jsonl<W: Write>(record: &TrajectoryRecord, mut out: W) -> Result<(), StoreError> {
    #[derive(Serialize)]
    struct Line<'a> {
        episode: usize,
        step: usize,
        #[serde(flatten)]
        event: &'a Event,
    }
    for (episode, events) in record.episodes.iter().enumerate() {
        for (step, event) in events.iter().enumerate() {
            let line = Line {
                episode,
                step,
                event,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| StoreError::Io {
                section: "jsonl".to_string(),
                source: io::Error::new(io::ErrorKind::Other, e),
            })?;
            out.write_all(b"\n").map_err(io_err("jsonl"))?;
        }
    }
    Ok(())
}

/// A directory-backed collection of trajectory records.
#[derive(Debug, Default)]
pub struct TrajectoryStore {
    records: Vec<TrajectoryRecord>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TrajectoryRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record_path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("traj_{index:04}.ltrj"))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir).map_err(io_err("create dir"))?;
        for (index, record) in self.records.iter().enumerate() {
            store_write(&Self::record_path(dir, index), record)?;
        }
        Ok(())
    }

    /// Loads every `.ltrj` file in a directory, sorted by file name.
    pub fn read_dir(dir: &Path) -> Result<Self, StoreError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(&format!("read dir {}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ltrj"))
            .collect();
        paths.sort();
        let mut store = Self::new();
        for path in paths {
            store.push(store_read(&path)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(episode_len: usize) -> TrajectoryMeta {
        TrajectoryMeta {
            run_id: "test".to_string(),
            variant: "maddpg".to_string(),
            seed: 9,
            episode_len,
        }
    }

    fn event(value: f64, done: bool) -> Event {
        Event {
            obs: vec![value, -value, 0.5 * value],
            action: EnvAction::one_hot((value as usize) % 5),
            reward: value * 0.1,
            opp_action: EnvAction::uniform(),
            done,
            opp_obs: Some(vec![value + 1.0, value + 2.0]),
        }
    }

    fn filled_record(episodes: usize, t: usize) -> TrajectoryRecord {
        let mut record = TrajectoryRecord::new(meta(t));
        for e in 0..episodes {
            for step in 0..t {
                record
                    .record_event(event((e * t + step) as f64, step == t - 1))
                    .unwrap();
            }
            record.close_episode().unwrap();
        }
        record
    }

    #[test]
    fn recording_a_full_episode_bumps_the_count() {
        let mut record = TrajectoryRecord::new(meta(25));
        for step in 0..25 {
            record.record_event(event(step as f64, step == 24)).unwrap();
        }
        record.close_episode().unwrap();
        assert_eq!(record.episode_count(), 1);
        assert_eq!(record.total_events(), 25);
    }

    #[test]
    fn closing_a_short_episode_errors() {
        let mut record = TrajectoryRecord::new(meta(25));
        for step in 0..24 {
            record.record_event(event(step as f64, false)).unwrap();
        }
        let err = record.close_episode().unwrap_err();
        assert!(matches!(
            err,
            StoreError::WrongEpisodeLength { expected: 25, got: 24 }
        ));
    }

    #[test]
    fn overlong_episode_errors_on_record() {
        let mut record = TrajectoryRecord::new(meta(2));
        record.record_event(event(0.0, false)).unwrap();
        record.record_event(event(1.0, true)).unwrap();
        let err = record.record_event(event(2.0, false)).unwrap_err();
        assert!(matches!(err, StoreError::EpisodeFull { len: 2 }));
    }

    #[test]
    fn empty_record_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ltrj");
        let record = TrajectoryRecord::new(meta(25));
        store_write(&path, &record).unwrap();
        assert_eq!(store_read(&path).unwrap(), record);
    }

    #[test]
    fn three_episode_record_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ltrj");
        let record = filled_record(3, 4);
        store_write(&path, &record).unwrap();
        assert_eq!(store_read(&path).unwrap(), record);
    }

    #[test]
    fn thousand_episode_record_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.ltrj");
        let record = filled_record(1000, 5);
        store_write(&path, &record).unwrap();
        assert_eq!(store_read(&path).unwrap(), record);
    }

    #[test]
    fn payload_byte_flip_trips_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ltrj");
        store_write(&path, &filled_record(2, 3)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // flip a bit deep inside the first episode payload
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = store_read(&path).unwrap_err();
        assert!(
            matches!(err, StoreError::ChecksumMismatch { .. } | StoreError::BadAction { .. }),
            "{err}"
        );
    }

    #[test]
    fn unclosed_episode_refuses_to_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = filled_record(1, 3);
        record.record_event(event(7.0, false)).unwrap();
        let err = store_write(&dir.path().join("x.ltrj"), &record).unwrap_err();
        assert!(matches!(err, StoreError::UnclosedEpisode { len: 1 }));
    }

    #[test]
    fn store_dir_roundtrip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TrajectoryStore::new();
        for k in 0..3 {
            let mut r = filled_record(2, 3);
            r.meta.seed = k;
            store.push(r);
        }
        store.write_dir(dir.path()).unwrap();
        let loaded = TrajectoryStore::read_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.records().iter().zip(store.records()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn jsonl_export_emits_one_line_per_event() {
        let record = filled_record(2, 3);
        let mut out = Vec::new();
        export_jsonl(&record, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["episode"], 0);
        assert_eq!(first["step"], 0);
        assert!(first["obs"].is_array());
        // float text parses back to the identical bits
        let reward = first["reward"].as_f64().unwrap();
        assert_eq!(reward.to_bits(), record.episodes()[0][0].reward.to_bits());
    }
}
