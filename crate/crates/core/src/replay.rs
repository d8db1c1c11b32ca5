//! Bounded episodic transition queue with contiguous-subsequence sampling.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::envsim::{Action, MetaAction, Observation};
use crate::error::{Error, Result};

/// One environment step in the order the model consumes it: the observation
/// `x_t`, the action `a_{t−1}` that produced it (`None` after a reset), and
/// the reward and continuation flag received on arrival at `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub prev_action: Option<Action>,
    pub reward: f64,
    /// 0 exactly on terminal steps; truncation keeps 1.
    pub continue_flag: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    transitions: Vec<Transition>,
}

impl EpisodeRecord {
    pub fn new(episode_id: u64, transitions: Vec<Transition>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Usage("episode has no transitions".into()));
        }
        if let Some(k) = transitions[..transitions.len() - 1].iter().position(|t| t.continue_flag == 0) {
            return Err(Error::Usage(format!("terminal flag at step {k} before the episode end")));
        }
        Ok(Self { episode_id, transitions })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }
}

/// A sampled window: `len` consecutive transitions of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceRef {
    pub episode_id: u64,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ReplayQueue {
    episodes: VecDeque<EpisodeRecord>,
    capacity: usize,
    min_length: usize,
    total: usize,
}

impl ReplayQueue {
    pub fn new(capacity: usize, min_length: usize) -> Result<Self> {
        if capacity == 0 || min_length == 0 {
            return Err(Error::Config("replay capacity and sequence length must be positive".into()));
        }
        Ok(Self { episodes: VecDeque::new(), capacity, min_length, total: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_length(&self) -> usize {
        self.min_length
    }

    pub fn total_transitions(&self) -> usize {
        self.total
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    pub fn num_eligible(&self) -> usize {
        self.episodes.iter().filter(|e| e.len() >= self.min_length).count()
    }

    pub fn episode(&self, id: u64) -> Option<&EpisodeRecord> {
        self.episodes.iter().find(|e| e.episode_id == id)
    }

    /// Store `episode`, then evict whole episodes from the front until the
    /// capacity holds. Returns the ids evicted; an episode longer than the
    /// whole capacity is evicted itself.
    pub fn append(&mut self, episode: EpisodeRecord) -> Vec<u64> {
        self.total += episode.len();
        self.episodes.push_back(episode);
        let mut evicted = Vec::new();
        while self.total > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.total -= old.len();
            evicted.push(old.episode_id);
        }
        evicted
    }

    /// `batch` windows of length `len`, episode uniform over eligible ones and
    /// start uniform over valid offsets.
    pub fn sample_sequences<R: Rng + ?Sized>(&self, batch: usize, len: usize, rng: &mut R) -> Result<Vec<SequenceRef>> {
        let len = len.max(self.min_length);
        let eligible: Vec<&EpisodeRecord> = self.episodes.iter().filter(|e| e.len() >= len).collect();
        if eligible.is_empty() {
            return Err(Error::EmptyReplay(len));
        }
        Ok((0..batch)
            .map(|_| {
                let ep = eligible[rng.random_range(0..eligible.len())];
                let start = rng.random_range(0..=ep.len() - len);
                SequenceRef { episode_id: ep.episode_id, start, len }
            })
            .collect())
    }

    pub fn window(&self, r: &SequenceRef) -> Result<&[Transition]> {
        let ep = self.episode(r.episode_id).ok_or_else(|| Error::Usage(format!("episode {} not in replay", r.episode_id)))?;
        ep.transitions
            .get(r.start..r.start + r.len)
            .ok_or_else(|| Error::Usage(format!("window {r:?} outside episode of length {}", ep.len())))
    }

    /// Versioned little-endian dump: magic `HWEP`, version, episode count, then
    /// per episode its id, length and length-prefixed transitions.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EPISODE_MAGIC)?;
        w.write_all(&EPISODE_VERSION.to_le_bytes())?;
        w.write_all(&(self.episodes.len() as u32).to_le_bytes())?;
        for ep in &self.episodes {
            w.write_all(&ep.episode_id.to_le_bytes())?;
            w.write_all(&(ep.len() as u32).to_le_bytes())?;
            for t in &ep.transitions {
                let rec = encode_transition(t);
                w.write_all(&(rec.len() as u32).to_le_bytes())?;
                w.write_all(&rec)?;
            }
        }
        Ok(())
    }

    /// Read a dump into a queue with the given bounds (appending in file order).
    pub fn load<R: Read>(r: &mut R, capacity: usize, min_length: usize) -> Result<Self> {
        let mut q = Self::new(capacity, min_length)?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != EPISODE_MAGIC {
            return Err(Error::Format(format!("episode dump magic: expected {EPISODE_MAGIC:?}, found {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != EPISODE_VERSION {
            return Err(Error::Format(format!("episode dump version: expected {EPISODE_VERSION}, found {version}")));
        }
        for _ in 0..read_u32(r)? {
            let mut id = [0u8; 8];
            r.read_exact(&mut id).map_err(truncated)?;
            let n = read_u32(r)? as usize;
            let mut ts = Vec::with_capacity(n);
            for _ in 0..n {
                let size = read_u32(r)? as usize;
                let mut buf = vec![0u8; size];
                r.read_exact(&mut buf).map_err(truncated)?;
                ts.push(decode_transition(&buf)?);
            }
            q.append(EpisodeRecord::new(u64::from_le_bytes(id), ts)?);
        }
        Ok(q)
    }
}

pub const EPISODE_MAGIC: &[u8; 4] = b"HWEP";
pub const EPISODE_VERSION: u32 = 1;

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("episode dump is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn encode_transition(t: &Transition) -> Vec<u8> {
    let img = &t.observation.image;
    let mut out = Vec::with_capacity(img.len() + 48);
    out.extend_from_slice(&(img.len() as u32).to_le_bytes());
    out.extend_from_slice(img);
    out.extend_from_slice(&t.observation.ego_speed.to_le_bytes());
    out.extend_from_slice(&(t.observation.step_index as u32).to_le_bytes());
    match t.prev_action {
        None => out.push(0),
        Some(Action::Continuous { accel, steer }) => {
            out.push(1);
            out.extend_from_slice(&accel.to_le_bytes());
            out.extend_from_slice(&steer.to_le_bytes());
        }
        Some(Action::Meta(m)) => {
            out.push(2);
            out.push(m as u8);
        }
    }
    out.extend_from_slice(&t.reward.to_le_bytes());
    out.push(t.continue_flag);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.buf.get(self.at..self.at + n).ok_or_else(|| Error::Format("transition record is short".into()))?;
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_transition(buf: &[u8]) -> Result<Transition> {
    let mut c = Cursor { buf, at: 0 };
    let n = c.u32()? as usize;
    let image = c.take(n)?.to_vec();
    let ego_speed = c.f64()?;
    let step_index = c.u32()? as usize;
    let prev_action = match c.u8()? {
        0 => None,
        1 => Some(Action::Continuous { accel: c.f64()?, steer: c.f64()? }),
        2 => {
            let k = c.u8()?;
            Some(Action::Meta(MetaAction::from_index(k as usize).ok_or_else(|| Error::Format(format!("meta-action id {k}")))?))
        }
        tag => return Err(Error::Format(format!("action tag {tag}"))),
    };
    let reward = c.f64()?;
    let continue_flag = c.u8()?;
    if c.at != buf.len() {
        return Err(Error::Format("trailing bytes in transition record".into()));
    }
    Ok(Transition { observation: Observation { image, ego_speed, step_index }, prev_action, reward, continue_flag })
}
