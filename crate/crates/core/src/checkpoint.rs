//! Binary checkpoints of a [`ModelState`].
//!
//! Layout (little endian): magic, `u32` version, `u64` step, the config as
//! `key = value` text, then named `f64` arrays and named `u64` counters.
//! Entries are written in a fixed order, so decoding and re-encoding a
//! checkpoint reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use dehaze_tensor::{AdamState, ParamSet, RunningStats};

use crate::config::RunConfig;
use crate::error::{DehazeError, Result};
use crate::train::ModelState;

pub const MAGIC: &[u8; 8] = b"DHZCKPT\n";
pub const VERSION: u32 = 1;

type Array<'a> = (String, Vec<usize>, &'a mut [f64]);

fn network<'a>(
    prefix: &str,
    params: &'a mut ParamSet,
    stats: &'a mut [RunningStats],
    adam: &'a mut AdamState,
    arrays: &mut Vec<Array<'a>>,
    counters: &mut Vec<(String, &'a mut u64)>,
) {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in params.iter_mut() {
        let shape = t.shape().to_vec();
        arrays.push((format!("{prefix}/param/{name}"), shape, t.data_mut()));
    }
    for (i, s) in stats.iter_mut().enumerate() {
        let c = s.mean.len();
        arrays.push((format!("{prefix}/bn/{i}/mean"), vec![c], &mut s.mean));
        arrays.push((format!("{prefix}/bn/{i}/var"), vec![c], &mut s.var));
    }
    for (which, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
        for (name, t) in names.iter().zip(moments.iter_mut()) {
            let shape = t.shape().to_vec();
            arrays.push((format!("{prefix}/adam/{which}/{name}"), shape, t.data_mut()));
        }
    }
    counters.push((format!("{prefix}/adam/t"), &mut adam.t));
}

fn entries(state: &mut ModelState) -> (Vec<Array<'_>>, Vec<(String, &mut u64)>) {
    let mut arrays = Vec::new();
    let mut counters = Vec::new();
    let g = &mut state.generator;
    network("g", &mut g.params, &mut g.stats, &mut state.g_adam, &mut arrays, &mut counters);
    for slot in state.discs.iter_mut() {
        let prefix = format!("d/{}", slot.disc.kind().name());
        network(&prefix, &mut slot.disc.params, &mut slot.disc.stats, &mut slot.adam, &mut arrays, &mut counters);
    }
    (arrays, counters)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut copy = state.clone();
    let (arrays, counters) = entries(&mut copy);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    put_str(&mut out, &state.config.to_text());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in &arrays {
        put_str(&mut out, name);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(counters.len() as u32).to_le_bytes());
    for (name, v) in &counters {
        put_str(&mut out, name);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DehazeError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DehazeError::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(DehazeError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DehazeError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let mut config = RunConfig::default();
    config.apply_text(&r.string()?)?;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| DehazeError::Checkpoint(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        stored.insert(name, (shape, data));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        counts.insert(name, r.u64()?);
    }
    if r.pos != bytes.len() {
        return Err(DehazeError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut state = ModelState::new(config)?;
    state.step = step;
    let (arrays, counters) = entries(&mut state);
    let mut expected = 0;
    for (name, shape, data) in arrays {
        let (s, d) = stored.remove(&name).ok_or_else(|| DehazeError::Checkpoint(format!("missing entry {name}")))?;
        if s != shape {
            return Err(DehazeError::Checkpoint(format!("{name}: stored shape {s:?}, model expects {shape:?}")));
        }
        data.copy_from_slice(&d);
        expected += 1;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(DehazeError::Checkpoint(format!("unexpected entry {extra} ({expected} expected)")));
    }
    for (name, slot) in counters {
        *slot = counts.remove(&name).ok_or_else(|| DehazeError::Checkpoint(format!("missing counter {name}")))?;
    }
    if let Some(extra) = counts.keys().next() {
        return Err(DehazeError::Checkpoint(format!("unexpected counter {extra}")));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)).map_err(|e| DehazeError::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| DehazeError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DehazeError::Checkpoint(msg) => DehazeError::Format { path: path.to_path_buf(), msg },
        other => other,
    })
}
