//! Binary checkpoint format.
//!
//! ```text
//! "PLYL"  u32 version
//! u32 count, then per parameter: u32 name_len, name, u32 rank, u32 dims…, f64 values…
//! u32 count, then the optimizer moments in the same layout ("adam.m.<name>", "adam.v.<name>")
//! u64 seed, u8 phase, u8 completed, u64 step, u64 adam_t, f64 best, u64 since_best
//! u32 config_len, model configuration as JSON
//! u32 rows, then per log row: u64 step, u8 phase, f64 × 5
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AdamState, LogRow, TrainState};
use crate::error::{PolyglotError, Result};
use crate::losses::LossTerms;
use crate::model::{ModelConfig, PolyglotModel};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLYL";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn blob(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated checkpoint: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()?;
        self.take(n)
    }
    fn blob(&mut self) -> std::result::Result<(String, Tensor), String> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let raw = self.take(n.checked_mul(8).ok_or("shape overflows")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        Ok((name, t))
    }
}

/// Serialized checkpoint bytes.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let store = state.model.store();
    w.u32(store.len());
    for (_, name, value) in store.iter() {
        w.blob(name, value);
    }
    w.u32(2 * store.len());
    for (kind, moments) in [("m", &state.adam.m), ("v", &state.adam.v)] {
        for ((_, name, _), t) in store.iter().zip(moments) {
            w.blob(&format!("adam.{kind}.{name}"), t);
        }
    }
    w.u64(state.seed);
    w.u8(state.phase);
    w.u8(state.completed);
    w.u64(state.step as u64);
    w.u64(state.adam.t);
    w.f64(state.best);
    w.u64(state.since_best as u64);
    w.bytes(serde_json::to_string(state.model.config()).expect("serializable config").as_bytes());
    w.u32(state.log.len());
    for row in &state.log {
        w.u64(row.step as u64);
        w.u8(row.phase);
        for v in [row.terms.mse, row.terms.contrast, row.terms.cycle, row.terms.poly, row.total] {
            w.f64(v);
        }
    }
    w.0
}

/// Parses checkpoint bytes into a fresh state.
pub fn decode(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let mut values = ParamStore::new();
    for _ in 0..r.u32()? {
        let (name, t) = r.blob()?;
        if values.id(&name).is_some() {
            return Err(format!("duplicate parameter {name}"));
        }
        values.add(name, t);
    }
    let n_moments = r.u32()?;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        moments.push(r.blob()?);
    }
    let seed = r.u64()?;
    let phase = r.u8()?;
    let completed = r.u8()?;
    let step = r.u64()? as usize;
    let adam_t = r.u64()?;
    let best = r.f64()?;
    let since_best = r.u64()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| format!("model configuration: {e}"))?;
    let mut log = Vec::new();
    for _ in 0..r.u32()? {
        let step = r.u64()? as usize;
        let phase = r.u8()?;
        let mut v = [0.0; 5];
        for x in &mut v {
            *x = r.f64()?;
        }
        let terms = LossTerms { mse: v[0], contrast: v[1], cycle: v[2], poly: v[3] };
        log.push(LogRow { step, phase, terms, total: v[4] });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
    }
    let model = PolyglotModel::from_values(config, &values).map_err(|e| e.to_string())?;
    let store = model.store();
    if n_moments != 2 * store.len() {
        return Err(format!("expected {} optimizer moments, found {n_moments}", 2 * store.len()));
    }
    let mut adam = AdamState::new(store);
    adam.t = adam_t;
    for (i, (name, t)) in moments.into_iter().enumerate() {
        let (kind, slot) = if i < store.len() { ("m", &mut adam.m) } else { ("v", &mut adam.v) };
        let p = i % store.len();
        let expected = format!("adam.{kind}.{}", store.name(crate::params::ParamId::from_index(p)));
        if name != expected || t.shape() != slot[p].shape() {
            return Err(format!("optimizer moment {name} does not match parameter layout"));
        }
        slot[p] = t;
    }
    if phase > 3 || completed > phase {
        return Err(format!("invalid phase record {phase}/{completed}"));
    }
    Ok(TrainState { model, adam, seed, phase, completed, step, best, since_best, log })
}

/// Writes `state` atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| PolyglotError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| PolyglotError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PolyglotError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PolyglotError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| PolyglotError::io(path, e))?;
    decode(&bytes).map_err(|m| PolyglotError::format(path, m))
}
