//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PPPCCKPT" | version u32 | config hash (str) | config TOML (str)
//! step u64 | student | teacher | optimizer | bank | label cache
//! 5 × rng state | trace | step log | diagnostics | SHA-256 of all prior bytes
//! ```
//!
//! Strings and byte arrays are length-prefixed with a u64. Reloading
//! restores every field, so a resumed run continues bit-identically.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::metrics::{IouReport, Spearman, TraceRow};
use crate::model::NetworkParams;
use crate::optim::AdamW;
use crate::prototypes::{ClassSlot, PrototypeBank};
use crate::rng::RngState;
use crate::train::{Diagnostics, StepLog, Streams, TrainState};

pub const MAGIC: &[u8; 8] = b"PPPCCKPT";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.usize(ts.len());
        for t in ts {
            self.usize(t.shape().len());
            for &d in t.shape() {
                self.usize(d);
            }
            self.f64s(t.data());
        }
    }
    fn rng(&mut self, s: &RngState) {
        self.buf.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.buf.extend_from_slice(&s.word_pos.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length does not fit in memory"))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit.max(1)) > self.buf.len() - self.pos {
            return Err(bad(format!("length {n} exceeds the remaining data")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(bad(format!("bad option tag {t}"))),
        }
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.len(8)?;
        (0..n)
            .map(|_| {
                let nd = self.len(8)?;
                let shape = (0..nd).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
                let data = self.f64s()?;
                Tensor::new(shape, data).map_err(|e| bad(format!("tensor: {e}")))
            })
            .collect()
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.array()?),
        })
    }
}

/// Serializes a training state.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&state.config.hash()?);
    w.str(&state.config.to_toml()?);
    w.usize(state.step);
    w.tensors(state.student.tensors());
    w.tensors(state.teacher.tensors());

    let opt = &state.optimizer;
    w.u64(opt.t);
    for moments in [&opt.m, &opt.v] {
        w.usize(moments.len());
        for m in moments.iter() {
            w.f64s(m);
        }
    }

    w.usize(state.bank.classes());
    for slot in state.bank.slots() {
        match &slot.proto {
            Some(p) => {
                w.u8(1);
                w.f64s(p.mean());
                w.f64s(p.var());
            }
            None => w.u8(0),
        }
        w.u64(slot.updates);
        w.u64(slot.staleness);
    }

    w.usize(state.label_cache.len());
    for labels in &state.label_cache {
        w.bytes(labels);
    }

    for rng in state.streams.all() {
        w.rng(&RngState::capture(rng));
    }

    w.usize(state.trace.len());
    for row in &state.trace {
        w.usize(row.step);
        w.str(&row.split);
        w.usize(row.report.per_class.len());
        for &v in &row.report.per_class {
            w.opt_f64(v);
        }
        w.f64(row.report.miou);
    }

    w.usize(state.log.len());
    for l in &state.log {
        w.usize(l.step);
        w.f64(l.lr);
        w.f64(l.loss);
        w.f64(l.source);
        w.opt_f64(l.target);
        w.opt_f64(l.contrast);
        w.opt_f64(l.kl);
        w.usize(l.pseudo_kept);
        w.usize(l.anchors);
        w.usize(l.skipped_anchors);
    }

    match &state.diagnostics {
        None => w.u8(0),
        Some(d) => {
            w.u8(1);
            w.opt_f64(d.entropy_correct);
            w.opt_f64(d.entropy_incorrect);
            w.usize(d.correct_pixels);
            w.usize(d.incorrect_pixels);
            w.f64s(&d.crop_norms);
            w.f64s(&d.crop_vars);
            w.f64(d.norm_var.rho);
            w.u8(d.norm_var.degenerate as u8);
        }
    }

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    Ok(w.buf)
}

/// Parses and validates a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hash = r.str()?;
    let config = ExperimentConfig::from_toml(&r.str()?).map_err(|e| bad(format!("embedded config: {e}")))?;
    if config.hash()? != hash {
        return Err(bad("embedded config does not match its hash"));
    }
    let step = r.usize()?;
    let shape = config.model_shape();
    let student = NetworkParams::from_tensors(shape, r.tensors()?).map_err(|e| bad(format!("student: {e}")))?;
    let teacher = NetworkParams::from_tensors(shape, r.tensors()?).map_err(|e| bad(format!("teacher: {e}")))?;

    let t = r.u64()?;
    let mut moments = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.len(8)?;
        let m = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        let ok = m.len() == student.tensors().len() && m.iter().zip(student.tensors()).all(|(a, t)| a.len() == t.len());
        if !ok {
            return Err(bad("optimizer moments do not match the parameters"));
        }
        moments.push(m);
    }
    let v = moments.pop().expect("two moment sets");
    let m = moments.pop().expect("two moment sets");
    let optimizer = AdamW {
        config: config.adamw(),
        m,
        v,
        t,
    };

    let classes = r.len(1)?;
    if classes != config.classes() {
        return Err(bad(format!("bank has {classes} classes, config {}", config.classes())));
    }
    let mut slots = Vec::with_capacity(classes);
    for _ in 0..classes {
        let proto = match r.u8()? {
            0 => None,
            1 => {
                let mean = r.f64s()?;
                let var = r.f64s()?;
                Some(DiagonalGaussian::new(mean, var).map_err(|e| bad(format!("prototype: {e}")))?)
            }
            t => return Err(bad(format!("bad prototype tag {t}"))),
        };
        slots.push(ClassSlot {
            proto,
            updates: r.u64()?,
            staleness: r.u64()?,
        });
    }
    let bank = PrototypeBank::from_slots(slots);

    let n = r.len(8)?;
    let label_cache = (0..n)
        .map(|_| r.bytes().map(<[u8]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    if n != config.data.target_images {
        return Err(bad("label cache does not match the target image count"));
    }

    let mut rngs = Vec::with_capacity(5);
    for _ in 0..5 {
        rngs.push(r.rng()?.restore());
    }
    let streams = Streams::from_array(rngs.try_into().expect("five streams"));

    let n = r.len(8)?;
    let mut trace = Vec::with_capacity(n);
    for _ in 0..n {
        let step = r.usize()?;
        let split = r.str()?;
        let k = r.len(1)?;
        let per_class = (0..k).map(|_| r.opt_f64()).collect::<Result<Vec<_>>>()?;
        let miou = r.f64()?;
        trace.push(TraceRow {
            step,
            split,
            report: IouReport { per_class, miou },
        });
    }

    let n = r.len(8)?;
    let mut log = Vec::with_capacity(n);
    for _ in 0..n {
        log.push(StepLog {
            step: r.usize()?,
            lr: r.f64()?,
            loss: r.f64()?,
            source: r.f64()?,
            target: r.opt_f64()?,
            contrast: r.opt_f64()?,
            kl: r.opt_f64()?,
            pseudo_kept: r.usize()?,
            anchors: r.usize()?,
            skipped_anchors: r.usize()?,
        });
    }

    let diagnostics = match r.u8()? {
        0 => None,
        1 => Some(Diagnostics {
            entropy_correct: r.opt_f64()?,
            entropy_incorrect: r.opt_f64()?,
            correct_pixels: r.usize()?,
            incorrect_pixels: r.usize()?,
            crop_norms: r.f64s()?,
            crop_vars: r.f64s()?,
            norm_var: Spearman {
                rho: r.f64()?,
                degenerate: r.u8()? != 0,
            },
        }),
        t => return Err(bad(format!("bad diagnostics tag {t}"))),
    };
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(TrainState {
        config,
        step,
        student,
        teacher,
        optimizer,
        bank,
        label_cache,
        streams,
        trace,
        log,
        diagnostics,
    })
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state)?)
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{train, Datasets};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.height = 20;
        cfg.world.width = 20;
        cfg.world.classes = 3;
        cfg.world.blob_scale = 5.0;
        cfg.data.source_images = 2;
        cfg.data.target_images = 2;
        cfg.data.eval_images = 1;
        cfg.model.hidden = 6;
        cfg.model.proj_hidden = 6;
        cfg.model.embed_dim = 3;
        cfg.crop.size = 6;
        cfg.crop.top_k = 2;
        cfg.schedule.total_iters = 10;
        cfg.eval.interval = 4;
        cfg.eval.crops = 4;
        cfg.loss.alpha = 0.2;
        cfg
    }

    #[test]
    fn round_trip_and_resume_are_exact() {
        let cfg = small();
        let data = Datasets::generate(&cfg).unwrap();
        let whole = train(cfg.clone(), &data).unwrap();
        let bytes = encode(&whole).unwrap();
        assert_eq!(decode(&bytes).unwrap(), whole);

        let mid = TrainState::new(cfg, &data).unwrap().run_until(&data, 5).unwrap();
        let restored = decode(&encode(&mid).unwrap()).unwrap();
        assert_eq!(restored, mid);
        let resumed = restored.run_until(&data, 10).unwrap();
        assert_eq!(encode(&resumed).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small();
        let data = Datasets::generate(&cfg).unwrap();
        let state = TrainState::new(cfg, &data).unwrap();
        let bytes = encode(&state).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"not a checkpoint").is_err());
    }
}
