//! Binary checkpoint files.
//!
//! Layout: magic `MCLCKPT1`, u32 format version, u64 payload length, the
//! payload, then the SHA-256 digest of the payload. The payload is a list of
//! tagged fields (`u16 tag`, `u64 length`, bytes), all little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::classifier::MlpClassifier;
use crate::error::{Error, Result};
use crate::mcl::{Ensemble, EpochRecord, TrainState};
use crate::numerics::{Real, Rng};
use crate::params::Params;
use crate::selection::FeatureLayers;
use crate::seq2seq::{Architecture, Seq2SeqModel, SequenceSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Training-log records kept in a checkpoint.
pub const LOG_TAIL: usize = 256;

const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

mod tag {
    pub const PRECISION: u16 = 1;
    pub const SPEC: u16 = 2;
    pub const ARCH: u16 = 3;
    pub const MEMBERS: u16 = 4;
    pub const VELOCITIES: u16 = 5;
    pub const BEST: u16 = 6;
    pub const CLASSIFIER: u16 = 7;
    pub const STATE: u16 = 8;
    pub const LOG: u16 = 9;
    pub const CONFIG: u16 = 10;
}

/// Classifier with the feature layout it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredClassifier {
    pub model: MlpClassifier,
    pub layers: FeatureLayers,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    /// Ensemble after the last completed epoch, with velocities.
    pub ensemble: Ensemble<T>,
    /// Members with the best validation oracle loss, if different.
    pub best: Option<Vec<Seq2SeqModel<T>>>,
    pub classifier: Option<StoredClassifier>,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
    /// Text of the run configuration that produced the checkpoint.
    pub config: String,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(ensemble: Ensemble<T>, state: TrainState) -> Self {
        Self {
            ensemble,
            best: None,
            classifier: None,
            state,
            log: Vec::new(),
            config: String::new(),
        }
    }

    /// Members used for inference: the best snapshot when present.
    pub fn inference_members(&self) -> &[Seq2SeqModel<T>] {
        self.best.as_deref().unwrap_or(&self.ensemble.members)
    }

    pub fn spec(&self) -> SequenceSpec {
        *self.ensemble.spec()
    }

    pub fn arch(&self) -> Architecture {
        *self.ensemble.arch()
    }

    /// Best snapshot as an ensemble (zero velocities), for resuming.
    pub fn best_ensemble(&self) -> Result<Option<Ensemble<T>>> {
        self.best.clone().map(Ensemble::new).transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut w = Writer(&mut payload);
        w.field(tag::PRECISION, |b| b.push(T::BYTES as u8));
        let spec = self.spec();
        w.field(tag::SPEC, |b| {
            for v in [spec.seq_len, spec.pred_len, spec.frame_dim] {
                put_u32(b, v as u32);
            }
        });
        let arch = self.arch();
        w.field(tag::ARCH, |b| {
            put_u32(b, arch.hidden as u32);
            put_u32(b, arch.layers as u32);
            b.push(arch.peepholes as u8);
            b.push(arch.reverse_reconstruction as u8);
        });
        w.field(tag::MEMBERS, |b| put_models(b, &self.ensemble.members));
        w.field(tag::VELOCITIES, |b| put_models(b, &self.ensemble.velocities));
        if let Some(best) = &self.best {
            w.field(tag::BEST, |b| put_models(b, best));
        }
        if let Some(c) = &self.classifier {
            w.field(tag::CLASSIFIER, |b| put_classifier(b, c));
        }
        w.field(tag::STATE, |b| {
            put_u64(b, self.state.epoch as u64);
            put_u64(b, self.state.best_val.to_bits());
            put_u64(b, self.state.since_improvement as u64);
            put_u64(b, self.state.rng.seed());
            put_u64(b, self.state.rng.counter());
        });
        let tail = &self.log[self.log.len().saturating_sub(LOG_TAIL)..];
        w.field(tag::LOG, |b| {
            let lines: Vec<String> = tail.iter().map(EpochRecord::to_json_line).collect();
            put_str(b, &lines.join("\n"));
        });
        w.field(tag::CONFIG, |b| put_str(b, &self.config));

        let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, payload.len() as u64);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let payload = verified_payload(bytes, path)?;
        let fields = fields(payload)?;
        let get = |t: u16, name: &str| {
            fields
                .iter()
                .find(|(tag, _)| *tag == t)
                .map(|(_, b)| *b)
                .ok_or_else(|| Error::Malformed(format!("missing {name} field")))
        };
        let precision = get(tag::PRECISION, "precision")?;
        if precision != [T::BYTES as u8] {
            return Err(Error::Malformed(format!(
                "checkpoint holds {}-byte values, expected {}",
                precision.first().copied().unwrap_or(0),
                T::NAME
            )));
        }
        let mut r = Reader::new(get(tag::SPEC, "spec")?);
        let spec = SequenceSpec::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize)?;
        r.done()?;
        let mut r = Reader::new(get(tag::ARCH, "architecture")?);
        let arch = Architecture {
            hidden: r.u32()? as usize,
            layers: r.u32()? as usize,
            peepholes: r.flag()?,
            reverse_reconstruction: r.flag()?,
        };
        r.done()?;
        let members = read_models(get(tag::MEMBERS, "members")?, spec, arch)?;
        let velocities = read_models(get(tag::VELOCITIES, "velocities")?, spec, arch)?;
        if members.is_empty() || velocities.len() != members.len() {
            return Err(Error::Malformed(format!(
                "{} members but {} velocity sets",
                members.len(),
                velocities.len()
            )));
        }
        let mut ensemble = Ensemble::new(members)?;
        ensemble.velocities = velocities;
        let best = match get(tag::BEST, "best") {
            Ok(b) => {
                let best = read_models(b, spec, arch)?;
                if best.len() != ensemble.len() {
                    return Err(Error::Malformed("best snapshot size differs from ensemble".into()));
                }
                Some(best)
            }
            Err(_) => None,
        };
        let classifier = get(tag::CLASSIFIER, "classifier").ok().map(read_classifier).transpose()?;
        let mut r = Reader::new(get(tag::STATE, "training state")?);
        let state = TrainState {
            epoch: r.u64()? as usize,
            best_val: f64::from_bits(r.u64()?),
            since_improvement: r.u64()? as usize,
            rng: Rng::from_parts(r.u64()?, r.u64()?),
        };
        r.done()?;
        let log_text = Reader::new(get(tag::LOG, "log")?).string()?;
        let log = log_text
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Malformed(format!("log record: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let config = Reader::new(get(tag::CONFIG, "config")?).string()?;
        Ok(Self {
            ensemble,
            best,
            classifier,
            state,
            log,
            config,
        })
    }
}

/// Reads only the value precision of a checkpoint file (`"f32"` or `"f64"`).
pub fn checkpoint_precision(path: &Path) -> Result<&'static str> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = verified_payload(&bytes, path)?;
    match fields(payload)?.iter().find(|(t, _)| *t == tag::PRECISION) {
        Some((_, [4])) => Ok("f32"),
        Some((_, [8])) => Ok("f64"),
        _ => Err(Error::Malformed("missing or invalid precision field".into())),
    }
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// SHA-256 of the payload, as stored in the file trailer.
pub fn checkpoint_digest(bytes: &[u8]) -> Option<[u8; 32]> {
    bytes.len().checked_sub(DIGEST).map(|s| bytes[s..].try_into().unwrap())
}

fn verified_payload<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(Error::Truncated(format!("{} bytes, no header", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "checkpoint",
        });
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let need = (HEADER as u64).saturating_add(len).saturating_add(DIGEST as u64);
    if (bytes.len() as u64) < need {
        return Err(Error::Truncated(format!("{} bytes, expected {need}", bytes.len())));
    }
    if bytes.len() as u64 > need {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() as u64 - need)));
    }
    let payload = &bytes[HEADER..HEADER + len as usize];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len as usize..] {
        return Err(Error::Checksum);
    }
    Ok(payload)
}

fn fields(mut payload: &[u8]) -> Result<Vec<(u16, &[u8])>> {
    let mut out = Vec::new();
    while !payload.is_empty() {
        let mut r = Reader::new(payload);
        let t = r.u16()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        out.push((t, body));
        payload = &payload[10 + len..];
    }
    Ok(out)
}

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn field(&mut self, t: u16, body: impl FnOnce(&mut Vec<u8>)) {
        let mut b = Vec::new();
        body(&mut b);
        self.0.extend_from_slice(&t.to_le_bytes());
        put_u64(self.0, b.len() as u64);
        self.0.extend_from_slice(&b);
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u64(b, s.len() as u64);
    b.extend_from_slice(s.as_bytes());
}

fn put_tensors<T: Real>(b: &mut Vec<u8>, tensors: &[&[T]]) {
    put_u32(b, tensors.len() as u32);
    for t in tensors {
        put_u64(b, t.len() as u64);
        for &v in *t {
            v.write_le(b);
        }
    }
}

fn put_models<T: Real>(b: &mut Vec<u8>, models: &[Seq2SeqModel<T>]) {
    put_u32(b, models.len() as u32);
    for m in models {
        put_tensors(b, &m.tensors());
    }
}

fn put_classifier(b: &mut Vec<u8>, c: &StoredClassifier) {
    let m = &c.model;
    b.push(match c.layers {
        FeatureLayers::Top => 0,
        FeatureLayers::All => 1,
    });
    put_u32(b, m.input_dim() as u32);
    let (h1, h2) = m.hidden_dims();
    put_u32(b, h1 as u32);
    put_u32(b, h2 as u32);
    put_u32(b, m.classes() as u32);
    put_u64(b, m.bn1.decay.to_bits());
    put_tensors(b, &m.tensors());
    put_tensors(
        b,
        &[&m.bn1.running_mean, &m.bn1.running_var, &m.bn2.running_mean, &m.bn2.running_var],
    );
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("field overruns payload at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Malformed(format!("flag byte {v}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed("invalid UTF-8".into()))
    }

    /// Fills `dst` tensor by tensor, requiring the exact stored shapes.
    fn tensors_into<T: Real>(&mut self, dst: Vec<&mut [T]>) -> Result<()> {
        let count = self.u32()? as usize;
        if count != dst.len() {
            return Err(Error::Malformed(format!("{count} tensors stored, {} expected", dst.len())));
        }
        for t in dst {
            let n = self.u64()? as usize;
            if n != t.len() {
                return Err(Error::Malformed(format!("tensor of {n} values, {} expected", t.len())));
            }
            let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Malformed("tensor size".into()))?)?;
            for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(T::BYTES)) {
                *v = T::read_le(chunk);
            }
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Malformed(format!("{} unread bytes in field", self.bytes.len() - self.pos)))
        }
    }
}

fn read_models<T: Real>(bytes: &[u8], spec: SequenceSpec, arch: Architecture) -> Result<Vec<Seq2SeqModel<T>>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let mut m = Seq2SeqModel::zeros(spec, arch);
        r.tensors_into(m.tensors_mut())?;
        out.push(m);
    }
    r.done()?;
    Ok(out)
}

fn read_classifier(bytes: &[u8]) -> Result<StoredClassifier> {
    let mut r = Reader::new(bytes);
    let layers = match r.take(1)?[0] {
        0 => FeatureLayers::Top,
        1 => FeatureLayers::All,
        v => return Err(Error::Malformed(format!("feature layout byte {v}"))),
    };
    let input = r.u32()? as usize;
    let hidden = (r.u32()? as usize, r.u32()? as usize);
    let classes = r.u32()? as usize;
    let decay = f64::from_bits(r.u64()?);
    let mut model = MlpClassifier::init(&mut Rng::new(0), input, hidden, classes, decay);
    r.tensors_into(model.tensors_mut())?;
    r.tensors_into(vec![
        model.bn1.running_mean.as_mut_slice(),
        model.bn1.running_var.as_mut_slice(),
        model.bn2.running_mean.as_mut_slice(),
        model.bn2.running_var.as_mut_slice(),
    ])?;
    r.done()?;
    Ok(StoredClassifier { model, layers })
}
