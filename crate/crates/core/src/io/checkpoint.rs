//! Binary checkpoints: `SNNF` magic, a version word, the architecture, all
//! weight tensors as little-endian 32-bit reals (row-major,
//! length-prefixed), per-slot thresholds, and training metadata. Encoding
//! is fixed-width little-endian throughout so a save/load/save cycle is
//! byte-identical across platforms.

use crate::error::{Result, SnnError};
use crate::network::{ArchitectureSpec, Layer, NetworkParams};
use crate::tensor::ops::ConvSpec;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNNF";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPhase {
    Ann,
    Converted,
    Stdb,
}

impl TrainingPhase {
    fn to_byte(self) -> u8 {
        match self {
            TrainingPhase::Ann => 0,
            TrainingPhase::Converted => 1,
            TrainingPhase::Stdb => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TrainingPhase::Ann),
            1 => Some(TrainingPhase::Converted),
            2 => Some(TrainingPhase::Stdb),
            _ => None,
        }
    }
}

/// Everything needed to resume or evaluate a run. Weights are stored in
/// 32-bit precision, the training precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureSpec,
    pub params: NetworkParams<f32>,
    pub phase: TrainingPhase,
    pub epochs: u32,
    pub seed: u64,
    pub leak: f64,
    pub alpha: f64,
    pub beta: f64,
    pub timesteps: u32,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SnnError::Format {
                path: self.path.clone(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.matches(&ckpt.arch)?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    let (c, h, wid) = ckpt.arch.input;
    w.u32(c as u32);
    w.u32(h as u32);
    w.u32(wid as u32);
    w.u32(ckpt.arch.classes as u32);
    w.u32(ckpt.arch.layers.len() as u32);
    for layer in &ckpt.arch.layers {
        match layer {
            Layer::Conv(s) => {
                w.u8(0);
                w.u32(s.out_channels as u32);
                w.u32(s.in_channels as u32);
                w.u32(s.kernel as u32);
                w.u32(s.stride as u32);
                w.u32(s.padding as u32);
            }
            Layer::Linear { out } => {
                w.u8(1);
                w.u32(*out as u32);
            }
            Layer::AvgPool { k } => {
                w.u8(2);
                w.u32(*k as u32);
            }
            Layer::Dropout { rate } => {
                w.u8(3);
                w.f64(*rate);
            }
            Layer::ResidualBlock { channels } => {
                w.u8(4);
                w.u32(*channels as u32);
            }
        }
    }
    w.u32(ckpt.params.weights.len() as u32);
    for t in &ckpt.params.weights {
        w.u64(t.len() as u64);
        for &v in t.data() {
            w.f32(v);
        }
    }
    for v in &ckpt.params.thresholds {
        match v {
            Some(x) => {
                w.u8(1);
                w.f32(*x);
            }
            None => {
                w.u8(0);
                w.f32(0.0);
            }
        }
    }
    w.u8(ckpt.phase.to_byte());
    w.u32(ckpt.epochs);
    w.u64(ckpt.seed);
    w.f64(ckpt.leak);
    w.f64(ckpt.alpha);
    w.f64(ckpt.beta);
    w.u32(ckpt.timesteps);
    Ok(w.buf)
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path: path.to_string(),
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(SnnError::Format {
            path: path.to_string(),
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(SnnError::Format {
            path: path.to_string(),
            reason: format!("unsupported checkpoint version {version}, expected {VERSION}"),
        });
    }
    let c = r.u32("input channels")? as usize;
    let h = r.u32("input height")? as usize;
    let wid = r.u32("input width")? as usize;
    let classes = r.u32("classes")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        layers.push(match tag {
            0 => Layer::Conv(ConvSpec::new(
                r.u32("conv out")? as usize,
                r.u32("conv in")? as usize,
                r.u32("conv kernel")? as usize,
                r.u32("conv stride")? as usize,
                r.u32("conv padding")? as usize,
            )),
            1 => Layer::Linear {
                out: r.u32("linear out")? as usize,
            },
            2 => Layer::AvgPool {
                k: r.u32("pool kernel")? as usize,
            },
            3 => Layer::Dropout {
                rate: r.f64("dropout rate")?,
            },
            4 => Layer::ResidualBlock {
                channels: r.u32("block channels")? as usize,
            },
            other => {
                return Err(SnnError::Format {
                    path: path.to_string(),
                    reason: format!("unknown layer tag {other} at layer {i}"),
                })
            }
        });
    }
    let arch = ArchitectureSpec::new((c, h, wid), classes, layers)?;
    let slots = arch.slots()?;
    let slot_count = r.u32("slot count")? as usize;
    if slot_count != slots.len() {
        return Err(SnnError::Format {
            path: path.to_string(),
            reason: format!(
                "checkpoint has {slot_count} weight slots, architecture needs {}",
                slots.len()
            ),
        });
    }
    let mut weights = Vec::with_capacity(slot_count);
    for (i, slot) in slots.iter().enumerate() {
        let len = r.u64("weight length")? as usize;
        let shape = slot.weight_shape();
        let expected: usize = shape.iter().product();
        if len != expected {
            return Err(SnnError::Format {
                path: path.to_string(),
                reason: format!("slot {i} stores {len} weights, expected {expected}"),
            });
        }
        let raw = r.take(4 * len, "weight payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(Tensor::from_vec(&shape, data)?);
    }
    let mut thresholds = Vec::with_capacity(slot_count);
    for _ in 0..slot_count {
        let present = r.u8("threshold flag")?;
        let value = r.f32("threshold value")?;
        thresholds.push((present != 0).then_some(value));
    }
    let phase = TrainingPhase::from_byte(r.u8("phase")?).ok_or_else(|| SnnError::Format {
        path: path.to_string(),
        reason: "unknown training phase".into(),
    })?;
    let epochs = r.u32("epochs")?;
    let seed = r.u64("seed")?;
    let leak = r.f64("leak")?;
    let alpha = r.f64("alpha")?;
    let beta = r.f64("beta")?;
    let timesteps = r.u32("timesteps")?;
    if r.pos != bytes.len() {
        return Err(SnnError::Format {
            path: path.to_string(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        arch,
        params: NetworkParams {
            weights,
            thresholds,
        },
        phase,
        epochs,
        seed,
        leak,
        alpha,
        beta,
        timesteps,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes)
        .map_err(|e| SnnError::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| SnnError::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::presets;

    fn sample() -> Checkpoint {
        let arch = presets::vgg5((1, 8, 8), 10).unwrap();
        let params = NetworkParams::<f32>::random_init(&arch, 3).unwrap();
        Checkpoint {
            arch,
            params,
            phase: TrainingPhase::Converted,
            epochs: 7,
            seed: 42,
            leak: 1.0,
            alpha: 0.3,
            beta: 0.01,
            timesteps: 20,
        }
    }

    fn weight_hash(p: &NetworkParams<f32>) -> u64 {
        // order-sensitive FNV over the raw bit patterns
        let mut h = 0xcbf29ce484222325u64;
        for w in &p.weights {
            for &v in w.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    #[test]
    fn roundtrip_is_bitwise_stable() {
        let ckpt = sample();
        let bytes = encode(&ckpt).unwrap();
        let back = decode(&bytes, "mem").unwrap();
        let again = encode(&back).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back, ckpt);
        assert_eq!(weight_hash(&back.params), weight_hash(&ckpt.params));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, "mem"),
            Err(SnnError::Format { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 99;
        let err = decode(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.snnf");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(decode(cut, "mem").is_err());
    }
}
