//! Checkpoint files.
//!
//! ```text
//! "CMCK"  magic, u32 version = 1
//! u64 global step, u32 epoch, f64 EMA momentum
//! mlp target, mlp online, mlp predictor
//! u8 has_head  [mlp head, u32 trained_epoch]
//! u8 has_sgd   [u32 n, n × mlp velocity, f64 base_lr, f64 momentum,
//!               f64 weight_decay, u64 step, u64 total_steps,
//!               u8 schedule (0 cosine, 1 constant, 2 step) [u64 at, f64 factor]]
//! mlp := u32 layers, then per layer u32 out, u32 in, out·in f64 weights, out f64 biases
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{EncoderPair, Layer, LrSchedule, MlpParams, SgdState};
use crate::codec::{Reader, Writer};
use crate::constraint::PseudoHead;
use crate::error::{CmsfError, Result};
use crate::numeric::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pair: EncoderPair,
    pub head: Option<PseudoHead>,
    pub optimizer: Option<SgdState>,
    pub step: u64,
    pub epoch: u32,
}

fn write_mlp(w: &mut Writer, p: &MlpParams) {
    w.u32(p.layers().len() as u32);
    for l in p.layers() {
        w.u32(l.out_dim() as u32);
        w.u32(l.in_dim() as u32);
        w.f64s(l.weight.as_slice());
        w.f64s(&l.bias);
    }
}

fn read_mlp(r: &mut Reader<'_>) -> Result<MlpParams> {
    let n = r.u32("layer count")? as usize;
    if n == 0 {
        return Err(r.error("MLP with zero layers"));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let out = r.u32("layer rows")? as usize;
        let inp = r.u32("layer cols")? as usize;
        let weights = r.f64s(out * inp, "weights")?;
        let bias = r.f64s(out, "biases")?;
        let m = Matrix::from_vec(out, inp, weights).map_err(|e| r.error(e.to_string()))?;
        layers.push(Layer::new(m, bias).map_err(|e| r.error(e.to_string()))?);
    }
    MlpParams::new(layers).map_err(|e| r.error(e.to_string()))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ck.step);
    w.u32(ck.epoch);
    w.f64(ck.pair.momentum);
    write_mlp(&mut w, &ck.pair.target);
    write_mlp(&mut w, &ck.pair.online);
    write_mlp(&mut w, &ck.pair.predictor);
    match &ck.head {
        Some(h) => {
            w.u8(1);
            write_mlp(&mut w, &h.params);
            w.u32(h.trained_epoch);
        }
        None => w.u8(0),
    }
    match &ck.optimizer {
        Some(s) => {
            w.u8(1);
            w.u32(s.velocity.len() as u32);
            for v in &s.velocity {
                write_mlp(&mut w, v);
            }
            w.f64(s.base_lr);
            w.f64(s.momentum);
            w.f64(s.weight_decay);
            w.u64(s.step);
            w.u64(s.total_steps);
            match s.schedule {
                LrSchedule::Cosine => w.u8(0),
                LrSchedule::Constant => w.u8(1),
                LrSchedule::Step { at_step, factor } => {
                    w.u8(2);
                    w.u64(at_step);
                    w.f64(factor);
                }
            }
        }
        None => w.u8(0),
    }
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CmsfError::VersionUnsupported(version));
    }
    let step = r.u64("step")?;
    let epoch = r.u32("epoch")?;
    let momentum = r.f64("momentum")?;
    let target = read_mlp(&mut r)?;
    let online = read_mlp(&mut r)?;
    let predictor = read_mlp(&mut r)?;
    let pair = EncoderPair::from_parts(target, online, predictor, momentum).map_err(|e| CmsfError::Checkpoint(e.to_string()))?;
    let head = match r.u8("head flag")? {
        0 => None,
        1 => {
            let params = read_mlp(&mut r)?;
            let trained_epoch = r.u32("head epoch")?;
            Some(PseudoHead { params, trained_epoch })
        }
        f => return Err(r.error(format!("bad head flag {f}"))),
    };
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let n = r.u32("velocity count")? as usize;
            let velocity = (0..n).map(|_| read_mlp(&mut r)).collect::<Result<Vec<_>>>()?;
            let base_lr = r.f64("base lr")?;
            let momentum = r.f64("sgd momentum")?;
            let weight_decay = r.f64("weight decay")?;
            let step = r.u64("sgd step")?;
            let total_steps = r.u64("total steps")?;
            let schedule = match r.u8("schedule")? {
                0 => LrSchedule::Cosine,
                1 => LrSchedule::Constant,
                2 => LrSchedule::Step { at_step: r.u64("milestone")?, factor: r.f64("factor")? },
                t => return Err(r.error(format!("bad schedule tag {t}"))),
            };
            Some(SgdState { velocity, base_lr, momentum, weight_decay, step, total_steps, schedule })
        }
        f => return Err(r.error(format!("bad optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint { pair, head, optimizer, step, epoch })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}
