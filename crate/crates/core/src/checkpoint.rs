//! Versioned binary checkpoints of trained fold models.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "CSCK1"  kind:u8  hidden:u32  seq_units:u32
//! has_encoder:u8 [layers heads ffn max_positions vocab:u32  seed:u64
//!                 n_frozen:u32 frozen:[u32]  output_layer:u32 (0 = last)]
//! has_calibration:u8 [c:f64  weights:[f64; 21]]
//! tensors:u32 { name_len:u32 name rows:u32 cols:u32 values:[f64] }
//! ```

use crate::encoder::{init_params, EncoderConfig};
use crate::error::TrainError;
use crate::mc::McHead;
use crate::params::Parameters;
use crate::qa::{LrModel, QaHead};
use crate::seq::SeqHead;
use crate::train::{Head, ModelKind, TrainedModel};

const MAGIC: &[u8; 5] = b"CSCK1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(model: &TrainedModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let (hidden, units) = match &model.head {
        Head::Qa(h) => (h.weight.nrows(), 0),
        Head::Mc(h) => (h.weight.nrows(), 0),
        Head::Seq(h) => (h.w1.nrows() / 9, h.w1.ncols()),
    };
    out.push(model.kind() as u8);
    put_u32(&mut out, hidden);
    put_u32(&mut out, units);
    match &model.encoder {
        Some(enc) => {
            let c = &enc.config;
            out.push(1);
            for v in [c.num_layers, c.num_heads, c.ffn_dim, c.max_positions, c.vocab_size] {
                put_u32(&mut out, v);
            }
            out.extend_from_slice(&c.seed.to_le_bytes());
            put_u32(&mut out, c.frozen_layers.len());
            for &l in &c.frozen_layers {
                put_u32(&mut out, l);
            }
            put_u32(&mut out, c.output_layer.unwrap_or(0));
        }
        None => out.push(0),
    }
    match &model.calibration {
        Some(lr) => {
            out.push(1);
            out.extend_from_slice(&lr.c.to_le_bytes());
            for v in lr.to_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    let mut tensors: Vec<(String, &ndarray::Array2<f64>)> = Vec::new();
    if let Some(enc) = &model.encoder {
        tensors.extend(enc.infos().into_iter().map(|i| i.name).zip(enc.tensors()));
    }
    let (head_infos, head_tensors) = match &model.head {
        Head::Qa(h) => (h.infos(), h.tensors()),
        Head::Mc(h) => (h.infos(), h.tensors()),
        Head::Seq(h) => (h.infos(), h.tensors()),
    };
    tensors.extend(head_infos.into_iter().map(|i| i.name).zip(head_tensors));
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.nrows());
        put_u32(&mut out, t.ncols());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn corrupt(msg: &str) -> TrainError {
    TrainError::Checkpoint(msg.to_string())
}

fn fill<P: Parameters>(params: &mut P, r: &mut Reader<'_>) -> Result<(), TrainError> {
    let infos = params.infos();
    for (info, t) in infos.iter().zip(params.tensors_mut()) {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if name != info.name {
            return Err(corrupt(&format!("expected tensor {}, found {name}", info.name)));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        if (rows, cols) != t.dim() {
            return Err(TrainError::ShapeMismatch { name: info.name.clone(), expected: t.dim(), found: (rows, cols) });
        }
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainedModel, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Qa,
        1 => ModelKind::Mc,
        2 => ModelKind::Seq,
        k => return Err(corrupt(&format!("unknown model kind {k}"))),
    };
    let hidden = r.u32()?;
    let units = r.u32()?;
    let encoder_cfg = match r.u8()? {
        0 => None,
        1 => {
            let num_layers = r.u32()?;
            let num_heads = r.u32()?;
            let ffn_dim = r.u32()?;
            let max_positions = r.u32()?;
            let vocab_size = r.u32()?;
            let seed = r.u64()?;
            let n_frozen = r.u32()?;
            let mut frozen_layers = std::collections::BTreeSet::new();
            for _ in 0..n_frozen {
                frozen_layers.insert(r.u32()?);
            }
            let output_layer = match r.u32()? {
                0 => None,
                l => Some(l),
            };
            Some(EncoderConfig {
                num_layers,
                hidden_dim: hidden,
                num_heads,
                ffn_dim,
                max_positions,
                vocab_size,
                frozen_layers,
                output_layer,
                seed,
            })
        }
        _ => return Err(corrupt("bad encoder flag")),
    };
    let calibration = match r.u8()? {
        0 => None,
        1 => {
            let c = r.f64()?;
            let mut v = Vec::with_capacity(21);
            for _ in 0..21 {
                v.push(r.f64()?);
            }
            Some(LrModel::from_vec(&v, c))
        }
        _ => return Err(corrupt("bad calibration flag")),
    };
    let expected_tensors = r.u32()?;
    let mut encoder = match encoder_cfg {
        Some(cfg) => Some(init_params(&cfg)?),
        None => None,
    };
    let mut head = match kind {
        ModelKind::Qa => Head::Qa(QaHead::zeros(hidden)),
        ModelKind::Mc => Head::Mc(McHead::zeros(hidden)),
        ModelKind::Seq => Head::Seq(SeqHead::zeros(hidden, units)),
    };
    let head_count = match &head {
        Head::Qa(h) => h.tensors().len(),
        Head::Mc(h) => h.tensors().len(),
        Head::Seq(h) => h.tensors().len(),
    };
    let enc_count = encoder.as_ref().map_or(0, |e| e.tensors().len());
    if expected_tensors != enc_count + head_count {
        return Err(corrupt("tensor count does not match the model layout"));
    }
    if let Some(enc) = encoder.as_mut() {
        fill(enc, &mut r)?;
    }
    match &mut head {
        Head::Qa(h) => fill(h, &mut r)?,
        Head::Mc(h) => fill(h, &mut r)?,
        Head::Seq(h) => fill(h, &mut r)?,
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TrainedModel { encoder, head, calibration })
}
