//! Binary checkpoint format.
//!
//! Layout: magic "SDSC", version u16 (LE), u32 header length (LE), JSON
//! header (model spec, tensor names/shapes, per-group b/e, live masks, seed,
//! step), then every tensor payload as little-endian 32-bit reals in header
//! order. Loading validates the magic, version, and every shape, and
//! reproduces forward outputs bit-identically.

use crate::compress::Mode;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, SlotKind};
use crate::tensor::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SDSC";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantEntry {
    bits: Vec<f32>,
    exps: Vec<f32>,
    live: Vec<bool>,
    frozen_until: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    quant: Vec<QuantEntry>,
    seed: u64,
    step: u64,
    trained: bool,
    mode: Mode,
}

/// Named payload tensors: every slot except the quantization parameters
/// (those live in the header), plus batch-norm running statistics.
fn payload_names(model: &mut Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for slot in model.slots() {
        match slot.kind {
            SlotKind::QuantBits { .. } | SlotKind::QuantExps { .. } => continue,
            _ => out.push((
                slot.name.clone(),
                slot.tensor.shape.clone(),
                slot.tensor.data.clone(),
            )),
        }
    }
    if let Model::Cnn(m) = model {
        for (l, blk) in m.blocks.iter().enumerate() {
            out.push((
                format!("conv{}.bn.run_mean", l),
                vec![blk.bn.running_mean.len()],
                blk.bn.running_mean.clone(),
            ));
            out.push((
                format!("conv{}.bn.run_var", l),
                vec![blk.bn.running_var.len()],
                blk.bn.running_var.clone(),
            ));
        }
    }
    out
}

pub fn save_checkpoint(
    model: &Model,
    seed: u64,
    step: u64,
    mode: Mode,
    path: &Path,
) -> Result<()> {
    let mut m = model.clone();
    let payload = payload_names(&mut m);
    let header = Header {
        spec: model.spec(),
        tensors: payload
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        quant: (0..model.quant_layers())
            .map(|l| {
                let qp = model.quant(l);
                QuantEntry {
                    bits: qp.bits.data.clone(),
                    exps: qp.exps.data.clone(),
                    live: qp.live.clone(),
                    frozen_until: qp.frozen_until.clone(),
                }
            })
            .collect(),
        seed,
        step,
        trained: model.trained(),
        mode,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, _, data) in &payload {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub seed: u64,
    pub step: u64,
    pub mode: Mode,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = fs::read(path)?;
    let pstr = path.display().to_string();
    if buf.len() < 10 {
        return Err(Error::Truncated {
            path: pstr,
            need: 10,
            have: buf.len(),
        });
    }
    if buf[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: pstr,
            expected: u32::from_be_bytes(MAGIC),
            got: u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]),
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            got: version,
        });
    }
    let hlen = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    if buf.len() < 10 + hlen {
        return Err(Error::Truncated {
            path: pstr,
            need: 10 + hlen,
            have: buf.len(),
        });
    }
    let header: Header = serde_json::from_slice(&buf[10..10 + hlen])?;

    // Rebuild the model skeleton, then overwrite all state.
    let mut rng = Rng::new(header.seed);
    let mut model = Model::build(&header.spec, 8.0, &mut rng)?;
    if header.quant.len() != model.quant_layers() {
        return Err(Error::Invalid {
            what: format!(
                "checkpoint has {} quant layers, model expects {}",
                header.quant.len(),
                model.quant_layers()
            ),
        });
    }
    for (l, q) in header.quant.iter().enumerate() {
        let qp = model.quant_mut(l);
        if q.bits.len() != qp.groups() {
            return Err(Error::CheckpointShape {
                name: format!("quant[{}]", l),
                header: vec![q.bits.len()],
                actual: vec![qp.groups()],
            });
        }
        qp.bits.data = q.bits.clone();
        qp.exps.data = q.exps.clone();
        qp.live = q.live.clone();
        qp.frozen_until = q.frozen_until.clone();
    }

    let mut off = 10 + hlen;
    let mut values: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let need = off + 4 * n;
        if buf.len() < need {
            return Err(Error::Truncated {
                path: pstr,
                need,
                have: buf.len(),
            });
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = off + 4 * i;
            data.push(f32::from_le_bytes([
                buf[b],
                buf[b + 1],
                buf[b + 2],
                buf[b + 3],
            ]));
        }
        values.push((entry.name.clone(), entry.shape.clone(), data));
        off = need;
    }

    let mut used = vec![false; values.len()];
    {
        let mut slots = model.slots_mut();
        for slot in slots.iter_mut() {
            if matches!(
                slot.kind,
                SlotKind::QuantBits { .. } | SlotKind::QuantExps { .. }
            ) {
                continue;
            }
            let pos = values
                .iter()
                .position(|(n, _, _)| *n == slot.name)
                .ok_or_else(|| Error::Invalid {
                    what: format!("checkpoint missing tensor {}", slot.name),
                })?;
            let (_, shape, data) = &values[pos];
            if *shape != slot.tensor.shape {
                return Err(Error::CheckpointShape {
                    name: slot.name.clone(),
                    header: shape.clone(),
                    actual: slot.tensor.shape.clone(),
                });
            }
            slot.tensor.data = data.clone();
            used[pos] = true;
        }
    }
    if let Model::Cnn(m) = &mut model {
        for (l, blk) in m.blocks.iter_mut().enumerate() {
            for (field, dst) in [
                ("run_mean", &mut blk.bn.running_mean),
                ("run_var", &mut blk.bn.running_var),
            ] {
                let name = format!("conv{}.bn.{}", l, field);
                let pos = values
                    .iter()
                    .position(|(n, _, _)| *n == name)
                    .ok_or_else(|| Error::Invalid {
                        what: format!("checkpoint missing tensor {}", name),
                    })?;
                if values[pos].2.len() != dst.len() {
                    return Err(Error::CheckpointShape {
                        name,
                        header: values[pos].1.clone(),
                        actual: vec![dst.len()],
                    });
                }
                *dst = values[pos].2.clone();
                used[pos] = true;
            }
        }
    }
    model.set_trained(header.trained);
    Ok(LoadedCheckpoint {
        model,
        seed: header.seed,
        step: header.step,
        mode: header.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_text, synthetic_vision, Dataset, Split};
    use crate::models::{build_cnn, build_decoder, CnnSpec, DecoderSpec, Phase};
    use crate::tape::Tape;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sdsc_ckpt");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_preserves_forward_bits_cnn() {
        let mut rng = Rng::new(3);
        let mut m = build_cnn(
            &CnnSpec {
                channels: vec![4, 6],
                classes: 10,
            },
            8.0,
            &mut rng,
        )
        .unwrap();
        m.blocks[0].bn.running_mean[1] = 0.37;
        m.blocks[1].qp.bits.data[2] = 5.25;
        m.blocks[1].qp.live[3] = false;
        let model = Model::Cnn(m);
        let p = tmp("cnn.sdsc");
        save_checkpoint(&model, 42, 17, Mode::Safe, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.step, 17);

        let data = Dataset::Vision(synthetic_vision(8, 1));
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let fw = m
                .forward_batch(&mut tape, &data, &[0, 1, 2], Phase::Eval, true)
                .unwrap();
            tape.data(fw.logits).to_vec()
        };
        let a = run(&model);
        let b = run(&loaded.model);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Q and bytes preserved exactly
        assert_eq!(model.average_q(), loaded.model.average_q());
        assert_eq!(model.report_bytes(true), loaded.model.report_bytes(true));
    }

    #[test]
    fn roundtrip_decoder() {
        let mut rng = Rng::new(5);
        let model = Model::Decoder(build_decoder(&DecoderSpec::default(), 8.0, &mut rng).unwrap());
        let p = tmp("dec.sdsc");
        save_checkpoint(&model, 1, 0, Mode::Unsafe, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let data = Dataset::Text(synthetic_text(6, 2, 16, Split::Train));
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let fw = m
                .forward_batch(&mut tape, &data, &[0, 1], Phase::Eval, true)
                .unwrap();
            tape.data(fw.logits).to_vec()
        };
        assert_eq!(run(&model), run(&loaded.model));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut rng = Rng::new(7);
        let model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let p = tmp("magic.sdsc");
        save_checkpoint(&model, 0, 0, Mode::Baseline, &p).unwrap();
        let mut buf = fs::read(&p).unwrap();
        buf[0] = b'X';
        fs::write(&p, buf).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut rng = Rng::new(7);
        let model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let p = tmp("version.sdsc");
        save_checkpoint(&model, 0, 0, Mode::Baseline, &p).unwrap();
        let mut buf = fs::read(&p).unwrap();
        buf[4] = 99;
        fs::write(&p, buf).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::VersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn edited_shape_rejected() {
        let mut rng = Rng::new(7);
        let model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let p = tmp("shape.sdsc");
        save_checkpoint(&model, 0, 0, Mode::Baseline, &p).unwrap();
        let buf = fs::read(&p).unwrap();
        let hlen = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&buf[10..10 + hlen]).unwrap();
        // mutate the first tensor's shape
        header["tensors"][0]["shape"][0] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut nb = Vec::new();
        nb.extend_from_slice(&buf[..6]);
        nb.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        nb.extend_from_slice(&new_header);
        nb.extend_from_slice(&buf[10 + hlen..]);
        fs::write(&p, nb).unwrap();
        match load_checkpoint(&p) {
            Err(Error::CheckpointShape { .. }) | Err(Error::Truncated { .. }) => {}
            other => panic!("expected shape/truncation error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut rng = Rng::new(7);
        let model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let p = tmp("trunc.sdsc");
        save_checkpoint(&model, 0, 0, Mode::Baseline, &p).unwrap();
        let buf = fs::read(&p).unwrap();
        fs::write(&p, &buf[..buf.len() - 64]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Truncated { .. })));
    }
}
