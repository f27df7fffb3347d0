// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.moem` model files.
//!
//! Layout: `MOEM`, u16 version, u32 config length, canonical (sorted-key)
//! JSON config, then every tensor as a 16-byte header (tag, rows, cols,
//! reserved) followed by little-endian `f32` data in row-major order.
//! Vectors are stored as `len x 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::ModelWeights;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MOEM";
pub const FORMAT_VERSION: u16 = 1;

struct Slot<'a, T> {
    tag: &'static [u8; 4],
    name: String,
    rows: usize,
    cols: usize,
    data: &'a mut [T],
}

fn slots<T: Scalar>(w: &mut ModelWeights<T>) -> Vec<Slot<'_, T>> {
    fn mat<'a, T: Scalar>(
        tag: &'static [u8; 4],
        name: String,
        m: &'a mut crate::math::Matrix<T>,
    ) -> Slot<'a, T> {
        let (rows, cols) = m.shape();
        Slot { tag, name, rows, cols, data: m.as_mut_slice() }
    }
    fn vector<'a, T>(tag: &'static [u8; 4], name: String, v: &'a mut [T]) -> Slot<'a, T> {
        Slot { tag, name, rows: v.len(), cols: 1, data: v }
    }
    let mut out = vec![
        mat(b"TEMB", "token_embedding".into(), &mut w.token_embedding),
        mat(b"PEMB", "position_embedding".into(), &mut w.position_embedding),
        mat(b"UNEM", "unembedding".into(), &mut w.unembedding),
    ];
    for (l, layer) in w.layers.iter_mut().enumerate() {
        for (h, head) in layer.heads.iter_mut().enumerate() {
            out.push(mat(b"ATTQ", format!("layer {l} head {h} query"), &mut head.query));
            out.push(mat(b"ATTK", format!("layer {l} head {h} key"), &mut head.key));
            out.push(mat(b"ATTV", format!("layer {l} head {h} value"), &mut head.value));
            out.push(mat(b"ATTO", format!("layer {l} head {h} output"), &mut head.output));
        }
        out.push(mat(b"GATW", format!("layer {l} gate"), &mut layer.gate));
        out.push(vector(b"GATB", format!("layer {l} gate bias"), &mut layer.gate_bias));
        for (j, e) in layer.experts.iter_mut().enumerate() {
            out.push(mat(b"EXW1", format!("layer {l} expert {j} w_in"), &mut e.w_in));
            out.push(vector(b"EXB1", format!("layer {l} expert {j} b_in"), &mut e.b_in));
            out.push(mat(b"EXW2", format!("layer {l} expert {j} w_out"), &mut e.w_out));
        }
        if let Some(e) = layer.shared.as_mut() {
            out.push(mat(b"SHW1", format!("layer {l} shared w_in"), &mut e.w_in));
            out.push(vector(b"SHB1", format!("layer {l} shared b_in"), &mut e.b_in));
            out.push(mat(b"SHW2", format!("layer {l} shared w_out"), &mut e.w_out));
        }
    }
    out
}

/// Sorted-key JSON for a config.
pub fn canonical_config_json(config: &ModelConfig) -> Result<String> {
    // serde_json's default map is ordered by key
    let value = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&value)?)
}

fn u32_of(n: usize, field: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format {
        field: field.into(),
        reason: format!("{n} does not fit in u32"),
    })
}

/// Serializes weights to bytes.
pub fn encode_model<T: Scalar>(weights: &ModelWeights<T>) -> Result<Vec<u8>> {
    weights.validate()?;
    let json = canonical_config_json(&weights.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(json.len(), "config")?.to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let mut w = weights.clone();
    for slot in slots(&mut w) {
        out.extend_from_slice(slot.tag);
        out.extend_from_slice(&u32_of(slot.rows, &slot.name)?.to_le_bytes());
        out.extend_from_slice(&u32_of(slot.cols, &slot.name)?.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in slot.data.iter() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                field: field.into(),
                reason: format!("truncated at byte {}", self.buf.len()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parses bytes produced by [`encode_model`].
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            field: "magic".into(),
            reason: "not a MOEM file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            field: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let json = r.take(len, "config")?;
    let config: ModelConfig = serde_json::from_slice(json).map_err(|e| Error::Format {
        field: "config".into(),
        reason: e.to_string(),
    })?;
    config.validate()?;
    let mut weights = ModelWeights::<T>::zeros(&config)?;
    for slot in slots(&mut weights) {
        let tag = r.take(4, &slot.name)?;
        if tag != slot.tag {
            return Err(Error::Format {
                field: slot.name,
                reason: format!(
                    "expected tag {}, found {:?}",
                    String::from_utf8_lossy(slot.tag),
                    String::from_utf8_lossy(tag)
                ),
            });
        }
        let rows = r.u32(&slot.name)? as usize;
        let cols = r.u32(&slot.name)? as usize;
        let _reserved = r.u32(&slot.name)?;
        if (rows, cols) != (slot.rows, slot.cols) {
            return Err(Error::Shape(format!(
                "{}: declared {rows}x{cols}, config requires {}x{}",
                slot.name, slot.rows, slot.cols
            )));
        }
        let raw = r.take(4 * rows * cols, &slot.name)?;
        for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format {
                    field: slot.name.clone(),
                    reason: "non-finite value".into(),
                });
            }
            *dst = T::c(f64::from(v));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            field: "trailer".into(),
            reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(weights)
}

pub fn save_model<T: Scalar>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(weights)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<T>> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Activation;
    use crate::model::weights::init_model;

    fn model() -> ModelWeights<f64> {
        init_model(&ModelConfig {
            num_layers: 2,
            d_model: 4,
            num_heads: 2,
            head_dim: 2,
            vocab_size: 5,
            max_positions: 3,
            num_experts: 3,
            top_k: 2,
            has_shared_expert: true,
            expert_hidden: 3,
            shared_hidden: 2,
            activation: Activation::Relu,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let w = model();
        let bytes = encode_model(&w).unwrap();
        let back: ModelWeights<f64> = decode_model(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn config_json_is_sorted() {
        let json = canonical_config_json(&model().config).unwrap();
        assert!(json.starts_with("{\"activation\":\"relu\",\"d_model\":4"), "{json}");
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode_model(&model()).unwrap();
        for cut in 0..bytes.len() {
            let err = decode_model::<f64>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_trailer() {
        let bytes = encode_model(&model()).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_model::<f64>(&b), Err(Error::Format { field, .. }) if field == "magic"));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(decode_model::<f64>(&b), Err(Error::Format { field, .. }) if field == "version"));
        let mut b = bytes;
        b.push(0);
        assert!(matches!(decode_model::<f64>(&b), Err(Error::Format { field, .. }) if field == "trailer"));
    }

    #[test]
    fn corrupted_dims_name_the_tensor() {
        let w = model();
        let bytes = encode_model(&w).unwrap();
        let header = 4 + 2 + 4 + canonical_config_json(&w.config).unwrap().len();
        // every tensor header: bump the declared row count by one
        let mut offset = header;
        let mut w2 = w.clone();
        for slot in slots(&mut w2) {
            let mut b = bytes.clone();
            let rows = u32::from_le_bytes(b[offset + 4..offset + 8].try_into().unwrap());
            b[offset + 4..offset + 8].copy_from_slice(&(rows + 1).to_le_bytes());
            let msg = decode_model::<f64>(&b).unwrap_err().to_string();
            assert!(msg.starts_with("shape error") && msg.contains(&slot.name), "{msg}");
            offset += 16 + 4 * slot.rows * slot.cols;
        }
        assert_eq!(offset, bytes.len());
    }
}
