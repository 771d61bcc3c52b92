//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! acbi-checkpoint <version>\n
//! <single-line JSON header>\n
//! <payload: every parameter tensor as little-endian f64, header order>
//! ```
//!
//! The header describes the input shape, each layer (kind tag, config and the
//! names and shapes of its tensors), training metadata, the payload length
//! and its SHA-256. Loading reproduces the parameters bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Classifier, ModelMeta};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Dense, Layer, Padding};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "acbi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
    meta: ModelMeta,
    payload_bytes: usize,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn layer_tensors(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
    match layer {
        Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
        Layer::Conv2d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
        Layer::BatchNorm(bn) => vec![
            ("gamma", &bn.gamma),
            ("beta", &bn.beta),
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ],
        _ => Vec::new(),
    }
}

/// Serializes a classifier to checkpoint bytes.
pub fn to_bytes(c: &Classifier) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut layers = Vec::with_capacity(c.layers().len());
    for layer in c.layers() {
        let tensors = layer_tensors(layer);
        for (_, t) in &tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        layers.push(LayerRecord {
            kind: layer.kind().to_string(),
            padding: match layer {
                Layer::Conv2d(conv) => Some(conv.padding),
                _ => None,
            },
            eps: match layer {
                Layer::BatchNorm(bn) => Some(bn.eps),
                _ => None,
            },
            tensors: tensors
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        });
    }
    let header = Header {
        input_shape: c.input_shape().to_vec(),
        layers,
        meta: c.meta.clone(),
        payload_bytes: payload.len(),
        payload_sha256: sha256_hex(&payload),
    };
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
    out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let bad = |m: String| Error::Checkpoint(m);
    let nl1 = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing magic line".into()))?;
    let magic_line = std::str::from_utf8(&bytes[..nl1]).map_err(|_| bad("magic line is not UTF-8".into()))?;
    let version = magic_line
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad(format!("not a checkpoint (first line {magic_line:?})")))?;
    let version: u32 = version
        .parse()
        .map_err(|_| bad(format!("unreadable version {version:?}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let rest = &bytes[nl1 + 1..];
    let nl2 = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl2]).map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &rest[nl2 + 1..];
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, header declares {} (truncated or padded file)",
            payload.len(),
            header.payload_bytes
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch (corrupt file)".into()));
    }

    let mut cursor = payload.chunks_exact(8).map(|c| {
        let mut b = [0u8; 8];
        b.copy_from_slice(c);
        f64::from_le_bytes(b)
    });
    let mut layers = Vec::with_capacity(header.layers.len());
    for rec in &header.layers {
        let mut tensors = Vec::with_capacity(rec.tensors.len());
        for tr in &rec.tensors {
            let n: usize = tr.shape.iter().product();
            let data: Vec<f64> = cursor.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad(format!("payload too short for tensor {}", tr.name)));
            }
            tensors.push(Tensor::new(tr.shape.clone(), data)?);
        }
        let expect = |count: usize| -> Result<()> {
            if tensors.len() == count {
                Ok(())
            } else {
                Err(bad(format!("layer {} needs {count} tensors, found {}", rec.kind, tensors.len())))
            }
        };
        let layer = match rec.kind.as_str() {
            "dense" => {
                expect(2)?;
                let bias = tensors.pop().unwrap();
                Layer::Dense(Dense::new(tensors.pop().unwrap(), bias)?)
            }
            "conv2d" => {
                expect(2)?;
                let bias = tensors.pop().unwrap();
                Layer::Conv2d(Conv2d::new(tensors.pop().unwrap(), bias, rec.padding.unwrap_or_default())?)
            }
            "batchnorm" => {
                expect(4)?;
                let mut it = tensors.into_iter();
                Layer::BatchNorm(BatchNorm {
                    gamma: it.next().unwrap(),
                    beta: it.next().unwrap(),
                    running_mean: it.next().unwrap(),
                    running_var: it.next().unwrap(),
                    eps: rec.eps.ok_or_else(|| bad("batchnorm without eps".into()))?,
                })
            }
            "relu" => Layer::Relu,
            "maxpool2x2" => Layer::MaxPool2x2,
            "flatten" => Layer::Flatten,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        layers.push(layer);
    }
    Classifier::new(layers, header.input_shape, header.meta)
}

pub fn save(c: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(c)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Classifier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn cnn() -> Classifier {
        let mut c = Classifier::from_architecture(
            &Architecture::SmallCnn {
                input_shape: vec![1, 12, 12],
                repr_dim: 2,
                num_classes: 3,
            },
            3,
        )
        .unwrap();
        c.meta.dataset_id = Some("probe".into());
        if let Layer::BatchNorm(bn) = &mut c.layers_mut()[1] {
            bn.running_mean.data_mut()[0] = 0.123_456_789;
            bn.running_var.data_mut()[3] = 1.0 / 3.0;
        }
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = cnn();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&c, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, c);
        for p in 0..10 {
            let x: Vec<f64> = (0..144).map(|i| ((i * (p + 3)) % 17) as f64 / 17.0).collect();
            let (a, b) = (c.logits(&x).unwrap(), back.logits(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&cnn()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 5]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let mut bytes = to_bytes(&cnn()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = to_bytes(&cnn()).unwrap();
        let text = String::from_utf8_lossy(&bytes[..20]).replace("checkpoint 1", "checkpoint 7");
        let mut patched = text.into_bytes();
        patched.extend_from_slice(&bytes[20..]);
        let err = from_bytes(&patched).unwrap_err().to_string();
        assert!(err.contains("version mismatch"), "{err}");
    }

    #[test]
    fn unknown_layer_kind_is_named() {
        let bytes = to_bytes(&cnn()).unwrap();
        let s = replace_once(&bytes, b"\"kind\":\"relu\"", b"\"kind\":\"gelu\"");
        let err = from_bytes(&s).unwrap_err();
        assert!(matches!(&err, Error::UnknownLayerKind(tag) if tag == "gelu"), "{err}");
        assert!(err.to_string().contains("gelu"));
    }

    fn replace_once(hay: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let pos = hay.windows(from.len()).position(|w| w == from).unwrap();
        let mut out = hay[..pos].to_vec();
        out.extend_from_slice(to);
        out.extend_from_slice(&hay[pos + from.len()..]);
        out
    }
}
