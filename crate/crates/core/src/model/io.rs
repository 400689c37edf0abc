//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RGSW"  u32 version
//! u32 n_fields, then n_fields × (u32 len, key bytes, u32 len, value bytes)
//! u32 n_tensors, then n_tensors × (u32 len, name bytes, u32 rank,
//!                                   rank × u64 dim, payload)
//! ```
//!
//! Header values are UTF-8 text. The `payload_width` field (`f32`/`f64`)
//! declares the width of every tensor payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{LayerWeights, ModelConfig, ModelWeights};
use crate::autograd::{Scalar, Tensor, Width};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGSW";
pub const VERSION: u32 = 1;

fn config_fields(c: &ModelConfig, width: Width) -> Vec<(&'static str, String)> {
    vec![
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_seq", c.max_seq.to_string()),
        ("activation", c.activation.to_string()),
        ("tie_embeddings", c.tie_embeddings.to_string()),
        ("layernorm_eps", c.layernorm_eps.to_string()),
        (
            "payload_width",
            match width {
                Width::F32 => "f32",
                Width::F64 => "f64",
            }
            .to_string(),
        ),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

/// Serializes weights with the given payload width.
pub fn write_weights<S: Scalar, W: Write>(
    weights: &ModelWeights<S>,
    mut w: W,
    width: Width,
) -> Result<()> {
    weights.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let fields = config_fields(&weights.config, width);
    put_u32(&mut out, fields.len() as u32);
    for (k, v) in &fields {
        put_bytes(&mut out, k.as_bytes());
        put_bytes(&mut out, v.as_bytes());
    }
    let tensors = weights.named_tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match width {
                Width::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
                Width::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            }
        }
    }
    w.write_all(&out).map_err(|e| Error::io("<writer>", e))
}

/// Writes `weights` to `path` in the scalar's native width.
pub fn save_weights<S: Scalar>(weights: &ModelWeights<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_weights(weights, &mut buf, S::WIDTH)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&mut bytes.as_slice())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn parse_field<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::Format(format!("header lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("header field `{key}` has bad value `{raw}`")))
}

/// Parses a weight file, converting payloads to `S`.
pub fn read_weights<S: Scalar, R: Read>(r: &mut R) -> Result<ModelWeights<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    let mut c = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n_fields = c.u32("header field count")?;
    let mut fields = BTreeMap::new();
    for _ in 0..n_fields {
        let k = c.string("header key")?;
        let v = c.string("header value")?;
        fields.insert(k, v);
    }
    let activation = fields
        .get("activation")
        .ok_or_else(|| Error::Format("header lacks `activation`".into()))?
        .parse()
        .map_err(|e: Error| Error::Format(e.to_string()))?;
    let config = ModelConfig {
        n_layers: parse_field(&fields, "n_layers")?,
        n_heads: parse_field(&fields, "n_heads")?,
        d_model: parse_field(&fields, "d_model")?,
        d_ff: parse_field(&fields, "d_ff")?,
        vocab_size: parse_field(&fields, "vocab_size")?,
        max_seq: parse_field(&fields, "max_seq")?,
        activation,
        tie_embeddings: parse_field(&fields, "tie_embeddings")?,
        layernorm_eps: parse_field(&fields, "layernorm_eps")?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("header config invalid: {e}")))?;
    let width = match fields.get("payload_width").map(String::as_str) {
        Some("f64") => Width::F64,
        Some("f32") => Width::F32,
        other => return Err(Error::Format(format!("bad payload_width {other:?}"))),
    };

    let n_tensors = c.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = c.string("tensor name")?;
        let rank = c.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| c.u64("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let want = super::expected_shape(
            &name,
            config.d_model,
            config.d_ff,
            config.vocab_size,
            config.max_seq,
        )
        .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
        if dims != want {
            return Err(Error::Format(format!(
                "tensor `{name}` declares {dims:?}, header implies {want:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * width.bytes(), "tensor payload")?;
        let data = raw
            .chunks_exact(width.bytes())
            .map(|b| match width {
                Width::F64 => S::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8"))),
                Width::F32 => {
                    S::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4")) as f64)
                }
            })
            .collect();
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }

    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    };
    let token_embedding = take("tok_emb".into())?;
    let position_embedding = take("pos_emb".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm_gain: take(format!("layers.{i}.attn_norm.gain"))?,
            attn_norm_bias: take(format!("layers.{i}.attn_norm.bias"))?,
            w_q: take(format!("layers.{i}.attn.w_q"))?,
            w_k: take(format!("layers.{i}.attn.w_k"))?,
            w_v: take(format!("layers.{i}.attn.w_v"))?,
            w_o: take(format!("layers.{i}.attn.w_o"))?,
            mlp_norm_gain: take(format!("layers.{i}.mlp_norm.gain"))?,
            mlp_norm_bias: take(format!("layers.{i}.mlp_norm.bias"))?,
            w_gate: take(format!("layers.{i}.mlp.w_gate"))?,
            w_up: take(format!("layers.{i}.mlp.w_up"))?,
            w_down: take(format!("layers.{i}.mlp.w_down"))?,
        });
    }
    let final_norm_gain = take("final_norm.gain".into())?;
    let final_norm_bias = take("final_norm.bias".into())?;
    let unembedding = if config.tie_embeddings {
        None
    } else {
        Some(take("unembed".into())?)
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    let weights = ModelWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_norm_gain,
        final_norm_bias,
        unembedding,
    };
    weights
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;

    fn weights() -> ModelWeights<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_ff: 6,
            vocab_size: 9,
            max_seq: 8,
            activation: Activation::Relu,
            tie_embeddings: false,
            layernorm_eps: 1e-5,
        };
        ModelWeights::init(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_and_byte_identical_resave() {
        let w = weights();
        let mut a = Vec::new();
        write_weights(&w, &mut a, Width::F64).unwrap();
        let back: ModelWeights<f64> = read_weights(&mut a.as_slice()).unwrap();
        assert_eq!(back, w);
        let mut b = Vec::new();
        write_weights(&back, &mut b, Width::F64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut a = Vec::new();
        write_weights(&weights(), &mut a, Width::F64).unwrap();
        for cut in [0, 3, 7, 20, a.len() / 2, a.len() - 1] {
            let r: Result<ModelWeights<f64>> = read_weights(&mut &a[..cut]);
            assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut a = Vec::new();
        write_weights(&weights(), &mut a, Width::F64).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_weights::<f64, _>(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = a;
        bad[4] = 9;
        assert!(matches!(
            read_weights::<f64, _>(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn f32_payload_loads_into_f64_model() {
        let w = weights();
        let mut a = Vec::new();
        write_weights(&w, &mut a, Width::F32).unwrap();
        let back: ModelWeights<f64> = read_weights(&mut a.as_slice()).unwrap();
        assert!(back.token_embedding.max_abs_diff(&w.token_embedding) < 1e-7);
        let narrow: ModelWeights<f32> = read_weights(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_weights(&narrow, &mut b, Width::F32).unwrap();
        assert_eq!(a, b);
    }
}
