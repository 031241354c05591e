//! `FILAB1` weight files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FILAB1"
//! config_len, config JSON (config_len bytes)
//! repeated until EOF:
//!     name_len, name (UTF-8), rank, dims[rank], f32 data (product(dims) values)
//! ```

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2};

use super::{Model, ModelConfig};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 6] = b"FILAB1";

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()?).map_err(io_err(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Model::from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedHeader(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }
}

fn expected_shapes(c: &ModelConfig) -> HashMap<String, Vec<usize>> {
    let mut m = HashMap::new();
    m.insert("embed".into(), vec![c.vocab_size, c.d_model]);
    m.insert("pos".into(), vec![c.max_seq, c.d_model]);
    m.insert("final_norm".into(), vec![c.d_model]);
    m.insert("unembed".into(), vec![c.d_model, c.vocab_size]);
    for l in 0..c.n_layers {
        m.insert(format!("L{l}.norm1"), vec![c.d_model]);
        m.insert(format!("L{l}.norm2"), vec![c.d_model]);
        m.insert(format!("L{l}.mlp.in"), vec![c.d_model, c.mlp_width(l)]);
        m.insert(format!("L{l}.mlp.out"), vec![c.mlp_width(l), c.d_model]);
        for h in 0..c.n_heads {
            for t in ["q", "k", "v"] {
                m.insert(format!("L{l}.attn.{t}.h{h}"), vec![c.d_model, c.d_head]);
            }
            m.insert(format!("L{l}.attn.o.h{h}"), vec![c.d_head, c.d_model]);
        }
    }
    m
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(self.n_params() * 4 + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        for (name, dims, data) in self.named_tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a `FILAB1` buffer. Never allocates more than the buffer can back.
    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::MalformedHeader("bad magic, expected FILAB1".into()));
        }
        let config_len = r.u32("config length")? as usize;
        let config_bytes = r.take(config_len, "config")?;
        let config: ModelConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| Error::MalformedHeader(format!("config JSON: {e}")))?;
        config.validate()?;

        let expected = expected_shapes(&config);
        let mut tensors: HashMap<String, Vec<f32>> = HashMap::with_capacity(expected.len());
        while r.remaining() > 0 {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::MalformedHeader("tensor name is not UTF-8".into()))?
                .to_string();
            let shape = expected
                .get(&name)
                .ok_or_else(|| Error::MalformedHeader(format!("unknown tensor `{name}`")))?;
            if tensors.contains_key(&name) {
                return Err(Error::MalformedHeader(format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::MalformedHeader(format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape.clone(),
                    found: dims,
                });
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4, &format!("data of `{name}`")).map_err(|_| {
                Error::MalformedHeader(format!(
                    "tensor `{name}` needs {} bytes, {} remain",
                    n * 4,
                    r.remaining()
                ))
            })?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            tensors.insert(name, data);
        }

        let mut take = |name: &str| -> Result<Vec<f32>> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))
        };
        let c = &config;
        let mat = |v: Vec<f32>, r: usize, cols: usize| {
            Array2::from_shape_vec((r, cols), v).expect("shape checked")
        };
        let mut model = Model::zeros(config.clone())?;
        model.embed = mat(take("embed")?, c.vocab_size, c.d_model);
        model.pos = mat(take("pos")?, c.max_seq, c.d_model);
        let dh = c.d_head;
        for l in 0..c.n_layers {
            let lw = &mut model.layers[l];
            lw.norm1 = Array1::from(take(&format!("L{l}.norm1"))?);
            lw.norm2 = Array1::from(take(&format!("L{l}.norm2"))?);
            lw.w_in = mat(take(&format!("L{l}.mlp.in"))?, c.d_model, c.mlp_width(l));
            lw.w_out = mat(take(&format!("L{l}.mlp.out"))?, c.mlp_width(l), c.d_model);
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                for (t, w) in [("q", &mut lw.wq), ("k", &mut lw.wk), ("v", &mut lw.wv)] {
                    let part = mat(take(&format!("L{l}.attn.{t}.h{h}"))?, c.d_model, dh);
                    w.slice_mut(cols).assign(&part);
                }
                let o = mat(take(&format!("L{l}.attn.o.h{h}"))?, dh, c.d_model);
                lw.wo.slice_mut(s![h * dh..(h + 1) * dh, ..]).assign(&o);
            }
        }
        model.final_norm = Array1::from(take("final_norm")?);
        model.unembed = mat(take("unembed")?, c.d_model, c.vocab_size);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NormKind, PosKind};

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 73,
            max_seq: 16,
            norm_kind: NormKind::Rms,
            pos_kind: PosKind::LearnedAbsolute,
            mlp_free: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::init(small_config(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.filab");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back, m);
    }

    fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], value: f32) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for _ in 0..dims.iter().product::<usize>() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }

    fn header(c: &ModelConfig) -> Vec<u8> {
        let json = serde_json::to_vec(c).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    #[test]
    fn narrow_embedding_is_named() {
        let mut c = small_config();
        c.d_model = 128;
        c.n_heads = 8;
        c.d_head = 16;
        let mut bytes = header(&c);
        write_tensor(&mut bytes, "embed", &[73, 64], 0.0);
        match Model::from_bytes(&bytes) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "embed"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_named() {
        let c = small_config();
        let mut bytes = header(&c);
        write_tensor(&mut bytes, "final_norm", &[8], f32::NAN);
        match Model::from_bytes(&bytes) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "final_norm"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(matches!(Model::from_bytes(b"NOPE"), Err(Error::MalformedHeader(_))));
        assert!(matches!(Model::from_bytes(b"FILAB1\x05\0\0\0{}"), Err(Error::MalformedHeader(_))));
        let m = Model::init(small_config(), 1).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::MalformedHeader(_))
        ));
        // drop the final tensor entirely
        let cut = bytes.len() - (4 + "unembed".len() + 4 + 8 + 8 * 73 * 4);
        assert!(matches!(Model::from_bytes(&bytes[..cut]), Err(Error::MissingTensor(n)) if n == "unembed"));
    }
}
