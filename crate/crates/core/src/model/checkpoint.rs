//! Checkpoint file: `b"WSDB1"`, `u32` version, `u32` tensor count, then per
//! tensor `u16` name length, name, `u8` rank, `rank × u32` dims and a
//! little-endian `f32` payload; a trailing UTF-8 block of `key=value` lines holds
//! hyperparameters and training state. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::params::{Hyper, ModelParams, ParamSet, TENSOR_NAMES};
use crate::train::adam::AdamState;

const MAGIC: &[u8; 5] = b"WSDB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    /// Free-form training state (epoch counters, best validation loss, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint `{key}` has bad value `{raw}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let shapes = self.params.weights.shapes();
        for ((name, shape), data) in TENSOR_NAMES.iter().zip(&shapes).zip(self.params.weights.slices()) {
            tensors.push((name.to_string(), shape.clone(), data));
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, set) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                for ((name, shape), data) in TENSOR_NAMES.iter().zip(&shapes).zip(set.slices()) {
                    tensors.push((format!("{prefix}{name}"), shape.clone(), data));
                }
            }
        }

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in *data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        let h = &self.params.hyper;
        let mut text = format!(
            "k={}\nl2={}\ndropout_rate={}\nmode={}\n",
            h.k, h.l2, h.dropout_rate, h.mode
        );
        if let Some(opt) = &self.optimizer {
            text.push_str(&format!(
                "adam.step={}\nadam.lr={}\nadam.beta1={}\nadam.beta2={}\nadam.eps={}\n",
                opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps
            ));
        }
        for (k, v) in &self.meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "truncated checkpoint: expected at least {} bytes, found {}",
                    pos + n,
                    bytes.len()
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("checkpoint magic mismatch (expected WSDB1)".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = u32_at(take(4)?) as usize;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?) as usize);
            }
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        let text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| Error::Format("hyperparameter block is not UTF-8".into()))?;
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad hyperparameter line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut field = |key: &str| -> Result<String> {
            kv.remove(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
        };
        fn parse<T: std::str::FromStr>(key: &str, raw: String) -> Result<T> {
            raw.parse()
                .map_err(|_| Error::Format(format!("checkpoint `{key}` has bad value `{raw}`")))
        }
        let hyper = Hyper {
            k: parse("k", field("k")?)?,
            l2: parse("l2", field("l2")?)?,
            dropout_rate: parse("dropout_rate", field("dropout_rate")?)?,
            mode: field("mode")?.parse()?,
        };

        let weights = take_param_set(&mut tensors, "")?;
        let optimizer = if tensors.contains_key("adam.m.W3") {
            let m = take_param_set(&mut tensors, "adam.m.")?;
            let v = take_param_set(&mut tensors, "adam.v.")?;
            for set in [&m, &v] {
                if set.shapes() != weights.shapes() {
                    return Err(Error::Format("optimizer state shape mismatch".into()));
                }
            }
            Some(AdamState {
                step: parse("adam.step", field("adam.step")?)?,
                lr: parse("adam.lr", field("adam.lr")?)?,
                beta1: parse("adam.beta1", field("adam.beta1")?)?,
                beta2: parse("adam.beta2", field("adam.beta2")?)?,
                eps: parse("adam.eps", field("adam.eps")?)?,
                m,
                v,
            })
        } else {
            None
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        }
        Ok(Checkpoint {
            params: ModelParams { weights, hyper },
            optimizer,
            meta: kv,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn take_param_set(tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, prefix: &str) -> Result<ParamSet> {
    let mut take = |name: &str| {
        tensors
            .remove(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{prefix}{name}`")))
    };
    let (w3_shape, w3) = take("W3")?;
    if w3_shape.len() != 2 {
        return Err(Error::Format("W3 must have rank 2".into()));
    }
    let hidden = w3_shape[0];
    let w3 = Array2::from_shape_vec((w3_shape[0], w3_shape[1]), w3).expect("shape product");
    let mut vector = |name: &str| -> Result<Array1<f64>> {
        let (shape, data) = take(name)?;
        if shape != [hidden] {
            return Err(Error::Format(format!(
                "tensor `{prefix}{name}` has shape {shape:?}, expected [{hidden}]"
            )));
        }
        Ok(Array1::from(data))
    };
    Ok(ParamSet {
        w3,
        b3: vector("b3")?,
        w_n: vector("w_N")?,
        w_b: vector("w_B")?,
        w_m: vector("w_M")?,
        u_b: vector("u_B")?,
        u_m: vector("u_M")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, Mode};

    fn sample() -> Checkpoint {
        let mut params = init_params(3, 5, 4, Hyper { mode: Mode::NoSelection, l2: 3e-4, ..Hyper::default() }).unwrap();
        params.weights.round_to_f32();
        let mut ck = Checkpoint::new(params);
        ck.meta.insert("epoch".into(), "7".into());
        ck.meta.insert("best_val_loss".into(), format!("{}", 0.123456789012345f64));
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_value::<f64>("best_val_loss").unwrap(), 0.123456789012345);
        assert_eq!(back.encode(), ck.encode());
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let mut ck = sample();
        let mut opt = AdamState::new(&ck.params.weights, 1e-4);
        opt.step = 12;
        opt.m.w3.fill(0.25);
        opt.v.b3.fill(1.5e-9f32 as f64);
        ck.optimizer = Some(opt);
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut bytes = sample().encode();
        bytes[1] = b'X';
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().encode();
        bytes[5] = 9;
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_hyper_key() {
        let bytes = sample().encode();
        let text_start = bytes.windows(2).rposition(|w| w == b"k=").unwrap();
        let mut cut = bytes[..text_start].to_vec();
        cut.extend_from_slice(b"l2=0.1\ndropout_rate=0\nmode=full\n");
        assert!(Checkpoint::decode(&cut).unwrap_err().to_string().contains("`k`"));
    }
}
