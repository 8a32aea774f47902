//! Binary checkpoint format.
//!
//! Layout (all integers little-endian): magic `LL3D`, `u32` version, the run
//! config as TOML, the vocabulary (one token per line), `u64` step, then
//! `u32` parameter count and per parameter its name, frozen flag, shape and
//! `f64` values, then an optional optimizer section. Strings are `u64`
//! length-prefixed UTF-8. Trailing bytes are rejected.

use std::path::Path;

use super::config::RunConfig;
use super::model::Model;
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState, Tensor};
use crate::textio::Vocabulary;

pub const MAGIC: &[u8; 4] = b"LL3D";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlob {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub params: Vec<ParamBlob>,
    pub optimizer: Option<OptimizerBlob>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, unit: usize, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > remaining {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(8, what)?;
        Ok(self
            .take(8 * n, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(1, what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_toml()?);
        w.str(&self.vocab.join("\n"));
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.frozen as u8);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f64s(&p.values);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                for v in [o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
                    w.0.extend_from_slice(&v.to_le_bytes());
                }
                w.u64(o.t);
                w.u32(o.m.len() as u32);
                for (m, v) in o.m.iter().zip(&o.v) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let config = RunConfig::from_toml(&r.str("config")?)?;
        let vocab_text = r.str("vocabulary")?;
        let vocab: Vec<String> = vocab_text.split('\n').map(str::to_string).collect();
        let step = r.u64("step")?;
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for i in 0..n {
            let what = format!("parameter {i}");
            let name = r.str(&what)?;
            let frozen = match r.u8(&what)? {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for `{name}`"))),
            };
            let ndim = r.u32(&what)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("`{name}` declares {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64(&what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = r.f64s(&what)?;
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::Checkpoint(format!("`{name}` shape {shape:?} does not match {} values", values.len())));
            }
            params.push(ParamBlob {
                name,
                shape,
                frozen,
                values,
            });
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let mut f = [0.0; 4];
                for x in &mut f {
                    *x = f64::from_le_bytes(r.take(8, "optimizer config")?.try_into().expect("8 bytes"));
                }
                let t = r.u64("optimizer step")?;
                let k = r.u32("optimizer entries")? as usize;
                if k != params.len() {
                    return Err(Error::Checkpoint(format!("optimizer has {k} entries for {} parameters", params.len())));
                }
                let mut m = Vec::with_capacity(k);
                let mut v = Vec::with_capacity(k);
                for i in 0..k {
                    m.push(r.f64s("optimizer moments")?);
                    v.push(r.f64s("optimizer moments")?);
                    if m[i].len() != params[i].values.len() || v[i].len() != params[i].values.len() {
                        return Err(Error::Checkpoint(format!("optimizer moments of `{}` have the wrong size", params[i].name)));
                    }
                }
                Some(OptimizerBlob {
                    config: AdamWConfig {
                        beta1: f[0],
                        beta2: f[1],
                        eps: f[2],
                        weight_decay: f[3],
                    },
                    t,
                    m,
                    v,
                })
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn capture(model: &Model, state: Option<&TrainState>) -> Self {
        Self {
            config: model.config.clone(),
            vocab: model.vocab.tokens().to_vec(),
            step: state.map_or(0, |s| s.step as u64),
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamBlob {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    frozen: p.frozen,
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
            optimizer: state.map(|s| OptimizerBlob {
                config: s.optimizer.config,
                t: s.optimizer.t,
                m: s.optimizer.m.clone(),
                v: s.optimizer.v.clone(),
            }),
        }
    }

    /// Rebuilds the model and training state. If `expected` is given, its
    /// model dimensions must agree with the checkpoint's.
    pub fn restore(&self, expected: Option<&RunConfig>) -> Result<(Model, TrainState)> {
        if let Some(cfg) = expected {
            check_dims(&self.config, cfg)?;
        }
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let mut model = Model::new(self.config.clone(), vocab)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, blob) in ids.into_iter().zip(&self.params) {
            let p = model.store.get_mut(id);
            if p.name != blob.name || p.tensor.shape() != blob.shape.as_slice() {
                return Err(Error::ConfigMismatch {
                    field: blob.name.clone(),
                    found: format!("{:?}", blob.shape),
                    expected: format!("`{}` {:?}", p.name, p.tensor.shape()),
                });
            }
            p.tensor = Tensor::new(blob.shape.clone(), blob.values.clone())?;
            model.store.set_frozen(id, blob.frozen);
        }
        let mut state = TrainState::new(&model);
        state.step = self.step as usize;
        if let Some(o) = &self.optimizer {
            state.optimizer = OptimizerState {
                config: o.config,
                m: o.m.clone(),
                v: o.v.clone(),
                t: o.t,
            };
        }
        Ok((model, state))
    }
}

/// Every model dimension that must agree between a checkpoint and a config.
pub fn check_dims(found: &RunConfig, expected: &RunConfig) -> Result<()> {
    let dims = |c: &RunConfig| -> Vec<(&'static str, String)> {
        vec![
            ("encoder.n_tokens", c.encoder.n_tokens.to_string()),
            ("encoder.out_tokens", c.encoder.out_tokens.to_string()),
            ("encoder.k_nn", c.encoder.k_nn.to_string()),
            ("encoder.d_enc", c.encoder.d_enc.to_string()),
            ("encoder.heads", c.encoder.heads.to_string()),
            ("encoder.hidden", c.encoder.hidden.to_string()),
            ("encoder.radii", format!("{:?}", c.encoder.radii)),
            ("prompt.d_pe", c.prompt.d_pe.to_string()),
            ("prompt.hidden", c.prompt.hidden.to_string()),
            ("mmt.layers", c.mmt.layers.to_string()),
            ("mmt.heads", c.mmt.heads.to_string()),
            ("mmt.d_mmt", c.mmt.d_mmt.to_string()),
            ("mmt.hidden", c.mmt.hidden.to_string()),
            ("mmt.n_queries", c.mmt.n_queries.to_string()),
            ("mmt.max_positions", c.mmt.max_positions.to_string()),
            ("lm.layers", c.lm.layers.to_string()),
            ("lm.heads", c.lm.heads.to_string()),
            ("lm.d_lm", c.lm.d_lm.to_string()),
            ("lm.hidden", c.lm.hidden.to_string()),
            ("lm.max_positions", c.lm.max_positions.to_string()),
        ]
    };
    for ((field, f), (_, e)) in dims(found).into_iter().zip(dims(expected)) {
        if f != e {
            return Err(Error::ConfigMismatch {
                field: field.into(),
                found: f,
                expected: e,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textio::Vocabulary;

    fn tiny() -> (Model, TrainState) {
        let mut cfg = RunConfig::fixture();
        cfg.encoder.n_tokens = 16;
        cfg.encoder.out_tokens = 8;
        cfg.mmt.layers = 1;
        cfg.mmt.n_queries = 4;
        cfg.pretrain.prefix_len = 4;
        cfg.lm.layers = 1;
        let vocab = Vocabulary::build(&["a red chair"]);
        let model = Model::new(cfg, vocab).unwrap();
        let mut state = TrainState::new(&model);
        state.step = 7;
        state.optimizer.t = 7;
        state.optimizer.m[0][0] = 0.25;
        (model, state)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (mut model, state) = tiny();
        model.freeze_base();
        let ck = Checkpoint::capture(&model, Some(&state));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (m2, s2) = back.restore(Some(&model.config)).unwrap();
        assert_eq!(m2.store, model.store);
        assert_eq!(s2.optimizer, state.optimizer);
        assert_eq!(s2.step, 7);
        assert_eq!(Checkpoint::capture(&m2, Some(&s2)).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let (model, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::capture(&model, None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (model, state) = tiny();
        let bytes = Checkpoint::capture(&model, Some(&state)).to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn dimension_mismatch_names_the_field() {
        let (model, _) = tiny();
        let ck = Checkpoint::capture(&model, None);
        let mut other = model.config.clone();
        other.mmt.d_mmt = 32;
        let err = ck.restore(Some(&other)).unwrap_err();
        assert!(matches!(&err, Error::ConfigMismatch { field, .. } if field == "mmt.d_mmt"), "{err}");
    }
}
