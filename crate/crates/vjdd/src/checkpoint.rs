//! Model checkpoints: a text header, then the flat parameters and the
//! optimizer moments as two portable tensors.
//!
//! ```text
//! "VJDC" | u32 version | u64 header length | header | params (N) | moments (2, N)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use vjdd_core::net::Network;
use vjdd_core::optim::Adam;
use vjdd_core::params::ParamStore;
use vjdd_core::rng::stream;
use vjdd_core::train::Stage;
use vjdd_core::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::tensorfile::{PortableTensor, TensorData};

pub const MAGIC: [u8; 4] = *b"VJDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: Adam,
}

/// Build the network described by `config` with freshly initialised weights.
pub fn init_model(config: &RunConfig) -> Result<(Network, ParamStore)> {
    let mut store = ParamStore::new();
    let net = Network::new(config.model, &mut store, &mut stream(config.seed, "init"))?;
    Ok((net, store))
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        step: usize,
        config: RunConfig,
        params: ParamStore,
        adam: Adam,
    ) -> Self {
        Self {
            stage,
            step,
            config,
            params,
            adam,
        }
    }

    /// The network for this checkpoint's config with its stored weights.
    pub fn model(&self) -> Result<(Network, ParamStore)> {
        let (net, fresh) = init_model(&self.config)?;
        check_layout(&fresh, &self.params)?;
        Ok((net, self.params.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&format!("stage = {}\n", self.stage.name()));
        header.push_str(&format!("step = {}\n", self.step));
        header.push_str(&format!("adam_step = {}\n", self.adam.steps_taken()));
        for id in self.params.ids() {
            let s = self.params.get(id).shape();
            header.push_str(&format!(
                "param = {} {} {} {}\n",
                self.params.name(id),
                s.c,
                s.h,
                s.w
            ));
        }
        header.push_str("[config]\n");
        header.push_str(&self.config.to_text());

        let n = self.params.num_scalars();
        let params = PortableTensor::new(vec![n], TensorData::F64(self.params.flatten()))
            .expect("flat parameter length");
        let mut moments = Vec::with_capacity(2 * n);
        for set in [self.adam.first_moments(), self.adam.second_moments()] {
            for t in set {
                moments.extend_from_slice(t.data());
            }
        }
        let moments =
            PortableTensor::new(vec![2, n], TensorData::F64(moments)).expect("moment length");

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        params.write_to(&mut out).expect("writing to memory");
        moments.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(&format!("version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| fmt("truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| fmt("header is not UTF-8"))?;
        let (meta, config_text) = header
            .split_once("[config]\n")
            .ok_or_else(|| fmt("missing config section"))?;

        let mut stage = None;
        let mut step = None;
        let mut adam_step = None;
        let mut layout = Vec::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| fmt("bad header line"))?;
            match k {
                "stage" => stage = Stage::from_name(v),
                "step" => step = v.parse::<usize>().ok(),
                "adam_step" => adam_step = v.parse::<u64>().ok(),
                "param" => {
                    let parts: Vec<&str> = v.split(' ').collect();
                    let [name, c, h, w] = parts[..] else {
                        return Err(fmt("bad param line"));
                    };
                    let dim = |s: &str| s.parse::<usize>().map_err(|_| fmt("bad param shape"));
                    layout.push((name.to_string(), dim(c)?, dim(h)?, dim(w)?));
                }
                _ => return Err(fmt(&format!("unknown header key {k}"))),
            }
        }
        let (stage, step, adam_step) = match (stage, step, adam_step) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(fmt("incomplete header")),
        };
        let config = RunConfig::parse(config_text)?;

        let mut rest = &bytes[16 + hlen..];
        let flat = PortableTensor::read_from(&mut rest)?;
        let moments = PortableTensor::read_from(&mut rest)?;
        if !rest.is_empty() {
            return Err(fmt("trailing bytes"));
        }
        let n: usize = layout.iter().map(|(_, c, h, w)| c * h * w).sum();
        if flat.shape() != [n] || moments.shape() != [2, n] {
            return Err(fmt("tensor sizes do not match the parameter layout"));
        }
        let (TensorData::F64(flat), TensorData::F64(moments)) =
            (flat.into_data(), moments.into_data())
        else {
            return Err(fmt("expected f64 tensors"));
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut off = 0;
        for (name, c, h, w) in layout {
            let len = c * h * w;
            let slice = |s: &[f64]| Tensor::from_vec(c, h, w, s[off..off + len].to_vec());
            params.add(name, slice(&flat)?);
            m.push(slice(&moments[..n])?);
            v.push(slice(&moments[n..])?);
            off += len;
        }
        let adam = Adam::from_state(&params, adam_step, m, v)?;
        Ok(Self {
            stage,
            step,
            config,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
        drop(f);
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, the configured model has {}",
            got.len(),
            expected.len()
        )));
    }
    for (a, b) in expected.ids().zip(got.ids()) {
        if expected.name(a) != got.name(b) || expected.get(a).shape() != got.get(b).shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                got.name(b),
                got.get(b).shape(),
                expected.name(a),
                expected.get(a).shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vjdd_core::params::ParamGrads;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.feat_channels = 4;
        config.model.hidden_channels = 4;
        config.model.max_channels = 8;
        config.seed = 7;
        let (_, mut store) = init_model(&config).unwrap();
        let mut adam = Adam::new(&store);
        let mut grads: ParamGrads = store.zero_grads();
        for id in store.ids() {
            let g = store.get(id).map(|v| v * 0.5 + 0.01);
            grads.accumulate(id, &g);
        }
        adam.step(&mut store, &grads, 1e-3).unwrap();
        Checkpoint::new(Stage::Full, 17, config, store, adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let bits = |s: &ParamStore| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let (_, params) = back.model().unwrap();
        assert_eq!(params, ck.params);
    }

    #[test]
    fn version_and_layout_mismatches_fail() {
        let ck = sample();
        let mut b = ck.to_bytes();
        b[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut other = ck.clone();
        other.config.model.hidden_channels = 8;
        other.config.model.max_channels = 16;
        assert!(other.model().is_err());
    }
}
