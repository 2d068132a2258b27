//! `TDLC` checkpoints.
//!
//! ```text
//! "TDLC" | u32 version = 1
//! u32 n | n × (u32 name_len | name | TDL1 tensor)        parameters
//! u32 m | m × (u32 name_len | name | TDL1 tensor)        optimizer state
//! u32 epoch | u64 rng state
//! u32 len | model config as `key = value` text
//! ```
//!
//! All integers little-endian. Tensors are stored as f32.

use std::collections::HashSet;
use std::path::Path;

use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_exact, read_u32, Element, Tdl1Error, Tensor};
use crate::train::optim::Sgd;

pub const TDLC_MAGIC: &[u8; 4] = b"TDLC";
pub const TDLC_VERSION: u32 = 1;
const STEP_KEY: &str = "step";
const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
    pub epoch: u32,
    pub rng_state: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_section(buf: &mut Vec<u8>, entries: &[(String, Tensor<f32>)]) {
    put_u32(buf, entries.len() as u32);
    for (name, t) in entries {
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        t.write_tdl1(buf).expect("writing to a Vec cannot fail");
    }
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &Model<T>, opt: Option<&Sgd<T>>, epoch: u32, rng_state: u64) -> Self {
        let params = model.params.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect();
        let optimizer = opt.map_or_else(Vec::new, |o| {
            let mut v: Vec<(String, Tensor<f32>)> = model
                .params
                .iter()
                .zip(&o.velocity)
                .map(|(p, v)| (format!("{VELOCITY_PREFIX}{}", p.name), v.cast()))
                .collect();
            v.push((STEP_KEY.to_string(), Tensor::scalar(o.steps_taken as f32)));
            v
        });
        Self {
            config: model.config.clone(),
            params,
            optimizer,
            epoch,
            rng_state,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = TDLC_MAGIC.to_vec();
        put_u32(&mut buf, TDLC_VERSION);
        put_section(&mut buf, &self.params);
        put_section(&mut buf, &self.optimizer);
        put_u32(&mut buf, self.epoch);
        buf.extend_from_slice(&self.rng_state.to_le_bytes());
        let cfg = model_to_text(&self.config);
        put_u32(&mut buf, cfg.len() as u32);
        buf.extend_from_slice(cfg.as_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        let lift = |e: Tdl1Error| e.into_error(path);
        let r = &mut &bytes[..];
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic).map_err(lift)?;
        if &magic != TDLC_MAGIC {
            return Err(corrupt(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r).map_err(lift)?;
        if version != TDLC_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let section = |r: &mut &[u8]| -> Result<Vec<(String, Tensor<f32>)>> {
            let n = read_u32(r).map_err(lift)? as usize;
            let mut out = Vec::with_capacity(n.min(1 << 16));
            let mut seen = HashSet::new();
            for _ in 0..n {
                let len = read_u32(r).map_err(lift)? as usize;
                if len > 4096 {
                    return Err(corrupt(format!("implausible name length {len}")));
                }
                let mut name = vec![0u8; len];
                read_exact(r, &mut name).map_err(lift)?;
                let name = String::from_utf8(name).map_err(|_| corrupt("parameter name is not UTF-8".into()))?;
                if !seen.insert(name.clone()) {
                    return Err(corrupt(format!("duplicate entry {name}")));
                }
                let t = Tensor::read_tdl1(r).map_err(lift)?;
                out.push((name, t));
            }
            Ok(out)
        };
        let params = section(r)?;
        let optimizer = section(r)?;
        let epoch = read_u32(r).map_err(lift)?;
        let mut rng = [0u8; 8];
        read_exact(r, &mut rng).map_err(lift)?;
        let len = read_u32(r).map_err(lift)? as usize;
        if len > r.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            });
        }
        let mut text = vec![0u8; len];
        read_exact(r, &mut text).map_err(lift)?;
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        let text = String::from_utf8(text).map_err(|_| corrupt("config section is not UTF-8".into()))?;
        let config = model_from_text(&text).map_err(|e| corrupt(format!("config section: {e}")))?;
        Ok(Self {
            config,
            params,
            optimizer,
            epoch,
            rng_state: u64::from_le_bytes(rng),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model from the stored config and overwrites every
    /// parameter. Names must match the architecture exactly.
    pub fn to_model<T: Element>(&self, path: &Path) -> Result<Model<T>> {
        let mut model = Model::<T>::build(&self.config)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!(
                    "{} stored parameters, architecture has {}",
                    self.params.len(),
                    model.params.len()
                ),
            });
        }
        for (name, t) in &self.params {
            let p = model
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Corrupt {
                    path: path.to_path_buf(),
                    msg: format!("unknown parameter {name}"),
                })?;
            if p.tensor.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    stored: t.shape().to_vec(),
                    expected: p.tensor.shape().to_vec(),
                });
            }
            p.tensor = t.cast();
        }
        Ok(model)
    }

    /// Optimizer state for `model`, if the checkpoint has one.
    pub fn to_optimizer<T: Element>(
        &self,
        model: &Model<T>,
        momentum: f64,
        weight_decay: f64,
        path: &Path,
    ) -> Result<Option<Sgd<T>>> {
        if self.optimizer.is_empty() {
            return Ok(None);
        }
        let find = |key: &str| self.optimizer.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let missing = |key: &str| Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("optimizer entry {key} is missing"),
        };
        let mut opt = Sgd::new(&model.params, momentum, weight_decay);
        for (p, v) in model.params.iter().zip(opt.velocity.iter_mut()) {
            let key = format!("{VELOCITY_PREFIX}{}", p.name);
            let t = find(&key).ok_or_else(|| missing(&key))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::ParamShape {
                    name: key,
                    stored: t.shape().to_vec(),
                    expected: p.tensor.shape().to_vec(),
                });
            }
            *v = t.cast();
        }
        opt.steps_taken = find(STEP_KEY).ok_or_else(|| missing(STEP_KEY))?.item() as usize;
        Ok(Some(opt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::synth_dataset;
    use crate::train::{TrainConfig, Trainer};

    fn trained() -> Trainer<f32> {
        let data = synth_dataset(4, 32, 32, 2, 0).unwrap();
        let mut t = Trainer::new(
            Model::build(&ModelConfig::tiny()).unwrap(),
            TrainConfig {
                steps: 10,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        for _ in 0..2 {
            t.train_step(&data).unwrap();
        }
        t
    }

    #[test]
    fn save_load_forward_is_bit_identical() {
        let t = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdlc");
        Checkpoint::from_model(&t.model, Some(&t.opt), 1, t.rng_word_pos())
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.epoch, 1);
        assert_eq!(ck.rng_state, t.rng_word_pos());
        let m: Model<f32> = ck.to_model(&path).unwrap();
        let data = synth_dataset(2, 32, 32, 2, 9).unwrap();
        let refs: Vec<_> = data.iter().collect();
        let (x, _) = crate::train::data::collate::<f32>(&refs).unwrap();
        assert_eq!(m.predict(&x).unwrap(), t.model.predict(&x).unwrap());
        let opt = ck.to_optimizer(&m, 0.9, 1e-4, &path).unwrap().unwrap();
        assert_eq!(opt.steps_taken, 2);
        assert_eq!(opt.velocity, t.opt.velocity);
    }

    #[test]
    fn manifest_lists_every_parameter_once() {
        let t = trained();
        let ck = Checkpoint::from_model(&t.model, None, 0, 0);
        let names: HashSet<_> = ck.params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), ck.params.len());
        assert_eq!(names.len(), t.model.params.len());
        assert!(t.model.params.iter().all(|p| names.contains(p.name.as_str())));
        let total: usize = ck.params.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(total, t.model.count_params());
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn distinct_errors() {
        let ck = Checkpoint::from_model(&Model::<f32>::build(&ModelConfig::tiny()).unwrap(), None, 0, 0);
        let bytes = ck.to_bytes();
        let p = Path::new("ck");

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Corrupt { .. })));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::Truncated { .. })),
                "cut at {cut}"
            );
        }

        let mut other = ck.clone();
        other.config.embed_dim = 16;
        other.config.num_heads = vec![2, 4];
        let err = Checkpoint::from_bytes(&other.to_bytes(), p)
            .unwrap()
            .to_model::<f32>(p)
            .unwrap_err();
        assert!(matches!(err, Error::ParamShape { .. }), "{err}");
    }
}
