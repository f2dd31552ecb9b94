//! Binary checkpoints: magic, JSON header, little-endian `f32` payload and a
//! SHA-256 trailer over everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};
use crate::unet::Denoiser;

const MAGIC: &[u8; 12] = b"SEMDIFFCKPT1";
const DIGEST_LEN: usize = 32;
/// Name of the pointer file holding the latest checkpoint's file name.
pub const LATEST_POINTER: &str = "ckpt_latest";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn from_adam(adam: &Adam<f32>) -> Self {
        Self {
            config: adam.config,
            step: adam.step,
            first_moment: adam.first_moment.clone(),
            second_moment: adam.second_moment.clone(),
        }
    }

    pub fn into_adam(self) -> Adam<f32> {
        Adam {
            config: self.config,
            step: self.step,
            first_moment: self.first_moment,
            second_moment: self.second_moment,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub ema: Option<Vec<Tensor<f32>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ExperimentConfig,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
    optimizer: Option<(AdamConfig, u64)>,
    ema: bool,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, step: u64, params: &ParamStore<f32>) -> Self {
        Self {
            config,
            step,
            params: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: None,
            ema: None,
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &Tensor<f32>> {
        let params = self.params.iter().map(|(_, t)| t);
        let opt = self
            .optimizer
            .iter()
            .flat_map(|o| o.first_moment.iter().chain(&o.second_moment));
        params.chain(opt).chain(self.ema.iter().flatten())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shapes: Vec<&[usize]> = self.params.iter().map(|(_, t)| t.shape()).collect();
        let mirrors = |ts: &[Tensor<f32>]| ts.len() == shapes.len() && ts.iter().zip(&shapes).all(|(t, s)| t.shape() == *s);
        if let Some(o) = &self.optimizer {
            if !mirrors(&o.first_moment) || !mirrors(&o.second_moment) {
                return Err(Error::Shape("optimizer moments do not mirror the parameters".into()));
            }
        }
        if let Some(e) = &self.ema {
            if !mirrors(e) {
                return Err(Error::Shape("EMA weights do not mirror the parameters".into()));
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            tensors: self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step)),
            ema: self.ema.is_some(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 4 * self.blocks().map(Tensor::len).sum::<usize>() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.blocks() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint file (bad magic or too short)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch: file is truncated or corrupt"));
        }
        let header_len = u64::from_le_bytes(body[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
        let payload_start = MAGIC.len() + 8 + header_len;
        if payload_start > body.len() {
            return Err(err("header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&body[MAGIC.len() + 8..payload_start])
            .map_err(|e| err(&format!("malformed header: {e}")))?;
        let mut payload = &body[payload_start..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(err("payload shorter than the header declares"));
            }
            let (head, rest) = payload.split_at(4 * n);
            payload = rest;
            let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(shape, data)
        };
        let params = header
            .tensors
            .iter()
            .map(|(name, shape)| Ok((name.clone(), take(shape)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut mirror = || header.tensors.iter().map(|(_, s)| take(s)).collect::<Result<Vec<_>>>();
        let optimizer = match header.optimizer {
            Some((config, step)) => Some(OptimizerState {
                config,
                step,
                first_moment: mirror()?,
                second_moment: mirror()?,
            }),
            None => None,
        };
        let ema = if header.ema { Some(mirror()?) } else { None };
        if !payload.is_empty() {
            return Err(err("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
            optimizer,
            ema,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    /// Loads a checkpoint file, a `ckpt_latest` pointer, or a directory holding one.
    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve(path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes, &path)
    }

    fn network(&self, weights: Vec<(String, Tensor<f32>)>) -> Result<Denoiser<f32>> {
        let mut net = Denoiser::new(self.config.denoiser(), 0)?;
        net.params_mut().load_from(weights).map_err(|e| Error::Checkpoint {
            path: PathBuf::new(),
            reason: e.to_string(),
        })?;
        Ok(net)
    }

    /// The network with the raw trained weights.
    pub fn denoiser(&self) -> Result<Denoiser<f32>> {
        self.network(self.params.clone())
    }

    /// The network with EMA weights, when the run kept them.
    pub fn ema_denoiser(&self) -> Result<Option<Denoiser<f32>>> {
        self.ema
            .as_ref()
            .map(|ema| {
                let named = self.params.iter().map(|(n, _)| n.clone()).zip(ema.iter().cloned()).collect();
                self.network(named)
            })
            .transpose()
    }
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

/// Points `ckpt_latest` in `dir` at `file_name`.
pub fn write_latest_pointer(dir: &Path, file_name: &str) -> Result<()> {
    let path = dir.join(LATEST_POINTER);
    std::fs::write(&path, format!("{file_name}\n")).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn resolve(path: &Path) -> Result<PathBuf> {
    let pointer = if path.is_dir() {
        path.join(LATEST_POINTER)
    } else if path.file_name().is_some_and(|n| n == LATEST_POINTER) {
        path.to_path_buf()
    } else {
        return Ok(path.to_path_buf());
    };
    let name = std::fs::read_to_string(&pointer).map_err(|e| Error::io(format!("reading {}", pointer.display()), e))?;
    Ok(pointer.parent().unwrap_or(Path::new("")).join(name.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::Variant;

    fn sample() -> Checkpoint {
        let mut config = ExperimentConfig::toy(Variant::MaskGuided);
        config.model.base_width = 4;
        config.model.channel_multipliers = vec![1, 2];
        config.model.image_size = 8;
        config.model.attention_resolutions = vec![];
        let net = Denoiser::<f32>::new(config.denoiser(), 5).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), net.params());
        adam.step = 17;
        adam.first_moment[0].data_mut()[0] = 0.25;
        let mut ck = Checkpoint::new(config, 17, net.params());
        ck.optimizer = Some(OptimizerState::from_adam(&adam));
        ck.ema = Some(net.params().tensors().to_vec());
        ck
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let plain = Checkpoint::new(ck.config.clone(), 0, &ck.denoiser().unwrap().params().clone());
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap(), Path::new("x")).unwrap(), plain);
    }

    #[test]
    fn truncated_or_corrupt_files_are_schema_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], Path::new("x")), Err(Error::Checkpoint { .. })));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, Path::new("x")), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn save_load_via_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let name = checkpoint_file_name(ck.step);
        ck.save(&dir.path().join(&name)).unwrap();
        write_latest_pointer(dir.path(), &name).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
        assert_eq!(Checkpoint::load(&dir.path().join(LATEST_POINTER)).unwrap(), ck);
        let net = Checkpoint::load(&dir.path().join(&name)).unwrap().denoiser().unwrap();
        assert_eq!(net.params().tensors(), ck.denoiser().unwrap().params().tensors());
        assert!(ck.ema_denoiser().unwrap().is_some());
    }
}
