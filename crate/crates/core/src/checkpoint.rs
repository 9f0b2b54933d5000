//! Binary checkpoint format.
//!
//! ```text
//! b"MDDIM1\n"                 7-byte magic
//! u32 little-endian L         metadata length
//! L bytes                     JSON metadata
//! f64 little-endian * P       parameters in layout order
//! f64 little-endian * 2P      Adam first/second moments (only if
//!                             metadata.optimizer.has_moments)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Schema;
use crate::error::{Error, Result};
use crate::predictor::{Architecture, NoisePredictor, TensorSpec};
use crate::schedule::ScheduleParams;
use crate::training::{AdamState, TrainConfig, TrainingState};

pub const MAGIC: &[u8; 7] = b"MDDIM1\n";

/// Human-readable form of [`MAGIC`].
pub const FORMAT_NAME: &str = "MDDIM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub has_moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub architecture: Architecture,
    pub schedule: ScheduleParams,
    pub schema_hash: String,
    pub schema: Schema,
    pub seed: u64,
    pub epochs_completed: usize,
    pub train_config: Option<TrainConfig>,
    pub optimizer: OptimizerMeta,
    pub loss_history: Vec<f64>,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: NoisePredictor,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_training(
        state: &TrainingState,
        schedule: ScheduleParams,
        schema: &Schema,
        config: Option<&TrainConfig>,
    ) -> Self {
        let model = state.model.clone();
        Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT_NAME.into(),
                architecture: *model.architecture(),
                schedule,
                schema_hash: schema.hash.clone(),
                schema: schema.clone(),
                seed: model.seed(),
                epochs_completed: state.epochs_completed,
                train_config: config.cloned(),
                optimizer: OptimizerMeta {
                    step: state.optimizer.step,
                    has_moments: true,
                },
                loss_history: state.loss_history.clone(),
                tensors: model.layout().to_vec(),
            },
            model,
            optimizer: Some(state.optimizer.clone()),
        }
    }

    /// Training state for resuming; fails if the optimizer moments were not saved.
    pub fn training_state(&self) -> Result<TrainingState> {
        let optimizer = self.optimizer.clone().ok_or_else(|| {
            Error::Format("checkpoint has no optimizer state to resume from".into())
        })?;
        Ok(TrainingState {
            model: self.model.clone(),
            optimizer,
            epochs_completed: self.meta.epochs_completed,
            loss_history: self.meta.loss_history.clone(),
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(meta.len())
            .map_err(|_| Error::Format("metadata exceeds 4 GiB".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&meta)?;
        let mut buf = Vec::with_capacity(8 * self.model.param_count() * 3);
        let mut put = |vals: &[f64]| {
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(self.model.params());
        if let Some(opt) = &self.optimizer {
            put(&opt.m);
            put(&opt.v);
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut meta_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut meta_bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
        if meta.format != FORMAT_NAME {
            return Err(Error::Format(format!("unsupported format '{}'", meta.format)));
        }
        meta.schema.verify()?;
        if meta.schema.hash != meta.schema_hash {
            return Err(Error::Format("schema hash does not match embedded schema".into()));
        }
        if meta.tensors != meta.architecture.layout() {
            return Err(Error::Format("tensor table does not match the architecture".into()));
        }
        let n = meta.architecture.param_count();
        let mut read_vec = |count: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; 8 * count];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format("truncated tensor data".into()))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let params = read_vec(n)?;
        let optimizer = if meta.optimizer.has_moments {
            Some(AdamState {
                step: meta.optimizer.step,
                m: read_vec(n)?,
                v: read_vec(n)?,
            })
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        let model = NoisePredictor::from_parts(meta.architecture, params, meta.seed)?;
        Ok(Checkpoint {
            meta,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        self.write(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{infer_schema, RawTable, ReadOptions};
    use std::collections::HashMap;

    fn sample() -> Checkpoint {
        let t = RawTable::read("a,b\n1.5,x\n2.5,y\n".as_bytes(), &ReadOptions::default()).unwrap();
        let schema = infer_schema(&t, &HashMap::new(), 20).unwrap();
        let arch = Architecture {
            d_enc: schema.d_enc,
            depth: 1,
            width: 4,
            time_embed_dim: 2,
        };
        let mut state = TrainingState::fresh(arch, 7).unwrap();
        state.optimizer.step = 3;
        state.optimizer.m[0] = 0.25;
        state.optimizer.v[1] = 1e-9;
        state.loss_history = vec![1.0, 0.5];
        state.epochs_completed = 2;
        Checkpoint::from_training(&state, ScheduleParams::default(), &schema, None)
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..7], MAGIC);
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.training_state().unwrap().epochs_completed, 2);
    }

    #[test]
    fn layout_on_disk() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        let len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let body = &bytes[11 + len..];
        assert_eq!(body.len(), 3 * 8 * ck.model.param_count());
        let first = f64::from_le_bytes(body[..8].try_into().unwrap());
        assert_eq!(first, ck.model.params()[0]);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let ds = crate::eval::make_synthetic_gaussian(120, 0.6, 3)
            .unwrap()
            .simulate_mcar(0.3, 4)
            .unwrap();
        let sched = ScheduleParams::default();
        let schedule = sched.build().unwrap();
        let arch = Architecture { d_enc: 2, depth: 2, width: 8, time_embed_dim: 4 };
        let cfg = |epochs| TrainConfig { epochs, batch_size: 16, seed: 9, ..Default::default() };
        let straight = crate::training::train(&ds, &schedule, arch, &cfg(4), |_| Ok(())).unwrap();

        let half = crate::training::train(&ds, &schedule, arch, &cfg(2), |_| Ok(())).unwrap();
        let mut bytes = Vec::new();
        Checkpoint::from_training(&half, sched, ds.schema(), Some(&cfg(2)))
            .write(&mut bytes)
            .unwrap();
        let state = Checkpoint::read(bytes.as_slice()).unwrap().training_state().unwrap();
        let resumed = crate::training::train_from(state, &ds, &schedule, &cfg(4), |_| Ok(())).unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(bad.as_slice()), Err(Error::Format(_))));
        let short = &bytes[..bytes.len() - 4];
        assert!(Checkpoint::read(short).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::read(long.as_slice()).is_err());
    }
}
