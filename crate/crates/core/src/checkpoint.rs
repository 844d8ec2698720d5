//! Binary checkpoint format.
//!
//! Layout: `OSHP`, u16 LE version, `key=value` metadata lines ended by an
//! empty line, then for each tensor a u32 name length, the UTF-8 name, a
//! u32 rank, u64 dims and raw f64 LE values. All integers are little-endian.

use crate::error::{Error, Result};
use crate::nn::{Mlp, Param};
use crate::shaping::ShapingModel;
use crate::tensor::RealTensor;
use crate::trainer::{replay_loss, DemapperConfig, TrainConfig, TrainRun};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"OSHP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Full NN1/NN2/NN3 model from two-phase training.
    Shaped,
    /// NN3 alone, trained on uniform square QAM for the MI reference.
    UniformDemapper,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Shaped => "shaped",
            CheckpointKind::UniformDemapper => "uniform-demapper",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "shaped" => Some(CheckpointKind::Shaped),
            "uniform-demapper" => Some(CheckpointKind::UniformDemapper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Ordered metadata, excluding `kind` and `tensors`.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Param>,
}

fn train_meta(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("m".into(), cfg.m.to_string()),
        ("n_data".into(), cfg.n_data.to_string()),
        ("snr_db".into(), cfg.snr_db.to_string()),
        ("lambda".into(), cfg.lambda.to_string()),
        ("tau".into(), cfg.tau.to_string()),
        ("batch_symbols".into(), cfg.batch_symbols.to_string()),
        ("steps_phase1".into(), cfg.steps_phase1.to_string()),
        ("steps_phase2".into(), cfg.steps_phase2.to_string()),
        ("lr".into(), cfg.lr.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ]
}

impl Checkpoint {
    /// Also stores the loss on the fixed replay batch so a loaded model can
    /// be checked against it.
    pub fn from_run(run: &TrainRun, config_hash: &str) -> Result<Self> {
        let mut meta = train_meta(&run.cfg);
        let phase = if run.cfg.steps_phase2 > 0 { 2 } else { 1 };
        meta.push(("phase".into(), phase.to_string()));
        meta.push(("steps_done".into(), run.trace.len().to_string()));
        meta.push(("final_total".into(), run.final_loss.total.to_string()));
        let replay = replay_loss(&run.model, &run.cfg)?;
        meta.push(("replay_total".into(), replay.total.to_string()));
        meta.push(("config_hash".into(), config_hash.to_string()));
        Ok(Self {
            kind: CheckpointKind::Shaped,
            meta,
            tensors: run.model.params().cloned().collect(),
        })
    }

    pub fn from_demapper(nn3: &Mlp, m: usize, cfg: &DemapperConfig, config_hash: &str) -> Self {
        let meta = vec![
            ("m".into(), m.to_string()),
            ("n_data".into(), cfg.n_data.to_string()),
            ("snr_db".into(), cfg.snr_db.to_string()),
            ("batch_symbols".into(), cfg.batch_symbols.to_string()),
            ("steps".into(), cfg.steps.to_string()),
            ("lr".into(), cfg.lr.to_string()),
            ("seed".into(), cfg.seed.to_string()),
            ("config_hash".into(), config_hash.to_string()),
        ];
        Self {
            kind: CheckpointKind::UniformDemapper,
            meta,
            tensors: nn3.params.clone(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Consistency(format!("checkpoint metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Consistency(format!("checkpoint metadata `{key}={raw}` is malformed")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            m: self.field("m")?,
            n_data: self.field("n_data")?,
            snr_db: self.field("snr_db")?,
            lambda: self.field("lambda")?,
            tau: self.field("tau")?,
            batch_symbols: self.field("batch_symbols")?,
            steps_phase1: self.field("steps_phase1")?,
            steps_phase2: self.field("steps_phase2")?,
            lr: self.field("lr")?,
            seed: self.field("seed")?,
        })
    }

    pub fn final_total(&self) -> Result<f64> {
        self.field("final_total")
    }

    pub fn replay_total(&self) -> Result<f64> {
        self.field("replay_total")
    }

    pub fn m(&self) -> Result<usize> {
        self.field("m")
    }

    pub fn n_data(&self) -> Result<usize> {
        self.field("n_data")
    }

    pub fn snr_db(&self) -> Result<f64> {
        self.field("snr_db")
    }

    pub fn shaping_model(&self) -> Result<(ShapingModel, TrainConfig)> {
        if self.kind != CheckpointKind::Shaped {
            return Err(Error::Consistency(format!(
                "expected a shaped checkpoint, found {}",
                self.kind.as_str()
            )));
        }
        let cfg = self.train_config()?;
        Ok((ShapingModel::from_params(cfg.m, self.tensors.clone())?, cfg))
    }

    pub fn demapper(&self) -> Result<Mlp> {
        if self.kind != CheckpointKind::UniformDemapper {
            return Err(Error::Consistency(format!(
                "expected a uniform-demapper checkpoint, found {}",
                self.kind.as_str()
            )));
        }
        Mlp::from_params(self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = format!("kind={}\ntensors={}\n", self.kind.as_str(), self.tensors.len());
        for (k, v) in &self.meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push('\n');
        out.extend_from_slice(text.as_bytes());
        for p in &self.tensors {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let mut kind = None;
        let mut count: Option<usize> = None;
        let mut meta = Vec::new();
        loop {
            let start = r.pos;
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            let bad = |reason: String| Error::Checkpoint { offset: start, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line `{line}` has no `=`")))?;
            match k {
                "kind" => kind = Some(CheckpointKind::parse(v).ok_or_else(|| bad(format!("unknown kind `{v}`")))?),
                "tensors" => count = Some(v.parse().map_err(|_| bad(format!("bad tensor count `{v}`")))?),
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let header_end = r.pos;
        let missing = |what: &str| Error::Checkpoint {
            offset: header_end,
            reason: format!("metadata lacks `{what}`"),
        };
        let kind = kind.ok_or_else(|| missing("kind"))?;
        let count = count.ok_or_else(|| missing("tensors"))?;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.array("name length")?) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint {
                    offset: at,
                    reason: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = u32::from_le_bytes(r.array("rank")?) as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array("dim")?) as usize);
            }
            let at = r.pos;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Checkpoint {
                offset: at,
                reason: "tensor size overflows".into(),
            })?;
            let raw = r.take(n.saturating_mul(8), "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = RealTensor::new(shape, data).map_err(|e| Error::Checkpoint {
                offset: at,
                reason: e.to_string(),
            })?;
            tensors.push(Param { name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or(Error::Checkpoint {
            offset: self.pos,
            reason: "truncated metadata block".into(),
        })?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint {
            offset: self.pos,
            reason: "metadata is not UTF-8".into(),
        })?;
        self.pos += end + 1;
        Ok(line)
    }
}
