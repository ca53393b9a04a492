//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "PAUGCKPT"
//! version  u32      1
//! count    u32      number of sections
//! section  4-byte tag, u64 payload length, payload
//! ```
//!
//! All integers are little-endian `u32`/`u64`, all reals little-endian
//! IEEE-754 `f64`. Sections:
//!
//! * `CONF` resolved run configuration as UTF-8 TOML.
//! * `PROG` seed, completed reference epochs.
//! * `MODL` width, height, classes, conv filters, hidden width; layer count
//!   `u32` then per layer a `u32` rank and that many `u64` dims; parameter
//!   count `u64` and the parameters.
//! * `OPTM` optimizer step, schedule length, base learning rate, velocity
//!   count and velocity.
//! * `FILT` particle count, state dimension, filter epoch, then per particle
//!   its weight followed by its state.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::filter::{Particle, ParticleSet};
use crate::nn::{BuiltinClassifier, ClassifierSpec, CosineSchedule, Sgd, TrainableModel, Trainer};

use super::config::PipelineConfig;

pub const MAGIC: &[u8; 8] = b"PAUGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub seed: u64,
    pub completed_epochs: u64,
    pub trainer: Trainer<BuiltinClassifier>,
    pub particles: ParticleSet,
}

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn section(&mut self, tag: &[u8; 4], payload: Encoder) {
        self.0.extend_from_slice(tag);
        self.u64(payload.0.len() as u64);
        self.0.extend_from_slice(&payload.0);
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.bytes.len() / 8 {
            return Err(Error::Checkpoint(format!("implausible vector length {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Encoder::default();
        out.0.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.u32(5);

        out.section(b"CONF", Encoder(self.config.to_toml_string().into_bytes()));

        let mut prog = Encoder::default();
        prog.u64(self.seed);
        prog.u64(self.completed_epochs);
        out.section(b"PROG", prog);

        let model = &self.trainer.model;
        let spec = model.spec();
        let mut m = Encoder::default();
        for v in [spec.width, spec.height, spec.classes, spec.conv_filters, spec.hidden] {
            m.u64(v as u64);
        }
        let shapes = spec.layer_shapes();
        m.u32(shapes.len() as u32);
        for shape in &shapes {
            m.u32(shape.len() as u32);
            shape.iter().for_each(|&d| m.u64(d as u64));
        }
        m.f64s(model.parameters());
        out.section(b"MODL", m);

        let opt = &self.trainer.optimizer;
        let mut o = Encoder::default();
        o.u64(opt.step);
        o.u64(opt.schedule.total_steps);
        o.f64(opt.schedule.base_lr);
        o.f64s(&opt.velocity);
        out.section(b"OPTM", o);

        let mut f = Encoder::default();
        f.u64(self.particles.len() as u64);
        f.u64(self.particles.state_dim() as u64);
        f.u64(self.particles.epoch);
        for p in &self.particles.particles {
            f.f64(p.weight);
            p.state.iter().for_each(|&x| f.f64(x));
        }
        out.section(b"FILT", f);
        out.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut d = Decoder { bytes, pos: 0 };
        if d.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = d.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = d.u32()?;
        let mut config = None;
        let mut progress = None;
        let mut model = None;
        let mut optimizer = None;
        let mut filter = None;
        for _ in 0..count {
            let tag: [u8; 4] = d.take(4)?.try_into().expect("4 bytes");
            let len = d.usize()?;
            let mut s = Decoder {
                bytes: d.take(len)?,
                pos: 0,
            };
            match &tag {
                b"CONF" => {
                    let text = std::str::from_utf8(s.bytes)
                        .map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
                    config = Some(PipelineConfig::from_toml_str(text)?);
                    s.pos = s.bytes.len();
                }
                b"PROG" => progress = Some((s.u64()?, s.u64()?)),
                b"MODL" => {
                    let mut dims = [0usize; 5];
                    for v in &mut dims {
                        *v = s.usize()?;
                    }
                    let spec = ClassifierSpec {
                        width: dims[0],
                        height: dims[1],
                        classes: dims[2],
                        conv_filters: dims[3],
                        hidden: dims[4],
                    };
                    let layers = s.u32()?;
                    let mut shapes = Vec::new();
                    for _ in 0..layers {
                        let rank = s.u32()?;
                        shapes.push((0..rank).map(|_| s.usize()).collect::<Result<Vec<_>>>()?);
                    }
                    if shapes != spec.layer_shapes() {
                        return Err(Error::Checkpoint("layer shapes do not match the model header".into()));
                    }
                    let params = s.f64s()?;
                    model = Some(BuiltinClassifier::from_parameters(spec, params)?);
                }
                b"OPTM" => {
                    let step = s.u64()?;
                    let total = s.u64()?;
                    let base_lr = s.f64()?;
                    optimizer = Some((step, CosineSchedule::new(base_lr, total), s.f64s()?));
                }
                b"FILT" => {
                    let r = s.usize()?;
                    let n = s.usize()?;
                    let epoch = s.u64()?;
                    let particles = (0..r)
                        .map(|_| {
                            let weight = s.f64()?;
                            let state = (0..n).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                            Ok(Particle { state, weight })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    filter = Some(ParticleSet { particles, epoch });
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )));
                }
            }
            if !s.done() {
                return Err(Error::Checkpoint(format!(
                    "section {} has trailing bytes",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        let missing = |name: &str| Error::Checkpoint(format!("missing {name} section"));
        let config = config.ok_or_else(|| missing("CONF"))?;
        let (seed, completed_epochs) = progress.ok_or_else(|| missing("PROG"))?;
        let model = model.ok_or_else(|| missing("MODL"))?;
        let (step, schedule, velocity) = optimizer.ok_or_else(|| missing("OPTM"))?;
        let particles = filter.ok_or_else(|| missing("FILT"))?;
        if velocity.len() != model.parameters().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let trainer = Trainer {
            optimizer: Sgd {
                config: config.optimizer,
                schedule,
                velocity,
                step,
            },
            model,
        };
        Ok(Checkpoint {
            config,
            seed,
            completed_epochs,
            trainer,
            particles,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
