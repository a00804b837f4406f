//! Little-endian binary model and checkpoint files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::CylinderVolume;
use crate::model::{BlendshapeModel, GaussianSet, ParamGroup, Scalar, SkinWeights};
use crate::sh;
use crate::trainer::{ModelGradients, TrainState};

pub const MODEL_MAGIC: [u8; 4] = *b"GBAV";
pub const MODEL_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on blendshape and joint counts accepted from a header.
const MAX_BLOCK_COUNT: usize = 1 << 16;

trait Le: Scalar {
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl Le for f32 {
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Le for f64 {
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn floats<T: Le>(&mut self, n: usize) -> Result<Vec<T>> {
        let needed = n.checked_mul(T::SIZE).ok_or(Error::Truncated {
            offset: self.pos,
            needed: usize::MAX,
            available: self.bytes.len() - self.pos,
        })?;
        Ok(self
            .take(needed)?
            .chunks_exact(T::SIZE)
            .map(T::take)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::CountMismatch {
                what: "file length in bytes",
                declared: self.pos,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidConfig(format!("count {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_set<T: Le>(out: &mut Vec<u8>, set: &GaussianSet<T>) {
    for g in ParamGroup::ALL {
        for v in set.group(g) {
            v.put(out);
        }
    }
}

fn read_set<T: Le>(r: &mut Reader, len: usize, sh_degree: usize) -> Result<GaussianSet<T>> {
    // Every read is bounds-checked before anything is allocated, so a
    // corrupt header cannot request a huge buffer.
    let coeffs = 3 * sh::coeff_count(sh_degree);
    let centers = r.floats::<T>(len.saturating_mul(3))?;
    let log_scales = r.floats::<T>(len.saturating_mul(3))?;
    let rotations = r.floats::<T>(len.saturating_mul(4))?;
    let opacity_logits = r.floats::<T>(len)?;
    let sh = r.floats::<T>(len.saturating_mul(coeffs))?;
    Ok(GaussianSet {
        sh_degree,
        centers: centers
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
        log_scales: log_scales
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
        rotations: rotations
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect(),
        opacity_logits,
        sh,
    })
}

/// Serializes a model. See `docs/formats.md` for the layout.
pub fn encode_model(model: &BlendshapeModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    put_u32(&mut out, model.neutral.len())?;
    put_u32(&mut out, model.deltas.len())?;
    put_u32(&mut out, model.joint_count())?;
    put_u32(&mut out, model.mouth.len())?;
    put_u32(&mut out, model.sh_degree())?;
    put_u32(&mut out, model.mouth_joint)?;
    put_set(&mut out, &model.neutral);
    for d in &model.deltas {
        put_set(&mut out, d);
    }
    for w in &model.skin_weights.values {
        w.put(&mut out);
    }
    put_set(&mut out, &model.mouth);
    Ok(out)
}

fn read_model(r: &mut Reader) -> Result<BlendshapeModel> {
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let n = r.count()?;
    let k = r.count()?;
    let joints = r.count()?;
    let m = r.count()?;
    let sh_degree = r.count()?;
    let mouth_joint = r.count()?;
    if sh_degree > sh::MAX_DEGREE {
        return Err(Error::InvalidConfig(format!(
            "SH degree {sh_degree} exceeds {}",
            sh::MAX_DEGREE
        )));
    }
    for (what, v) in [("blendshape", k), ("joint", joints)] {
        if v > MAX_BLOCK_COUNT {
            return Err(Error::InvalidConfig(format!(
                "implausible {what} count {v} in header"
            )));
        }
    }
    let neutral = read_set::<f32>(r, n, sh_degree)?;
    let deltas = (0..k)
        .map(|_| read_set::<f32>(r, n, sh_degree))
        .collect::<Result<Vec<_>>>()?;
    let weights = r.floats::<f32>(n.saturating_mul(joints))?;
    let mouth = read_set::<f32>(r, m, sh_degree)?;
    let model = BlendshapeModel {
        neutral,
        deltas,
        skin_weights: SkinWeights {
            joints,
            values: weights,
        },
        mouth,
        mouth_joint,
    };
    model.validate()?;
    Ok(model)
}

pub fn decode_model(bytes: &[u8]) -> Result<BlendshapeModel> {
    let mut r = Reader::new(bytes);
    let model = read_model(&mut r)?;
    r.finish()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &BlendshapeModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BlendshapeModel> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Serializes model, optimizer moments and progress.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    state.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    match &state.volume {
        None => put_u32(&mut out, 0)?,
        Some(v) => {
            put_u32(&mut out, 1)?;
            for x in v
                .center
                .iter()
                .chain(&v.axis)
                .chain([&v.radius, &v.half_height])
            {
                x.put(&mut out);
            }
        }
    }
    out.extend(encode_model(&state.model)?);
    for moments in [&state.first_moment, &state.second_moment] {
        for (_, block) in moments.blocks() {
            put_set(&mut out, block);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let volume = match r.u32()? {
        0 => None,
        1 => {
            let v = r.floats::<f64>(8)?;
            Some(CylinderVolume {
                center: [v[0], v[1], v[2]],
                axis: [v[3], v[4], v[5]],
                radius: v[6],
                half_height: v[7],
            })
        }
        flag => {
            return Err(Error::CountMismatch {
                what: "cylinder volume flag",
                declared: flag as usize,
                actual: 1,
            })
        }
    };
    let model = read_model(&mut r)?;
    let mut read_moments = || -> Result<ModelGradients> {
        let d = model.sh_degree();
        Ok(ModelGradients {
            neutral: read_set::<f64>(&mut r, model.neutral.len(), d)?,
            deltas: model
                .deltas
                .iter()
                .map(|x| read_set::<f64>(&mut r, x.len(), d))
                .collect::<Result<_>>()?,
            mouth: read_set::<f64>(&mut r, model.mouth.len(), d)?,
        })
    };
    let first_moment = read_moments()?;
    let second_moment = read_moments()?;
    r.finish()?;
    let state = TrainState {
        model,
        first_moment,
        second_moment,
        iteration,
        seed,
        volume,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
