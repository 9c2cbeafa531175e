//! Binary checkpoint container.
//!
//! Layout: `ERCK` magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f32` data for the student, teacher and
//! optimizer velocity, in tensor order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{Architecture, Grads, NetworkParams, ParamTensor};

const MAGIC: &[u8; 4] = b"ERCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: u64,
    pub best_dice: Option<f64>,
    pub layout_rng: RngState,
    pub data_rng: RngState,
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    pub velocity: Grads,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    iter: u64,
    best_dice: Option<f64>,
    layout_rng: RngState,
    data_rng: RngState,
    tensors: Vec<(String, Vec<usize>)>,
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, len: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.to_toml_string()?,
            iter: self.iter,
            best_dice: self.best_dice,
            layout_rng: self.layout_rng.clone(),
            data_rng: self.data_rng.clone(),
            tensors: self
                .student
                .tensors()
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone()))
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for t in self.student.tensors() {
                write_f32s(&mut w, &t.data)?;
            }
            for t in self.teacher.tensors() {
                write_f32s(&mut w, &t.data)?;
            }
            for v in &self.velocity.0 {
                write_f32s(&mut w, v)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint(format!("{} is not a checkpoint", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = validate_config(TrainConfig::from_toml_str(&header.config)?)?;
        let arch = Architecture::from_config(&config);

        let read_params = |r: &mut BufReader<File>| -> Result<NetworkParams> {
            let mut tensors = Vec::with_capacity(header.tensors.len());
            for (name, shape) in &header.tensors {
                let data = read_f32s(r, shape.iter().product())?;
                tensors.push(ParamTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    data,
                });
            }
            NetworkParams::from_tensors(&arch, tensors)
        };
        let student = read_params(&mut r)?;
        let teacher = read_params(&mut r)?;
        let velocity = Grads(
            student
                .tensors()
                .iter()
                .map(|t| read_f32s(&mut r, t.data.len()))
                .collect::<Result<_>>()?,
        );
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config,
            iter: header.iter,
            best_dice: header.best_dice,
            layout_rng: header.layout_rng,
            data_rng: header.data_rng,
            student,
            teacher,
            velocity,
        })
    }
}
