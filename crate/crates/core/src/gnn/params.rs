use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub f_low: usize,
    pub f_high: usize,
    pub hidden: usize,
}

impl std::fmt::Display for ModelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "F_low={} F_high={} H={}", self.f_low, self.f_high, self.hidden)
    }
}

/// Names of the parameter tensors, in storage order.
pub const TENSOR_NAMES: [&str; 8] = [
    "low_w1", "low_w2", "high_w1", "high_w2", "dense_w1", "dense_w2", "dense_b1", "dense_b2",
];

/// Number of leading tensors in [`TENSOR_NAMES`] that are weights (regularized);
/// the rest are biases.
pub const WEIGHT_TENSORS: usize = 6;

/// Shared weights of both graph-convolution extractors and the dense head.
///
/// Biases are kept as `1 x H` and `1 x 1` matrices so every tensor can be handled
/// uniformly by the optimizer and the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub low_w1: Array2<f64>,
    pub low_w2: Array2<f64>,
    pub high_w1: Array2<f64>,
    pub high_w2: Array2<f64>,
    pub dense_w1: Array2<f64>,
    pub dense_w2: Array2<f64>,
    pub dense_b1: Array2<f64>,
    pub dense_b2: Array2<f64>,
}

/// Gradients have exactly the parameter layout.
pub type Gradients = ModelParameters;

fn tensor_shapes(shape: ModelShape) -> [(usize, usize); 8] {
    let h = shape.hidden;
    [
        (shape.f_low, h),
        (h, h),
        (shape.f_high, h),
        (h, h),
        (2 * h, h),
        (h, 1),
        (1, h),
        (1, 1),
    ]
}

impl ModelParameters {
    pub fn zeros(shape: ModelShape) -> Self {
        let s = tensor_shapes(shape);
        Self {
            low_w1: Array2::zeros(s[0]),
            low_w2: Array2::zeros(s[1]),
            high_w1: Array2::zeros(s[2]),
            high_w2: Array2::zeros(s[3]),
            dense_w1: Array2::zeros(s[4]),
            dense_w2: Array2::zeros(s[5]),
            dense_b1: Array2::zeros(s[6]),
            dense_b2: Array2::zeros(s[7]),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(shape: ModelShape, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for t in p.tensors_mut().into_iter().take(WEIGHT_TENSORS) {
            let (fan_in, fan_out) = t.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        p
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            f_low: self.low_w1.nrows(),
            f_high: self.high_w1.nrows(),
            hidden: self.low_w1.ncols(),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.low_w1.ncols()
    }

    pub fn tensors(&self) -> [&Array2<f64>; 8] {
        [
            &self.low_w1,
            &self.low_w2,
            &self.high_w1,
            &self.high_w2,
            &self.dense_w1,
            &self.dense_w2,
            &self.dense_b1,
            &self.dense_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 8] {
        [
            &mut self.low_w1,
            &mut self.low_w2,
            &mut self.high_w1,
            &mut self.high_w2,
            &mut self.dense_w1,
            &mut self.dense_w2,
            &mut self.dense_b1,
            &mut self.dense_b2,
        ]
    }

    /// Checks that every tensor has the dimensions implied by its shape.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        for ((name, t), expected) in TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .zip(tensor_shapes(shape))
        {
            if t.dim() != expected {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {expected:?}"),
                    found: format!("{name} {:?}", t.dim()),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Sum of squared weight entries (biases excluded).
    pub fn squared_weight_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .take(WEIGHT_TENSORS)
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Hash of every parameter bit pattern; identifies the parameters a cache came from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for t in self.tensors() {
            h.write_usize(t.nrows());
            h.write_usize(t.ncols());
            for v in t.iter() {
                h.write_f64(*v);
            }
        }
        h.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut w = Writer::new();
        w.bytes(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION as usize);
        w.u32(shape.f_low);
        w.u32(shape.f_high);
        w.u32(shape.hidden);
        for t in self.tensors() {
            w.u32(t.nrows());
            w.u32(t.ncols());
            w.f64s(t.iter());
        }
        w.buf
    }

    /// Decodes a parameter file; with `expected` set, any shape difference is an error.
    pub fn decode(bytes: &[u8], expected: Option<ModelShape>) -> Result<Self> {
        let mut r = Reader::new("model parameters", bytes);
        r.expect_magic(PARAMS_MAGIC)?;
        let version = r.u32()? as u32;
        if version != PARAMS_VERSION {
            return Err(Error::Version {
                what: "model parameters",
                expected: PARAMS_VERSION,
                found: version,
            });
        }
        let shape = ModelShape {
            f_low: r.u32()?,
            f_high: r.u32()?,
            hidden: r.u32()?,
        };
        if let Some(expected) = expected {
            if expected != shape {
                return Err(Error::ShapeMismatch {
                    expected: expected.to_string(),
                    found: shape.to_string(),
                });
            }
        }
        let mut p = Self::zeros(shape);
        for (name, t) in TENSOR_NAMES.iter().zip(p.tensors_mut()) {
            let dim = (r.u32()?, r.u32()?);
            if dim != t.dim() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {:?}", t.dim()),
                    found: format!("{name} {dim:?}"),
                });
            }
            let data = r.f64s(dim.0 * dim.1)?;
            *t = Array2::from_shape_vec(dim, data).expect("length checked");
        }
        r.finish()?;
        Ok(p)
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"GLRMODEL";
pub const PARAMS_VERSION: u32 = 1;

pub fn save_params(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>, expected: Option<ModelShape>) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParameters::decode(&bytes, expected)
}

#[derive(Default)]
pub(crate) struct Fnv(u64);

impl Fnv {
    fn write_u64(&mut self, v: u64) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for b in v.to_le_bytes() {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
