//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "OPAECKPT"
//! u32           format version (1)
//! u64           header length H in bytes
//! H bytes       UTF-8 JSON header:
//!                 { "meta": <any JSON>,
//!                   "networks": [ { "name", "layers": [ { "input", "output", "activation" } ] } ],
//!                   "matrices": [ { "name", "rows", "cols" } ] }
//! f64 LE ...    raw parameters: each network in header order, each layer's
//!               weights (row-major, output x input) then bias; then each
//!               matrix row-major
//! ```
//!
//! Parameters are stored as raw IEEE bits, so save then load is exact.

use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer, Mlp};
use super::linalg::Matrix;
use super::NeuralError;

const MAGIC: &[u8; 8] = b"OPAECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub networks: Vec<(String, Mlp)>,
    pub matrices: Vec<(String, Matrix)>,
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    input: usize,
    output: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct NetworkShape {
    name: String,
    layers: Vec<LayerShape>,
}

#[derive(Serialize, Deserialize)]
struct MatrixShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    networks: Vec<NetworkShape>,
    matrices: Vec<MatrixShape>,
}

fn corrupt(msg: impl Into<String>) -> NeuralError {
    NeuralError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&Mlp> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.matrices.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            networks: self
                .networks
                .iter()
                .map(|(name, mlp)| NetworkShape {
                    name: name.clone(),
                    layers: mlp
                        .layers()
                        .iter()
                        .map(|l| LayerShape {
                            input: l.input_dim(),
                            output: l.output_dim(),
                            activation: l.activation,
                        })
                        .collect(),
                })
                .collect(),
            matrices: self
                .matrices
                .iter()
                .map(|(name, m)| MatrixShape {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, mlp) in &self.networks {
            for p in mlp.params() {
                push(p);
            }
        }
        for (_, m) in &self.matrices {
            push(m.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut raw = &bytes[20 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>, NeuralError> {
            if raw.len() < n * 8 {
                return Err(corrupt("truncated parameter block"));
            }
            let (head, rest) = raw.split_at(n * 8);
            raw = rest;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut networks = Vec::new();
        for net in &header.networks {
            let mut layers = Vec::new();
            for l in &net.layers {
                let w = take(l.input * l.output)?;
                let b = take(l.output)?;
                layers.push(DenseLayer {
                    weights: Matrix::from_vec(l.output, l.input, w),
                    bias: b,
                    activation: l.activation,
                });
            }
            networks.push((net.name.clone(), Mlp::new(layers)?));
        }
        let mut matrices = Vec::new();
        for m in &header.matrices {
            matrices.push((m.name.clone(), Matrix::from_vec(m.rows, m.cols, take(m.rows * m.cols)?)));
        }
        if !raw.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", raw.len())));
        }
        Ok(Self {
            meta: header.meta,
            networks,
            matrices,
        })
    }
}
