//! Checksummed weight files built on [`crate::io`]'s tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Arch, Block, ConstructionInfo, MambaBlockParams, Model, ModelConfig, SsmParams,
    TransformerBlockParams,
};
use crate::error::{Error, Result};
use crate::io::{read_tensor_file, write_tensor_file, TensorEntry};
use crate::numerics::Matrix;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ULABWGT1";

#[derive(Serialize, Deserialize)]
struct WeightsMeta {
    version: String,
    config: ModelConfig,
    construction: Option<ConstructionInfo>,
}

fn mat(name: String, m: &Matrix) -> TensorEntry {
    TensorEntry::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
}

fn vector(name: String, v: &[f64]) -> TensorEntry {
    TensorEntry::new(name, vec![v.len()], v.to_vec())
}

fn push_opt(out: &mut Vec<TensorEntry>, name: String, v: &Option<Vec<f64>>) {
    if let Some(v) = v {
        out.push(vector(name, v));
    }
}

fn entries(model: &Model) -> Vec<TensorEntry> {
    let mut out = vec![mat("embed".into(), &model.embed)];
    if let Some(pe) = &model.pos_embed {
        out.push(mat("pos_embed".into(), pe));
    }
    for (l, b) in model.blocks.iter().enumerate() {
        let n = |s: &str| format!("layers.{l}.{s}");
        match b {
            Block::Mamba(p) => {
                push_opt(&mut out, n("norm"), &p.norm);
                out.push(mat(n("w_in"), &p.w_in));
                out.push(mat(n("w_g"), &p.w_g));
                out.push(mat(n("w_o"), &p.w_o));
                out.push(mat(n("conv_kernel"), &p.conv_kernel));
                out.push(vector(n("conv_bias"), &p.conv_bias));
                out.push(mat(n("ssm_a"), &p.ssm.a));
                out.push(mat(n("w_delta"), &p.ssm.w_delta));
                out.push(vector(n("b_delta"), &p.ssm.b_delta));
                out.push(mat(n("w_b"), &p.ssm.w_b));
                out.push(mat(n("w_c"), &p.ssm.w_c));
                out.push(vector(n("w_d"), &p.ssm.w_d));
            }
            Block::Transformer(p) => {
                push_opt(&mut out, n("norm_attn"), &p.norm_attn);
                push_opt(&mut out, n("norm_mlp"), &p.norm_mlp);
                out.push(mat(n("w_q"), &p.w_q));
                out.push(mat(n("w_k"), &p.w_k));
                out.push(mat(n("w_v"), &p.w_v));
                out.push(mat(n("w_o"), &p.w_o));
                out.push(mat(n("w_up"), &p.w_up));
                out.push(vector(n("b_up"), &p.b_up));
                out.push(mat(n("w_down"), &p.w_down));
                out.push(vector(n("b_down"), &p.b_down));
            }
        }
    }
    push_opt(&mut out, "final_norm".into(), &model.final_norm);
    out.push(mat("unembed".into(), &model.unembed));
    out
}

fn meta(model: &Model) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(WeightsMeta {
        version: crate::ARTIFACT_VERSION.to_string(),
        config: model.config.clone(),
        construction: model.construction.clone(),
    })?)
}

/// Write `model` atomically to `path`.
pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    write_tensor_file(path, WEIGHTS_MAGIC, meta(model)?, &entries(model))
}

/// The exact bytes [`save_weights`] would write.
pub fn weights_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    crate::io::encode_tensor_file(WEIGHTS_MAGIC, meta(model)?, &entries(model))
}

struct Tensors {
    list: Vec<TensorEntry>,
}

impl Tensors {
    fn take(&mut self, name: &str) -> Option<TensorEntry> {
        let i = self.list.iter().position(|t| t.name == name)?;
        Some(self.list.remove(i))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self
            .take(name)
            .ok_or_else(|| Error::Data(format!("weight file lacks tensor {name}")))?;
        if t.shape != [rows, cols] {
            return Err(Error::Shape(format!(
                "tensor {name} has shape {:?}, header implies [{rows}, {cols}]",
                t.shape
            )));
        }
        Matrix::new(rows, cols, t.data)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.matrix_1d(name, len, true)?.unwrap())
    }

    fn optional(&mut self, name: &str, len: usize) -> Result<Option<Vec<f64>>> {
        self.matrix_1d(name, len, false)
    }

    fn matrix_1d(&mut self, name: &str, len: usize, required: bool) -> Result<Option<Vec<f64>>> {
        match self.take(name) {
            None if required => Err(Error::Data(format!("weight file lacks tensor {name}"))),
            None => Ok(None),
            Some(t) if t.shape != [len] => Err(Error::Shape(format!(
                "tensor {name} has shape {:?}, header implies [{len}]",
                t.shape
            ))),
            Some(t) => Ok(Some(t.data)),
        }
    }
}

/// Read a model written by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<Model> {
    let (meta, list) = read_tensor_file(path, WEIGHTS_MAGIC)?;
    let meta: WeightsMeta = serde_json::from_value(meta)?;
    let c = meta.config;
    let mut t = Tensors { list };
    let (v, d) = (c.vocab, c.d_model);
    let embed = t.matrix("embed", v, d)?;
    let pos_embed = match c.max_len {
        Some(len) => Some(t.matrix("pos_embed", len, d)?),
        None => None,
    };
    let mut blocks = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        blocks.push(match c.arch {
            Arch::Mamba => {
                let e = c.d_inner();
                let ns = c.d_state;
                Block::Mamba(MambaBlockParams {
                    norm: t.optional(&n("norm"), d)?,
                    w_in: t.matrix(&n("w_in"), e, d)?,
                    w_g: t.matrix(&n("w_g"), e, d)?,
                    w_o: t.matrix(&n("w_o"), d, e)?,
                    conv_kernel: t.matrix(&n("conv_kernel"), e, c.d_conv)?,
                    conv_bias: t.vector(&n("conv_bias"), e)?,
                    ssm: SsmParams {
                        a: t.matrix(&n("ssm_a"), e, ns)?,
                        w_delta: t.matrix(&n("w_delta"), e, e)?,
                        b_delta: t.vector(&n("b_delta"), e)?,
                        w_b: t.matrix(&n("w_b"), ns, e)?,
                        w_c: t.matrix(&n("w_c"), ns, e)?,
                        w_d: t.vector(&n("w_d"), e)?,
                    },
                })
            }
            Arch::Transformer => {
                let m = c.d_mlp;
                Block::Transformer(TransformerBlockParams {
                    norm_attn: t.optional(&n("norm_attn"), d)?,
                    norm_mlp: t.optional(&n("norm_mlp"), d)?,
                    w_q: t.matrix(&n("w_q"), d, d)?,
                    w_k: t.matrix(&n("w_k"), d, d)?,
                    w_v: t.matrix(&n("w_v"), d, d)?,
                    w_o: t.matrix(&n("w_o"), d, d)?,
                    w_up: t.matrix(&n("w_up"), m, d)?,
                    b_up: t.vector(&n("b_up"), m)?,
                    w_down: t.matrix(&n("w_down"), d, m)?,
                    b_down: t.vector(&n("b_down"), d)?,
                })
            }
        });
    }
    let final_norm = t.optional("final_norm", d)?;
    let unembed = t.matrix("unembed", v, d)?;
    if let Some(extra) = t.list.first() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor {} for a {} model", extra.name, c.arch),
        });
    }
    let model = Model {
        config: c,
        embed,
        pos_embed,
        blocks,
        final_norm,
        unembed,
        construction: meta.construction,
    };
    model.validate()?;
    Ok(model)
}

/// [`load_weights`], refusing files of another architecture.
pub fn load_weights_as(path: &Path, arch: Arch) -> Result<Model> {
    let model = load_weights(path)?;
    if model.arch() != arch {
        return Err(Error::Architecture {
            expected: arch.to_string(),
            found: model.arch().to_string(),
        });
    }
    Ok(model)
}
