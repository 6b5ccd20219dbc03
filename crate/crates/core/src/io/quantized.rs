//! Hardened power-of-two models and their on-disk form.
//!
//! Saved as one tensor container: `graph.json` (u8 JSON metadata) plus, per
//! weight layer, `<id>.weight` (codes, packed for 1/2/4-bit widths),
//! `<id>.weight.exponent` (i8), `<id>.weight.zero_point` (u8) and
//! `<id>.bias` (i32 at scale `2^(e_w + e_x)`); per activation quantizer,
//! `<id>.act.exponent` (i8) and `<id>.act.zero_point` (u8).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob::{decode, encode, ArrayData, BlobMap, NamedArray};
use crate::error::{Error, Result};
use crate::quantizer::{Granularity, QuantParams, Signedness};
use crate::tensor::Conv2dParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum QOp {
    Input,
    Conv2d { stride: usize, pad: usize },
    Linear,
    Relu,
    Add,
    Flatten,
}

impl QOp {
    pub fn conv_params(&self) -> Option<Conv2dParams> {
        match *self {
            QOp::Conv2d { stride, pad } => Some(Conv2dParams { stride, pad }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QWeight {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
    pub params: QuantParams,
    /// Bias in accumulator units, i.e. at scale `2^(e_w[c] + e_x)`.
    pub bias: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNode {
    pub id: String,
    pub op: QOp,
    pub inputs: Vec<usize>,
    /// Output quantizer (per-tensor, power of two).
    pub act: Option<QuantParams>,
    pub weight: Option<QWeight>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Nodes in topological order.
    pub nodes: Vec<QNode>,
    pub output: usize,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub bn_folded: bool,
}

#[derive(Serialize, Deserialize)]
struct MetaNode {
    id: String,
    #[serde(flatten)]
    op: QOp,
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<MetaWeight>,
}

#[derive(Serialize, Deserialize)]
struct MetaWeight {
    shape: Vec<usize>,
    bits: u8,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    input_shape: Vec<usize>,
    output: usize,
    bn_folded: bool,
    nodes: Vec<MetaNode>,
}

const META: &str = "graph.json";
const FORMAT: &str = "po2-quantized-v1";

impl QuantizedModel {
    /// Checks the power-of-two contract and that every payload fits its
    /// declared range.
    pub fn validate(&self) -> Result<()> {
        if self.output >= self.nodes.len() {
            return Err(Error::Graph("output index out of range".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Graph(format!("node `{}` is not topologically ordered", n.id)));
            }
            if let Some(a) = &n.act {
                if !a.is_pow2() {
                    return Err(Error::NotPowerOfTwo(format!("{}.act", n.id)));
                }
                if a.channels() != 1 {
                    return Err(Error::Graph(format!("activation quantizer `{}` is not per-tensor", n.id)));
                }
            }
            if let Some(w) = &n.weight {
                let name = format!("{}.weight", n.id);
                if !w.params.is_pow2() {
                    return Err(Error::NotPowerOfTwo(name));
                }
                let count: usize = w.shape.iter().product();
                if count != w.codes.len() || w.shape.first() != Some(&w.params.channels()) {
                    return Err(Error::Extent {
                        name,
                        detail: format!("{} codes for shape {:?}", w.codes.len(), w.shape),
                    });
                }
                if w.bias.len() != w.params.channels() {
                    return Err(Error::Extent {
                        name: format!("{}.bias", n.id),
                        detail: format!("{} values for {} channels", w.bias.len(), w.params.channels()),
                    });
                }
                if let Some(&v) = w
                    .codes
                    .iter()
                    .find(|&&v| v < w.params.range_lo || v > w.params.range_hi)
                {
                    return Err(Error::PayloadRange {
                        name,
                        value: v as i64,
                        lo: w.params.range_lo as i64,
                        hi: w.params.range_hi as i64,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut blobs = BlobMap::new();
        let mut meta_nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if let Some(a) = &n.act {
                put_i8(&mut blobs, &format!("{}.act.exponent", n.id), a.exponents().unwrap())?;
                put_u8(&mut blobs, &format!("{}.act.zero_point", n.id), &a.zero_point)?;
            }
            if let Some(w) = &n.weight {
                let bits = w.params.bit_width;
                let codes: Vec<u8> = w.codes.iter().map(|&c| c as u8).collect();
                let data = if bits <= 4 {
                    let packed = if bits == 3 { 4 } else { bits };
                    ArrayData::Packed {
                        bits: packed,
                        values: codes,
                    }
                } else if bits <= 8 {
                    ArrayData::U8(codes)
                } else {
                    ArrayData::I32(w.codes.clone())
                };
                blobs.insert(
                    format!("{}.weight", n.id),
                    NamedArray {
                        shape: w.shape.clone(),
                        data,
                    },
                );
                put_i8(&mut blobs, &format!("{}.weight.exponent", n.id), w.params.exponents().unwrap())?;
                put_u8(&mut blobs, &format!("{}.weight.zero_point", n.id), &w.params.zero_point)?;
                blobs.insert(
                    format!("{}.bias", n.id),
                    NamedArray {
                        shape: vec![w.bias.len()],
                        data: ArrayData::I32(w.bias.clone()),
                    },
                );
            }
            meta_nodes.push(MetaNode {
                id: n.id.clone(),
                op: n.op,
                inputs: n.inputs.clone(),
                act_bits: n.act.as_ref().map(|a| a.bit_width),
                weight: n.weight.as_ref().map(|w| MetaWeight {
                    shape: w.shape.clone(),
                    bits: w.params.bit_width,
                }),
            });
        }
        let meta = Meta {
            format: FORMAT.into(),
            input_shape: self.input_shape.clone(),
            output: self.output,
            bn_folded: self.bn_folded,
            nodes: meta_nodes,
        };
        let json = serde_json::to_vec(&meta)?;
        blobs.insert(
            META.into(),
            NamedArray {
                shape: vec![json.len()],
                data: ArrayData::U8(json),
            },
        );
        encode(&blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let blobs = decode(bytes)?;
        let meta_blob = blobs.get(META).ok_or_else(|| Error::DanglingBlob { name: META.into() })?;
        let ArrayData::U8(json) = &meta_blob.data else {
            return Err(Error::DType {
                name: META.into(),
                code: 255,
            });
        };
        let meta: Meta = serde_json::from_slice(json)?;
        if meta.format != FORMAT {
            return Err(Error::Graph(format!("unknown quantized format `{}`", meta.format)));
        }
        let mut nodes = Vec::with_capacity(meta.nodes.len());
        for m in meta.nodes {
            let act = match m.act_bits {
                Some(bits) => {
                    let e = get_ints(&blobs, &format!("{}.act.exponent", m.id))?;
                    let z = get_ints(&blobs, &format!("{}.act.zero_point", m.id))?;
                    Some(QuantParams::new_pow2(bits, e, z, Granularity::PerTensor, Signedness::AsymmetricUnsigned)?)
                }
                None => None,
            };
            let weight = match m.weight {
                Some(mw) => {
                    let wname = format!("{}.weight", m.id);
                    let arr = blobs.get(&wname).ok_or_else(|| Error::DanglingBlob { name: wname.clone() })?;
                    if arr.shape != mw.shape {
                        return Err(Error::Extent {
                            name: wname,
                            detail: format!("stored {:?}, declared {:?}", arr.shape, mw.shape),
                        });
                    }
                    let codes = get_ints(&blobs, &wname)?;
                    let e = get_ints(&blobs, &format!("{wname}.exponent"))?;
                    let z = get_ints(&blobs, &format!("{wname}.zero_point"))?;
                    let params = QuantParams::new_pow2(mw.bits, e, z, Granularity::PerOutputChannel, Signedness::Asymmetric)?;
                    let bias = get_ints(&blobs, &format!("{}.bias", m.id))?;
                    Some(QWeight {
                        shape: mw.shape,
                        codes,
                        params,
                        bias,
                    })
                }
                None => None,
            };
            nodes.push(QNode {
                id: m.id,
                op: m.op,
                inputs: m.inputs,
                act,
                weight,
            });
        }
        let model = QuantizedModel {
            nodes,
            output: meta.output,
            input_shape: meta.input_shape,
            bn_folded: meta.bn_folded,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn node(&self, id: &str) -> Option<&QNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

fn put_i8(blobs: &mut BlobMap, name: &str, v: &[i32]) -> Result<()> {
    let mut out = Vec::with_capacity(v.len());
    for &x in v {
        out.push(i8::try_from(x).map_err(|_| Error::PayloadRange {
            name: name.into(),
            value: x as i64,
            lo: i8::MIN as i64,
            hi: i8::MAX as i64,
        })?);
    }
    blobs.insert(
        name.into(),
        NamedArray {
            shape: vec![v.len()],
            data: ArrayData::I8(out),
        },
    );
    Ok(())
}

fn put_u8(blobs: &mut BlobMap, name: &str, v: &[i32]) -> Result<()> {
    let mut out = Vec::with_capacity(v.len());
    for &x in v {
        out.push(u8::try_from(x).map_err(|_| Error::PayloadRange {
            name: name.into(),
            value: x as i64,
            lo: 0,
            hi: u8::MAX as i64,
        })?);
    }
    blobs.insert(
        name.into(),
        NamedArray {
            shape: vec![v.len()],
            data: ArrayData::U8(out),
        },
    );
    Ok(())
}

fn get_ints(blobs: &BlobMap, name: &str) -> Result<Vec<i32>> {
    let arr = blobs.get(name).ok_or_else(|| Error::DanglingBlob { name: name.into() })?;
    let ints = arr.data.to_i64().ok_or_else(|| Error::DType {
        name: name.into(),
        code: 0,
    })?;
    Ok(ints.into_iter().map(|v| v as i32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model(bits: u8) -> QuantizedModel {
        let act = |e: i32, z: i32| {
            Some(QuantParams::new_pow2(4, vec![e], vec![z], Granularity::PerTensor, Signedness::AsymmetricUnsigned).unwrap())
        };
        let hi = (1 << bits) - 1;
        QuantizedModel {
            nodes: vec![
                QNode {
                    id: "input".into(),
                    op: QOp::Input,
                    inputs: vec![],
                    act: act(-3, 8),
                    weight: None,
                },
                QNode {
                    id: "fc".into(),
                    op: QOp::Linear,
                    inputs: vec![0],
                    act: None,
                    weight: Some(QWeight {
                        shape: vec![2, 3],
                        codes: vec![0, 1, hi, 2 % (hi + 1), hi, 0],
                        params: QuantParams::new_pow2(
                            bits,
                            vec![-2, -5],
                            vec![1, 0],
                            Granularity::PerOutputChannel,
                            Signedness::Asymmetric,
                        )
                        .unwrap(),
                        bias: vec![-40, 7],
                    }),
                },
            ],
            output: 1,
            input_shape: vec![3],
            bn_folded: true,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for bits in [2, 3, 4, 6, 8] {
            let m = tiny_model(bits);
            let bytes = m.to_bytes().unwrap();
            let back = QuantizedModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn float_scales_rejected_at_boundary() {
        let mut m = tiny_model(4);
        let w = m.nodes[1].weight.as_mut().unwrap();
        w.params = QuantParams::new_float(4, vec![0.3, 0.1], vec![1, 0], Granularity::PerOutputChannel, Signedness::Asymmetric)
            .unwrap();
        assert_eq!(m.to_bytes().unwrap_err().code(), "E_POW2");
    }

    #[test]
    fn out_of_range_codes_rejected() {
        let mut m = tiny_model(2);
        m.nodes[1].weight.as_mut().unwrap().codes[0] = 4;
        assert_eq!(m.to_bytes().unwrap_err().code(), "E_RANGE");
    }

    #[test]
    fn extreme_exponents_round_trip() {
        for e in [-126, 127] {
            let mut m = tiny_model(4);
            m.nodes[0].act = Some(
                QuantParams::new_pow2(4, vec![e], vec![0], Granularity::PerTensor, Signedness::AsymmetricUnsigned).unwrap(),
            );
            let back = QuantizedModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }
}
