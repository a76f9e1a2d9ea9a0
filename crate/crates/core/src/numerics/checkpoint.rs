//! Portable text checkpoints for parameter vectors.
//!
//! ```text
//! ndde-params v1
//! layer 0 <rows> <cols>
//! <cols weights>      (rows lines, row-major)
//! <rows biases>
//! layer 1 ...
//! ```
//!
//! Values are written with 17 significant digits so every `f64` round-trips.
//! A bare parameter vector (analytic fields, gradient dumps) is one layer with
//! `cols = 0`: no weight lines, the values travel in the bias line.

use std::fmt::Write as _;
use std::path::Path;

use super::mlp::{MlpLayout, MlpParams};
use crate::error::{NddeError, Result};

pub const HEADER: &str = "ndde-params v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn push_values(out: &mut String, values: &[f64]) {
    let line: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    out.push_str(&line.join(" "));
    out.push('\n');
}

pub fn encode_layers(layers: &[CheckpointLayer]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (i, l) in layers.iter().enumerate() {
        let _ = writeln!(out, "layer {i} {} {}", l.rows, l.cols);
        if l.cols > 0 {
            for r in 0..l.rows {
                push_values(&mut out, &l.weights[r * l.cols..(r + 1) * l.cols]);
            }
        }
        push_values(&mut out, &l.bias);
    }
    out
}

pub fn decode_layers(text: &str) -> Result<Vec<CheckpointLayer>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((n, h)) => {
            return Err(NddeError::Parse {
                line: n,
                message: format!("expected header `{HEADER}`, found `{h}`"),
            })
        }
        None => {
            return Err(NddeError::Parse {
                line: 1,
                message: "empty checkpoint".into(),
            })
        }
    }
    let parse_row = |n: usize, l: &str, expect: usize| -> Result<Vec<f64>> {
        let vals = l
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| NddeError::Parse {
                    line: n,
                    message: format!("bad number `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != expect {
            return Err(NddeError::Parse {
                line: n,
                message: format!("expected {expect} values, found {}", vals.len()),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(NddeError::Parse {
                line: n,
                message: "non-finite value".into(),
            });
        }
        Ok(vals)
    };
    let mut layers = Vec::new();
    while let Some((n, l)) = lines.next() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        let bad = || NddeError::Parse {
            line: n,
            message: format!("expected `layer <i> <rows> <cols>`, found `{l}`"),
        };
        if toks.len() != 4 || toks[0] != "layer" {
            return Err(bad());
        }
        let idx: usize = toks[1].parse().map_err(|_| bad())?;
        let rows: usize = toks[2].parse().map_err(|_| bad())?;
        let cols: usize = toks[3].parse().map_err(|_| bad())?;
        if idx != layers.len() {
            return Err(NddeError::Parse {
                line: n,
                message: format!("layer index {idx} out of sequence"),
            });
        }
        let mut weights = Vec::with_capacity(rows * cols);
        if cols > 0 {
            for _ in 0..rows {
                let (n, l) = lines.next().ok_or(NddeError::Parse {
                    line: n,
                    message: "truncated weight block".into(),
                })?;
                weights.extend(parse_row(n, l, cols)?);
            }
        }
        let (bn, bl) = lines.next().ok_or(NddeError::Parse {
            line: n,
            message: "missing bias line".into(),
        })?;
        let bias = parse_row(bn, bl, rows)?;
        layers.push(CheckpointLayer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    Ok(layers)
}

pub fn encode_mlp(params: &MlpParams) -> String {
    let layers: Vec<CheckpointLayer> = (0..params.layout().num_layers())
        .map(|i| {
            let v = params.layer(i);
            CheckpointLayer {
                rows: v.rows,
                cols: v.cols,
                weights: v.weights.to_vec(),
                bias: v.bias.to_vec(),
            }
        })
        .collect();
    encode_layers(&layers)
}

/// Decodes an MLP checkpoint; activations follow the tanh-hidden convention.
pub fn decode_mlp(text: &str) -> Result<MlpParams> {
    let layers = decode_layers(text)?;
    if layers.is_empty() || layers.iter().any(|l| l.cols == 0) {
        return Err(NddeError::Input("checkpoint does not hold an MLP".into()));
    }
    let mut widths = vec![layers[0].cols];
    let mut flat = Vec::new();
    for l in &layers {
        if l.cols != *widths.last().unwrap() {
            return Err(NddeError::Input(format!(
                "layer input width {} does not match previous output {}",
                l.cols,
                widths.last().unwrap()
            )));
        }
        widths.push(l.rows);
        flat.extend_from_slice(&l.weights);
        flat.extend_from_slice(&l.bias);
    }
    MlpParams::unflatten(&MlpLayout::tanh_hidden(&widths)?, &flat)
}

pub fn encode_vector(values: &[f64]) -> String {
    encode_layers(&[CheckpointLayer {
        rows: values.len(),
        cols: 0,
        weights: Vec::new(),
        bias: values.to_vec(),
    }])
}

pub fn decode_vector(text: &str) -> Result<Vec<f64>> {
    let layers = decode_layers(text)?;
    match layers.as_slice() {
        [l] if l.cols == 0 => Ok(l.bias.clone()),
        _ => Err(NddeError::Input(
            "checkpoint does not hold a single parameter vector".into(),
        )),
    }
}

pub fn write_mlp(path: &Path, params: &MlpParams) -> Result<()> {
    std::fs::write(path, encode_mlp(params))?;
    Ok(())
}

pub fn read_mlp(path: &Path) -> Result<MlpParams> {
    decode_mlp(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_round_trip_is_bitwise() {
        let layout = MlpLayout::tanh_hidden(&[2, 8, 8, 2]).unwrap();
        let p = layout.init_uniform(&mut ChaCha8Rng::seed_from_u64(5));
        let text = encode_mlp(&p);
        assert!(text.starts_with("ndde-params v1\nlayer 0 8 2\n"));
        let q = decode_mlp(&text).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_layers("ndde-params v2\n").is_err());
        assert!(decode_layers("ndde-params v1\nlayer 0 1 1\n1.0\n").is_err());
        assert!(decode_layers("ndde-params v1\nlayer 1 1 0\n1.0\n").is_err());
        assert!(decode_layers("ndde-params v1\nlayer 0 1 0\nNaN\n").is_err());
        assert!(decode_layers("ndde-params v1\nlayer 0 2 0\n1.0\n").is_err());
    }

    proptest! {
        #[test]
        fn vector_round_trip(values in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
            let back = decode_vector(&encode_vector(&values)).unwrap();
            prop_assert_eq!(back, values);
        }
    }
}
