//! JSON weight files. Numbers are written with 17 significant digits so that
//! a save/load round trip reproduces every weight bit for bit.

use std::fmt::Write as _;

use serde::Deserialize;

use super::{Activation, Layer, NssModel, Scaler, Scheme};
use crate::error::{MpicError, Result};

const SCHEMA_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalerRecord {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalersRecord {
    input: ScalerRecord,
    output: ScalerRecord,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFile {
    schema_version: u32,
    arch: Vec<usize>,
    /// Hidden-layer activation; the output layer is always linear.
    activation: Activation,
    dt: f64,
    scheme: Scheme,
    scalers: ScalersRecord,
    layers: Vec<LayerRecord>,
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

fn num_list(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        num(out, *v);
    }
    out.push(']');
}

fn scaler(out: &mut String, name: &str, s: &Scaler, last: bool) {
    write!(out, "    \"{name}\": {{\"mean\": ").unwrap();
    num_list(out, &s.mean);
    out.push_str(", \"std\": ");
    num_list(out, &s.std);
    out.push('}');
    out.push_str(if last { "\n" } else { ",\n" });
}

/// Serialises a model. Fails only if the model is malformed.
pub fn save_weights(model: &NssModel) -> Result<Vec<u8>> {
    model.validate()?;
    let hidden = model
        .layers
        .iter()
        .rev()
        .skip(1)
        .map(|l| l.activation)
        .next()
        .unwrap_or(Activation::Tanh);
    if model.layers.iter().rev().skip(1).any(|l| l.activation != hidden) {
        return Err(MpicError::InvalidConfig(
            "weight files require a single hidden activation".into(),
        ));
    }
    let mut out = String::new();
    out.push_str("{\n");
    writeln!(out, "  \"schema_version\": {SCHEMA_VERSION},").unwrap();
    let arch: Vec<String> = model.layer_sizes().iter().map(|n| n.to_string()).collect();
    writeln!(out, "  \"arch\": [{}],", arch.join(", ")).unwrap();
    let act = match hidden {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    };
    writeln!(out, "  \"activation\": \"{act}\",").unwrap();
    out.push_str("  \"dt\": ");
    num(&mut out, model.dt);
    out.push_str(",\n");
    let scheme = match model.scheme {
        Scheme::Euler => "euler",
        Scheme::Rk4 => "rk4",
    };
    writeln!(out, "  \"scheme\": \"{scheme}\",").unwrap();
    out.push_str("  \"scalers\": {\n");
    scaler(&mut out, "input", &model.input_scaler, false);
    scaler(&mut out, "output", &model.output_scaler, true);
    out.push_str("  },\n");
    out.push_str("  \"layers\": [\n");
    for (li, l) in model.layers.iter().enumerate() {
        out.push_str("    {\n      \"w\": [\n");
        for (r, row) in l.weights.chunks_exact(l.in_dim).enumerate() {
            out.push_str("        ");
            num_list(&mut out, row);
            out.push_str(if r + 1 < l.out_dim { ",\n" } else { "\n" });
        }
        out.push_str("      ],\n      \"b\": ");
        num_list(&mut out, &l.bias);
        out.push_str("\n    }");
        out.push_str(if li + 1 < model.layers.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    Ok(out.into_bytes())
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> MpicError {
    MpicError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Parses a weight file, reporting the line/column of syntax errors and the
/// offending layer for shape errors.
pub fn load_weights(bytes: &[u8]) -> Result<NssModel> {
    let file: WeightFile = serde_json::from_slice(bytes).map_err(|e| {
        parse_err(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(parse_err(
            "schema_version",
            format!("unsupported version {}", file.schema_version),
        ));
    }
    if file.arch.len() < 2 || file.arch.len() != file.layers.len() + 1 {
        return Err(parse_err(
            "arch",
            format!("{} sizes do not describe {} layers", file.arch.len(), file.layers.len()),
        ));
    }
    if !(file.dt > 0.0 && file.dt.is_finite()) {
        return Err(parse_err("dt", format!("must be positive, got {}", file.dt)));
    }
    let n_layers = file.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    for (i, rec) in file.layers.into_iter().enumerate() {
        let (in_dim, out_dim) = (file.arch[i], file.arch[i + 1]);
        let loc = format!("layers[{i}]");
        if rec.w.len() != out_dim {
            return Err(parse_err(
                loc,
                format!("w has {} rows, arch expects {out_dim}", rec.w.len()),
            ));
        }
        if let Some((r, row)) = rec.w.iter().enumerate().find(|(_, row)| row.len() != in_dim) {
            return Err(parse_err(
                format!("layers[{i}].w[{r}]"),
                format!("row has {} entries, arch expects {in_dim}", row.len()),
            ));
        }
        if rec.b.len() != out_dim {
            return Err(parse_err(
                format!("layers[{i}].b"),
                format!("bias has {} entries, arch expects {out_dim}", rec.b.len()),
            ));
        }
        let activation = if i + 1 == n_layers {
            Activation::Identity
        } else {
            file.activation
        };
        layers.push(Layer {
            in_dim,
            out_dim,
            weights: rec.w.into_iter().flatten().collect(),
            bias: rec.b,
            activation,
        });
    }
    let check_scaler = |name: &str, s: ScalerRecord, n: usize| -> Result<Scaler> {
        if s.mean.len() != n || s.std.len() != n {
            return Err(parse_err(
                format!("scalers.{name}"),
                format!("expected {n} entries"),
            ));
        }
        if s.std.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(parse_err(format!("scalers.{name}.std"), "entries must be positive"));
        }
        Ok(Scaler { mean: s.mean, std: s.std })
    };
    let model = NssModel {
        input_scaler: check_scaler("input", file.scalers.input, file.arch[0])?,
        output_scaler: check_scaler("output", file.scalers.output, *file.arch.last().unwrap())?,
        layers,
        dt: file.dt,
        scheme: file.scheme,
    };
    model
        .validate()
        .map_err(|e| parse_err("layers", e.to_string()))?;
    Ok(model)
}
