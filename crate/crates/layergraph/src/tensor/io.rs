//! `.tsr` text round-trip format: first line holds the space-separated
//! dims, the following lines the row-major values (one trailing row per
//! line), decimal with enough significant digits to round-trip exactly.

use std::path::Path;

use super::{Tensor, TensorData};
use crate::error::{Error, Result};

pub fn render_tsr(t: &Tensor) -> String {
    let mut out = String::new();
    let dims = t.dims();
    if dims.is_empty() {
        out.push('1');
    } else {
        for (i, d) in dims.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&d.to_string());
        }
    }
    out.push('\n');
    let row = t.shape().last_dim().unwrap_or(1).max(1);
    let fmt_one = |i: usize| -> String {
        match t.data() {
            // 9 and 17 significant digits: exact round-trip for f32 / f64.
            TensorData::F32(v) => format!("{:.8e}", v[i]),
            TensorData::F64(v) => format!("{:.16e}", v[i]),
            TensorData::I64(v) => format!("{}", v[i]),
        }
    };
    for start in (0..t.len()).step_by(row) {
        let end = (start + row).min(t.len());
        for i in start..end {
            if i > start {
                out.push(' ');
            }
            out.push_str(&fmt_one(i));
        }
        out.push('\n');
    }
    out
}

pub fn write_tsr(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, render_tsr(t))?;
    Ok(())
}

/// Parse a `.tsr` document into an f64 tensor; callers cast to the dtype
/// they need. Integer payloads survive exactly up to 2^53.
pub fn parse_tsr(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate();
    let (_, dims_line) = lines.next().ok_or_else(|| Error::ParseError {
        line: 1,
        column: 1,
        message: "empty tensor file".to_string(),
    })?;
    let mut dims = Vec::new();
    for tok in dims_line.split_whitespace() {
        let d: usize = tok.parse().map_err(|_| Error::ParseError {
            line: 1,
            column: 1,
            message: format!("bad dimension `{tok}`"),
        })?;
        dims.push(d);
    }
    let expected: usize = dims.iter().product();
    let mut values = Vec::with_capacity(expected);
    for (ln, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::ParseError {
                line: ln + 1,
                column: 1,
                message: format!("bad value `{tok}`"),
            })?;
            values.push(v);
        }
    }
    if values.len() != expected {
        return Err(Error::ParseError {
            line: 1,
            column: 1,
            message: format!("dims imply {expected} values, file holds {}", values.len()),
        });
    }
    Tensor::from_f64(dims, values)
}

pub fn read_tsr(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    parse_tsr(&text)
}
