//! Versioned text checkpoint format.
//!
//! ```text
//! fedsim-params 1
//! <name> <norm|non_norm> <role> <batch_norm 0|1> <ndim> <dim>...
//! <hex bits of each f64, space separated>
//! ```
//!
//! Gradient files use the `fedsim-grads 1` header and a `<name> <ndim> <dim>...`
//! record line. Values are written as raw IEEE-754 bits so reloads are bitwise exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{GradSet, NormTag, ParamMeta, ParamRole, ParamSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

const PARAMS_HEADER: &str = "fedsim-params 1";
const GRADS_HEADER: &str = "fedsim-grads 1";

fn push_values(out: &mut String, t: &Tensor) {
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:016x}", v.to_bits());
    }
    out.push('\n');
}

fn push_shape(out: &mut String, t: &Tensor) {
    let _ = write!(out, "{}", t.shape().len());
    for d in t.shape() {
        let _ = write!(out, " {d}");
    }
}

pub fn encode_params(params: &ParamSet) -> String {
    let mut out = format!("{PARAMS_HEADER}\n");
    for (name, p) in params.iter() {
        let tag = match p.meta.tag {
            NormTag::Norm => "norm",
            NormTag::NonNorm => "non_norm",
        };
        let _ = write!(
            out,
            "{name} {tag} {} {} ",
            p.meta.role.as_str(),
            u8::from(p.meta.batch_norm)
        );
        push_shape(&mut out, &p.value);
        out.push('\n');
        push_values(&mut out, &p.value);
    }
    out
}

pub fn encode_grads(grads: &GradSet) -> String {
    let mut out = format!("{GRADS_HEADER}\n");
    for (name, t) in grads.iter() {
        let _ = write!(out, "{name} ");
        push_shape(&mut out, t);
        out.push('\n');
        push_values(&mut out, t);
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn err(&self, line: usize, reason: impl std::fmt::Display) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("line {}: {reason}", line + 1),
        }
    }

    fn header(&mut self, expected: &str) -> Result<()> {
        match self.lines.next() {
            Some((_, l)) if l == expected => Ok(()),
            Some((i, l)) => Err(self.err(i, format!("expected `{expected}`, found `{l}`"))),
            None => Err(self.err(0, "empty file")),
        }
    }

    fn shape(&self, line: usize, fields: &[&str]) -> Result<Vec<usize>> {
        let ndim: usize = fields
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(line, "bad rank"))?;
        if fields.len() != ndim + 1 {
            return Err(self.err(line, "rank does not match dimension count"));
        }
        fields[1..]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.err(line, format!("bad dim `{s}`")))
            })
            .collect()
    }

    fn values(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let (i, l) = self
            .lines
            .next()
            .ok_or_else(|| self.err(0, "truncated value line"))?;
        let data = l
            .split_ascii_whitespace()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|_| self.err(i, format!("bad value `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.err(i, e))
    }
}

pub fn decode_params(text: &str, path: &Path) -> Result<ParamSet> {
    let mut r = Reader {
        path,
        lines: text.lines().enumerate(),
    };
    r.header(PARAMS_HEADER)?;
    let mut params = ParamSet::new();
    while let Some((i, line)) = r.lines.next() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() < 5 {
            return Err(r.err(i, "short record line"));
        }
        let tag = match fields[1] {
            "norm" => NormTag::Norm,
            "non_norm" => NormTag::NonNorm,
            other => return Err(r.err(i, format!("bad tag `{other}`"))),
        };
        let role = ParamRole::parse(fields[2]).ok_or_else(|| r.err(i, "bad role"))?;
        let batch_norm = match fields[3] {
            "0" => false,
            "1" => true,
            _ => return Err(r.err(i, "bad batch_norm flag")),
        };
        let shape = r.shape(i, &fields[4..])?;
        let value = r.values(shape)?;
        params.insert(
            fields[0],
            value,
            ParamMeta {
                tag,
                role,
                batch_norm,
            },
        );
    }
    Ok(params)
}

pub fn decode_grads(text: &str, path: &Path) -> Result<GradSet> {
    let mut r = Reader {
        path,
        lines: text.lines().enumerate(),
    };
    r.header(GRADS_HEADER)?;
    let mut grads = GradSet::new();
    while let Some((i, line)) = r.lines.next() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() < 2 {
            return Err(r.err(i, "short record line"));
        }
        let shape = r.shape(i, &fields[1..])?;
        let value = r.values(shape)?;
        grads.insert(fields[0], value);
    }
    Ok(grads)
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    write_atomic(path, encode_params(params).as_bytes())
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_params(&text, path)
}

pub fn write_grads(path: &Path, grads: &GradSet) -> Result<()> {
    write_atomic(path, encode_grads(grads).as_bytes())
}

pub fn read_grads(path: &Path) -> Result<GradSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_grads(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn params_round_trip_bitwise(
            a in prop::collection::vec(any::<f64>(), 1..8),
            b in prop::collection::vec(any::<f64>(), 1..4),
        ) {
            let mut p = ParamSet::new();
            p.insert("l00.dense.weight", Tensor::vector(a.clone()), ParamMeta::dense(ParamRole::Weight));
            p.insert("l01.bn.run_var", Tensor::vector(b.clone()), ParamMeta::norm(ParamRole::RunningVar, true));
            let back = decode_params(&encode_params(&p), Path::new("mem")).unwrap();
            prop_assert!(back.bitwise_eq(&p));

            let mut g = GradSet::new();
            g.insert("x", Tensor::new(vec![1, a.len()], a).unwrap());
            let back = decode_grads(&encode_grads(&g), Path::new("mem")).unwrap();
            prop_assert!(back.bitwise_eq(&g));
        }
    }

    #[test]
    fn rejects_wrong_header() {
        let err = decode_params("fedsim-params 2\n", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
