//! Versioned plain-text container used for model manifests, checkpoints and
//! construction reports.
//!
//! ```text
//! format-version 1
//! kind <kind>
//! field <name> <value>
//! tensor <name> <rank> <dim>...
//! <row-major values, 17 significant digits>
//! end
//! ```
//!
//! `{:.16e}` prints 17 significant digits, which round-trips every finite f64.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextDoc {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl TextDoc {
    pub fn new(kind: &str) -> Self {
        TextDoc { kind: kind.to_string(), ..Default::default() }
    }

    pub fn field(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.fields.push((name.to_string(), value.to_string()));
        self
    }

    pub fn tensor(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> &mut Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(Tensor { name: name.to_string(), shape, values });
        self
    }

    pub fn matrix(&mut self, name: &str, m: &Array2<f64>) -> &mut Self {
        let shape = vec![m.nrows(), m.ncols()];
        self.tensor(name, shape, m.iter().copied().collect())
    }

    pub fn vector(&mut self, name: &str, v: &[f64]) -> &mut Self {
        self.tensor(name, vec![v.len()], v.to_vec())
    }

    pub fn get_field(&self, name: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(format!("missing field `{name}`")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let raw = self.get_field(name)?;
        raw.parse()
            .map_err(|_| Error::parse(format!("field `{name}`: cannot parse `{raw}`")))
    }

    pub fn get_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::parse(format!("missing tensor `{name}`")))
    }

    pub fn get_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get_tensor(name)?;
        if t.shape.len() != 2 {
            return Err(Error::parse(format!("tensor `{name}` is not a matrix")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values.clone())
            .map_err(|e| Error::parse(format!("tensor `{name}`: {e}")))
    }

    pub fn get_vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_tensor(name)?.values.clone())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format-version {FORMAT_VERSION}");
        let _ = writeln!(s, "kind {}", self.kind);
        for (k, v) in &self.fields {
            let _ = writeln!(s, "field {k} {v}");
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "tensor {} {} {}", t.name, t.shape.len(), dims.join(" "));
            for chunk in t.values.chunks(8) {
                let row: Vec<String> = chunk.iter().map(|&x| fmt_f64(x)).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |i: usize, msg: &str| Error::parse(format!("line {}: {msg}", i + 1));

        let (i, first) = lines.next().ok_or_else(|| Error::parse("empty document"))?;
        let version = first
            .strip_prefix("format-version ")
            .ok_or_else(|| bad(i, "expected `format-version`"))?
            .trim()
            .parse::<u32>()
            .map_err(|_| bad(i, "bad version number"))?;
        if version != FORMAT_VERSION {
            return Err(bad(i, &format!("unsupported format version {version}")));
        }
        let (i, kline) = lines.next().ok_or_else(|| Error::parse("missing kind"))?;
        let kind = kline
            .strip_prefix("kind ")
            .ok_or_else(|| bad(i, "expected `kind`"))?
            .trim()
            .to_string();
        let mut doc = TextDoc::new(&kind);
        let mut ended = false;
        while let Some((i, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("field") => {
                    let name = parts.next().ok_or_else(|| bad(i, "field without name"))?;
                    let value: Vec<&str> = parts.collect();
                    doc.fields.push((name.to_string(), value.join(" ")));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad(i, "tensor without name"))?;
                    let rank: usize = parts
                        .next()
                        .and_then(|r| r.parse().ok())
                        .ok_or_else(|| bad(i, "bad tensor rank"))?;
                    let shape: Vec<usize> = parts
                        .map(|d| d.parse().map_err(|_| bad(i, "bad tensor dimension")))
                        .collect::<Result<_>>()?;
                    if shape.len() != rank {
                        return Err(bad(i, "rank does not match dimension count"));
                    }
                    let count: usize = shape.iter().product();
                    let mut values = Vec::with_capacity(count);
                    while values.len() < count {
                        let (j, row) = lines
                            .next()
                            .ok_or_else(|| Error::parse(format!("tensor `{name}` truncated")))?;
                        for tok in row.split_whitespace() {
                            let x: f64 = tok.parse().map_err(|_| bad(j, "bad number"))?;
                            values.push(x);
                        }
                    }
                    if values.len() != count {
                        return Err(Error::parse(format!("tensor `{name}` has extra values")));
                    }
                    doc.tensors.push(Tensor { name: name.to_string(), shape, values });
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(i, "unrecognized line")),
            }
        }
        if !ended {
            return Err(Error::parse("missing `end` marker"));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0, 2.0f64.sqrt()];
        let mut d = TextDoc::new("demo");
        d.field("n", 3).field("label", "two words");
        d.tensor("x", vec![vals.len()], vals.clone());
        let back = TextDoc::parse(&d.to_text()).unwrap();
        assert_eq!(back.get_field("label").unwrap(), "two words");
        let got = &back.get_tensor("x").unwrap().values;
        for (a, b) in got.iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_truncation_and_versions() {
        let mut d = TextDoc::new("demo");
        d.vector("x", &[1.0, 2.0, 3.0]);
        let text = d.to_text();
        let cut: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(TextDoc::parse(&cut).is_err());
        assert!(TextDoc::parse(&text.replace("format-version 1", "format-version 9")).is_err());
    }
}
