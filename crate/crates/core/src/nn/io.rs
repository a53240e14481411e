//! Versioned weight files.
//!
//! A file is a list of named sections. Each section is a dense network (layer sizes, then the
//! flat parameter vector: row-major weight matrices followed by biases), a random basis, or a
//! plain matrix. Two encodings share that layout:
//!
//! ```text
//! irc-weights v1
//! section actor dense
//! sizes 23 64 64 64 2
//! activations softplus tanh
//! params 10562
//! 1.234e-1
//! ...
//! end
//! ```
//!
//! and a little-endian binary form starting with the magic `IRCW` and a `u32` version.
//! Floats are written in shortest round-trip form, so both encodings are lossless.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Activation, DenseNet, RandomBasis};
use crate::error::{IrcError, Result};

pub const TEXT_HEADER: &str = "irc-weights v1";
pub const BINARY_MAGIC: &[u8; 4] = b"IRCW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Dense(DenseNet),
    Basis(RandomBasis),
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub sections: Vec<(String, Section)>,
}

fn bad(detail: impl Into<String>) -> IrcError {
    IrcError::format("weight file", detail)
}

impl WeightFile {
    pub fn push(&mut self, name: &str, section: Section) {
        self.sections.push((name.to_string(), section));
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| bad(format!("missing section {name}")))
    }

    pub fn dense(&self, name: &str) -> Result<DenseNet> {
        match self.get(name)? {
            Section::Dense(n) => Ok(n.clone()),
            _ => Err(bad(format!("section {name} is not a dense network"))),
        }
    }

    pub fn basis(&self, name: &str) -> Result<RandomBasis> {
        match self.get(name)? {
            Section::Basis(b) => Ok(b.clone()),
            _ => Err(bad(format!("section {name} is not a basis"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        match self.get(name)? {
            Section::Matrix { rows, cols, data } => Ok((*rows, *cols, data.clone())),
            _ => Err(bad(format!("section {name} is not a matrix"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(TEXT_HEADER);
        s.push('\n');
        let floats = |s: &mut String, label: &str, v: &[f64]| {
            s.push_str(&format!("{label} {}\n", v.len()));
            for x in v {
                s.push_str(&format!("{x:e}\n"));
            }
        };
        for (name, sec) in &self.sections {
            match sec {
                Section::Dense(net) => {
                    s.push_str(&format!("section {name} dense\n"));
                    let sizes: Vec<String> = net.sizes().iter().map(|n| n.to_string()).collect();
                    s.push_str(&format!("sizes {}\n", sizes.join(" ")));
                    s.push_str(&format!(
                        "activations {} {}\n",
                        net.hidden_activation().name(),
                        net.output_activation().name()
                    ));
                    floats(&mut s, "params", net.params());
                }
                Section::Basis(b) => {
                    s.push_str(&format!("section {name} basis\n"));
                    s.push_str(&format!("shape {} {} {}\n", b.input_dim(), b.n_features(), b.hidden()));
                    let (w1, b1, w2) = b.parts();
                    floats(&mut s, "w1", w1);
                    floats(&mut s, "b1", b1);
                    floats(&mut s, "w2", w2);
                }
                Section::Matrix { rows, cols, data } => {
                    s.push_str(&format!("section {name} matrix\n"));
                    s.push_str(&format!("shape {rows} {cols}\n"));
                    floats(&mut s, "data", data);
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = LineReader { lines: text.lines(), line: 0 };
        let head = r.next("header")?;
        if head != TEXT_HEADER {
            return Err(bad(format!("expected header {TEXT_HEADER:?}, found {head:?}")));
        }
        let mut out = WeightFile::default();
        loop {
            let line = r.next("section or end")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let ["section", name, kind] = parts[..] else {
                return Err(r.err("expected `section <name> <kind>`"));
            };
            let section = match kind {
                "dense" => {
                    let sizes = r.usizes("sizes")?;
                    let acts = r.keyed("activations")?;
                    let [h, o] = acts[..] else {
                        return Err(r.err("expected two activations"));
                    };
                    let act = |a: &str| Activation::parse(a).ok_or_else(|| bad(format!("unknown activation {a}")));
                    let (h, o) = (act(h)?, act(o)?);
                    let params = r.floats("params")?;
                    Section::Dense(DenseNet::from_params(&sizes, h, o, params)?)
                }
                "basis" => {
                    let shape = r.usizes("shape")?;
                    let [d, n_b, hidden] = shape[..] else {
                        return Err(r.err("basis shape needs three integers"));
                    };
                    let w1 = r.floats("w1")?;
                    let b1 = r.floats("b1")?;
                    let w2 = r.floats("w2")?;
                    Section::Basis(RandomBasis::from_parts(d, n_b, hidden, w1, b1, w2)?)
                }
                "matrix" => {
                    let shape = r.usizes("shape")?;
                    let [rows, cols] = shape[..] else {
                        return Err(r.err("matrix shape needs two integers"));
                    };
                    let data = r.floats("data")?;
                    matrix(rows, cols, data)?
                }
                other => return Err(r.err(&format!("unknown section kind {other}"))),
            };
            out.push(name, section);
        }
        if r.lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("content after `end`"));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(BINARY_MAGIC);
        b.write_u32::<LittleEndian>(VERSION).unwrap();
        b.write_u32::<LittleEndian>(self.sections.len() as u32).unwrap();
        let u32s = |b: &mut Vec<u8>, v: &[usize]| {
            b.write_u32::<LittleEndian>(v.len() as u32).unwrap();
            for &x in v {
                b.write_u64::<LittleEndian>(x as u64).unwrap();
            }
        };
        let floats = |b: &mut Vec<u8>, v: &[f64]| {
            b.write_u64::<LittleEndian>(v.len() as u64).unwrap();
            for &x in v {
                b.write_f64::<LittleEndian>(x).unwrap();
            }
        };
        for (name, sec) in &self.sections {
            b.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            b.extend_from_slice(name.as_bytes());
            match sec {
                Section::Dense(net) => {
                    b.push(0);
                    u32s(&mut b, net.sizes());
                    b.push(net.hidden_activation().code());
                    b.push(net.output_activation().code());
                    floats(&mut b, net.params());
                }
                Section::Basis(basis) => {
                    b.push(1);
                    u32s(&mut b, &[basis.input_dim(), basis.n_features(), basis.hidden()]);
                    let (w1, b1, w2) = basis.parts();
                    floats(&mut b, w1);
                    floats(&mut b, b1);
                    floats(&mut b, w2);
                }
                Section::Matrix { rows, cols, data } => {
                    b.push(2);
                    u32s(&mut b, &[*rows, *cols]);
                    floats(&mut b, data);
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let io = |e: std::io::Error| bad(format!("truncated binary weights: {e}"));
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(io)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = c.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = c.read_u32::<LittleEndian>().map_err(io)?;
        let usizes = |c: &mut Cursor<&[u8]>| -> Result<Vec<usize>> {
            let n = c.read_u32::<LittleEndian>().map_err(io)?;
            (0..n).map(|_| c.read_u64::<LittleEndian>().map(|x| x as usize).map_err(io)).collect()
        };
        let floats = |c: &mut Cursor<&[u8]>| -> Result<Vec<f64>> {
            let n = c.read_u64::<LittleEndian>().map_err(io)? as usize;
            if n > bytes.len() / 8 {
                return Err(bad("array length exceeds file size"));
            }
            (0..n).map(|_| c.read_f64::<LittleEndian>().map_err(io)).collect()
        };
        let mut out = WeightFile::default();
        for _ in 0..n {
            let len = c.read_u32::<LittleEndian>().map_err(io)? as usize;
            if len > bytes.len() {
                return Err(bad("section name length exceeds file size"));
            }
            let mut name = vec![0u8; len];
            c.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("section name is not UTF-8"))?;
            let kind = c.read_u8().map_err(io)?;
            let section = match kind {
                0 => {
                    let sizes = usizes(&mut c)?;
                    let h = c.read_u8().map_err(io)?;
                    let o = c.read_u8().map_err(io)?;
                    let act = |x: u8| Activation::from_code(x).ok_or_else(|| bad(format!("unknown activation code {x}")));
                    let params = floats(&mut c)?;
                    Section::Dense(DenseNet::from_params(&sizes, act(h)?, act(o)?, params)?)
                }
                1 => {
                    let shape = usizes(&mut c)?;
                    let [d, n_b, hidden] = shape[..] else {
                        return Err(bad("basis shape needs three integers"));
                    };
                    let w1 = floats(&mut c)?;
                    let b1 = floats(&mut c)?;
                    let w2 = floats(&mut c)?;
                    Section::Basis(RandomBasis::from_parts(d, n_b, hidden, w1, b1, w2)?)
                }
                2 => {
                    let shape = usizes(&mut c)?;
                    let [rows, cols] = shape[..] else {
                        return Err(bad("matrix shape needs two integers"));
                    };
                    matrix(rows, cols, floats(&mut c)?)?
                }
                k => return Err(bad(format!("unknown section kind {k}"))),
            };
            out.push(&name, section);
        }
        if (c.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(out)
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Section> {
    if rows * cols != data.len() {
        return Err(IrcError::DimensionMismatch {
            what: "matrix data",
            expected: rows * cols,
            got: data.len(),
        });
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(IrcError::NonFinite("matrix data".into()));
    }
    Ok(Section::Matrix { rows, cols, data })
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.line += 1;
        self.lines
            .next()
            .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
    }

    fn err(&self, detail: &str) -> IrcError {
        bad(format!("line {}: {detail}", self.line))
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let l = self.next(key)?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(&format!("expected `{key}`")));
        }
        Ok(it.collect())
    }

    fn usizes(&mut self, key: &str) -> Result<Vec<usize>> {
        let v = self.keyed(key)?;
        v.iter()
            .map(|x| x.parse::<usize>().map_err(|_| self.err(&format!("bad integer {x}"))))
            .collect()
    }

    fn floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let n = self.usizes(key)?;
        let [n] = n[..] else {
            return Err(self.err(&format!("`{key}` needs a count")));
        };
        let mut v = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let l = self.next("float")?;
            let x: f64 = l.trim().parse().map_err(|_| self.err(&format!("bad float {l:?}")))?;
            if !x.is_finite() {
                return Err(self.err("non-finite value"));
            }
            v.push(x);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sample() -> WeightFile {
        let mut r = rng_from_seed(9);
        let mut f = WeightFile::default();
        f.push("actor", Section::Dense(DenseNet::init(&[4, 8, 2], Activation::Softplus, Activation::Tanh, &mut r).unwrap()));
        f.push("phi", Section::Basis(RandomBasis::new(3, 5, 4, &mut r).unwrap()));
        f.push("w", Section::Matrix { rows: 2, cols: 3, data: vec![1e-300, -0.1, 3.0, 1.0 / 3.0, 0.0, -7e12] });
        f
    }

    #[test]
    fn text_round_trip_is_exact_and_stable() {
        let f = sample();
        let t = f.to_text();
        let g = WeightFile::from_text(&t).unwrap();
        assert_eq!(f, g);
        assert_eq!(t, g.to_text());
        assert!(t.starts_with("irc-weights v1\nsection actor dense\nsizes 4 8 2\n"));
    }

    #[test]
    fn binary_round_trip_is_exact_and_stable() {
        let f = sample();
        let b = f.to_bytes();
        let g = WeightFile::from_bytes(&b).unwrap();
        assert_eq!(f, g);
        assert_eq!(b, g.to_bytes());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = sample().to_text();
        assert!(WeightFile::from_text(&t.replace("irc-weights v1", "irc-weights v2")).is_err());
        assert!(WeightFile::from_text(&t.replace("sizes 4 8 2", "sizes 4 9 2")).is_err());
        assert!(WeightFile::from_text(&t[..t.len() / 2]).is_err());
        let b = sample().to_bytes();
        assert!(WeightFile::from_bytes(&b[..b.len() - 3]).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(WeightFile::from_bytes(&v).is_err());
    }

    #[test]
    fn missing_or_mistyped_sections() {
        let f = sample();
        assert!(f.dense("actor").is_ok());
        assert!(f.dense("phi").is_err());
        assert!(f.basis("nope").is_err());
        assert_eq!(f.matrix("w").unwrap().0, 2);
    }
}
