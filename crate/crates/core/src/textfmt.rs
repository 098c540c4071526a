//! Plain-text dump and load of problem instances.
//!
//! A synthetic instance:
//!
//! ```text
//! bilevel-synthetic 1
//! dim 3
//! r 0.5
//! w0 2 5 7
//! train 2
//! 0.1 -0.2 1 3.5
//! 0.05 0.3 1 6.25
//! val 1
//! -0.1 0.02 1 7
//! end
//! ```
//!
//! Each data row holds the features followed by the target. A hyper-cleaning
//! instance starts with `bilevel-hyperclean 1`, declares `classes`,
//! `features`, `ridge` and `corruption`, and its `train` rows end with
//! `label clean_label corrupted(0|1)` while `val` and `test` rows end with
//! `label`. Blank lines and lines starting with `#` are ignored. Floats are
//! written in shortest round-trip form, so dump then load is lossless.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::hyperclean::{HypercleanProblem, LabeledSet};
use crate::oracle::Vector;
use crate::synthetic::{RegressionSet, SyntheticProblem};

pub const SYNTHETIC_MAGIC: &str = "bilevel-synthetic 1";
pub const HYPERCLEAN_MAGIC: &str = "bilevel-hyperclean 1";

pub fn write_synthetic<W: Write>(p: &SyntheticProblem, mut w: W) -> io::Result<()> {
    writeln!(w, "{SYNTHETIC_MAGIC}")?;
    writeln!(w, "dim {}", p.dim())?;
    writeln!(w, "r {}", p.r())?;
    writeln!(w, "w0 {}", join(p.w0().iter()))?;
    for (name, set) in [("train", p.train()), ("val", p.val())] {
        writeln!(w, "{name} {}", set.len())?;
        for i in 0..set.len() {
            writeln!(w, "{} {}", join(set.feature(i).iter()), set.target(i))?;
        }
    }
    writeln!(w, "end")
}

pub fn write_hyperclean<W: Write>(p: &HypercleanProblem, mut w: W) -> io::Result<()> {
    writeln!(w, "{HYPERCLEAN_MAGIC}")?;
    writeln!(w, "classes {}", p.classes())?;
    writeln!(w, "features {}", p.features())?;
    writeln!(w, "ridge {}", p.ridge())?;
    writeln!(w, "corruption {}", p.corruption_prob())?;
    let train = p.train();
    writeln!(w, "train {}", train.len())?;
    for i in 0..train.len() {
        writeln!(
            w,
            "{} {} {} {}",
            join(train.feature(i).iter()),
            train.label(i),
            p.clean_labels()[i],
            u8::from(p.corruption_mask()[i])
        )?;
    }
    for (name, set) in [("val", p.val()), ("test", p.test())] {
        writeln!(w, "{name} {}", set.len())?;
        for i in 0..set.len() {
            writeln!(w, "{} {}", join(set.feature(i).iter()), set.label(i))?;
        }
    }
    writeln!(w, "end")
}

fn join<'a>(it: impl Iterator<Item = &'a f64>) -> String {
    it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next meaningful line with its 1-based number.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            self.last = i + 1;
            return Ok((i + 1, t));
        }
        Err(Error::Parse {
            line: self.last + 1,
            message: "unexpected end of input".into(),
        })
    }

    fn expect_key(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next()?;
        let mut parts = line.splitn(2, char::is_whitespace);
        if parts.next() != Some(key) {
            return Err(parse_err(n, format!("expected `{key}`")));
        }
        Ok((n, parts.next().unwrap_or("").trim()))
    }

    fn finish(&mut self) -> Result<()> {
        let (n, line) = self.next()?;
        if line != "end" {
            return Err(parse_err(n, "expected `end`"));
        }
        if let Ok((n, _)) = self.next() {
            return Err(parse_err(n, "content after `end`"));
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn float(line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn count(line: usize, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a non-negative integer")))
}

fn floats(line: usize, rest: &str) -> Result<Vec<f64>> {
    rest.split_whitespace().map(|t| float(line, t)).collect()
}

fn tag_invalid(line: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidArgument(m) | Error::InvalidState(m) | Error::Numerical(m) => parse_err(line, m),
        other => other,
    }
}

pub fn parse_synthetic(text: &str) -> Result<SyntheticProblem> {
    let mut lines = Lines::new(text);
    let (n, magic) = lines.next()?;
    if magic != SYNTHETIC_MAGIC {
        return Err(parse_err(n, format!("expected header `{SYNTHETIC_MAGIC}`")));
    }
    let (n, rest) = lines.expect_key("dim")?;
    let dim = count(n, rest)?;
    if dim == 0 {
        return Err(parse_err(n, "dim must be positive"));
    }
    let (n, rest) = lines.expect_key("r")?;
    let r = float(n, rest)?;
    let (n, rest) = lines.expect_key("w0")?;
    let w0 = floats(n, rest)?;
    if w0.len() != dim {
        return Err(parse_err(n, format!("w0 has {} entries, dim is {dim}", w0.len())));
    }
    let mut sets = Vec::with_capacity(2);
    for name in ["train", "val"] {
        let (n, rest) = lines.expect_key(name)?;
        let rows = count(n, rest)?;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..rows {
            let (n, line) = lines.next()?;
            let vals = floats(n, line)?;
            if vals.len() != dim + 1 {
                return Err(parse_err(n, format!("expected {} values, found {}", dim + 1, vals.len())));
            }
            features.extend_from_slice(&vals[..dim]);
            targets.push(vals[dim]);
        }
        sets.push(RegressionSet::new(dim, features, targets).map_err(tag_invalid(n))?);
    }
    let end_line = lines.last;
    lines.finish()?;
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    SyntheticProblem::new(Vector::from_vec(w0), r, train, val).map_err(tag_invalid(end_line))
}

pub fn parse_hyperclean(text: &str) -> Result<HypercleanProblem> {
    let mut lines = Lines::new(text);
    let (n, magic) = lines.next()?;
    if magic != HYPERCLEAN_MAGIC {
        return Err(parse_err(n, format!("expected header `{HYPERCLEAN_MAGIC}`")));
    }
    let (n, rest) = lines.expect_key("classes")?;
    let classes = count(n, rest)?;
    let (n, rest) = lines.expect_key("features")?;
    let d = count(n, rest)?;
    if d == 0 || classes == 0 {
        return Err(parse_err(n, "classes and features must be positive"));
    }
    let (n, rest) = lines.expect_key("ridge")?;
    let ridge = float(n, rest)?;
    let (n, rest) = lines.expect_key("corruption")?;
    let corruption = float(n, rest)?;

    let label = |n: usize, tok: &str| -> Result<usize> {
        let l = count(n, tok)?;
        if l >= classes {
            return Err(parse_err(n, format!("label {l} outside 0..{classes}")));
        }
        Ok(l)
    };

    let (n, rest) = lines.expect_key("train")?;
    let rows = count(n, rest)?;
    let (mut feats, mut labels, mut clean, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..rows {
        let (n, line) = lines.next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != d + 3 {
            return Err(parse_err(n, format!("expected {} values, found {}", d + 3, toks.len())));
        }
        for t in &toks[..d] {
            feats.push(float(n, t)?);
        }
        labels.push(label(n, toks[d])?);
        clean.push(label(n, toks[d + 1])?);
        mask.push(match toks[d + 2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(n, format!("corruption flag must be 0 or 1, got `{other}`"))),
        });
    }
    let train = LabeledSet::new(d, feats, labels).map_err(tag_invalid(n))?;

    let mut labeled = |name: &str| -> Result<LabeledSet> {
        let (n, rest) = lines.expect_key(name)?;
        let rows = count(n, rest)?;
        let (mut feats, mut labels) = (Vec::new(), Vec::new());
        for _ in 0..rows {
            let (n, line) = lines.next()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != d + 1 {
                return Err(parse_err(n, format!("expected {} values, found {}", d + 1, toks.len())));
            }
            for t in &toks[..d] {
                feats.push(float(n, t)?);
            }
            labels.push(label(n, toks[d])?);
        }
        LabeledSet::new(d, feats, labels).map_err(tag_invalid(n))
    };
    let val = labeled("val")?;
    let test = labeled("test")?;
    let end_line = lines.last;
    lines.finish()?;
    HypercleanProblem::new(classes, ridge, corruption, train, clean, mask, val, test).map_err(tag_invalid(end_line))
}
