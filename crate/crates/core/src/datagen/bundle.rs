//! Plain-text bundle format.
//!
//! ```text
//! #META name=<s> n=<int> d0=<int> C=<int> mode=<single|multi>
//! #EDGES
//! i j            one line per undirected edge, i < j
//! #FEATURES
//! x1 x2 ...      N lines of d0 decimals
//! #LABELS
//! c | b1 b2 ...  N lines: class index, or C flags for multi-label
//! #MASKS
//! t v s          N lines of 0/1 flags
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::{GraphBundle, LabelMode, Labels, Masks};
use crate::error::{Error, Result};
use crate::graph::CsrGraph;

pub fn render_bundle(b: &GraphBundle) -> String {
    let n = b.num_nodes();
    let mut out = String::with_capacity(n * (b.feature_dim() * 2 + 16));
    let _ = writeln!(
        out,
        "#META name={} n={} d0={} C={} mode={}",
        b.name,
        n,
        b.feature_dim(),
        b.num_classes,
        b.label_mode()
    );
    out.push_str("#EDGES\n");
    for (i, j) in b.graph.undirected_edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    out.push_str("#FEATURES\n");
    for row in b.features.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out.push_str("#LABELS\n");
    match &b.labels {
        Labels::Single(v) => {
            for c in v {
                let _ = writeln!(out, "{c}");
            }
        }
        Labels::Multi(m) => {
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    out.push_str("#MASKS\n");
    for i in 0..n {
        let f = |m: &[bool]| m[i] as u8;
        let _ = writeln!(out, "{} {} {}", f(&b.masks.train), f(&b.masks.val), f(&b.masks.test));
    }
    out
}

pub fn bundle_write(b: &GraphBundle, path: impl AsRef<Path>) -> Result<()> {
    b.validate()?;
    let path = path.as_ref();
    std::fs::write(path, render_bundle(b)).map_err(|e| Error::io(path, e))
}

pub fn bundle_read(path: impl AsRef<Path>) -> Result<GraphBundle> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bundle(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<&'a str> {
        let (i, l) = self.inner.next()?;
        self.line = i + 1;
        Some(l.trim_end_matches('\r'))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn expect_header(&mut self, header: &str) -> Result<()> {
        match self.next() {
            Some(l) if l.trim() == header => Ok(()),
            Some(l) => Err(self.err(format!("expected `{header}`, found `{l}`"))),
            None => Err(self.err(format!("missing `{header}` section"))),
        }
    }

    fn data_line(&mut self, what: &str) -> Result<&'a str> {
        self.next().ok_or_else(|| self.err(format!("unexpected end of file in {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(lines: &Lines, tok: &str, what: &str) -> Result<T> {
    tok.parse().map_err(|_| lines.err(format!("invalid {what} `{tok}`")))
}

pub fn parse_bundle(text: &str) -> Result<GraphBundle> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };

    let meta = lines.data_line("header")?;
    let rest = meta
        .strip_prefix("#META")
        .ok_or_else(|| lines.err("file must start with `#META`"))?;
    let (mut name, mut n, mut d0, mut c, mut mode) = (None, None, None, None, None);
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lines.err(format!("malformed meta field `{kv}`")))?;
        match k {
            "name" => name = Some(v.to_string()),
            "n" => n = Some(parse_num::<usize>(&lines, v, "n")?),
            "d0" => d0 = Some(parse_num::<usize>(&lines, v, "d0")?),
            "C" => c = Some(parse_num::<usize>(&lines, v, "C")?),
            "mode" => {
                mode = Some(match v {
                    "single" => LabelMode::Single,
                    "multi" => LabelMode::Multi,
                    _ => return Err(lines.err(format!("unknown label mode `{v}`"))),
                })
            }
            _ => return Err(lines.err(format!("unknown meta field `{k}`"))),
        }
    }
    let missing = |f: &str| lines.err(format!("meta field `{f}` missing"));
    let name = name.ok_or_else(|| missing("name"))?;
    let n = n.ok_or_else(|| missing("n"))?;
    let d0 = d0.ok_or_else(|| missing("d0"))?;
    let c = c.ok_or_else(|| missing("C"))?;
    let mode = mode.ok_or_else(|| missing("mode"))?;

    lines.expect_header("#EDGES")?;
    let mut edges = Vec::new();
    let features_line;
    loop {
        let l = lines.data_line("edges")?;
        if l.trim() == "#FEATURES" {
            features_line = lines.line;
            break;
        }
        let mut it = l.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(lines.err(format!("edge line must be `i j`, found `{l}`")));
        };
        let (i, j): (usize, usize) = (parse_num(&lines, a, "node")?, parse_num(&lines, b, "node")?);
        if i >= n || j >= n {
            return Err(lines.err(format!("edge ({i}, {j}) out of range")));
        }
        if i >= j {
            return Err(lines.err(format!("edge ({i}, {j}) must satisfy i < j")));
        }
        edges.push((i, j));
    }
    debug_assert!(features_line > 0);

    let mut features = Array2::zeros((n, d0));
    for r in 0..n {
        let l = lines.data_line("features")?;
        let mut count = 0;
        for (k, tok) in l.split_whitespace().enumerate() {
            if k >= d0 {
                return Err(lines.err(format!("more than d0 = {d0} features")));
            }
            features[[r, k]] = parse_num::<f64>(&lines, tok, "feature")?;
            count += 1;
        }
        if count != d0 {
            return Err(lines.err(format!("expected {d0} features, found {count}")));
        }
    }

    lines.expect_header("#LABELS")?;
    let labels = match mode {
        LabelMode::Single => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let l = lines.data_line("labels")?;
                v.push(parse_num::<usize>(&lines, l.trim(), "label")?);
            }
            Labels::Single(v)
        }
        LabelMode::Multi => {
            let mut m = Array2::<u8>::zeros((n, c));
            for r in 0..n {
                let l = lines.data_line("labels")?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.len() != c {
                    return Err(lines.err(format!("expected {c} label flags, found {}", toks.len())));
                }
                for (k, tok) in toks.iter().enumerate() {
                    m[[r, k]] = parse_num::<u8>(&lines, tok, "label flag")?;
                }
            }
            Labels::Multi(m)
        }
    };

    lines.expect_header("#MASKS")?;
    let mut masks = Masks::empty(n);
    for r in 0..n {
        let l = lines.data_line("masks")?;
        let flags: Vec<&str> = l.split_whitespace().collect();
        if flags.len() != 3 {
            return Err(lines.err(format!("mask line must have 3 flags, found `{l}`")));
        }
        let flag = |t: &str| match t {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(lines.err(format!("mask flag must be 0 or 1, found `{t}`"))),
        };
        masks.train[r] = flag(flags[0])?;
        masks.val[r] = flag(flags[1])?;
        masks.test[r] = flag(flags[2])?;
    }
    while let Some(l) = lines.next() {
        if !l.trim().is_empty() {
            return Err(lines.err("trailing content after masks"));
        }
    }

    let bundle = GraphBundle {
        name,
        graph: CsrGraph::from_edges(n, edges)?,
        features,
        labels,
        num_classes: c,
        masks,
    };
    bundle.validate()?;
    Ok(bundle)
}
