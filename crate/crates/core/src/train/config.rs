//! `key=value` configuration files with `DataConfig:` / `TrainConfig:`
//! sections.
//!
//! Items are separated by commas or newlines; commas inside brackets
//! belong to list values, which may span lines. Values are integer or
//! float arithmetic (`256*8`, `(3+1)/2`), lists (`[12,6,5,4]`), booleans
//! or bare words. `#` starts a comment.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Word(String),
    List(Vec<Value>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Data,
    Train,
}

/// Audio and batching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub batch_sz: usize,
    pub num_mels: usize,
    /// Clip length in seconds.
    pub win_sz: f64,
    pub stft_hop_sz: usize,
    pub stft_win_sz: usize,
    pub sample_rate: u32,
    /// Batches queued ahead by loader threads; 0 loads synchronously.
    pub prefetch: usize,
    pub workers: usize,
}

/// Model and optimisation settings. MelNet needs `dims`, `n_layers` and
/// `directions`; every cMelGAN key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub dims: Option<usize>,
    pub n_layers: Option<Vec<usize>>,
    pub directions: Option<Vec<usize>>,
    pub mixtures: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Falls back to the model's default rate when unset.
    pub lr: Option<f64>,
    pub checkpoint: bool,
    pub noise_dim: usize,
    pub seed_channels: usize,
    pub gen_channels: Vec<usize>,
    pub finetune_kernels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub disc_embed_dim: usize,
    pub disc_channels: Vec<usize>,
    pub disc_groups: usize,
}

#[derive(Clone, Copy)]
enum Kind {
    Count,
    Seconds,
    Seed,
    Rate,
    Flag,
    Counts,
}

const KEYS: &[(Section, &str, Kind, bool)] = &[
    (Section::Data, "batch_sz", Kind::Count, true),
    (Section::Data, "num_mels", Kind::Count, true),
    (Section::Data, "win_sz", Kind::Seconds, true),
    (Section::Data, "stft_hop_sz", Kind::Count, true),
    (Section::Data, "stft_win_sz", Kind::Count, true),
    (Section::Data, "sample_rate", Kind::Count, false),
    (Section::Data, "prefetch", Kind::Count, false),
    (Section::Data, "workers", Kind::Count, false),
    (Section::Train, "dims", Kind::Count, false),
    (Section::Train, "n_layers", Kind::Counts, false),
    (Section::Train, "directions", Kind::Counts, false),
    (Section::Train, "mixtures", Kind::Count, false),
    (Section::Train, "epochs", Kind::Count, false),
    (Section::Train, "seed", Kind::Seed, false),
    (Section::Train, "lr", Kind::Rate, false),
    (Section::Train, "checkpoint", Kind::Flag, false),
    (Section::Train, "noise_dim", Kind::Count, false),
    (Section::Train, "seed_channels", Kind::Count, false),
    (Section::Train, "gen_channels", Kind::Counts, false),
    (Section::Train, "finetune_kernels", Kind::Counts, false),
    (Section::Train, "dilations", Kind::Counts, false),
    (Section::Train, "disc_embed_dim", Kind::Count, false),
    (Section::Train, "disc_channels", Kind::Counts, false),
    (Section::Train, "disc_groups", Kind::Count, false),
];

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::defaults();
        let mut seen = HashSet::new();
        for item in split_items(text)? {
            let err = |msg: String| TrainError::Config { line: item.line, msg };
            let Some((key, raw)) = item.text.split_once('=') else {
                return Err(err(format!("expected key=value, got `{}`", item.text)));
            };
            let key = key.trim();
            let Some(&(section, name, kind, _)) = KEYS.iter().find(|k| k.1 == key) else {
                return Err(err(format!("unknown key `{key}`")));
            };
            match item.section {
                None => return Err(err(format!("`{key}` appears before any section header"))),
                Some(s) if s != section => {
                    let want = if section == Section::Data { "DataConfig" } else { "TrainConfig" };
                    return Err(err(format!("`{key}` belongs in {want}")));
                }
                _ => {}
            }
            if !seen.insert(name) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let value = parse_value(raw.trim()).map_err(err)?;
            cfg.set(key, kind, &value).map_err(err)?;
        }
        for &(_, key, _, required) in KEYS {
            if required && !seen.contains(key) {
                return Err(TrainError::Config {
                    line: 0,
                    msg: format!("missing required key `{key}`"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn defaults() -> Self {
        Self {
            data: DataConfig {
                batch_sz: 0,
                num_mels: 0,
                win_sz: 0.0,
                stft_hop_sz: 0,
                stft_win_sz: 0,
                sample_rate: 22050,
                prefetch: 0,
                workers: 1,
            },
            dims: None,
            n_layers: None,
            directions: None,
            mixtures: 10,
            epochs: 30,
            seed: 0,
            lr: None,
            checkpoint: false,
            noise_dim: 128,
            seed_channels: 64,
            gen_channels: vec![32, 16, 8],
            finetune_kernels: vec![3, 7, 15, 31],
            dilations: vec![1, 3, 9],
            disc_embed_dim: 16,
            disc_channels: vec![16, 32, 64, 64],
            disc_groups: 4,
        }
    }

    fn set(&mut self, key: &str, kind: Kind, v: &Value) -> std::result::Result<(), String> {
        let count = || as_count(v, key);
        let counts = || match v {
            Value::List(xs) => xs.iter().map(|x| as_count(x, key)).collect(),
            _ => Err(format!("`{key}` expects a list like [1,2,3]")),
        };
        match (kind, key) {
            (Kind::Count, "batch_sz") => self.data.batch_sz = count()?,
            (Kind::Count, "num_mels") => self.data.num_mels = count()?,
            (Kind::Count, "stft_hop_sz") => self.data.stft_hop_sz = count()?,
            (Kind::Count, "stft_win_sz") => self.data.stft_win_sz = count()?,
            (Kind::Count, "sample_rate") => {
                self.data.sample_rate = u32::try_from(count()?).map_err(|_| "sample_rate is too large".to_string())?
            }
            (Kind::Count, "prefetch") => self.data.prefetch = count()?,
            (Kind::Count, "workers") => self.data.workers = count()?,
            (Kind::Seconds, _) => self.data.win_sz = as_float(v, key)?,
            (Kind::Count, "dims") => self.dims = Some(count()?),
            (Kind::Counts, "n_layers") => self.n_layers = Some(counts()?),
            (Kind::Counts, "directions") => self.directions = Some(counts()?),
            (Kind::Count, "mixtures") => self.mixtures = count()?,
            (Kind::Count, "epochs") => self.epochs = count()?,
            (Kind::Seed, _) => self.seed = count()? as u64,
            (Kind::Rate, _) => self.lr = Some(as_float(v, key)?),
            (Kind::Flag, _) => match v {
                Value::Bool(b) => self.checkpoint = *b,
                _ => return Err(format!("`{key}` expects true or false")),
            },
            (Kind::Count, "noise_dim") => self.noise_dim = count()?,
            (Kind::Count, "seed_channels") => self.seed_channels = count()?,
            (Kind::Counts, "gen_channels") => self.gen_channels = counts()?,
            (Kind::Counts, "finetune_kernels") => self.finetune_kernels = counts()?,
            (Kind::Counts, "dilations") => self.dilations = counts()?,
            (Kind::Count, "disc_embed_dim") => self.disc_embed_dim = count()?,
            (Kind::Counts, "disc_channels") => self.disc_channels = counts()?,
            (Kind::Count, "disc_groups") => self.disc_groups = count()?,
            _ => unreachable!("key table and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Range checks that do not depend on the model kind.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config { line: 0, msg });
        let d = &self.data;
        if d.batch_sz == 0 || d.num_mels == 0 || d.stft_hop_sz == 0 || d.stft_win_sz == 0 || d.sample_rate == 0 {
            return bad("batch_sz, num_mels, stft sizes and sample_rate must be positive".into());
        }
        if !(d.win_sz > 0.0 && d.win_sz.is_finite()) {
            return bad(format!("win_sz must be a positive number of seconds, got {}", d.win_sz));
        }
        if d.stft_hop_sz > d.stft_win_sz {
            return bad(format!("stft_hop_sz {} exceeds stft_win_sz {}", d.stft_hop_sz, d.stft_win_sz));
        }
        if self.epochs == 0 || self.mixtures == 0 {
            return bad("epochs and mixtures must be positive".into());
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("lr must be positive, got {lr}"));
            }
        }
        Ok(())
    }
}

fn as_count(v: &Value, key: &str) -> std::result::Result<usize, String> {
    match v {
        Value::Int(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(format!("`{key}` expects a nonnegative integer")),
    }
}

fn as_float(v: &Value, key: &str) -> std::result::Result<f64, String> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(f) => Ok(*f),
        _ => Err(format!("`{key}` expects a number")),
    }
}

struct Item {
    text: String,
    line: usize,
    section: Option<Section>,
}

/// Splits the file into `key=value` items, tracking sections and the line
/// each item starts on.
fn split_items(text: &str) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    let mut section = None;
    let mut cur = String::new();
    let mut start = 1;
    let mut depth = 0usize;
    let mut flush = |cur: &mut String, line: usize, section: &mut Option<Section>| -> Result<()> {
        let t = cur.trim();
        if !t.is_empty() {
            match t {
                "DataConfig:" => *section = Some(Section::Data),
                "TrainConfig:" => *section = Some(Section::Train),
                _ if t.ends_with(':') && !t.contains('=') => {
                    return Err(TrainError::Config {
                        line,
                        msg: format!("unknown section `{t}`"),
                    })
                }
                _ => items.push(Item {
                    text: t.to_string(),
                    line,
                    section: *section,
                }),
            }
        }
        cur.clear();
        Ok(())
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if cur.trim().is_empty() {
            start = n + 1;
        }
        for c in line.chars() {
            match c {
                '[' | '(' => depth += 1,
                ']' | ')' => {
                    depth = depth.checked_sub(1).ok_or_else(|| TrainError::Config {
                        line: n + 1,
                        msg: format!("unbalanced `{c}`"),
                    })?
                }
                ',' if depth == 0 => {
                    flush(&mut cur, start, &mut section)?;
                    start = n + 1;
                    continue;
                }
                _ => {}
            }
            if cur.trim().is_empty() {
                start = n + 1;
            }
            cur.push(c);
        }
        if depth == 0 {
            flush(&mut cur, start, &mut section)?;
        } else {
            cur.push(' ');
        }
    }
    if depth != 0 {
        return Err(TrainError::Config {
            line: start,
            msg: "unclosed bracket".into(),
        });
    }
    flush(&mut cur, start, &mut section)?;
    Ok(items)
}

pub fn parse_value(s: &str) -> std::result::Result<Value, String> {
    if s.is_empty() {
        return Err("missing value".into());
    }
    if let Some(inner) = s.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or_else(|| format!("malformed list `{s}`"))?;
        let mut out = Vec::new();
        let mut depth = 0usize;
        let mut cur = String::new();
        for c in inner.chars() {
            match c {
                '[' | '(' => depth += 1,
                ']' | ')' => depth = depth.saturating_sub(1),
                ',' if depth == 0 => {
                    out.push(parse_value(cur.trim())?);
                    cur.clear();
                    continue;
                }
                _ => {}
            }
            cur.push(c);
        }
        if !cur.trim().is_empty() {
            out.push(parse_value(cur.trim())?);
        } else if !out.is_empty() {
            return Err(format!("empty list element in `{s}`"));
        }
        return Ok(Value::List(out));
    }
    match s {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
        if s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Ok(Value::Word(s.to_string()));
        }
        return Err(format!("malformed value `{s}`"));
    }
    let mut p = Expr { s: s.as_bytes(), i: 0 };
    let v = p.sum()?;
    p.skip_ws();
    if p.i != p.s.len() {
        return Err(format!("malformed value `{s}`"));
    }
    Ok(match v {
        Num::I(i) => Value::Int(i),
        Num::F(f) => Value::Float(f),
    })
}

#[derive(Clone, Copy)]
enum Num {
    I(i64),
    F(f64),
}

impl Num {
    fn f(self) -> f64 {
        match self {
            Num::I(i) => i as f64,
            Num::F(f) => f,
        }
    }
}

/// Recursive-descent arithmetic over `+ - * /` and parentheses. Integer
/// arithmetic stays exact; `/` or any float operand yields a float.
struct Expr<'a> {
    s: &'a [u8],
    i: usize,
}

impl Expr<'_> {
    fn skip_ws(&mut self) {
        while self.s.get(self.i).is_some_and(u8::is_ascii_whitespace) {
            self.i += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.i).copied()
    }

    fn sum(&mut self) -> std::result::Result<Num, String> {
        let mut acc = self.product()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.i += 1;
            let r = self.product()?;
            acc = match (acc, r, op) {
                (Num::I(a), Num::I(b), b'+') => Num::I(a.checked_add(b).ok_or("integer overflow")?),
                (Num::I(a), Num::I(b), _) => Num::I(a.checked_sub(b).ok_or("integer overflow")?),
                (a, b, b'+') => Num::F(a.f() + b.f()),
                (a, b, _) => Num::F(a.f() - b.f()),
            };
        }
        Ok(acc)
    }

    fn product(&mut self) -> std::result::Result<Num, String> {
        let mut acc = self.atom()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.i += 1;
            let r = self.atom()?;
            acc = match (acc, r, op) {
                (Num::I(a), Num::I(b), b'*') => Num::I(a.checked_mul(b).ok_or("integer overflow")?),
                (a, b, b'*') => Num::F(a.f() * b.f()),
                (_, b, _) if b.f() == 0.0 => return Err("division by zero".into()),
                (a, b, _) => Num::F(a.f() / b.f()),
            };
        }
        Ok(acc)
    }

    fn atom(&mut self) -> std::result::Result<Num, String> {
        match self.peek() {
            Some(b'(') => {
                self.i += 1;
                let v = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err("missing `)`".into());
                }
                self.i += 1;
                Ok(v)
            }
            Some(b'-') => {
                self.i += 1;
                Ok(match self.atom()? {
                    Num::I(i) => Num::I(-i),
                    Num::F(f) => Num::F(-f),
                })
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.i;
                while self
                    .s
                    .get(self.i)
                    .is_some_and(|c| c.is_ascii_digit() || matches!(c, b'.' | b'e' | b'E'))
                    || (self.i > start
                        && matches!(self.s[self.i - 1], b'e' | b'E')
                        && matches!(self.s.get(self.i), Some(b'+' | b'-')))
                {
                    self.i += 1;
                }
                let tok = std::str::from_utf8(&self.s[start..self.i]).expect("ascii");
                if let Ok(i) = tok.parse::<i64>() {
                    Ok(Num::I(i))
                } else {
                    tok.parse::<f64>().map(Num::F).map_err(|_| format!("bad number `{tok}`"))
                }
            }
            _ => Err("expected a number".into()),
        }
    }
}
