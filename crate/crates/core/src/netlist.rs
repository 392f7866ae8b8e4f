//! SPICE-subset netlist parsing, serialization and structural validation.
//!
//! Grammar, one element per line:
//!
//! ```text
//! R<id> n+ n- value        C<id> n+ n- value        L<id> n+ n- value
//! V<id> n+ n- (DC v | v | SIN(voff vamp freq) | PULSE(v1 v2 td tr tf pw per) | PWL(t1 v1 ...))
//! I<id> n+ n- <same source forms as V>
//! D<id> n+ n- [IS=val] [N=val]
//! M<id> nd ng ns TYPE=NMOS|PMOS [KP=] [VT0=] [LAMBDA=] [W=] [L=] [CGS=] [CGD=]
//! .tran tstop [tstep]      .end      * comment      ; inline comment      + continuation
//! ```
//!
//! Node names are case-insensitive alphanumerics (underscores allowed); `0` is
//! ground. A leading `*` line becomes the circuit title.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

pub const GROUND: &str = "0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetlistError {
    #[error("line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("line {line}: unknown device letter '{letter}'")]
    UnknownDevice { line: usize, letter: char },
    #[error("line {line}: {device}: invalid {param}: {msg}")]
    InvalidParam {
        line: usize,
        device: String,
        param: String,
        msg: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    Resistor,
    Capacitor,
    Inductor,
    VoltageSource,
    CurrentSource,
    Diode,
    Mos,
}

impl DeviceKind {
    pub fn letter(self) -> char {
        match self {
            DeviceKind::Resistor => 'R',
            DeviceKind::Capacitor => 'C',
            DeviceKind::Inductor => 'L',
            DeviceKind::VoltageSource => 'V',
            DeviceKind::CurrentSource => 'I',
            DeviceKind::Diode => 'D',
            DeviceKind::Mos => 'M',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'R' => DeviceKind::Resistor,
            'C' => DeviceKind::Capacitor,
            'L' => DeviceKind::Inductor,
            'V' => DeviceKind::VoltageSource,
            'I' => DeviceKind::CurrentSource,
            'D' => DeviceKind::Diode,
            'M' => DeviceKind::Mos,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosType {
    Nmos,
    Pmos,
}

/// Time dependence of an independent source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Dc(f64),
    Sin {
        offset: f64,
        amplitude: f64,
        freq: f64,
    },
    Pulse {
        v1: f64,
        v2: f64,
        delay: f64,
        rise: f64,
        fall: f64,
        width: f64,
        period: f64,
    },
    Pwl(Vec<(f64, f64)>),
}

impl SourceSpec {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            SourceSpec::Dc(v) => v,
            SourceSpec::Sin {
                offset,
                amplitude,
                freq,
            } => offset + amplitude * (2.0 * std::f64::consts::PI * freq * t).sin(),
            SourceSpec::Pulse {
                v1,
                v2,
                delay,
                rise,
                fall,
                width,
                period,
            } => {
                if t < delay {
                    return v1;
                }
                let mut tt = t - delay;
                if tt >= period {
                    tt -= (tt / period).floor() * period;
                }
                if tt < rise {
                    v1 + (v2 - v1) * tt / rise
                } else if tt < rise + width {
                    v2
                } else if tt < rise + width + fall {
                    v2 + (v1 - v2) * (tt - rise - width) / fall
                } else {
                    v1
                }
            }
            SourceSpec::Pwl(ref pts) => {
                let i = pts.partition_point(|p| p.0 <= t);
                if i == 0 {
                    pts[0].1
                } else if i == pts.len() {
                    pts[i - 1].1
                } else {
                    let (t0, v0) = pts[i - 1];
                    let (t1, v1) = pts[i];
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    /// Slope discontinuities strictly inside `(t0, t1)`, sorted.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        match *self {
            SourceSpec::Dc(_) | SourceSpec::Sin { .. } => {}
            SourceSpec::Pulse {
                delay,
                rise,
                fall,
                width,
                period,
                ..
            } => {
                let corners = [0.0, rise, rise + width, rise + width + fall];
                let first = ((t0 - delay) / period).floor().max(0.0) as u64;
                let mut p = first;
                loop {
                    let base = delay + p as f64 * period;
                    if base >= t1 {
                        break;
                    }
                    for c in corners {
                        let t = base + c;
                        if t > t0 && t < t1 && c < period {
                            out.push(t);
                        }
                    }
                    p += 1;
                }
            }
            SourceSpec::Pwl(ref pts) => {
                out.extend(pts.iter().map(|p| p.0).filter(|&t| t > t0 && t < t1));
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub kind: DeviceKind,
    pub name: String,
    pub terminals: Vec<String>,
    /// SI-valued parameters; R/C/L store their element value under `value`.
    pub params: BTreeMap<String, f64>,
    pub source: Option<SourceSpec>,
    pub mos_type: Option<MosType>,
}

impl Device {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    /// Element value of R/C/L devices.
    pub fn value(&self) -> f64 {
        self.params.get("value").copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Analysis {
    Tran { tstop: f64, tstep: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Circuit {
    pub title: String,
    /// Ground first, then the remaining nodes in order of first appearance.
    pub nodes: Vec<String>,
    pub devices: Vec<Device>,
    pub analyses: Vec<Analysis>,
}

impl Circuit {
    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name.eq_ignore_ascii_case(name))
    }

    /// Stop time and optional step hint of the first `.tran` directive.
    pub fn tran(&self) -> Option<(f64, Option<f64>)> {
        self.analyses.iter().map(|a| match *a {
            Analysis::Tran { tstop, tstep } => (tstop, tstep),
        }).next()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    /// Node without a DC-conducting path to ground.
    FloatingNode(String),
    /// Loop made only of voltage sources; the listed source closes it.
    VoltageLoop(String),
    MissingAnalysis,
    MissingSource,
}

impl Diagnostic {
    /// Whether the circuit equations cannot be assembled at all.
    pub fn is_structural(&self) -> bool {
        matches!(self, Diagnostic::VoltageLoop(_))
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::FloatingNode(n) => write!(f, "node {n} has no DC path to ground"),
            Diagnostic::VoltageLoop(d) => write!(f, "voltage source {d} closes a loop of voltage sources"),
            Diagnostic::MissingAnalysis => write!(f, "no analysis directive"),
            Diagnostic::MissingSource => write!(f, "no independent source"),
        }
    }
}

// ---------------------------------------------------------------------------
// lexing

#[derive(Debug, Clone)]
struct Token {
    text: String,
    col: usize,
}

struct Line {
    number: usize,
    tokens: Vec<Token>,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> NetlistError {
    NetlistError::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

fn tokenize(text: &str, line: usize, col0: usize, out: &mut Vec<Token>) -> Result<(), NetlistError> {
    let mut cur = String::new();
    let mut start = 0;
    let flush = |cur: &mut String, start: usize, out: &mut Vec<Token>| {
        if !cur.is_empty() {
            out.push(Token {
                text: std::mem::take(cur),
                col: start,
            });
        }
    };
    for (i, ch) in text.chars().enumerate() {
        let col = col0 + i;
        match ch {
            c if c.is_whitespace() || c == '(' || c == ')' || c == ',' => flush(&mut cur, start, out),
            '=' => {
                flush(&mut cur, start, out);
                out.push(Token {
                    text: "=".into(),
                    col,
                });
            }
            c if c.is_ascii_graphic() => {
                if cur.is_empty() {
                    start = col;
                }
                cur.push(c);
            }
            c => return Err(err(line, col, format!("unexpected character {c:?}"))),
        }
    }
    flush(&mut cur, start, out);
    Ok(())
}

/// Parses a number with an optional engineering suffix and trailing unit
/// letters (`10n`, `1k`, `2.2meg`, `5V`, `10nF`).
pub fn parse_value(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let digits_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    let mantissa = &s[digits_start..i];
    if mantissa.is_empty() || mantissa == "." {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_digits = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_digits {
            i = j;
        }
    }
    let mantissa_end = digits_start + mantissa.len();
    let exponent: i64 = if i > mantissa_end {
        s[mantissa_end + 1..i].parse().ok()?
    } else {
        0
    };
    let rest = s[i..].to_ascii_lowercase();
    if !rest.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    let shift = if rest.starts_with("meg") {
        6
    } else {
        match rest.chars().next() {
            Some('t') => 12,
            Some('g') => 9,
            Some('k') => 3,
            Some('m') => -3,
            Some('u') => -6,
            Some('n') => -9,
            Some('p') => -12,
            Some('f') => -15,
            _ => 0,
        }
    };
    // shifting the decimal exponent keeps e.g. "5f" exactly equal to 5e-15
    let v: f64 = format!("{}e{}", &s[..mantissa_end], exponent.checked_add(shift)?)
        .parse()
        .ok()?;
    v.is_finite().then_some(v)
}

fn logical_lines(text: &str) -> Result<(String, Vec<Line>), NetlistError> {
    let mut title = String::new();
    let mut lines: Vec<Line> = Vec::new();
    let mut seen_content = false;
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let body = match raw.find(';') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = body.trim_start();
        let indent = body.len() - trimmed.len();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('*') {
            if !seen_content && title.is_empty() {
                title = rest.trim().to_string();
            }
            continue;
        }
        seen_content = true;
        if let Some(rest) = trimmed.strip_prefix('+') {
            let Some(prev) = lines.last_mut() else {
                return Err(err(number, indent + 1, "continuation line without a preceding element"));
            };
            tokenize(rest, number, indent + 2, &mut prev.tokens)?;
            continue;
        }
        let mut tokens = Vec::new();
        tokenize(trimmed, number, indent + 1, &mut tokens)?;
        if tokens.is_empty() {
            return Err(err(number, indent + 1, "line contains no element"));
        }
        lines.push(Line { number, tokens });
    }
    Ok((title, lines))
}

// ---------------------------------------------------------------------------
// parsing

struct Cursor<'a> {
    line: &'a Line,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<&'a Token, NetlistError> {
        let t = self.line.tokens.get(self.pos).ok_or_else(|| {
            let col = self.line.tokens.last().map(|t| t.col + t.text.len()).unwrap_or(1);
            err(self.line.number, col, format!("expected {what}"))
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a Token> {
        self.line.tokens.get(self.pos)
    }

    fn done(&self) -> bool {
        self.pos >= self.line.tokens.len()
    }

    fn number(&mut self, what: &str) -> Result<f64, NetlistError> {
        let t = self.next(what)?;
        parse_value(&t.text)
            .ok_or_else(|| err(self.line.number, t.col, format!("expected {what}, found '{}'", t.text)))
    }

    fn node(&mut self) -> Result<String, NetlistError> {
        let t = self.next("node name")?;
        if t.text == "=" || !t.text.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(err(self.line.number, t.col, format!("invalid node name '{}'", t.text)));
        }
        Ok(t.text.to_ascii_lowercase())
    }

    fn expect_end(&self) -> Result<(), NetlistError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(err(self.line.number, t.col, format!("unexpected token '{}'", t.text))),
        }
    }

    /// `KEY=VALUE` pairs up to the end of the line (raw value text).
    fn key_values(&mut self) -> Result<Vec<(String, &'a Token)>, NetlistError> {
        let mut out = Vec::new();
        while !self.done() {
            let key = self.next("parameter name")?;
            if key.text == "=" {
                return Err(err(self.line.number, key.col, "missing parameter name"));
            }
            let eq = self.next("'='")?;
            if eq.text != "=" {
                return Err(err(self.line.number, eq.col, format!("expected '=' after {}", key.text)));
            }
            let val = self.next("parameter value")?;
            if val.text == "=" {
                return Err(err(self.line.number, val.col, "missing parameter value"));
            }
            out.push((key.text.to_ascii_uppercase(), val));
        }
        Ok(out)
    }
}

fn invalid(line: usize, device: &str, param: &str, msg: impl Into<String>) -> NetlistError {
    NetlistError::InvalidParam {
        line,
        device: device.to_string(),
        param: param.to_string(),
        msg: msg.into(),
    }
}

fn parse_source(cur: &mut Cursor, name: &str) -> Result<SourceSpec, NetlistError> {
    let line = cur.line.number;
    let head = cur.next("source value")?;
    let kw = head.text.to_ascii_uppercase();
    let numbers = |cur: &mut Cursor| -> Result<Vec<f64>, NetlistError> {
        let mut v = Vec::new();
        while !cur.done() {
            v.push(cur.number("number")?);
        }
        Ok(v)
    };
    let spec = match kw.as_str() {
        "DC" => {
            let v = cur.number("DC value")?;
            SourceSpec::Dc(v)
        }
        "SIN" => {
            let v = numbers(cur)?;
            if v.len() != 3 {
                return Err(err(line, head.col, "SIN takes exactly 3 values (voff vamp freq)"));
            }
            if v[2] < 0.0 {
                return Err(invalid(line, name, "freq", "must be non-negative"));
            }
            SourceSpec::Sin {
                offset: v[0],
                amplitude: v[1],
                freq: v[2],
            }
        }
        "PULSE" => {
            let v = numbers(cur)?;
            if v.len() != 7 {
                return Err(err(line, head.col, "PULSE takes exactly 7 values (v1 v2 td tr tf pw per)"));
            }
            let [v1, v2, delay, rise, fall, width, period] = v[..] else {
                unreachable!()
            };
            if !(rise > 0.0) {
                return Err(invalid(line, name, "rise", "must be positive"));
            }
            if !(fall > 0.0) {
                return Err(invalid(line, name, "fall", "must be positive"));
            }
            if width < 0.0 || delay < 0.0 {
                return Err(invalid(line, name, "timing", "delay and width must be non-negative"));
            }
            if !(period >= rise + width + fall) {
                return Err(invalid(line, name, "period", "shorter than rise + width + fall"));
            }
            SourceSpec::Pulse {
                v1,
                v2,
                delay,
                rise,
                fall,
                width,
                period,
            }
        }
        "PWL" => {
            let v = numbers(cur)?;
            if v.is_empty() || v.len() % 2 != 0 {
                return Err(err(line, head.col, "PWL takes time/value pairs"));
            }
            let pts: Vec<(f64, f64)> = v.chunks(2).map(|c| (c[0], c[1])).collect();
            if pts[0].0 < 0.0 || pts.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return Err(invalid(line, name, "PWL", "times must be non-negative and strictly increasing"));
            }
            SourceSpec::Pwl(pts)
        }
        _ => match parse_value(&head.text) {
            Some(v) => SourceSpec::Dc(v),
            None => {
                return Err(err(line, head.col, format!("unknown source specification '{}'", head.text)))
            }
        },
    };
    cur.expect_end()?;
    Ok(spec)
}

fn parse_device(line: &Line) -> Result<Device, NetlistError> {
    let first = &line.tokens[0];
    let letter = first.text.chars().next().unwrap();
    let kind = DeviceKind::from_letter(letter).ok_or(NetlistError::UnknownDevice {
        line: line.number,
        letter,
    })?;
    let name = first.text.to_ascii_uppercase();
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(err(line.number, first.col, format!("invalid device name '{}'", first.text)));
    }
    let mut cur = Cursor { line, pos: 1 };
    let n = line.number;
    let mut params = BTreeMap::new();
    let mut source = None;
    let mut mos_type = None;
    let terminals = match kind {
        DeviceKind::Mos => vec![cur.node()?, cur.node()?, cur.node()?],
        _ => vec![cur.node()?, cur.node()?],
    };
    match kind {
        DeviceKind::Resistor | DeviceKind::Capacitor | DeviceKind::Inductor => {
            let v = cur.number("element value")?;
            cur.expect_end()?;
            let ok = match kind {
                DeviceKind::Resistor => v != 0.0,
                _ => v > 0.0,
            };
            if !ok {
                let msg = if kind == DeviceKind::Resistor {
                    "must be non-zero"
                } else {
                    "must be positive"
                };
                return Err(invalid(n, &name, "value", msg));
            }
            params.insert("value".to_string(), v);
        }
        DeviceKind::VoltageSource | DeviceKind::CurrentSource => {
            source = Some(parse_source(&mut cur, &name)?);
        }
        DeviceKind::Diode => {
            for (key, tok) in cur.key_values()? {
                let v = parse_value(&tok.text)
                    .ok_or_else(|| err(n, tok.col, format!("bad number '{}'", tok.text)))?;
                match key.as_str() {
                    "IS" | "N" if v > 0.0 => {
                        params.insert(key, v);
                    }
                    "IS" | "N" => return Err(invalid(n, &name, &key, "must be positive")),
                    _ => return Err(invalid(n, &name, &key, "unknown diode parameter")),
                }
            }
        }
        DeviceKind::Mos => {
            for (key, tok) in cur.key_values()? {
                if key == "TYPE" {
                    mos_type = Some(match tok.text.to_ascii_uppercase().as_str() {
                        "NMOS" => MosType::Nmos,
                        "PMOS" => MosType::Pmos,
                        other => return Err(invalid(n, &name, "TYPE", format!("expected NMOS or PMOS, got {other}"))),
                    });
                    continue;
                }
                let v = parse_value(&tok.text)
                    .ok_or_else(|| err(n, tok.col, format!("bad number '{}'", tok.text)))?;
                let valid = match key.as_str() {
                    "KP" | "W" | "L" => v > 0.0,
                    "LAMBDA" | "CGS" | "CGD" => v >= 0.0,
                    "VT0" => true,
                    _ => return Err(invalid(n, &name, &key, "unknown MOS parameter")),
                };
                if !valid {
                    return Err(invalid(n, &name, &key, "out of range"));
                }
                params.insert(key, v);
            }
            if mos_type.is_none() {
                return Err(invalid(n, &name, "TYPE", "TYPE=NMOS or TYPE=PMOS is required"));
            }
        }
    }
    Ok(Device {
        kind,
        name,
        terminals,
        params,
        source,
        mos_type,
    })
}

pub fn parse(text: &str) -> Result<Circuit, NetlistError> {
    let (title, lines) = logical_lines(text)?;
    let mut c = Circuit {
        title,
        nodes: vec![GROUND.to_string()],
        ..Default::default()
    };
    let mut names: HashMap<String, usize> = HashMap::new();
    for line in &lines {
        let first = &line.tokens[0];
        if let Some(directive) = first.text.strip_prefix('.') {
            match directive.to_ascii_lowercase().as_str() {
                "end" => {
                    Cursor { line, pos: 1 }.expect_end()?;
                    break;
                }
                "tran" => {
                    let mut cur = Cursor { line, pos: 1 };
                    let tstop = cur.number("stop time")?;
                    let tstep = if cur.done() {
                        None
                    } else {
                        Some(cur.number("step hint")?)
                    };
                    cur.expect_end()?;
                    if !(tstop > 0.0) || tstep.is_some_and(|h| !(h > 0.0)) {
                        return Err(invalid(line.number, ".tran", "time", "must be positive"));
                    }
                    c.analyses.push(Analysis::Tran { tstop, tstep });
                }
                _ => {
                    return Err(err(
                        line.number,
                        first.col,
                        format!("unsupported directive '{}'", first.text),
                    ))
                }
            }
            continue;
        }
        let dev = parse_device(line)?;
        if let Some(prev) = names.insert(dev.name.clone(), line.number) {
            return Err(err(
                line.number,
                first.col,
                format!("device {} already defined on line {prev}", dev.name),
            ));
        }
        for t in &dev.terminals {
            if !c.nodes.contains(t) {
                c.nodes.push(t.clone());
            }
        }
        c.devices.push(dev);
    }
    Ok(c)
}

/// Parses raw bytes; invalid UTF-8 is reported as a parse error.
pub fn parse_bytes(bytes: &[u8]) -> Result<Circuit, NetlistError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse(s),
        Err(e) => {
            let good = &bytes[..e.valid_up_to()];
            let line = good.iter().filter(|&&b| b == b'\n').count() + 1;
            let col = good.iter().rev().take_while(|&&b| b != b'\n').count() + 1;
            Err(err(line, col, "invalid UTF-8"))
        }
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

pub fn serialize(c: &Circuit) -> String {
    let mut s = String::new();
    if !c.title.is_empty() {
        let _ = writeln!(s, "* {}", c.title);
    }
    for d in &c.devices {
        let _ = write!(s, "{} {}", d.name, d.terminals.join(" "));
        match d.kind {
            DeviceKind::Resistor | DeviceKind::Capacitor | DeviceKind::Inductor => {
                let _ = write!(s, " {}", fmt_num(d.value()));
            }
            DeviceKind::VoltageSource | DeviceKind::CurrentSource => {
                match d.source.as_ref().expect("source device without waveform") {
                    SourceSpec::Dc(v) => {
                        let _ = write!(s, " DC {}", fmt_num(*v));
                    }
                    SourceSpec::Sin {
                        offset,
                        amplitude,
                        freq,
                    } => {
                        let _ = write!(s, " SIN({} {} {})", fmt_num(*offset), fmt_num(*amplitude), fmt_num(*freq));
                    }
                    SourceSpec::Pulse {
                        v1,
                        v2,
                        delay,
                        rise,
                        fall,
                        width,
                        period,
                    } => {
                        let vals: Vec<String> =
                            [v1, v2, delay, rise, fall, width, period].iter().map(|v| fmt_num(**v)).collect();
                        let _ = write!(s, " PULSE({})", vals.join(" "));
                    }
                    SourceSpec::Pwl(pts) => {
                        let vals: Vec<String> = pts
                            .iter()
                            .map(|(t, v)| format!("{} {}", fmt_num(*t), fmt_num(*v)))
                            .collect();
                        let _ = write!(s, " PWL({})", vals.join(" "));
                    }
                }
            }
            DeviceKind::Diode | DeviceKind::Mos => {
                if let Some(t) = d.mos_type {
                    let _ = write!(s, " TYPE={}", if t == MosType::Nmos { "NMOS" } else { "PMOS" });
                }
                for (k, v) in &d.params {
                    let _ = write!(s, " {k}={}", fmt_num(*v));
                }
            }
        }
        s.push('\n');
    }
    for a in &c.analyses {
        match *a {
            Analysis::Tran { tstop, tstep } => {
                let _ = write!(s, ".tran {}", fmt_num(tstop));
                if let Some(h) = tstep {
                    let _ = write!(s, " {}", fmt_num(h));
                }
                s.push('\n');
            }
        }
    }
    s.push_str(".end\n");
    s
}

// ---------------------------------------------------------------------------
// validation

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    /// Returns false when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

pub fn validate(c: &Circuit) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let index: HashMap<&str, usize> = c.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let idx = |n: &String| index[n.as_str()];

    let mut dc = UnionFind::new(c.nodes.len());
    let mut vloop = UnionFind::new(c.nodes.len());
    for d in &c.devices {
        let t = &d.terminals;
        match d.kind {
            DeviceKind::Resistor | DeviceKind::Inductor | DeviceKind::Diode => {
                dc.union(idx(&t[0]), idx(&t[1]));
            }
            DeviceKind::VoltageSource => {
                dc.union(idx(&t[0]), idx(&t[1]));
                if !vloop.union(idx(&t[0]), idx(&t[1])) {
                    diags.push(Diagnostic::VoltageLoop(d.name.clone()));
                }
            }
            DeviceKind::Mos => {
                dc.union(idx(&t[0]), idx(&t[2]));
            }
            DeviceKind::Capacitor | DeviceKind::CurrentSource => {}
        }
    }
    let ground = dc.find(0);
    for (i, n) in c.nodes.iter().enumerate().skip(1) {
        if dc.find(i) != ground {
            diags.push(Diagnostic::FloatingNode(n.clone()));
        }
    }
    if c.analyses.is_empty() {
        diags.push(Diagnostic::MissingAnalysis);
    }
    if !c
        .devices
        .iter()
        .any(|d| matches!(d.kind, DeviceKind::VoltageSource | DeviceKind::CurrentSource))
    {
        diags.push(Diagnostic::MissingSource);
    }
    diags
}
