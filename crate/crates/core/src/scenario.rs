//! Plain-text scenario files.
//!
//! ```text
//! # comment            (';' also starts a comment)
//! [model]
//! b1 = -0.5
//! [constraint]
//! h = 0.5              (or a table: h = 0:1.0, 0.5:0.8, 1:0.5)
//! [run]
//! mode = lq-constrained
//! ```
//!
//! Sections and keys are fixed; unknown sections, unknown keys, duplicate
//! keys and malformed values are errors naming the line and key. Keys left
//! out take the benchmark values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::bridge::DeterministicLq;
use crate::error::{Error, Result};
use crate::lq::{LqModel, Slope, SolverSettings};

/// Pipeline selected by `run.mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LqUnconstrained,
    LqConstrained,
    Mfg,
    Bridge,
    FjSuite,
    MvsdeCheck,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::LqUnconstrained, Mode::LqConstrained, Mode::Mfg, Mode::Bridge, Mode::FjSuite, Mode::MvsdeCheck];

    pub fn name(self) -> &'static str {
        match self {
            Mode::LqUnconstrained => "lq-unconstrained",
            Mode::LqConstrained => "lq-constrained",
            Mode::Mfg => "mfg",
            Mode::Bridge => "bridge",
            Mode::FjSuite => "fj-suite",
            Mode::MvsdeCheck => "mvsde-check",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of {})", Mode::ALL.map(Mode::name).join(", ")))
    }
}

const MODEL_KEYS: [&str; 15] =
    ["b1", "b2", "b3", "b4", "s1", "s2", "s3", "s4", "q", "v", "ell", "T", "m0", "v0", "r"];
const CONSTRAINT_KEYS: [&str; 1] = ["h"];
const RUN_KEYS: [&str; 10] =
    ["N", "M", "seed", "max_iter", "damping", "mode", "tol", "outer_iter", "outer_tol", "dt_list"];
const OUTPUT_KEYS: [&str; 1] = ["max_particles"];

fn allowed(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(&MODEL_KEYS),
        "constraint" => Some(&CONSTRAINT_KEYS),
        "run" => Some(&RUN_KEYS),
        "output" => Some(&OUTPUT_KEYS),
        _ => None,
    }
}

/// A parsed value together with the line it came from (0 for overrides).
#[derive(Debug, Clone, PartialEq, Serialize)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw `section.key -> value` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScenarioFile {
    entries: BTreeMap<String, Entry>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse { line, msg: format!("unterminated section header '{body}'") })?
                    .trim();
                if allowed(name).is_none() {
                    return Err(Error::Parse { line, msg: format!("unknown section '{name}'") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected 'key = value', found '{body}'") })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Parse { line, msg: format!("key '{key}' outside any section") })?;
            let full = format!("{sec}.{key}");
            if !allowed(sec).is_some_and(|keys| keys.contains(&key)) {
                return Err(Error::Parse { line, msg: format!("unknown key '{full}'") });
            }
            if value.is_empty() {
                return Err(Error::Parse { line, msg: format!("empty value for key '{full}'") });
            }
            if let Some(prev) = entries.insert(full.clone(), Entry { value: value.to_string(), line }) {
                return Err(Error::Parse { line, msg: format!("duplicate key '{full}' (first set on line {})", prev.line) });
            }
        }
        Ok(Self { entries })
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let bad = |msg: String| Error::Override { key: assignment.to_string(), msg };
        let (key, value) = assignment.split_once('=').ok_or_else(|| bad("expected KEY=VALUE".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let (sec, name) = key.split_once('.').ok_or_else(|| bad("key must be section.key".into()))?;
        if !allowed(sec).is_some_and(|keys| keys.contains(&name)) {
            return Err(bad(format!("unknown key '{key}'")));
        }
        if value.is_empty() {
            return Err(bad("empty value".into()));
        }
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), line: 0 });
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn error(&self, key: &str, msg: String) -> Error {
        match self.raw(key) {
            Some(e) if e.line > 0 => Error::Parse { line: e.line, msg: format!("key '{key}': {msg}") },
            Some(_) => Error::Override { key: key.to_string(), msg },
            None => Error::Config(format!("{key}: {msg}")),
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| self.error(key, format!("cannot parse '{}' as {}", e.value, std::any::type_name::<T>()))),
        }
    }

    /// Finite float.
    fn real(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.get(key, default)?;
        if !v.is_finite() {
            return Err(self.error(key, "value must be finite".into()));
        }
        Ok(v)
    }

    /// Canonical `key = value` listing (sorted), used for hashing.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, e)| format!("{k} = {}\n", e.value)).collect()
    }

    /// Resolves defaults and validates every value.
    pub fn resolve(&self) -> Result<Scenario> {
        let mode_entry =
            self.raw("run.mode").ok_or_else(|| Error::Config("missing required key 'run.mode'".into()))?;
        let mode: Mode = mode_entry.value.parse().map_err(|e| self.error("run.mode", e))?;

        let bench = LqModel::benchmark();
        // The deterministic bridge defaults to zero noise and a point mass.
        let (s_default, v0_default) = if mode == Mode::Bridge { ([0.0; 4], 0.0) } else { (bench.s, bench.v0) };
        let mut model = bench.clone();
        for i in 0..4 {
            model.b[i] = self.real(&format!("model.b{}", i + 1), bench.b[i])?;
            model.s[i] = self.real(&format!("model.s{}", i + 1), s_default[i])?;
        }
        model.q = self.real("model.q", bench.q)?;
        model.v = self.real("model.v", bench.v)?;
        model.ell = self.real("model.ell", bench.ell)?;
        model.horizon = self.real("model.T", bench.horizon)?;
        model.m0 = self.real("model.m0", bench.m0)?;
        model.v0 = self.real("model.v0", v0_default)?;
        let terminal_slope = self.real("model.r", 0.0)?;
        if terminal_slope != 0.0 && mode != Mode::Bridge {
            return Err(self.error("model.r", "a linear terminal weight is only supported in bridge mode".into()));
        }
        let h = match self.raw("constraint.h") {
            None => None,
            Some(e) => Some(parse_slope(&e.value).map_err(|m| self.error("constraint.h", m))?),
        };
        model.constrained = mode == Mode::LqConstrained || (h.is_some() && mode != Mode::LqUnconstrained);
        if let Some(h) = &h {
            model.h = h.clone();
        }
        model.validate().map_err(|e| self.error("model", e.to_string()))?;

        let d = SolverSettings::default();
        let settings = SolverSettings {
            steps: self.get("run.M", d.steps)?,
            particles: self.get("run.N", d.particles)?,
            seed: self.get("run.seed", d.seed)?,
            max_iter: self.get("run.max_iter", d.max_iter)?,
            damping: self.real("run.damping", d.damping)?,
            tol: self.real("run.tol", d.tol)?,
        };
        if settings.steps == 0 {
            return Err(self.error("run.M", "must be positive".into()));
        }
        if settings.particles < 2 {
            return Err(self.error("run.N", "need at least 2 particles".into()));
        }
        if settings.max_iter == 0 {
            return Err(self.error("run.max_iter", "must be positive".into()));
        }
        if !(settings.damping > 0.0 && settings.damping <= 1.0) {
            return Err(self.error("run.damping", "must lie in (0, 1]".into()));
        }
        if !(settings.tol > 0.0) {
            return Err(self.error("run.tol", "must be positive".into()));
        }
        let outer_iter = self.get("run.outer_iter", 20usize)?;
        if outer_iter == 0 {
            return Err(self.error("run.outer_iter", "must be positive".into()));
        }
        let outer_tol: f64 = self.get("run.outer_tol", 1e-3)?;
        if !(outer_tol > 0.0) {
            return Err(self.error("run.outer_tol", "must be positive".into()));
        }
        let dt_list = match self.raw("run.dt_list") {
            None => vec![0.1, 0.05, 0.025, 0.0125],
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| self.error("run.dt_list", format!("cannot parse '{}' as a list of floats", e.value)))?,
        };
        let max_particles = self.get("output.max_particles", 100usize)?;

        Ok(Scenario {
            mode,
            model,
            terminal_slope,
            settings,
            outer_iter,
            outer_tol,
            dt_list,
            max_particles,
            hash: format!("{:016x}", fnv1a(self.canonical().as_bytes())),
        })
    }
}

/// `h = 0.5` or `h = t0:h0, t1:h1, ...` with increasing knot times.
fn parse_slope(value: &str) -> std::result::Result<Slope, String> {
    if !value.contains(':') {
        let h: f64 = value.parse().map_err(|_| format!("cannot parse '{value}' as a float"))?;
        return Ok(Slope::Constant(h));
    }
    let mut knots = Vec::new();
    for part in value.split(',') {
        let (t, h) = part.split_once(':').ok_or_else(|| format!("table entry '{}' is not t:h", part.trim()))?;
        let t: f64 = t.trim().parse().map_err(|_| format!("bad knot time '{}'", t.trim()))?;
        let h: f64 = h.trim().parse().map_err(|_| format!("bad knot value '{}'", h.trim()))?;
        knots.push((t, h));
    }
    if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err("table knot times must be strictly increasing".into());
    }
    Ok(Slope::Table(knots))
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub mode: Mode,
    pub model: LqModel,
    /// Linear terminal weight (bridge mode only).
    pub terminal_slope: f64,
    pub settings: SolverSettings,
    pub outer_iter: usize,
    pub outer_tol: f64,
    pub dt_list: Vec<f64>,
    /// Particles written to the paths/adjoint CSVs.
    pub max_particles: usize,
    /// FNV-1a of the canonical key listing.
    pub hash: String,
}

impl Scenario {
    /// The deterministic bridge scenario: drifts merge under a point mass and
    /// `ell` is used as a plain (non-centered) terminal weight.
    pub fn deterministic(&self) -> Result<DeterministicLq> {
        let m = &self.model;
        if m.s.iter().any(|s| *s != 0.0) || m.v0 != 0.0 {
            return Err(Error::InvalidInput(
                "bridge mode needs a deterministic scenario (s1..s4 = 0, v0 = 0)".into(),
            ));
        }
        Ok(DeterministicLq {
            a: m.b[0] + m.b[1],
            c: m.b[2] + m.b[3],
            q: m.q,
            v: m.v,
            ell: m.ell,
            terminal_slope: self.terminal_slope,
            x0: m.m0,
            horizon: m.horizon,
            h: m.constrained.then(|| m.h.clone()),
        })
    }
}

/// Parses `text`, applies `overrides` in order and resolves.
pub fn load(text: &str, overrides: &[String]) -> Result<Scenario> {
    let mut file = ScenarioFile::parse(text)?;
    for o in overrides {
        file.set(o)?;
    }
    file.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_benchmark_values() {
        let s = load("[run]\nmode = lq-unconstrained\n", &[]).unwrap();
        assert_eq!(s.model, LqModel::benchmark());
        assert_eq!(s.settings, SolverSettings::default());
        assert_eq!(s.mode, Mode::LqUnconstrained);
    }

    #[test]
    fn full_file_round_trip() {
        let text = "\
# benchmark
[model]
b1 = -0.5 ; inline comment
b2 = 0.2
s1 = 0.2
v0 = 0.04
T = 2
[constraint]
h = 0:1.0, 1:0.5
[run]
mode = lq-constrained
N = 1000
M = 20
seed = 9
max_iter = 30
damping = 0.7
";
        let s = load(text, &[]).unwrap();
        assert_eq!(s.model.horizon, 2.0);
        assert!(s.model.constrained);
        assert_eq!(s.model.h, Slope::Table(vec![(0.0, 1.0), (1.0, 0.5)]));
        assert_eq!((s.settings.particles, s.settings.steps, s.settings.seed), (1000, 20, 9));
        assert_eq!(s.settings.damping, 0.7);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = load("[run]\nmode = mfg\n\n[model]\nb9 = 1\n", &[]).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 5);
                assert!(msg.contains("model.b9"), "{msg}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let cases = [
            ("[run]\nmode = warp\n", 2),
            ("[run]\nmode = mfg\nN = many\n", 3),
            ("[run]\nmode = mfg\nN = 5\nN = 6\n", 4),
            ("[runs]\nmode = mfg\n", 1),
            ("mode = mfg\n", 1),
            ("[run]\nmode = mfg\nseed\n", 3),
            ("[run]\nmode = mfg\ndamping = 1.5\n", 3),
            ("[run\nmode = mfg\n", 1),
            ("[run]\nmode = mfg\n[constraint]\nh = 1:0.5, 0:0.2\n", 4),
            ("[run]\nmode = mfg\n[model]\nv = -1\n", 0),
        ];
        for (text, want) in cases {
            match load(text, &[]) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                Err(Error::Config(_)) if want == 0 => {}
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(load("[model]\nq = 1\n", &[]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_in_order_and_are_checked() {
        let base = "[run]\nmode = lq-unconstrained\nseed = 1\n";
        let s = load(base, &["run.seed=7".into(), "model.q = 2".into()]).unwrap();
        assert_eq!((s.settings.seed, s.model.q), (7, 2.0));
        assert!(matches!(load(base, &["run.sede=7".into()]), Err(Error::Override { .. })));
        assert!(matches!(load(base, &["seed=7".into()]), Err(Error::Override { .. })));
        assert!(matches!(load(base, &["run.seed=x".into()]), Err(Error::Override { .. })));
        // Same scenario -> same hash; different seed -> different hash.
        let a = load(base, &["run.seed=7".into()]).unwrap();
        let b = load("[run]\nseed = 7\nmode = lq-unconstrained\n", &[]).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, load(base, &[]).unwrap().hash);
    }

    #[test]
    fn bridge_defaults_are_deterministic() {
        let s = load("[run]\nmode = bridge\n[model]\nb2 = 0.2\n", &[]).unwrap();
        let d = s.deterministic().unwrap();
        assert_eq!((d.c, d.ell, d.x0), (1.0, 1.0, 1.0));
        assert!((d.a + 0.3).abs() < 1e-15);
        let noisy = load("[run]\nmode = bridge\n[model]\ns1 = 0.2\n", &[]).unwrap();
        assert!(noisy.deterministic().is_err());
        assert_eq!(s.dt_list, vec![0.1, 0.05, 0.025, 0.0125]);
        assert!(load("[run]\nmode = mfg\n[model]\nr = 1\n", &[]).is_err());
    }
}
