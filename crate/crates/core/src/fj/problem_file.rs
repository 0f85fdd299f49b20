//! Plain-text polynomial problem files.
//!
//! ```text
//! # comments start with '#'
//! [problem]
//! dim = 2
//! split = 0                 # optional X1 width, 0 = all coordinates
//!
//! [objective]
//! term = 1.0 2 0            # coefficient then one exponent per coordinate
//! term = 1.0 0 2
//!
//! [ineq.0]                  # g(x) <=_K 0
//! cone = orthant            # orthant | zero | free | polyhedral <rows separated by ';'>
//! term = 1.0 1 0            # output row 0
//! term.1 = -1.0 0 1         # output row 1
//!
//! [eq.0]                    # h(x) = 0
//! rows = 1                  # optional, defaults to highest row index + 1
//! term = 1.0 1 0
//! term = -1.0 0 0
//!
//! [box]
//! lower = -inf 0
//! upper = inf 1
//!
//! [expect]                  # optional, consumed by the toy suite
//! point = 0.5 0.5
//! r0 = 0.5
//! licq = true
//! mfcq = true
//! search = -1 1             # cube for the brute-force cross-check
//! resolution = 201
//! ```
//!
//! Block indices must be consecutive from 0 within each kind.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::{MapFn, NlpProblem, ObjectiveFn};
use crate::cones::{BoxSet, ConeSpec};
use crate::error::{Error, Result};

/// Sum of monomials `coef * prod x_d^e_d`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polynomial {
    pub terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, e)| c * x.iter().zip(e).map(|(xi, &p)| xi.powi(p as i32)).product::<f64>())
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (c, e) in &self.terms {
            for d in 0..x.len() {
                if e[d] == 0 {
                    continue;
                }
                let mut t = c * e[d] as f64;
                for (k, (&xk, &pk)) in x.iter().zip(e).enumerate() {
                    let p = if k == d { pk - 1 } else { pk };
                    t *= xk.powi(p as i32);
                }
                g[d] += t;
            }
        }
        g
    }
}

fn vector_map(rows: Vec<Polynomial>, dim: usize) -> MapFn {
    Arc::new(move |x: &[f64]| {
        let v = rows.iter().map(|p| p.eval(x)).collect();
        let mut j = DMatrix::zeros(rows.len(), dim);
        for (r, p) in rows.iter().enumerate() {
            for (c, g) in p.gradient(x).into_iter().enumerate() {
                j[(r, c)] = g;
            }
        }
        (v, j)
    })
}

/// Expected verdicts attached to a problem file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expectation {
    pub point: Option<Vec<f64>>,
    pub r0: Option<f64>,
    pub licq: Option<bool>,
    pub mfcq: Option<bool>,
    pub search: Option<(f64, f64)>,
    pub resolution: Option<usize>,
}

/// A parsed problem file.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub problem: NlpProblem,
    pub objective: Polynomial,
    pub expect: Expectation,
}

#[derive(Default)]
struct Block {
    cone: Option<(ConeSpec, usize)>,
    rows: Option<(usize, usize)>,
    polys: BTreeMap<usize, Polynomial>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    match tok {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: '{tok}'"))),
    }
}

fn parse_vec(value: &str, line: usize) -> Result<Vec<f64>> {
    value.split_whitespace().map(|t| parse_f64(t, line)).collect()
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(parse_err(line, format!("expected true/false, got '{value}'"))),
    }
}

fn parse_term(value: &str, dim: usize, line: usize) -> Result<(f64, Vec<u32>)> {
    let toks: Vec<&str> = value.split_whitespace().collect();
    if toks.len() != dim + 1 {
        return Err(parse_err(line, format!("term needs a coefficient and {dim} exponents")));
    }
    let c = parse_f64(toks[0], line)?;
    if !c.is_finite() {
        return Err(parse_err(line, "term coefficient must be finite"));
    }
    let e = toks[1..]
        .iter()
        .map(|t| t.parse::<u32>().map_err(|_| parse_err(line, format!("bad exponent '{t}'"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((c, e))
}

fn parse_cone(value: &str, line: usize) -> Result<Option<ConeSpec>> {
    let mut it = value.splitn(2, char::is_whitespace);
    let kind = it.next().unwrap_or("");
    let rest = it.next().unwrap_or("").trim();
    match kind {
        "orthant" | "zero" | "free" if rest.is_empty() => Ok(None),
        "polyhedral" => {
            let rows: Vec<Vec<f64>> = rest
                .split(';')
                .map(|r| parse_vec(r, line))
                .collect::<Result<_>>()?;
            let ncols = rows.first().map_or(0, |r| r.len());
            if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
                return Err(parse_err(line, "polyhedral generator rows must be non-empty and equal length"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let g = DMatrix::from_row_slice(rows.len(), ncols, &flat);
            ConeSpec::polyhedral(g).map(Some).map_err(|e| parse_err(line, e.to_string()))
        }
        _ => Err(parse_err(line, format!("unknown cone '{value}'"))),
    }
}

/// Parses the grammar in the module documentation.
pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    let mut section = String::new();
    let mut dim: Option<usize> = None;
    let mut split = 0usize;
    let mut objective = Polynomial::default();
    let mut saw_objective = false;
    let mut ineq: BTreeMap<usize, Block> = BTreeMap::new();
    let mut eq: BTreeMap<usize, Block> = BTreeMap::new();
    let mut lower: Option<Vec<f64>> = None;
    let mut upper: Option<Vec<f64>> = None;
    let mut expect = Expectation::default();
    // Orthant/zero/free kinds need the row count, resolved after parsing.
    let mut deferred_kind: BTreeMap<usize, (String, usize)> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if !content.ends_with(']') {
                return Err(parse_err(line, "unterminated section header"));
            }
            section = content[1..content.len() - 1].trim().to_string();
            let ok = matches!(section.as_str(), "problem" | "objective" | "box" | "expect")
                || block_index(&section, "ineq.").is_some()
                || block_index(&section, "eq.").is_some();
            if !ok {
                return Err(parse_err(line, format!("unknown section [{section}]")));
            }
            if section == "objective" {
                saw_objective = true;
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| parse_err(line, "expected 'key = value'"))?;
        let need_dim = || dim.ok_or_else(|| parse_err(line, "[problem] dim must come first"));

        match section.as_str() {
            "problem" => match key {
                "dim" => {
                    let d: usize = value.parse().map_err(|_| parse_err(line, "dim must be a positive integer"))?;
                    if d == 0 {
                        return Err(parse_err(line, "dim must be positive"));
                    }
                    dim = Some(d);
                }
                "split" => split = value.parse().map_err(|_| parse_err(line, "split must be an integer"))?,
                _ => return Err(parse_err(line, format!("unknown key '{key}' in [problem]"))),
            },
            "objective" => {
                if key != "term" {
                    return Err(parse_err(line, format!("unknown key '{key}' in [objective]")));
                }
                objective.terms.push(parse_term(value, need_dim()?, line)?);
            }
            "box" => {
                let v = parse_vec(value, line)?;
                if v.len() != need_dim()? {
                    return Err(parse_err(line, "box bound length must equal dim"));
                }
                match key {
                    "lower" => lower = Some(v),
                    "upper" => upper = Some(v),
                    _ => return Err(parse_err(line, format!("unknown key '{key}' in [box]"))),
                }
            }
            "expect" => match key {
                "point" => expect.point = Some(parse_vec(value, line)?),
                "r0" => expect.r0 = Some(parse_f64(value, line)?),
                "licq" => expect.licq = Some(parse_bool(value, line)?),
                "mfcq" => expect.mfcq = Some(parse_bool(value, line)?),
                "search" => {
                    let v = parse_vec(value, line)?;
                    if v.len() != 2 || v[0] >= v[1] {
                        return Err(parse_err(line, "search needs 'lo hi' with lo < hi"));
                    }
                    expect.search = Some((v[0], v[1]));
                }
                "resolution" => {
                    expect.resolution =
                        Some(value.parse().map_err(|_| parse_err(line, "resolution must be an integer"))?)
                }
                _ => return Err(parse_err(line, format!("unknown key '{key}' in [expect]"))),
            },
            s => {
                let (is_ineq, k) = match block_index(s, "ineq.") {
                    Some(k) => (true, k),
                    None => (false, block_index(s, "eq.").expect("validated section")),
                };
                let block = if is_ineq { ineq.entry(k).or_default() } else { eq.entry(k).or_default() };
                if key == "cone" && is_ineq {
                    match parse_cone(value, line)? {
                        Some(c) => block.cone = Some((c, line)),
                        None => {
                            deferred_kind.insert(k, (value.to_string(), line));
                        }
                    }
                } else if key == "rows" && !is_ineq {
                    let r: usize = value.parse().map_err(|_| parse_err(line, "rows must be an integer"))?;
                    block.rows = Some((r, line));
                } else if let Some(row) = term_row(key) {
                    let row = row.map_err(|m| parse_err(line, m))?;
                    let t = parse_term(value, need_dim()?, line)?;
                    block.polys.entry(row).or_default().terms.push(t);
                } else {
                    return Err(parse_err(line, format!("unknown key '{key}' in [{s}]")));
                }
            }
        }
    }

    let last = text.lines().count().max(1);
    let dim = dim.ok_or_else(|| parse_err(last, "missing [problem] dim"))?;
    if !saw_objective {
        return Err(parse_err(last, "missing [objective] section"));
    }
    check_consecutive(&ineq, "ineq", last)?;
    check_consecutive(&eq, "eq", last)?;

    let obj_poly = objective.clone();
    let obj: ObjectiveFn = Arc::new(move |x: &[f64]| (obj_poly.eval(x), obj_poly.gradient(x)));
    let mut problem = NlpProblem::new(dim, obj).with_split(split);

    for (k, block) in ineq {
        let rows = block.polys.keys().next_back().map_or(0, |r| r + 1);
        let cone = match (block.cone, deferred_kind.remove(&k)) {
            (Some((c, line)), _) => {
                if c.dim() < rows {
                    return Err(parse_err(line, format!("cone dimension {} below row count {rows}", c.dim())));
                }
                c
            }
            (None, Some((kind, line))) => {
                let n = rows.max(1);
                match kind.as_str() {
                    "orthant" => ConeSpec::orthant(n),
                    "zero" => ConeSpec::zero(n),
                    _ => ConeSpec::free(n),
                }
                .map_err(|e| parse_err(line, e.to_string()))?
            }
            (None, None) => return Err(parse_err(last, format!("[ineq.{k}] has no cone"))),
        };
        problem = problem.with_inequality(vector_map(fill_rows(block.polys, cone.dim()), dim), cone);
    }
    for (_, block) in eq {
        let rows_seen = block.polys.keys().next_back().map_or(0, |r| r + 1);
        let rows = match block.rows {
            Some((r, line)) if r < rows_seen || r == 0 => {
                return Err(parse_err(line, "rows below highest term row"));
            }
            Some((r, _)) => r,
            None => rows_seen.max(1),
        };
        problem = problem.with_equality(vector_map(fill_rows(block.polys, rows), dim));
    }
    let lo = lower.unwrap_or_else(|| vec![f64::NEG_INFINITY; dim]);
    let hi = upper.unwrap_or_else(|| vec![f64::INFINITY; dim]);
    problem = problem.with_box(BoxSet::new(lo, hi).map_err(|e| parse_err(last, e.to_string()))?);
    Ok(ProblemFile { problem, objective, expect })
}

fn block_index(section: &str, prefix: &str) -> Option<usize> {
    section.strip_prefix(prefix)?.parse().ok()
}

fn term_row(key: &str) -> Option<std::result::Result<usize, String>> {
    if key == "term" {
        return Some(Ok(0));
    }
    let rest = key.strip_prefix("term.")?;
    Some(rest.parse().map_err(|_| format!("bad term row in '{key}'")))
}

fn fill_rows(mut polys: BTreeMap<usize, Polynomial>, rows: usize) -> Vec<Polynomial> {
    (0..rows).map(|r| polys.remove(&r).unwrap_or_default()).collect()
}

fn check_consecutive(blocks: &BTreeMap<usize, Block>, kind: &str, line: usize) -> Result<()> {
    for (expected, &k) in blocks.keys().enumerate() {
        if k != expected {
            return Err(parse_err(line, format!("{kind} blocks must be numbered 0.. without gaps (missing {expected})")));
        }
    }
    Ok(())
}
