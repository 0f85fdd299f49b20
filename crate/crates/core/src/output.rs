//! CSV and JSON artifacts. CSVs are UTF-8 with LF line endings, a header row
//! and floats in shortest round-trip form, so identical runs give identical
//! bytes.

use std::io::Write;

use serde::Serialize;

use crate::bridge::ConvergenceTable;
use crate::bsde::AdjointSolution;
use crate::error::{check_dim, Error, Result};
use crate::mvsde::{empirical_moments, ParticleEnsemble};

pub const MOMENTS_HEADER: [&str; 5] = ["step", "t", "mean_x", "var_x", "mean_a"];
pub const ADJOINT_HEADER: [&str; 5] = ["step", "t", "particle", "y", "z"];
pub const COMPARISON_HEADER: [&str; 3] = ["dt", "sup_error", "order_estimate"];

/// `step,t,particle,x,a` for scalar state and control, else `x1..xn`, `a1..al`.
pub fn paths_header(state: usize, control: usize) -> Vec<String> {
    let names = |p: &str, n: usize| -> Vec<String> {
        if n == 1 {
            vec![p.to_string()]
        } else {
            (1..=n).map(|i| format!("{p}{i}")).collect()
        }
    };
    ["step", "t", "particle"]
        .iter()
        .map(|s| s.to_string())
        .chain(names("x", state))
        .chain(names("a", control))
        .collect()
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Every step of the first `max_particles` particles.
pub fn write_paths<W: Write>(ens: &ParticleEnsemble, max_particles: usize, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(paths_header(ens.dims.state, ens.dims.control)).map_err(csv_err)?;
    let np = ens.particles.min(max_particles);
    for k in 0..=ens.grid.steps() {
        let t = num(ens.grid.t(k));
        for i in 0..np {
            let mut rec = vec![k.to_string(), t.clone(), i.to_string()];
            rec.extend(ens.state(k, i).iter().map(|v| num(*v)));
            rec.extend(ens.control(k, i).iter().map(|v| num(*v)));
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-step mean and variance of the first state coordinate and mean of the
/// first control coordinate (population variance).
pub fn write_moments<W: Write>(ens: &ParticleEnsemble, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(MOMENTS_HEADER).map_err(csv_err)?;
    for k in 0..=ens.grid.steps() {
        let m = empirical_moments(ens, k)?;
        out.write_record([
            k.to_string(),
            num(ens.grid.t(k)),
            num(m.mean_x[0]),
            num(m.cov_x[0]),
            num(m.mean_a[0]),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// First coordinates of `Y` and `Z` for the first `max_particles` particles;
/// `z` is empty at the terminal step.
pub fn write_adjoint<W: Write>(ens: &ParticleEnsemble, adj: &AdjointSolution, max_particles: usize, w: W) -> Result<()> {
    check_dim("adjoint steps", ens.grid.steps(), adj.steps)?;
    check_dim("adjoint particles", ens.particles, adj.particles)?;
    let mut out = writer(w);
    out.write_record(ADJOINT_HEADER).map_err(csv_err)?;
    let np = adj.particles.min(max_particles);
    for k in 0..=adj.steps {
        let t = num(ens.grid.t(k));
        for i in 0..np {
            let z = if k < adj.steps { num(adj.z_at(k, i)[0]) } else { String::new() };
            out.write_record([k.to_string(), t.clone(), i.to_string(), num(adj.y_at(k, i)[0]), z])
                .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row per `dt`; `order_estimate` is empty where it is not defined.
pub fn write_comparison<W: Write>(table: &ConvergenceTable, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(COMPARISON_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        out.write_record([num(r.dt), num(r.sup_error), r.order_estimate.map(num).unwrap_or_default()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::InvalidInput(format!("json: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}
