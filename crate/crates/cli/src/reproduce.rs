//! Recomputes the bundled example and compares it cell by cell with the
//! published values.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use mjls::example::{reference, samuelson, samuelson_three_vertex};
use mjls::finite_horizon::{
    branch_profile, profile_peak, solve_finite_horizon, FiniteHorizonOptions,
    FiniteHorizonSolution,
};
use mjls::infinite_horizon::{
    infinite_cost, stabilizing_solution, InfiniteHorizonOptions, StabilizingSolution,
};
use mjls::stability::{is_mss, JsrOptions};
use mjls::{ModeInfo, Problem};

use crate::commands::{emit, CliError, CmdResult, EXIT_OK, EXIT_SOLVER};
use crate::OutputArgs;

/// Absolute tolerance on gain entries (three printed decimals).
pub const GAIN_TOL: f64 = 5e-4;
pub const COST_REL_TOL: f64 = 1e-3;
pub const RADIUS_TOL: f64 = 1e-3;
/// Slack allowed above a printed JSR upper bound.
pub const JSR_SLACK: f64 = 1e-3;
/// Four decimal places.
pub const DECIMAL4_TOL: f64 = 5e-5;
pub const PROFILE_HORIZONS: [usize; 4] = [4, 10, 100, 1000];

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum Check {
    Absolute,
    Relative,
    AtMost,
    Exact,
}

#[derive(Debug, Clone, Serialize)]
struct Cell {
    case: &'static str,
    quantity: String,
    computed: f64,
    reference: f64,
    tol: f64,
    check: Check,
    pass: bool,
}

#[derive(Default)]
struct Table {
    cells: Vec<Cell>,
}

impl Table {
    fn push(&mut self, case: &'static str, quantity: String, computed: f64, reference: f64, tol: f64, check: Check) {
        let pass = match check {
            Check::Absolute => (computed - reference).abs() <= tol,
            Check::Relative => (computed - reference).abs() <= tol * reference.abs(),
            Check::AtMost => computed <= reference + tol,
            Check::Exact => computed == reference,
        };
        self.cells.push(Cell { case, quantity, computed, reference, tol, check, pass });
    }

    fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| c.pass)
    }

    fn text(&self) -> String {
        let width = self.cells.iter().map(|c| c.quantity.len()).max().unwrap_or(0);
        let mut s = String::new();
        let _ = writeln!(s, "{:<9} {:<width$} {:>22} {:>12} result", "case", "quantity", "computed", "published");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<9} {:<width$} {:>22} {:>12} {}",
                c.case,
                c.quantity,
                c.computed,
                c.reference,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
        let failed = self.cells.iter().filter(|c| !c.pass).count();
        let _ = writeln!(s, "{} of {} cells pass", self.cells.len() - failed, self.cells.len());
        s
    }
}

fn solver(context: &str) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::solver(context, e)
}

fn x0() -> DVector<f64> {
    DVector::from_vec(vec![1.0, 1.0])
}

/// Largest entrywise deviation between `−K` and a printed gain table.
fn gain_error(k: &[DMatrix<f64>], table: &reference::GainTable) -> f64 {
    table
        .iter()
        .zip(k)
        .flat_map(|(row, ki)| row.iter().enumerate().map(move |(j, &p)| (-ki[(0, j)] - p).abs()))
        .fold(0.0, f64::max)
}

fn gain_cells(t: &mut Table, case: &'static str, label: &str, k: Option<&[DMatrix<f64>]>, table: &reference::GainTable, tol: f64) {
    for (i, row) in table.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let computed = k.map_or(f64::NAN, |k| -k[i][(0, j)]);
            t.push(case, format!("{label} K_{}[{}]", i + 1, j + 1), computed, p, tol, Check::Absolute);
        }
    }
}

fn care_cells(
    t: &mut Table,
    case: &'static str,
    solution: &StabilizingSolution,
    sources: &[usize],
    gains: &[reference::GainTable],
    jsr: &[f64],
    tol: f64,
) -> Vec<Option<usize>> {
    t.push(case, "care branch count".into(), solution.branches.len() as f64, sources.len() as f64, 0.0, Check::Exact);
    let found: Vec<Option<usize>> = sources
        .iter()
        .map(|&v| solution.branches.iter().position(|b| b.vertex + 1 == v))
        .collect();
    for (b, &v) in sources.iter().enumerate() {
        let branch = found[b].map(|i| &solution.branches[i]);
        t.push(case, format!("branch from P{v} retained"), branch.map_or(0.0, |_| 1.0), 1.0, 0.0, Check::Exact);
        gain_cells(t, case, &format!("P{v}"), branch.map(|b| b.k.as_slice()), &gains[b], tol);
        let upper = branch.map_or(f64::NAN, |b| b.certificate.upper);
        t.push(case, format!("P{v} jsr upper"), upper, jsr[b], JSR_SLACK, Check::AtMost);
    }
    found
}

fn cost_cells(
    t: &mut Table,
    case: &'static str,
    label: &str,
    solution: &StabilizingSolution,
    found: &[Option<usize>],
    costs: &[[f64; 2]; 3],
) -> Result<(), CliError> {
    for (theta, row) in costs.iter().enumerate() {
        let eval = infinite_cost(solution, &x0(), &ModeInfo::Known(theta))
            .map_err(|e| solver("infinite-horizon cost")(e.to_string()))?;
        for (b, &p) in row.iter().enumerate() {
            let computed = found[b].map_or(f64::NAN, |i| eval.branch_values[i]);
            t.push(case, format!("{label}(theta={}) branch {}", theta + 1, b + 1), computed, p, COST_REL_TOL, Check::Relative);
        }
    }
    Ok(())
}

fn finite_maxima(
    t: &mut Table,
    case: &'static str,
    label: &str,
    solution: &FiniteHorizonSolution,
    costs: &[[f64; 2]; 3],
) -> Result<(), CliError> {
    for (theta, row) in costs.iter().enumerate() {
        let eval = solution
            .cost(&x0(), &ModeInfo::Known(theta))
            .map_err(|e| solver("finite-horizon cost")(e.to_string()))?;
        t.push(case, format!("{label}(theta={}) max", theta + 1), eval.value, row[0].max(row[1]), COST_REL_TOL, Check::Relative);
    }
    Ok(())
}

fn profile_cells(t: &mut Table, case: &'static str, problem: &Problem, peak: (usize, usize)) -> Result<(), CliError> {
    let z = problem.terminal_or_zero();
    for horizon in PROFILE_HORIZONS {
        let solution = solve_finite_horizon(&problem.model, &problem.polytope, &z, horizon, &FiniteHorizonOptions::default())
            .map_err(|e| solver("finite-horizon Riccati recursion")(e.to_string()))?;
        let (count, step) = profile_peak(&branch_profile(&solution), |p| p.candidates);
        t.push(case, format!("T={horizon} peak branches"), count as f64, peak.0 as f64, 0.0, Check::Exact);
        t.push(case, format!("T={horizon} peak offset"), (horizon - step) as f64, peak.1 as f64, 0.0, Check::Exact);
    }
    Ok(())
}

fn four_vertex(t: &mut Table, gain_tol: f64, jsr: JsrOptions) -> Result<(), CliError> {
    const CASE: &str = "4-vertex";
    let problem = samuelson();
    let mss = is_mss(&problem.model, &problem.polytope, &jsr)
        .map_err(|e| solver("open-loop joint spectral radius")(e.to_string()))?;
    for (v, (&r, &p)) in mss.vertex_radii.iter().zip(&reference::OPEN_LOOP_RADII).enumerate() {
        t.push(CASE, format!("rho(Lambda_{})", v + 1), r, p, RADIUS_TOL, Check::Absolute);
    }

    let opts = InfiniteHorizonOptions { jsr, ..Default::default() };
    let care = stabilizing_solution(&problem.model, &problem.polytope, &opts)
        .map_err(|e| solver("coupled algebraic Riccati equations")(e.to_string()))?;
    let found = care_cells(t, CASE, &care, &reference::FOUR_VERTEX_SOURCES, &reference::FOUR_VERTEX_GAINS, &reference::FOUR_VERTEX_JSR, gain_tol);
    cost_cells(t, CASE, "J_inf", &care, &found, &reference::FOUR_VERTEX_COSTS)?;
    for (theta, &sel) in reference::FOUR_VERTEX_SELECTION.iter().enumerate() {
        let computed = infinite_cost(&care, &x0(), &ModeInfo::Known(theta))
            .map(|e| (care.branches[e.argmax].vertex + 1) as f64)
            .unwrap_or(f64::NAN);
        let reference = reference::FOUR_VERTEX_SOURCES[sel] as f64;
        t.push(CASE, format!("J_inf(theta={}) selected vertex", theta + 1), computed, reference, 0.0, Check::Exact);
    }

    let z = problem.terminal_or_zero();
    let t8 = solve_finite_horizon(&problem.model, &problem.polytope, &z, 8, &FiniteHorizonOptions::default())
        .map_err(|e| solver("finite-horizon Riccati recursion")(e.to_string()))?;
    finite_maxima(t, CASE, "J_8", &t8, &reference::FOUR_VERTEX_T8_COSTS)?;
    for (b, table) in reference::FOUR_VERTEX_T8_GAINS.iter().enumerate() {
        let closest = t8
            .set_at(0)
            .branches
            .iter()
            .min_by(|a, c| gain_error(&a.k, table).total_cmp(&gain_error(&c.k, table)))
            .map(|br| br.k.as_slice());
        gain_cells(t, CASE, &format!("T=8 table {}", b + 1), closest, table, gain_tol);
    }
    profile_cells(t, CASE, &problem, reference::FOUR_VERTEX_PEAK)
}

fn three_vertex(t: &mut Table, gain_tol: f64, jsr: JsrOptions) -> Result<(), CliError> {
    const CASE: &str = "3-vertex";
    let problem = samuelson_three_vertex();
    let opts = InfiniteHorizonOptions { jsr, ..Default::default() };
    let care = stabilizing_solution(&problem.model, &problem.polytope, &opts)
        .map_err(|e| solver("coupled algebraic Riccati equations")(e.to_string()))?;
    let found = care_cells(t, CASE, &care, &reference::THREE_VERTEX_SOURCES, &reference::THREE_VERTEX_GAINS, &reference::THREE_VERTEX_JSR, gain_tol);
    cost_cells(t, CASE, "J_inf", &care, &found, &reference::THREE_VERTEX_COSTS)?;

    let z = problem.terminal_or_zero();
    let fopts = FiniteHorizonOptions::default();
    let t5 = solve_finite_horizon(&problem.model, &problem.polytope, &z, 5, &fopts)
        .map_err(|e| solver("finite-horizon Riccati recursion")(e.to_string()))?;
    finite_maxima(t, CASE, "J_5", &t5, &reference::THREE_VERTEX_T5_COSTS)?;
    let t6 = solve_finite_horizon(&problem.model, &problem.polytope, &z, 6, &fopts)
        .map_err(|e| solver("finite-horizon Riccati recursion")(e.to_string()))?;
    for theta in 0..3 {
        let mode = ModeInfo::Known(theta);
        let j6 = t6.cost(&x0(), &mode).map_err(|e| solver("finite-horizon cost")(e.to_string()))?;
        let jinf = infinite_cost(&care, &x0(), &mode).map_err(|e| solver("infinite-horizon cost")(e.to_string()))?;
        t.push(CASE, format!("J_6 vs J_inf(theta={})", theta + 1), j6.value, jinf.value, DECIMAL4_TOL, Check::Absolute);
    }
    profile_cells(t, CASE, &problem, reference::THREE_VERTEX_PEAK)
}

pub fn run(gain_tol: f64, jsr: JsrOptions, output: &OutputArgs) -> CmdResult {
    let mut table = Table::default();
    four_vertex(&mut table, gain_tol, jsr)?;
    three_vertex(&mut table, gain_tol, jsr)?;
    let pass = table.all_pass();
    let value = json!({ "pass": pass, "cells": table.cells });
    emit(output, &value, || table.text())?;
    if pass {
        Ok(EXIT_OK)
    } else {
        let failed: Vec<String> = table
            .cells
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{} {}", c.case, c.quantity))
            .collect();
        Err(CliError {
            code: EXIT_SOLVER,
            message: format!("{} cell(s) outside tolerance: {}", failed.len(), failed.join("; ")),
        })
    }
}
