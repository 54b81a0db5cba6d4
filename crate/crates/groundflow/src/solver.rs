//! Implicit finite-difference solver for 2-D transient saturated flow.
//!
//! Backward-Euler time stepping on a cell-centered 5-point stencil with
//! harmonic-mean face transmissivities. Prescribed-head boundaries are
//! realized as constant-head cells in the edge rows/columns; no-flow sides
//! simply omit the face term. Wells extract at a fixed rate until an optional
//! head floor is reached, at which point the well cell permanently becomes a
//! constant-head cell (drawdown-triggered switching).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GfError, Result};
use crate::grid::Grid2D;

/// A scheduled change of a prescribed-head value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepChange {
    /// First step (1-based) at which the new value applies.
    pub at_step: usize,
    pub new_value: f64,
}

/// Boundary condition on one side of the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SideBc {
    NoFlow,
    Head {
        value: f64,
        change: Option<StepChange>,
    },
}

impl SideBc {
    pub fn head(value: f64) -> Self {
        SideBc::Head {
            value,
            change: None,
        }
    }

    pub fn head_with_change(value: f64, at_step: usize, new_value: f64) -> Self {
        SideBc::Head {
            value,
            change: Some(StepChange { at_step, new_value }),
        }
    }

    /// Prescribed value when solving for step `step` (1-based), if any.
    pub fn value_at(&self, step: usize) -> Option<f64> {
        match self {
            SideBc::NoFlow => None,
            SideBc::Head { value, change } => match change {
                Some(c) if step >= c.at_step => Some(c.new_value),
                _ => Some(*value),
            },
        }
    }
}

/// Boundary schedule for the four sides. Left/right are the x extremes
/// (columns i = 0 and i = nx-1); bottom/top are the y extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcSchedule {
    pub left: SideBc,
    pub right: SideBc,
    pub bottom: SideBc,
    pub top: SideBc,
}

/// Pumping well at a grid cell. `rate > 0` extracts water. With a
/// `head_floor`, the well switches to head-controlled operation the first
/// time the tentative solve pulls its cell head below the floor; the switch
/// is permanent for the rest of the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellSpec {
    /// Cell indices (i, j).
    pub cell: (usize, usize),
    /// Volumetric extraction rate.
    pub rate: f64,
    pub head_floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WellMode {
    RateControlled,
    HeadControlled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellLogEntry {
    pub mode: WellMode,
    pub head: f64,
}

/// Complete description of one transient flow run.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub grid: Grid2D,
    pub specific_storage: f64,
    /// Cell-centered conductivity, shape (ny, nx).
    pub k: Array2<f64>,
    pub bc: BcSchedule,
    /// Initial head field, shape (ny, nx).
    pub ic: Array2<f64>,
    pub wells: Vec<WellSpec>,
    pub dt: f64,
    pub n_steps: usize,
}

impl FlowProblem {
    pub fn validate(&self) -> Result<()> {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        if self.k.dim() != (ny, nx) {
            return Err(GfError::invalid(
                "flow problem",
                format!("k grid is {:?}, expected ({ny}, {nx})", self.k.dim()),
            ));
        }
        if self.ic.dim() != (ny, nx) {
            return Err(GfError::invalid(
                "flow problem",
                format!("initial condition is {:?}, expected ({ny}, {nx})", self.ic.dim()),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(GfError::invalid("flow problem", "dt must be > 0"));
        }
        if !(self.specific_storage > 0.0) {
            return Err(GfError::invalid("flow problem", "specific storage must be > 0"));
        }
        if self.k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(GfError::invalid("flow problem", "conductivity must be finite and > 0"));
        }
        if self.ic.iter().any(|v| !v.is_finite()) {
            return Err(GfError::invalid("flow problem", "initial heads must be finite"));
        }
        for side in [self.bc.left, self.bc.right, self.bc.bottom, self.bc.top] {
            if let SideBc::Head { value, change } = side {
                if !value.is_finite() || change.is_some_and(|c| !c.new_value.is_finite()) {
                    return Err(GfError::invalid("flow problem", "boundary heads must be finite"));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for w in &self.wells {
            let (i, j) = w.cell;
            if i == 0 || j == 0 || i + 1 >= nx || j + 1 >= ny {
                return Err(GfError::invalid(
                    "flow problem",
                    format!("well cell ({i}, {j}) must lie in the grid interior"),
                ));
            }
            if !(w.rate >= 0.0) {
                return Err(GfError::invalid("flow problem", "well rate must be >= 0"));
            }
            if !seen.insert(w.cell) {
                return Err(GfError::invalid("flow problem", "two wells share a cell"));
            }
        }
        Ok(())
    }
}

/// Statistics of one linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Per-step volumetric bookkeeping (all in volume per time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassBalance {
    /// Storage change rate of the active cells.
    pub storage_rate: f64,
    /// Net inflow through constant-head boundary cells.
    pub boundary_in: f64,
    /// Extraction by wells (rate wells at Q, head-controlled wells at their
    /// induced flux).
    pub well_out: f64,
    /// |storage - (boundary_in - well_out)| / max scale.
    pub rel_error: f64,
}

/// Ground-truth head trajectory on the space-time grid.
#[derive(Debug, Clone)]
pub struct HeadSolution {
    pub grid: Grid2D,
    pub dt: f64,
    /// `heads[s]` is the field after step s; `heads[0]` is the initial condition.
    pub heads: Vec<Array2<f64>>,
    pub times: Vec<f64>,
    /// `well_log[s][w]` is the state of well w after step s (step 0 = initial).
    pub well_log: Vec<Vec<WellLogEntry>>,
    pub mass: Vec<MassBalance>,
    pub cg: Vec<CgStats>,
}

impl HeadSolution {
    pub fn n_steps(&self) -> usize {
        self.heads.len() - 1
    }

    pub fn max_mass_balance_error(&self) -> f64 {
        self.mass.iter().map(|m| m.rel_error).fold(0.0, f64::max)
    }
}

const CG_RTOL: f64 = 1e-12;

/// Face coefficients in per-area form: `ax[(j, i)]` couples cells (i, j) and
/// (i+1, j) with harmonic-mean conductivity over dx^2; `ay` analogously.
struct FaceCoeffs {
    ax: Array2<f64>,
    ay: Array2<f64>,
}

fn face_coeffs(grid: &Grid2D, k: &Array2<f64>) -> FaceCoeffs {
    let (ny, nx) = (grid.ny, grid.nx);
    let mut ax = Array2::<f64>::zeros((ny, nx.saturating_sub(1)));
    let mut ay = Array2::<f64>::zeros((ny.saturating_sub(1), nx));
    for j in 0..ny {
        for i in 0..nx - 1 {
            let (a, b) = (k[(j, i)], k[(j, i + 1)]);
            ax[(j, i)] = 2.0 * a * b / (a + b) / (grid.dx * grid.dx);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let (a, b) = (k[(j, i)], k[(j + 1, i)]);
            ay[(j, i)] = 2.0 * a * b / (a + b) / (grid.dy * grid.dy);
        }
    }
    FaceCoeffs { ax, ay }
}

/// Which cells are constant-head for a given step, and at what value.
fn fixed_cells(
    problem: &FlowProblem,
    step: usize,
    well_modes: &[WellMode],
) -> Array2<Option<f64>> {
    let (ny, nx) = (problem.grid.ny, problem.grid.nx);
    let mut fixed = Array2::from_elem((ny, nx), None);
    if let Some(v) = problem.bc.top.value_at(step) {
        for i in 0..nx {
            fixed[(ny - 1, i)] = Some(v);
        }
    }
    if let Some(v) = problem.bc.bottom.value_at(step) {
        for i in 0..nx {
            fixed[(0, i)] = Some(v);
        }
    }
    if let Some(v) = problem.bc.right.value_at(step) {
        for j in 0..ny {
            fixed[(j, nx - 1)] = Some(v);
        }
    }
    if let Some(v) = problem.bc.left.value_at(step) {
        for j in 0..ny {
            fixed[(j, 0)] = Some(v);
        }
    }
    for (w, mode) in problem.wells.iter().zip(well_modes) {
        if *mode == WellMode::HeadControlled {
            let (i, j) = w.cell;
            let floor = w.head_floor.expect("head-controlled well has a floor");
            fixed[(j, i)] = Some(floor);
        }
    }
    fixed
}

/// One backward-Euler step with the given well operating modes.
///
/// Solves, for every active cell,
/// `Ss (h' - h)/dt = sum_faces a_f (h'_nb - h') - q_well / (dx dy)`
/// with constant-head cells held at their prescribed values, to a relative
/// residual below 1e-12 (preconditioned conjugate gradients).
pub fn assemble_and_step(
    problem: &FlowProblem,
    current: &Array2<f64>,
    step: usize,
    well_modes: &[WellMode],
) -> Result<(Array2<f64>, CgStats, MassBalance)> {
    let grid = &problem.grid;
    let (ny, nx) = (grid.ny, grid.nx);
    if current.dim() != (ny, nx) {
        return Err(GfError::invalid(
            "step input",
            format!("heads are {:?}, expected ({ny}, {nx})", current.dim()),
        ));
    }
    let fc = face_coeffs(grid, &problem.k);
    let fixed = fixed_cells(problem, step, well_modes);

    // index the active cells
    let mut index = Array2::from_elem((ny, nx), usize::MAX);
    let mut cells = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if fixed[(j, i)].is_none() {
                index[(j, i)] = cells.len();
                cells.push((j, i));
            }
        }
    }
    let n = cells.len();
    let sdt = problem.specific_storage / problem.dt;

    // per-cell source (extraction positive) in per-area units
    let mut q = Array2::<f64>::zeros((ny, nx));
    for (w, mode) in problem.wells.iter().zip(well_modes) {
        if *mode == WellMode::RateControlled {
            let (i, j) = w.cell;
            q[(j, i)] += w.rate / (grid.dx * grid.dy);
        }
    }

    // diagonal, rhs, and neighbor lists
    let mut diag = vec![sdt; n];
    let mut rhs = vec![0.0; n];
    // (neighbor active index or fixed, coefficient)
    let mut x0 = vec![0.0; n];
    for (c, &(j, i)) in cells.iter().enumerate() {
        rhs[c] = sdt * current[(j, i)] - q[(j, i)];
        x0[c] = current[(j, i)];
        let mut add = |jj: usize, ii: usize, a: f64| {
            diag[c] += a;
            if let Some(v) = fixed[(jj, ii)] {
                rhs[c] += a * v;
            }
        };
        if i > 0 {
            add(j, i - 1, fc.ax[(j, i - 1)]);
        }
        if i + 1 < nx {
            add(j, i + 1, fc.ax[(j, i)]);
        }
        if j > 0 {
            add(j - 1, i, fc.ay[(j - 1, i)]);
        }
        if j + 1 < ny {
            add(j + 1, i, fc.ay[(j, i)]);
        }
    }

    let apply = |x: &[f64], y: &mut [f64]| {
        for (c, &(j, i)) in cells.iter().enumerate() {
            let mut acc = diag[c] * x[c];
            if i > 0 {
                let t = index[(j, i - 1)];
                if t != usize::MAX {
                    acc -= fc.ax[(j, i - 1)] * x[t];
                }
            }
            if i + 1 < nx {
                let t = index[(j, i + 1)];
                if t != usize::MAX {
                    acc -= fc.ax[(j, i)] * x[t];
                }
            }
            if j > 0 {
                let t = index[(j - 1, i)];
                if t != usize::MAX {
                    acc -= fc.ay[(j - 1, i)] * x[t];
                }
            }
            if j + 1 < ny {
                let t = index[(j + 1, i)];
                if t != usize::MAX {
                    acc -= fc.ay[(j, i)] * x[t];
                }
            }
            y[c] = acc;
        }
    };

    let (x, stats) = cg_solve(&apply, &diag, &rhs, x0)?;

    let mut heads = Array2::zeros((ny, nx));
    for j in 0..ny {
        for i in 0..nx {
            heads[(j, i)] = match fixed[(j, i)] {
                Some(v) => v,
                None => x[index[(j, i)]],
            };
        }
    }

    let mass = mass_balance(problem, current, &heads, &fc, &fixed, well_modes);
    Ok((heads, stats, mass))
}

/// Jacobi-preconditioned conjugate gradients; deterministic for fixed inputs.
fn cg_solve(
    apply: &dyn Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x0: Vec<f64>,
) -> Result<(Vec<f64>, CgStats)> {
    let n = b.len();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        return Ok((
            vec![0.0; n],
            CgStats {
                iterations: 0,
                rel_residual: 0.0,
            },
        ));
    }
    let mut x = x0;
    let mut r = vec![0.0; n];
    apply(&x, &mut r);
    for c in 0..n {
        r[c] = b[c] - r[c];
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let max_iter = 20 * n + 100;
    for it in 0..max_iter {
        let res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res <= CG_RTOL * norm_b {
            return Ok((
                x,
                CgStats {
                    iterations: it,
                    rel_residual: res / norm_b,
                },
            ));
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for c in 0..n {
            x[c] += alpha * p[c];
            r[c] -= alpha * ap[c];
        }
        for c in 0..n {
            z[c] = r[c] / diag[c];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..n {
            p[c] = z[c] + beta * p[c];
        }
    }
    let res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(GfError::SolverStalled {
        iters: max_iter,
        residual: res / norm_b,
        tol: CG_RTOL,
    })
}

fn mass_balance(
    problem: &FlowProblem,
    old: &Array2<f64>,
    new: &Array2<f64>,
    fc: &FaceCoeffs,
    fixed: &Array2<Option<f64>>,
    well_modes: &[WellMode],
) -> MassBalance {
    let grid = &problem.grid;
    let (ny, nx) = (grid.ny, grid.nx);
    let area = grid.dx * grid.dy;
    let sdt = problem.specific_storage / problem.dt;

    let well_cells: std::collections::HashMap<(usize, usize), WellMode> = problem
        .wells
        .iter()
        .zip(well_modes)
        .map(|(w, m)| ((w.cell.1, w.cell.0), *m))
        .collect();

    let mut storage = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            if fixed[(j, i)].is_none() {
                storage += sdt * (new[(j, i)] - old[(j, i)]) * area;
            }
        }
    }

    // flux from fixed cells into active cells, split into boundary cells vs
    // head-controlled well cells
    let mut boundary_in = 0.0;
    let mut well_out = 0.0;
    let mut visit = |fj: usize, fi: usize, aj: usize, ai: usize, a: f64| {
        if fixed[(fj, fi)].is_some() && fixed[(aj, ai)].is_none() {
            let flux = a * (new[(fj, fi)] - new[(aj, ai)]) * area;
            if well_cells.get(&(fj, fi)) == Some(&WellMode::HeadControlled) {
                well_out -= flux; // flux leaving through the well cell
            } else {
                boundary_in += flux;
            }
        }
    };
    for j in 0..ny {
        for i in 0..nx - 1 {
            let a = fc.ax[(j, i)];
            visit(j, i, j, i + 1, a);
            visit(j, i + 1, j, i, a);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let a = fc.ay[(j, i)];
            visit(j, i, j + 1, i, a);
            visit(j + 1, i, j, i, a);
        }
    }
    for (w, mode) in problem.wells.iter().zip(well_modes) {
        if *mode == WellMode::RateControlled {
            well_out += w.rate;
        }
    }

    let scale = storage
        .abs()
        .max(boundary_in.abs())
        .max(well_out.abs())
        .max(1e-30);
    let rel_error = (storage - (boundary_in - well_out)).abs() / scale;
    MassBalance {
        storage_rate: storage,
        boundary_in,
        well_out,
        rel_error,
    }
}

/// Outcome of well-control enforcement for one step.
pub struct ControlOutcome {
    pub heads: Array2<f64>,
    pub modes: Vec<WellMode>,
    pub switched: bool,
    pub cg: CgStats,
    pub mass: MassBalance,
}

/// Enforces head floors on a tentative step result: any rate-controlled well
/// whose tentative cell head fell below its floor is switched (permanently)
/// to head-controlled and the step is re-solved. Repeats until no well
/// switches.
pub fn apply_well_control(
    problem: &FlowProblem,
    current: &Array2<f64>,
    step: usize,
    tentative: Array2<f64>,
    tentative_cg: CgStats,
    tentative_mass: MassBalance,
    modes: Vec<WellMode>,
) -> Result<ControlOutcome> {
    let mut heads = tentative;
    let mut modes = modes;
    let mut cg = tentative_cg;
    let mut mass = tentative_mass;
    let mut switched = false;
    loop {
        let mut changed = false;
        for (w, mode) in problem.wells.iter().zip(modes.iter_mut()) {
            if *mode == WellMode::RateControlled {
                if let Some(floor) = w.head_floor {
                    let (i, j) = w.cell;
                    if heads[(j, i)] < floor {
                        *mode = WellMode::HeadControlled;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return Ok(ControlOutcome {
                heads,
                modes,
                switched,
                cg,
                mass,
            });
        }
        switched = true;
        let (h, s, m) = assemble_and_step(problem, current, step, &modes)?;
        heads = h;
        cg = s;
        mass = m;
    }
}

/// Runs the full transient simulation.
pub fn simulate(problem: &FlowProblem) -> Result<HeadSolution> {
    problem.validate()?;
    let mut heads = Vec::with_capacity(problem.n_steps + 1);
    let mut times = Vec::with_capacity(problem.n_steps + 1);
    let mut well_log = Vec::with_capacity(problem.n_steps + 1);
    let mut mass = Vec::with_capacity(problem.n_steps);
    let mut cg = Vec::with_capacity(problem.n_steps);

    let mut modes = vec![WellMode::RateControlled; problem.wells.len()];
    heads.push(problem.ic.clone());
    times.push(0.0);
    well_log.push(log_wells(problem, &modes, &problem.ic));

    for step in 1..=problem.n_steps {
        let current = heads.last().unwrap();
        let (tentative, s, m) = assemble_and_step(problem, current, step, &modes)
            .map_err(|e| e.in_stage("time step"))?;
        let outcome =
            apply_well_control(problem, current, step, tentative, s, m, std::mem::take(&mut modes))
                .map_err(|e| e.in_stage("well control"))?;
        modes = outcome.modes;
        well_log.push(log_wells(problem, &modes, &outcome.heads));
        mass.push(outcome.mass);
        cg.push(outcome.cg);
        heads.push(outcome.heads);
        times.push(step as f64 * problem.dt);
    }

    Ok(HeadSolution {
        grid: problem.grid,
        dt: problem.dt,
        heads,
        times,
        well_log,
        mass,
        cg,
    })
}

fn log_wells(problem: &FlowProblem, modes: &[WellMode], heads: &Array2<f64>) -> Vec<WellLogEntry> {
    problem
        .wells
        .iter()
        .zip(modes)
        .map(|(w, m)| WellLogEntry {
            mode: *m,
            head: heads[(w.cell.1, w.cell.0)],
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Observation extraction
// ---------------------------------------------------------------------------

/// One labeled observation of the head field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRecord {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub h: f64,
}

/// For each listed step, samples `points_per_step` distinct cells uniformly
/// without replacement (seeded) and records their cell-center coordinates
/// and heads.
pub fn extract_observations(
    solution: &HeadSolution,
    steps: &[usize],
    points_per_step: usize,
    seed: u64,
) -> Result<Vec<ObsRecord>> {
    let grid = &solution.grid;
    let n_cells = grid.n_cells();
    if points_per_step > n_cells {
        return Err(GfError::invalid(
            "observation extraction",
            format!("{points_per_step} points per step exceeds {n_cells} cells"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps.len() * points_per_step);
    for &step in steps {
        if step >= solution.heads.len() {
            return Err(GfError::invalid(
                "observation extraction",
                format!("step {step} outside the solution (0..={})", solution.n_steps()),
            ));
        }
        let picks = rand::seq::index::sample(&mut rng, n_cells, points_per_step);
        for cell in picks.iter() {
            let j = cell / grid.nx;
            let i = cell % grid.nx;
            out.push(ObsRecord {
                step,
                t: solution.times[step],
                x: grid.x_center(i),
                y: grid.y_center(j),
                h: solution.heads[step][(j, i)],
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

pub const SOLUTION_FORMAT_HEADER: &str = "groundflow-solution v1";

fn side_to_string(side: &SideBc) -> String {
    match side {
        SideBc::NoFlow => "noflow".to_string(),
        SideBc::Head { value, change } => match change {
            None => format!("head {value}"),
            Some(c) => format!("head {value} -> {} @ {}", c.new_value, c.at_step),
        },
    }
}

/// Metadata document for an exported solution: grid, stepping, BC schedule,
/// wells, and the per-step well log.
pub fn solution_metadata(problem: &FlowProblem, solution: &HeadSolution) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "{SOLUTION_FORMAT_HEADER}");
    let g = &solution.grid;
    let _ = writeln!(s, "nx = {}", g.nx);
    let _ = writeln!(s, "ny = {}", g.ny);
    let _ = writeln!(s, "dx = {}", g.dx);
    let _ = writeln!(s, "dy = {}", g.dy);
    let _ = writeln!(s, "specific_storage = {}", problem.specific_storage);
    let _ = writeln!(s, "dt = {}", solution.dt);
    let _ = writeln!(s, "n_steps = {}", solution.n_steps());
    let _ = writeln!(s, "bc_left = {}", side_to_string(&problem.bc.left));
    let _ = writeln!(s, "bc_right = {}", side_to_string(&problem.bc.right));
    let _ = writeln!(s, "bc_bottom = {}", side_to_string(&problem.bc.bottom));
    let _ = writeln!(s, "bc_top = {}", side_to_string(&problem.bc.top));
    for w in &problem.wells {
        let floor = w
            .head_floor
            .map(|f| f.to_string())
            .unwrap_or_else(|| "none".to_string());
        let _ = writeln!(s, "well = {} {} rate {} floor {}", w.cell.0, w.cell.1, w.rate, floor);
    }
    for (step, entries) in solution.well_log.iter().enumerate() {
        for (w, e) in entries.iter().enumerate() {
            let mode = match e.mode {
                WellMode::RateControlled => "rate",
                WellMode::HeadControlled => "head",
            };
            let _ = writeln!(s, "well_log = {step} {w} {mode} {}", e.head);
        }
    }
    let _ = writeln!(s, "max_mass_balance_error = {}", solution.max_mass_balance_error());
    s
}

/// Long-format CSV of the full head trajectory: `step,t,x,y,h` with one row
/// per cell per stored step.
pub fn solution_csv(solution: &HeadSolution) -> String {
    let g = &solution.grid;
    let mut s = String::with_capacity(solution.heads.len() * g.n_cells() * 24);
    s.push_str("step,t,x,y,h\n");
    for (step, field) in solution.heads.iter().enumerate() {
        let t = solution.times[step];
        for j in 0..g.ny {
            for i in 0..g.nx {
                use std::fmt::Write as _;
                let _ = writeln!(
                    s,
                    "{step},{t},{},{},{}",
                    g.x_center(i),
                    g.y_center(j),
                    field[(j, i)]
                );
            }
        }
    }
    s
}

/// Observation dataset in the same CSV row format.
pub fn observations_csv(obs: &[ObsRecord]) -> String {
    let mut s = String::with_capacity(obs.len() * 24 + 16);
    s.push_str("step,t,x,y,h\n");
    for r in obs {
        use std::fmt::Write as _;
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.t, r.x, r.y, r.h);
    }
    s
}

/// Parses the `step,t,x,y,h` CSV back into records.
pub fn parse_observations_csv(text: &str) -> Result<Vec<ObsRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "step,t,x,y,h" {
                return Err(GfError::Parse {
                    context: "observation csv".into(),
                    why: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(GfError::Parse {
                context: "observation csv".into(),
                why: format!("line {}: expected 5 fields, got {}", lineno + 1, fields.len()),
            });
        }
        let parse = |tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|e| GfError::Parse {
                context: "observation csv".into(),
                why: format!("line {}: '{tok}': {e}", lineno + 1),
            })
        };
        out.push(ObsRecord {
            step: fields[0].parse::<usize>().map_err(|e| GfError::Parse {
                context: "observation csv".into(),
                why: format!("line {}: '{}': {e}", lineno + 1, fields[0]),
            })?,
            t: parse(fields[1])?,
            x: parse(fields[2])?,
            y: parse(fields[3])?,
            h: parse(fields[4])?,
        });
    }
    Ok(out)
}

/// The base transient problem: unit conductivity placeholder, prescribed
/// heads 1/0 on the left/right columns, no-flow laterals, sharp initial
/// front at the left column, 50 steps of 0.2.
pub fn base_problem(k: Array2<f64>) -> Result<FlowProblem> {
    let (ny, nx) = k.dim();
    let grid = Grid2D::from_extent(nx, ny, 1020.0, 1020.0)?;
    let mut ic = Array2::zeros((ny, nx));
    for j in 0..ny {
        ic[(j, 0)] = 1.0;
    }
    Ok(FlowProblem {
        grid,
        specific_storage: 1e-4,
        k,
        bc: BcSchedule {
            left: SideBc::head(1.0),
            right: SideBc::head(0.0),
            bottom: SideBc::NoFlow,
            top: SideBc::NoFlow,
        },
        ic,
        wells: vec![],
        dt: 0.2,
        n_steps: 50,
    })
}
