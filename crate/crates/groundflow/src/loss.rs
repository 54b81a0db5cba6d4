//! Composite training objective: observation mismatch, PDE residual,
//! boundary/initial conditions, and one-sided penalty terms, each a mean
//! squared error with its own weight.
//!
//! The PDE residual is assembled in physical units from the network jet and
//! the analytic conductivity gradients:
//! `f = Ss h_t - K (h_xx + h_yy) - K_x h_x - K_y h_y (+ sink)`.
//! With constant K the gradient terms vanish and the homogeneous form is
//! recovered exactly.
//!
//! [`CompiledLoss`] freezes the point sets and conductivity coefficients once
//! per run and then evaluates the bundle (and its parameter gradient) with
//! chunked batched passes; chunks are reduced in a fixed order so results are
//! bitwise reproducible regardless of thread count.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{GfError, Result};
use crate::kle::ConductivityField;
use crate::net::{
    self, forward_chunk, GradientBundle, MlpParams, NetJet, Scaling, CHUNK, CHUNK_JETS,
};

/// Conductivity seen by the residual: either uniform or a KLE realization
/// with analytic gradients.
#[derive(Clone, Copy)]
pub enum Conductivity<'a> {
    Uniform(f64),
    Field(&'a ConductivityField),
}

impl Conductivity<'_> {
    /// `(K, dK/dx, dK/dy)` at a point.
    pub fn at(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match self {
            Conductivity::Uniform(k) => (*k, 0.0, 0.0),
            Conductivity::Field(f) => f.k_at(x, y),
        }
    }
}

/// Weights of the loss terms. Absent physics (no well, no penalties) is
/// expressed by a zero weight; zero-weight terms are not evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub data: f64,
    pub pde: f64,
    pub bc: f64,
    pub ic: f64,
    pub new_bc: f64,
    pub ec: f64,
    pub ek: f64,
    pub pde_well: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 1.0,
            pde: 1.0,
            bc: 1.0,
            ic: 1.0,
            new_bc: 1.0,
            ec: 1.0,
            ek: 1.0,
            pde_well: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data", self.data),
            ("pde", self.pde),
            ("bc", self.bc),
            ("ic", self.ic),
            ("new_bc", self.new_bc),
            ("ec", self.ec),
            ("ek", self.ek),
            ("pde_well", self.pde_well),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GfError::invalid(
                    "loss weights",
                    format!("lambda_{name} must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// Data term only; the baseline model's configuration.
    pub fn data_only() -> Self {
        LossWeights {
            data: 1.0,
            pde: 0.0,
            bc: 0.0,
            ic: 0.0,
            new_bc: 0.0,
            ec: 0.0,
            ek: 0.0,
            pde_well: 0.0,
        }
    }
}

/// Labeled space-time points: `(t, x, y)` with a prescribed head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<[f64; 3]>,
    pub values: Vec<f64>,
}

impl LabeledPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, t: f64, x: f64, y: f64, h: f64) {
        self.points.push([t, x, y]);
        self.values.push(h);
    }
}

/// Unlabeled space-time points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Points {
    pub points: Vec<[f64; 3]>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Every point set the composite loss can consume. Sets backing zero-weight
/// terms may stay empty.
#[derive(Debug, Clone, Default)]
pub struct PointSets {
    pub data: LabeledPoints,
    pub colloc: Points,
    pub bc: LabeledPoints,
    pub ic: LabeledPoints,
    pub new_bc: LabeledPoints,
    pub well: Points,
    /// Penalty points for the head floor (engineering control).
    pub ec: Points,
    /// Penalty points for the head bounds (expert knowledge).
    pub ek: Points,
}

/// Physical constants of the residual and penalty terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsSpec {
    pub specific_storage: f64,
    /// Expert-knowledge head bounds.
    pub ek_lower: f64,
    pub ek_upper: f64,
    /// Engineering-control head floor.
    pub ec_floor: f64,
    /// Well sink strength `Q / (dx dy)`.
    pub well_sink: f64,
}

impl Default for PhysicsSpec {
    fn default() -> Self {
        PhysicsSpec {
            specific_storage: 1e-4,
            ek_lower: 0.0,
            ek_upper: 1.0,
            ec_floor: 0.0,
            well_sink: 0.0,
        }
    }
}

/// Per-term mean-squared values and the weighted total. Zero-weight terms
/// are reported as absent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub data: Option<f64>,
    pub pde: Option<f64>,
    pub bc: Option<f64>,
    pub ic: Option<f64>,
    pub new_bc: Option<f64>,
    pub ec: Option<f64>,
    pub ek: Option<f64>,
    pub pde_well: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    /// `(name, value)` pairs of the present terms.
    pub fn present_terms(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("data", self.data),
            ("pde", self.pde),
            ("bc", self.bc),
            ("ic", self.ic),
            ("new_bc", self.new_bc),
            ("ec", self.ec),
            ("ek", self.ek),
            ("pde_well", self.pde_well),
        ] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Direct (single-point-loop) term evaluations
// ---------------------------------------------------------------------------

fn require_nonempty(n: usize, what: &'static str) -> Result<()> {
    if n == 0 {
        Err(GfError::invalid(what, "empty point set"))
    } else {
        Ok(())
    }
}

/// Mean squared mismatch between predictions and labels.
pub fn mse_data(params: &MlpParams, data: &LabeledPoints) -> Result<f64> {
    require_nonempty(data.len(), "data points")?;
    let mut acc = 0.0;
    for (p, h) in data.points.iter().zip(&data.values) {
        let r = net::predict(params, p[0], p[1], p[2]) - h;
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

/// Combines a physical-unit jet with local conductivity into the residual
/// `Ss h_t - K (h_xx + h_yy) - K_x h_x - K_y h_y`.
pub fn residual_from_jet(jet: &NetJet, k: f64, kx: f64, ky: f64, specific_storage: f64) -> f64 {
    specific_storage * jet.d_t - k * (jet.d_xx + jet.d_yy) - kx * jet.d_x - ky * jet.d_y
}

/// Governing-equation residual at one point.
pub fn pde_residual(
    params: &MlpParams,
    k: &Conductivity,
    specific_storage: f64,
    t: f64,
    x: f64,
    y: f64,
) -> f64 {
    let jet = net::jet_physical(params, t, x, y);
    let (kv, kx, ky) = k.at(x, y);
    residual_from_jet(&jet, kv, kx, ky, specific_storage)
}

/// Mean squared residual over collocation points.
pub fn mse_pde(
    params: &MlpParams,
    k: &Conductivity,
    specific_storage: f64,
    colloc: &Points,
) -> Result<f64> {
    require_nonempty(colloc.len(), "collocation points")?;
    let mut acc = 0.0;
    for p in &colloc.points {
        let f = pde_residual(params, k, specific_storage, p[0], p[1], p[2]);
        acc += f * f;
    }
    Ok(acc / colloc.len() as f64)
}

/// Mean squared mismatch on a prescribed-value set (used for the boundary,
/// initial, and new-boundary terms alike).
pub fn mse_value_match(params: &MlpParams, set: &LabeledPoints, what: &'static str) -> Result<f64> {
    require_nonempty(set.len(), what)?;
    let mut acc = 0.0;
    for (p, h) in set.points.iter().zip(&set.values) {
        let r = net::predict(params, p[0], p[1], p[2]) - h;
        acc += r * r;
    }
    Ok(acc / set.len() as f64)
}

pub fn mse_bc(params: &MlpParams, bc: &LabeledPoints) -> Result<f64> {
    mse_value_match(params, bc, "boundary points")
}

pub fn mse_ic(params: &MlpParams, ic: &LabeledPoints) -> Result<f64> {
    mse_value_match(params, ic, "initial-condition points")
}

pub fn mse_new_bc(params: &MlpParams, new_bc: &LabeledPoints) -> Result<f64> {
    mse_value_match(params, new_bc, "new-boundary points")
}

/// Two-sided bound penalty: `mean(relu(N - upper)^2 + relu(lower - N)^2)`.
pub fn mse_ek_bounds(params: &MlpParams, points: &Points, lower: f64, upper: f64) -> Result<f64> {
    require_nonempty(points.len(), "expert-knowledge points")?;
    let mut acc = 0.0;
    for p in &points.points {
        let v = net::predict(params, p[0], p[1], p[2]);
        let hi = (v - upper).max(0.0);
        let lo = (lower - v).max(0.0);
        acc += hi * hi + lo * lo;
    }
    Ok(acc / points.len() as f64)
}

/// One-sided floor penalty: `mean(relu(floor - N)^2)`.
pub fn mse_ec_floor(params: &MlpParams, points: &Points, floor: f64) -> Result<f64> {
    require_nonempty(points.len(), "engineering-control points")?;
    let mut acc = 0.0;
    for p in &points.points {
        let v = net::predict(params, p[0], p[1], p[2]);
        let r = (floor - v).max(0.0);
        acc += r * r;
    }
    Ok(acc / points.len() as f64)
}

/// Residual at the well: the plain residual plus the sink strength.
pub fn well_residual(
    params: &MlpParams,
    k: &Conductivity,
    specific_storage: f64,
    t: f64,
    x: f64,
    y: f64,
    well_sink: f64,
) -> f64 {
    pde_residual(params, k, specific_storage, t, x, y) + well_sink
}

/// Mean squared well residual over the well point set.
pub fn mse_pde_well(
    params: &MlpParams,
    k: &Conductivity,
    specific_storage: f64,
    well: &Points,
    well_sink: f64,
) -> Result<f64> {
    require_nonempty(well.len(), "well points")?;
    let mut acc = 0.0;
    for p in &well.points {
        let f = well_residual(params, k, specific_storage, p[0], p[1], p[2], well_sink);
        acc += f * f;
    }
    Ok(acc / well.len() as f64)
}

// ---------------------------------------------------------------------------
// Compiled fast path
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TermSlot {
    Data,
    Pde,
    Bc,
    Ic,
    NewBc,
    Ec,
    Ek,
    PdeWell,
}

enum TermPayload {
    /// residual_i = head_scale * value_i + head_offset - target_i
    ValueMatch { targets: Array1<f64> },
    /// residual_i = sum_c coeff_c[i] * raw_channel_c[i] + constant
    /// channels: (d_t, d_x, d_y, d_xx, d_yy) in scaled coordinates
    LinearJet {
        coeff: [Array1<f64>; 5],
        constant: f64,
    },
    /// penalties on the physical value
    Band { lower: f64, upper: f64 },
    Floor { floor: f64 },
}

struct CompiledTerm {
    slot: TermSlot,
    weight: f64,
    needs_jets: bool,
    /// Scaled inputs, 3 x N.
    xs: Array2<f64>,
    payload: TermPayload,
}

/// The composite loss with all per-point coefficients precomputed. Point
/// sets and the conductivity realization are frozen at build time; only the
/// network parameters vary between evaluations.
pub struct CompiledLoss {
    terms: Vec<CompiledTerm>,
}

fn scaled_inputs(scaling: &Scaling, pts: &[[f64; 3]]) -> Array2<f64> {
    let mut xs = Array2::zeros((3, pts.len()));
    for (c, p) in pts.iter().enumerate() {
        let s = scaling.scale_point(p[0], p[1], p[2]);
        xs[(0, c)] = s[0];
        xs[(1, c)] = s[1];
        xs[(2, c)] = s[2];
    }
    xs
}

impl CompiledLoss {
    pub fn build(
        scaling: &Scaling,
        sets: &PointSets,
        k: &Conductivity,
        phys: &PhysicsSpec,
        weights: &LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let mut terms = Vec::new();

        let check = |n: usize, w: f64, what: &'static str| -> Result<bool> {
            if w > 0.0 {
                if n == 0 {
                    return Err(GfError::invalid(
                        what,
                        "term has nonzero weight but no points",
                    ));
                }
                Ok(true)
            } else {
                Ok(false)
            }
        };

        if check(sets.data.len(), weights.data, "data term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::Data,
                weight: weights.data,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.data.points),
                payload: TermPayload::ValueMatch {
                    targets: Array1::from_vec(sets.data.values.clone()),
                },
            });
        }
        if check(sets.colloc.len(), weights.pde, "pde term")? {
            terms.push(Self::jet_term(
                TermSlot::Pde,
                weights.pde,
                scaling,
                &sets.colloc.points,
                k,
                phys.specific_storage,
                0.0,
            ));
        }
        if check(sets.bc.len(), weights.bc, "bc term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::Bc,
                weight: weights.bc,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.bc.points),
                payload: TermPayload::ValueMatch {
                    targets: Array1::from_vec(sets.bc.values.clone()),
                },
            });
        }
        if check(sets.ic.len(), weights.ic, "ic term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::Ic,
                weight: weights.ic,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.ic.points),
                payload: TermPayload::ValueMatch {
                    targets: Array1::from_vec(sets.ic.values.clone()),
                },
            });
        }
        if check(sets.new_bc.len(), weights.new_bc, "new-bc term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::NewBc,
                weight: weights.new_bc,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.new_bc.points),
                payload: TermPayload::ValueMatch {
                    targets: Array1::from_vec(sets.new_bc.values.clone()),
                },
            });
        }
        if check(sets.ec.len(), weights.ec, "ec term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::Ec,
                weight: weights.ec,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.ec.points),
                payload: TermPayload::Floor {
                    floor: phys.ec_floor,
                },
            });
        }
        if check(sets.ek.len(), weights.ek, "ek term")? {
            terms.push(CompiledTerm {
                slot: TermSlot::Ek,
                weight: weights.ek,
                needs_jets: false,
                xs: scaled_inputs(scaling, &sets.ek.points),
                payload: TermPayload::Band {
                    lower: phys.ek_lower,
                    upper: phys.ek_upper,
                },
            });
        }
        if check(sets.well.len(), weights.pde_well, "well term")? {
            terms.push(Self::jet_term(
                TermSlot::PdeWell,
                weights.pde_well,
                scaling,
                &sets.well.points,
                k,
                phys.specific_storage,
                phys.well_sink,
            ));
        }
        Ok(CompiledLoss { terms })
    }

    fn jet_term(
        slot: TermSlot,
        weight: f64,
        scaling: &Scaling,
        pts: &[[f64; 3]],
        k: &Conductivity,
        specific_storage: f64,
        constant: f64,
    ) -> CompiledTerm {
        let n = pts.len();
        let hs = scaling.head_scale;
        let ct = specific_storage * hs / scaling.t_scale;
        let cxx = hs / (scaling.x_scale * scaling.x_scale);
        let cyy = hs / (scaling.y_scale * scaling.y_scale);
        let cx = hs / scaling.x_scale;
        let cy = hs / scaling.y_scale;
        let mut coeff = [
            Array1::zeros(n),
            Array1::zeros(n),
            Array1::zeros(n),
            Array1::zeros(n),
            Array1::zeros(n),
        ];
        for (i, p) in pts.iter().enumerate() {
            let (kv, kx, ky) = k.at(p[1], p[2]);
            coeff[0][i] = ct;
            coeff[1][i] = -kx * cx;
            coeff[2][i] = -ky * cy;
            coeff[3][i] = -kv * cxx;
            coeff[4][i] = -kv * cyy;
        }
        CompiledTerm {
            slot,
            weight,
            needs_jets: true,
            xs: scaled_inputs(scaling, pts),
            payload: TermPayload::LinearJet { coeff, constant },
        }
    }

    /// Per-term means and the weighted total.
    pub fn evaluate(&self, params: &MlpParams) -> LossBundle {
        self.run(params, None, None)
    }

    /// Per-term means, total, and the exact parameter gradient of the total.
    pub fn evaluate_with_grad(&self, params: &MlpParams) -> (LossBundle, GradientBundle) {
        self.evaluate_with_grad_masked(params, None)
    }

    /// Gradient evaluation that skips the parameter products of layers whose
    /// mask entry is false (their gradient entries stay zero).
    pub fn evaluate_with_grad_masked(
        &self,
        params: &MlpParams,
        layer_mask: Option<&[bool]>,
    ) -> (LossBundle, GradientBundle) {
        let mut grad = GradientBundle::zeros_like(params);
        let bundle = self.run(params, Some(&mut grad), layer_mask);
        (bundle, grad)
    }

    fn run(
        &self,
        params: &MlpParams,
        mut grad: Option<&mut GradientBundle>,
        layer_mask: Option<&[bool]>,
    ) -> LossBundle {
        let mut bundle = LossBundle::default();
        let hs = params.scaling.head_scale;
        let off = params.scaling.head_offset;

        for term in &self.terms {
            let n = term.xs.ncols();
            let inv_n = 1.0 / n as f64;
            // chunk ranges, processed in parallel, reduced in order
            let width = if term.needs_jets { CHUNK_JETS } else { CHUNK };
            let ranges: Vec<(usize, usize)> = (0..n)
                .step_by(width)
                .map(|s| (s, (s + width).min(n)))
                .collect();
            let with_grad = grad.is_some();
            let partials: Vec<(f64, Option<GradientBundle>)> = ranges
                .par_iter()
                .map(|&(lo, hi)| {
                    let xs = term.xs.slice(ndarray::s![.., lo..hi]);
                    let (out, trace) = forward_chunk(params, xs, term.needs_jets);
                    let mut sum = 0.0;
                    let mut seeds = if with_grad { Some(out.zero_seeds()) } else { None };
                    // seed scale: d(weight * mean)/d f_i = weight * 2/N * f_i
                    let sscale = term.weight * 2.0 * inv_n;
                    match &term.payload {
                        TermPayload::ValueMatch { targets } => {
                            for c in 0..out.len() {
                                let r = hs * out.value[c] + off - targets[lo + c];
                                sum += r * r;
                                if let Some(sd) = seeds.as_mut() {
                                    sd.value[c] = sscale * r * hs;
                                }
                            }
                        }
                        TermPayload::LinearJet { coeff, constant } => {
                            for c in 0..out.len() {
                                let i = lo + c;
                                let f = coeff[0][i] * out.d[0][c]
                                    + coeff[1][i] * out.d[1][c]
                                    + coeff[2][i] * out.d[2][c]
                                    + coeff[3][i] * out.dd[1][c]
                                    + coeff[4][i] * out.dd[2][c]
                                    + constant;
                                sum += f * f;
                                if let Some(sd) = seeds.as_mut() {
                                    let s = sscale * f;
                                    sd.d[0][c] = s * coeff[0][i];
                                    sd.d[1][c] = s * coeff[1][i];
                                    sd.d[2][c] = s * coeff[2][i];
                                    sd.dd[1][c] = s * coeff[3][i];
                                    sd.dd[2][c] = s * coeff[4][i];
                                }
                            }
                        }
                        TermPayload::Band { lower, upper } => {
                            for c in 0..out.len() {
                                let v = hs * out.value[c] + off;
                                let hi_r = (v - upper).max(0.0);
                                let lo_r = (lower - v).max(0.0);
                                sum += hi_r * hi_r + lo_r * lo_r;
                                if let Some(sd) = seeds.as_mut() {
                                    sd.value[c] = sscale * (hi_r - lo_r) * hs;
                                }
                            }
                        }
                        TermPayload::Floor { floor } => {
                            for c in 0..out.len() {
                                let v = hs * out.value[c] + off;
                                let r = (floor - v).max(0.0);
                                sum += r * r;
                                if let Some(sd) = seeds.as_mut() {
                                    sd.value[c] = -sscale * r * hs;
                                }
                            }
                        }
                    }
                    let g = seeds.map(|sd| {
                        let mut g = GradientBundle::zeros_like(params);
                        net::backward_chunk_masked(params, &trace, &sd, &mut g, layer_mask);
                        g
                    });
                    (sum, g)
                })
                .collect();

            let mut total_sum = 0.0;
            for (s, g) in partials {
                total_sum += s;
                if let (Some(acc), Some(g)) = (grad.as_deref_mut(), g) {
                    acc.add_assign(&g);
                }
            }
            let mean = total_sum * inv_n;
            let slot_ref = match term.slot {
                TermSlot::Data => &mut bundle.data,
                TermSlot::Pde => &mut bundle.pde,
                TermSlot::Bc => &mut bundle.bc,
                TermSlot::Ic => &mut bundle.ic,
                TermSlot::NewBc => &mut bundle.new_bc,
                TermSlot::Ec => &mut bundle.ec,
                TermSlot::Ek => &mut bundle.ek,
                TermSlot::PdeWell => &mut bundle.pde_well,
            };
            *slot_ref = Some(mean);
            bundle.total += term.weight * mean;
        }
        bundle
    }
}

/// One-call evaluation of the full bundle (terms with zero weight skipped).
pub fn total_loss(
    params: &MlpParams,
    sets: &PointSets,
    k: &Conductivity,
    phys: &PhysicsSpec,
    weights: &LossWeights,
) -> Result<LossBundle> {
    Ok(CompiledLoss::build(&params.scaling, sets, k, phys, weights)?.evaluate(params))
}

/// One-call evaluation of the bundle and its exact parameter gradient.
pub fn total_loss_and_grad(
    params: &MlpParams,
    sets: &PointSets,
    k: &Conductivity,
    phys: &PhysicsSpec,
    weights: &LossWeights,
) -> Result<(LossBundle, GradientBundle)> {
    Ok(CompiledLoss::build(&params.scaling, sets, k, phys, weights)?.evaluate_with_grad(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kle::{build_basis_2d, CovarianceSpec, ConductivityField};
    use crate::net::Activation;
    use approx::assert_relative_eq;
    use ndarray::Array2 as NdArray2;
    use std::sync::Arc;

    fn tiny_net(seed: u64) -> MlpParams {
        MlpParams::init(seed, &[3, 8, 7, 1], Activation::Tanh, Scaling::default()).unwrap()
    }

    fn constant_net(c: f64) -> MlpParams {
        let mut p = tiny_net(0);
        for w in &mut p.weights {
            w.fill(0.0);
        }
        for b in &mut p.biases {
            b.fill(0.0);
        }
        let nb = p.biases.len();
        p.biases[nb - 1][0] = c;
        p
    }

    #[test]
    fn mse_data_exact_cases() {
        let p = constant_net(0.4);
        let mut data = LabeledPoints::default();
        data.push(0.1, 0.2, 0.3, 0.9);
        assert_relative_eq!(mse_data(&p, &data).unwrap(), 0.25, max_relative = 1e-15);
        // matching labels give zero
        let mut exact = LabeledPoints::default();
        exact.push(0.5, 0.5, 0.5, 0.4);
        assert_eq!(mse_data(&p, &exact).unwrap(), 0.0);
        assert!(mse_data(&p, &LabeledPoints::default()).is_err());
    }

    #[test]
    fn mse_data_matches_brute_force_on_random_points() {
        let p = tiny_net(7);
        let mut data = LabeledPoints::default();
        for i in 0..100 {
            let v = i as f64 / 100.0;
            data.push(v, 1.0 - v, 0.5 * v, (v * 7.0).sin());
        }
        let fast = mse_data(&p, &data).unwrap();
        let mut acc = 0.0;
        for (pt, h) in data.points.iter().zip(&data.values) {
            let d = net::predict(&p, pt[0], pt[1], pt[2]) - h;
            acc += d * d;
        }
        assert_relative_eq!(fast, acc / 100.0, max_relative = 1e-14);
    }

    #[test]
    fn constant_network_has_zero_residual() {
        let p = constant_net(3.2);
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::sample(basis, 9);
        let k = Conductivity::Field(&field);
        let f = pde_residual(&p, &k, 1e-4, 1.0, 300.0, 700.0);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn affine_solution_is_harmonic_for_uniform_k() {
        // network realizing h = x (in scaled coordinates h = x_hat * L):
        // residual vanishes because h_t = h_xx = h_yy = 0
        let mut p = MlpParams::init(0, &[3, 1, 1], Activation::Identity, Scaling::default()).unwrap();
        p.weights[0] = NdArray2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        p.biases[0].fill(0.0);
        p.weights[1] = NdArray2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        p.biases[1].fill(0.0);
        let k = Conductivity::Uniform(1.0);
        for (t, x, y) in [(0.3, 0.4, 0.5), (0.9, 0.1, 0.8)] {
            let f = pde_residual(&p, &k, 1e-4, t, x, y);
            assert!(f.abs() < 1e-15, "residual {f}");
        }
    }

    #[test]
    fn homogeneous_reduction_is_exact() {
        // zero-fluctuation field (xi = 0) must equal the constant-K form
        let p = tiny_net(3);
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::new(basis, vec![0.0; 20]).unwrap();
        let het = Conductivity::Field(&field);
        let hom = Conductivity::Uniform(1.0);
        for (t, x, y) in [(0.5, 200.0, 800.0), (0.1, 510.0, 510.0)] {
            let a = pde_residual(&p, &het, 1e-4, t, x, y);
            let jet = net::jet_physical(&p, t, x, y);
            let b = 1e-4 * jet.d_t - 1.0 * (jet.d_xx + jet.d_yy);
            assert_eq!(a, b);
            assert_eq!(a, pde_residual(&p, &hom, 1e-4, t, x, y));
        }
    }

    #[test]
    fn manufactured_solution_residual_matches_flux_form_oracle() {
        // h(t, x, y) = sin(pi x / L) exp(-t), K from a smooth realization.
        // The oracle evaluates Ss h_t - d/dx(K h_x) - d/dy(K h_y) with
        // central differences on the fluxes (using K values only); the
        // implementation path expands the divergence with analytic K
        // gradients. Both must agree.
        let l = 1020.0;
        let ss = 1e-4;
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::sample(basis, 4);

        let h = |t: f64, x: f64, _y: f64| (std::f64::consts::PI * x / l).sin() * (-t).exp();
        let h_t = |t: f64, x: f64, y: f64| -h(t, x, y);
        let h_x = |t: f64, x: f64, _y: f64| {
            (std::f64::consts::PI / l) * (std::f64::consts::PI * x / l).cos() * (-t).exp()
        };
        let h_xx = |t: f64, x: f64, y: f64| -(std::f64::consts::PI / l).powi(2) * h(t, x, y);

        let mut checked = 0;
        for i in 0..20 {
            let t = 0.1 + 0.4 * i as f64 / 20.0;
            let x = 60.0 + 900.0 * ((i * 7) % 20) as f64 / 20.0;
            let y = 60.0 + 900.0 * ((i * 13) % 20) as f64 / 20.0;

            // implementation path: expanded residual with analytic K gradients
            let jet = NetJet {
                value: h(t, x, y),
                d_t: h_t(t, x, y),
                d_x: h_x(t, x, y),
                d_y: 0.0,
                d_tt: 0.0,
                d_xx: h_xx(t, x, y),
                d_yy: 0.0,
            };
            let (kv, kx, ky) = field.k_at(x, y);
            let f_impl = residual_from_jet(&jet, kv, kx, ky, ss);

            // oracle: flux-form divergence by central differences on K h_x
            let step = 1e-4 * l;
            let flux_x = |xx: f64| field.k_at(xx, y).0 * h_x(t, xx, y);
            let div_x = (flux_x(x + step) - flux_x(x - step)) / (2.0 * step);
            // h has no y dependence, but K does: d/dy(K * 0) = 0
            let f_oracle = ss * h_t(t, x, y) - div_x;

            assert_relative_eq!(f_impl, f_oracle, max_relative = 1e-5);
            checked += 1;
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn mse_pde_simple_arithmetic() {
        let p = tiny_net(1);
        let k = Conductivity::Uniform(1.0);
        // two points with residuals r1, r2 -> mean of squares
        let pts = Points {
            points: vec![[0.2, 0.3, 0.4], [0.6, 0.7, 0.8]],
        };
        let r1 = pde_residual(&p, &k, 1e-4, 0.2, 0.3, 0.4);
        let r2 = pde_residual(&p, &k, 1e-4, 0.6, 0.7, 0.8);
        let m = mse_pde(&p, &k, 1e-4, &pts).unwrap();
        assert_relative_eq!(m, (r1 * r1 + r2 * r2) / 2.0, max_relative = 1e-15);
        assert!(mse_pde(&p, &k, 1e-4, &Points::default()).is_err());
    }

    #[test]
    fn penalty_terms_exact_cases() {
        let pts = Points {
            points: vec![[0.0, 0.0, 0.0]],
        };
        // output 1.5 with bounds [0, 1] -> 0.25
        let p = constant_net(1.5);
        assert_relative_eq!(mse_ek_bounds(&p, &pts, 0.0, 1.0).unwrap(), 0.25, max_relative = 1e-15);
        // output -0.3 -> 0.09
        let p = constant_net(-0.3);
        assert_relative_eq!(mse_ek_bounds(&p, &pts, 0.0, 1.0).unwrap(), 0.09, max_relative = 1e-15);
        // inside the bounds -> 0
        let p = constant_net(0.5);
        assert_eq!(mse_ek_bounds(&p, &pts, 0.0, 1.0).unwrap(), 0.0);
        // floor 81, output 80 -> 1
        let p = constant_net(80.0);
        assert_relative_eq!(mse_ec_floor(&p, &pts, 81.0).unwrap(), 1.0, max_relative = 1e-15);
        // above the floor -> 0
        let p = constant_net(82.0);
        assert_eq!(mse_ec_floor(&p, &pts, 81.0).unwrap(), 0.0);
    }

    #[test]
    fn well_residual_constant_network_is_sink_strength() {
        // constant network: all derivatives vanish, residual = Q/(dx dy)
        let p = constant_net(1.0);
        let k = Conductivity::Uniform(1.0);
        let sink = 50.0 / (20.0 * 20.0);
        let f = well_residual(&p, &k, 1e-4, 1.0, 530.0, 530.0, sink);
        assert_relative_eq!(f, 0.125, max_relative = 1e-15);
        // zero pumping reduces to the plain residual
        let p2 = tiny_net(5);
        let f0 = well_residual(&p2, &k, 1e-4, 0.3, 0.4, 0.5, 0.0);
        assert_eq!(f0, pde_residual(&p2, &k, 1e-4, 0.3, 0.4, 0.5));
    }

    #[test]
    fn mse_pde_well_matches_brute_force() {
        let p = tiny_net(6);
        let k = Conductivity::Uniform(0.8);
        let sink = 0.125;
        let pts = Points {
            points: (0..10).map(|i| [0.1 * i as f64, 0.5, 0.5]).collect(),
        };
        let fast = mse_pde_well(&p, &k, 1e-4, &pts, sink).unwrap();
        let mut acc = 0.0;
        for pt in &pts.points {
            let f = well_residual(&p, &k, 1e-4, pt[0], pt[1], pt[2], sink);
            acc += f * f;
        }
        assert_relative_eq!(fast, acc / 10.0, max_relative = 1e-14);
    }

    fn small_sets() -> PointSets {
        let mut sets = PointSets::default();
        for i in 0..13 {
            let v = i as f64 / 13.0;
            sets.data.push(v, 1.0 - v, 0.3 + 0.02 * i as f64, (3.0 * v).cos() * 0.5);
        }
        sets.colloc.points = (0..9).map(|i| [0.1 * i as f64, 0.4, 0.6]).collect();
        for i in 0..5 {
            sets.bc.push(0.2 * i as f64, 0.0, 0.1 * i as f64, 1.0);
        }
        for i in 0..5 {
            sets.ic.push(0.0, 0.2 * i as f64, 0.3, 0.0);
        }
        for i in 0..4 {
            sets.new_bc.push(0.5 + 0.1 * i as f64, 1.0, 0.25 * i as f64, 2.0);
        }
        sets.well.points = (0..3).map(|i| [0.3 * i as f64, 0.52, 0.52]).collect();
        sets.ec.points = sets.colloc.points.clone();
        sets.ek.points = sets.colloc.points.clone();
        sets
    }

    #[test]
    fn total_loss_is_exact_weighted_sum_and_skips_zero_weight_terms() {
        let p = tiny_net(11);
        let k = Conductivity::Uniform(1.0);
        let phys = PhysicsSpec {
            well_sink: 0.125,
            ec_floor: 0.2,
            ..PhysicsSpec::default()
        };
        let sets = small_sets();
        let weights = LossWeights {
            data: 1.0,
            pde: 2.0,
            bc: 1.0,
            ic: 1.0,
            new_bc: 0.0,
            ec: 0.5,
            ek: 1.0,
            pde_well: 3.0,
        };
        let bundle = total_loss(&p, &sets, &k, &phys, &weights).unwrap();
        assert!(bundle.new_bc.is_none(), "zero-weight term must be absent");
        let expect = 1.0 * bundle.data.unwrap()
            + 2.0 * bundle.pde.unwrap()
            + 1.0 * bundle.bc.unwrap()
            + 1.0 * bundle.ic.unwrap()
            + 0.5 * bundle.ec.unwrap()
            + 1.0 * bundle.ek.unwrap()
            + 3.0 * bundle.pde_well.unwrap();
        assert_eq!(bundle.total, expect);

        // all-zero weights produce an empty bundle with zero total
        let zero = LossWeights {
            data: 0.0,
            pde: 0.0,
            bc: 0.0,
            ic: 0.0,
            new_bc: 0.0,
            ec: 0.0,
            ek: 0.0,
            pde_well: 0.0,
        };
        let empty = total_loss(&p, &sets, &k, &phys, &zero).unwrap();
        assert_eq!(empty.total, 0.0);
        assert!(empty.present_terms().is_empty());
    }

    #[test]
    fn compiled_terms_agree_with_direct_ops() {
        let p = tiny_net(21);
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::sample(basis, 2);
        let k = Conductivity::Field(&field);
        let phys = PhysicsSpec {
            well_sink: 0.125,
            ec_floor: 0.3,
            ..PhysicsSpec::default()
        };
        let mut sets = small_sets();
        // move the spatial coordinates into the physical domain
        for p3 in sets
            .data
            .points
            .iter_mut()
            .chain(sets.colloc.points.iter_mut())
            .chain(sets.bc.points.iter_mut())
            .chain(sets.ic.points.iter_mut())
            .chain(sets.new_bc.points.iter_mut())
            .chain(sets.well.points.iter_mut())
            .chain(sets.ec.points.iter_mut())
            .chain(sets.ek.points.iter_mut())
        {
            p3[1] *= 1000.0;
            p3[2] *= 1000.0;
        }
        let weights = LossWeights::default();
        let bundle = total_loss(&p, &sets, &k, &phys, &weights).unwrap();
        assert_relative_eq!(
            bundle.data.unwrap(),
            mse_data(&p, &sets.data).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.pde.unwrap(),
            mse_pde(&p, &k, phys.specific_storage, &sets.colloc).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.bc.unwrap(),
            mse_bc(&p, &sets.bc).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.ic.unwrap(),
            mse_ic(&p, &sets.ic).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.new_bc.unwrap(),
            mse_new_bc(&p, &sets.new_bc).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.ec.unwrap(),
            mse_ec_floor(&p, &sets.ec, phys.ec_floor).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.ek.unwrap(),
            mse_ek_bounds(&p, &sets.ek, phys.ek_lower, phys.ek_upper).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            bundle.pde_well.unwrap(),
            mse_pde_well(&p, &k, phys.specific_storage, &sets.well, phys.well_sink).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn empty_set_with_nonzero_weight_is_rejected() {
        let p = tiny_net(0);
        let k = Conductivity::Uniform(1.0);
        let mut sets = small_sets();
        sets.colloc.points.clear();
        let err = total_loss(&p, &sets, &k, &PhysicsSpec::default(), &LossWeights::default());
        assert!(err.is_err());
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        // every term switched on, random small net, central differences on a
        // sample of parameters
        let p = tiny_net(33);
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::sample(basis, 8);
        let phys = PhysicsSpec {
            specific_storage: 1e-4,
            ek_lower: -0.05,
            ek_upper: 0.05,
            ec_floor: 0.02,
            well_sink: 0.01,
        };
        let mut sets = small_sets();
        for p3 in sets
            .data
            .points
            .iter_mut()
            .chain(sets.colloc.points.iter_mut())
            .chain(sets.bc.points.iter_mut())
            .chain(sets.ic.points.iter_mut())
            .chain(sets.new_bc.points.iter_mut())
            .chain(sets.well.points.iter_mut())
            .chain(sets.ec.points.iter_mut())
            .chain(sets.ek.points.iter_mut())
        {
            p3[1] *= 1000.0;
            p3[2] *= 1000.0;
        }
        // labels near the raw output range so penalties are active
        for v in sets.data.values.iter_mut() {
            *v *= 0.05;
        }
        for v in sets.bc.values.iter_mut() {
            *v = 0.03;
        }
        for v in sets.new_bc.values.iter_mut() {
            *v = 0.04;
        }
        let weights = LossWeights {
            data: 1.0,
            pde: 0.7,
            bc: 1.3,
            ic: 0.9,
            new_bc: 1.1,
            ec: 0.8,
            ek: 1.2,
            pde_well: 0.6,
        };
        let k = Conductivity::Field(&field);
        let (_, grad) = total_loss_and_grad(&p, &sets, &k, &phys, &weights).unwrap();

        let objective = |q: &MlpParams| total_loss(q, &sets, &k, &phys, &weights).unwrap().total;
        let h = 1e-6;
        let mut q = p.clone();
        for l in 0..p.weights.len() {
            let probe: Vec<(usize, usize)> = vec![(0, 0), (p.weights[l].nrows() - 1, p.weights[l].ncols() - 1)];
            for idx in probe {
                let orig = q.weights[l][idx];
                q.weights[l][idx] = orig + h;
                let fp = objective(&q);
                q.weights[l][idx] = orig - h;
                let fm = objective(&q);
                q.weights[l][idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert_relative_eq!(grad.weights[l][idx], fd, max_relative = 1e-4, epsilon = 1e-9);
            }
            let orig = q.biases[l][0];
            q.biases[l][0] = orig + h;
            let fp = objective(&q);
            q.biases[l][0] = orig - h;
            let fm = objective(&q);
            q.biases[l][0] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad.biases[l][0], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn moving_inside_feasible_region_never_increases_penalties() {
        let pts = Points {
            points: (0..8).map(|i| [0.1 * i as f64, 0.5, 0.5]).collect(),
        };
        for seed in 0..10 {
            let p = tiny_net(seed);
            let ek_before = mse_ek_bounds(&p, &pts, 0.0, 1.0).unwrap();
            let ec_before = mse_ec_floor(&p, &pts, 0.1).unwrap();
            // pull every output toward the feasible interior (0.5)
            let mut q = p.clone();
            let nb = q.biases.len();
            let shrink = 0.5;
            for w in q.weights[nb - 1].iter_mut() {
                *w *= shrink;
            }
            q.biases[nb - 1][0] = q.biases[nb - 1][0] * shrink + 0.5 * (1.0 - shrink);
            let ek_after = mse_ek_bounds(&q, &pts, 0.0, 1.0).unwrap();
            let ec_after = mse_ec_floor(&q, &pts, 0.1).unwrap();
            assert!(ek_after <= ek_before + 1e-15);
            assert!(ec_after <= ec_before + 1e-15);
        }
    }
}
