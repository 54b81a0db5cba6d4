//! Fully-connected network with exact input derivatives and parameter
//! gradients.
//!
//! The surrogate maps scaled coordinates `(t, x, y)` to a raw scalar output.
//! Besides the plain forward pass, the network propagates a second-order
//! forward "jet" per input direction: for each neuron the triple
//! `(z, dz/ds, d2z/ds2)` for `s` in {t, x, y}. A reverse sweep through that
//! propagation yields exact gradients of any scalar built from the output
//! channels with respect to every weight and bias.
//!
//! Batched evaluation runs on `(width x chunk)` matrices so the inner loops
//! are plain matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GfError, Result};

/// Twice-differentiable activations for the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(GfError::invalid("activation", format!("unknown tag '{other}'"))),
        }
    }

    #[inline]
    fn apply(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                // tanh via exp: measurably faster than the libm tanh here,
                // saturates cleanly to +-1 when the exponential overflows
                1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
            }
            Activation::Identity => a,
        }
    }

    /// First three derivatives expressed through the post-activation value.
    #[inline]
    fn derivs_from_value(&self, u: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let s1 = 1.0 - u * u;
                (s1, -2.0 * u * s1, s1 * (6.0 * u * u - 2.0))
            }
            Activation::Identity => (1.0, 0.0, 0.0),
        }
    }
}

/// Coordinate and output scaling constants. The network consumes
/// `(t / t_scale, x / x_scale, y / y_scale)` and predicts
/// `h = head_offset + head_scale * raw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub t_scale: f64,
    pub x_scale: f64,
    pub y_scale: f64,
    pub head_offset: f64,
    pub head_scale: f64,
}

impl Default for Scaling {
    fn default() -> Self {
        Scaling {
            t_scale: 1.0,
            x_scale: 1.0,
            y_scale: 1.0,
            head_offset: 0.0,
            head_scale: 1.0,
        }
    }
}

impl Scaling {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_scale", self.t_scale),
            ("x_scale", self.x_scale),
            ("y_scale", self.y_scale),
            ("head_scale", self.head_scale),
        ] {
            if !(v != 0.0 && v.is_finite()) {
                return Err(GfError::invalid("scaling", format!("{name} must be finite and nonzero, got {v}")));
            }
        }
        if !self.head_offset.is_finite() {
            return Err(GfError::invalid("scaling", "head_offset must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn scale_point(&self, t: f64, x: f64, y: f64) -> [f64; 3] {
        [t / self.t_scale, x / self.x_scale, y / self.y_scale]
    }
}

/// Network parameters: per-layer weight matrices (out x in) and bias vectors,
/// plus the activation tag and scaling constants. Immutable during
/// evaluation; training replaces entries in place.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
    pub scaling: Scaling,
}

/// The default architecture: seven hidden layers of width 50.
pub fn default_layer_sizes() -> Vec<usize> {
    vec![3, 50, 50, 50, 50, 50, 50, 50, 1]
}

impl MlpParams {
    /// Fan-based uniform initialization: weights in
    /// `+-sqrt(6 / (fan_in + fan_out))`, biases zero. Deterministic per seed.
    pub fn init(
        seed: u64,
        layer_sizes: &[usize],
        activation: Activation,
        scaling: Scaling,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(GfError::invalid("layer sizes", "need at least input and output"));
        }
        if layer_sizes[0] != 3 || *layer_sizes.last().unwrap() != 1 {
            return Err(GfError::invalid(
                "layer sizes",
                format!("expected 3 inputs and 1 output, got {layer_sizes:?}"),
            ));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(GfError::invalid("layer sizes", "zero-width layer"));
        }
        scaling.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mat = Array2::from_shape_fn((fan_out, fan_in), |_| {
                (2.0 * rng.random::<f64>() - 1.0) * bound
            });
            weights.push(mat);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            scaling,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.layer_sizes.len() - 1 || self.biases.len() != self.weights.len() {
            return Err(GfError::invalid("network", "layer count mismatch"));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.dim() != (self.layer_sizes[l + 1], self.layer_sizes[l]) || b.len() != self.layer_sizes[l + 1] {
                return Err(GfError::invalid("network", format!("layer {l} shape mismatch")));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(GfError::invalid("network", format!("layer {l} has non-finite values")));
            }
        }
        self.scaling.validate()
    }
}

/// Output value plus first and second input derivatives at one point.
/// Derivatives are with respect to the *scaled* coordinates and the *raw*
/// output unless produced by [`jet_physical`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetJet {
    pub value: f64,
    pub d_t: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_tt: f64,
    pub d_xx: f64,
    pub d_yy: f64,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientBundle {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for w in &self.weights {
            for v in w.iter() {
                m = m.max(v.abs());
            }
        }
        for b in &self.biases {
            for v in b.iter() {
                m = m.max(v.abs());
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

/// Output channels of one chunk: the raw value and, when jets are requested,
/// first/second derivatives per scaled input direction.
#[derive(Debug, Clone)]
pub struct ChunkOut {
    pub value: Array1<f64>,
    pub d: [Array1<f64>; 3],
    pub dd: [Array1<f64>; 3],
    pub with_jets: bool,
}

impl ChunkOut {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Zero-filled seed container matching this output shape.
    pub fn zero_seeds(&self) -> ChunkOut {
        let n = self.len();
        let zeros = || Array1::zeros(n);
        ChunkOut {
            value: zeros(),
            d: [zeros(), zeros(), zeros()],
            dd: [zeros(), zeros(), zeros()],
            with_jets: self.with_jets,
        }
    }
}

/// Saved forward state for one chunk, consumed by [`backward_chunk`].
pub struct ChunkTrace {
    /// Scaled inputs, 3 x B.
    x: Array2<f64>,
    /// Post-activation values per layer, width_l x B.
    z: Vec<Array2<f64>>,
    /// Pre-activation first derivatives per layer and direction.
    a_d: Vec<[Array2<f64>; 3]>,
    /// Pre-activation second derivatives per layer and direction.
    a_dd: Vec<[Array2<f64>; 3]>,
    with_jets: bool,
}

fn affine(w: &Array2<f64>, input: &ArrayView2<f64>, bias: Option<&Array1<f64>>) -> Array2<f64> {
    let mut out = match bias {
        Some(b) => {
            let mut m = Array2::zeros((w.nrows(), input.ncols()));
            for (mut row, &bv) in m.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.fill(bv);
            }
            m
        }
        None => Array2::zeros((w.nrows(), input.ncols())),
    };
    general_mat_mul(1.0, w, input, 1.0, &mut out);
    out
}

/// Forward pass over one chunk of scaled inputs (3 x B). With `jets`, the
/// second-order forward propagation runs for all three directions (the t-t
/// channel included; its output is simply not used by the flow residual).
pub fn forward_chunk(params: &MlpParams, x: ArrayView2<f64>, jets: bool) -> (ChunkOut, ChunkTrace) {
    let b_cols = x.ncols();
    debug_assert_eq!(x.nrows(), 3);
    let n_layers = params.n_layers();

    let mut z_list: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut ad_list: Vec<[Array2<f64>; 3]> = Vec::with_capacity(if jets { n_layers } else { 0 });
    let mut add_list: Vec<[Array2<f64>; 3]> = Vec::with_capacity(if jets { n_layers } else { 0 });

    // current post-activation channels
    let mut cur = x.to_owned();
    let mut cur_d: Option<[Array2<f64>; 3]> = if jets {
        let mut init = [
            Array2::zeros((3, b_cols)),
            Array2::zeros((3, b_cols)),
            Array2::zeros((3, b_cols)),
        ];
        for (s, chan) in init.iter_mut().enumerate() {
            chan.row_mut(s).fill(1.0);
        }
        Some(init)
    } else {
        None
    };
    let mut cur_dd: Option<[Array2<f64>; 3]> = if jets {
        Some([
            Array2::zeros((3, b_cols)),
            Array2::zeros((3, b_cols)),
            Array2::zeros((3, b_cols)),
        ])
    } else {
        None
    };

    for l in 0..n_layers {
        let w = &params.weights[l];
        let act = params.layer_activation(l);
        let mut a = affine(w, &cur.view(), Some(&params.biases[l]));
        if jets {
            let prev_d = cur_d.take().unwrap();
            let prev_dd = cur_dd.take().unwrap();
            let a_d = [
                affine(w, &prev_d[0].view(), None),
                affine(w, &prev_d[1].view(), None),
                affine(w, &prev_d[2].view(), None),
            ];
            let a_dd = [
                affine(w, &prev_dd[0].view(), None),
                affine(w, &prev_dd[1].view(), None),
                affine(w, &prev_dd[2].view(), None),
            ];
            // activation: u = act(a), then push jets through
            a.mapv_inplace(|v| act.apply(v));
            let u = a;
            let mut new_d = a_d.clone();
            let mut new_dd = a_dd.clone();
            for s in 0..3 {
                ndarray::azip!((nd in &mut new_d[s], ndd in &mut new_dd[s], &uv in &u, &adv in &a_d[s]) {
                    let (s1, s2, _) = act.derivs_from_value(uv);
                    *ndd = s2 * adv * adv + s1 * *ndd;
                    *nd = s1 * adv;
                });
            }
            ad_list.push(a_d);
            add_list.push(a_dd);
            z_list.push(u.clone());
            cur = u;
            cur_d = Some(new_d);
            cur_dd = Some(new_dd);
        } else {
            a.mapv_inplace(|v| act.apply(v));
            z_list.push(a.clone());
            cur = a;
        }
    }

    let row = |m: &Array2<f64>| m.row(0).to_owned();
    let out = if jets {
        let d = cur_d.unwrap();
        let dd = cur_dd.unwrap();
        ChunkOut {
            value: row(&cur),
            d: [row(&d[0]), row(&d[1]), row(&d[2])],
            dd: [row(&dd[0]), row(&dd[1]), row(&dd[2])],
            with_jets: true,
        }
    } else {
        ChunkOut {
            value: row(&cur),
            d: [Array1::zeros(0), Array1::zeros(0), Array1::zeros(0)],
            dd: [Array1::zeros(0), Array1::zeros(0), Array1::zeros(0)],
            with_jets: false,
        }
    };
    (
        out,
        ChunkTrace {
            x: x.to_owned(),
            z: z_list,
            a_d: ad_list,
            a_dd: add_list,
            with_jets: jets,
        },
    )
}

/// Reverse sweep: accumulates `d(objective)/d(theta)` into `grad`, given the
/// adjoints of the output channels (`seeds`). Exact for any scalar objective
/// that is a function of the chunk's output channels.
pub fn backward_chunk(
    params: &MlpParams,
    trace: &ChunkTrace,
    seeds: &ChunkOut,
    grad: &mut GradientBundle,
) {
    backward_chunk_masked(params, trace, seeds, grad, None)
}

/// [`backward_chunk`] with an optional per-layer trainable mask: adjoints
/// still propagate through every layer, but the parameter-gradient products
/// of masked-out layers are skipped (their bundle entries stay zero).
pub fn backward_chunk_masked(
    params: &MlpParams,
    trace: &ChunkTrace,
    seeds: &ChunkOut,
    grad: &mut GradientBundle,
    layer_mask: Option<&[bool]>,
) {
    let n_layers = params.n_layers();
    let b_cols = trace.x.ncols();
    let jets = trace.with_jets;
    debug_assert_eq!(seeds.with_jets, jets);

    let as_row = |v: &Array1<f64>| {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row reshape")
    };

    // adjoints of the post-activation channels of the current layer
    let mut gz = as_row(&seeds.value);
    let mut gz_d: [Array2<f64>; 3] = if jets {
        [as_row(&seeds.d[0]), as_row(&seeds.d[1]), as_row(&seeds.d[2])]
    } else {
        [Array2::zeros((1, 0)), Array2::zeros((1, 0)), Array2::zeros((1, 0))]
    };
    let mut gz_dd: [Array2<f64>; 3] = if jets {
        [as_row(&seeds.dd[0]), as_row(&seeds.dd[1]), as_row(&seeds.dd[2])]
    } else {
        [Array2::zeros((1, 0)), Array2::zeros((1, 0)), Array2::zeros((1, 0))]
    };

    for l in (0..n_layers).rev() {
        let act = params.layer_activation(l);
        let u = &trace.z[l];
        let width = u.nrows();

        // adjoints of the pre-activation channels
        let mut ga = Array2::zeros((width, b_cols));
        let mut ga_d: [Array2<f64>; 3] = [
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
        ];
        let mut ga_dd: [Array2<f64>; 3] = [
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
        ];

        {
            let u_s = u.as_slice().expect("contiguous");
            let gz_s = gz.as_slice().expect("contiguous");
            let ga_s = ga.as_slice_mut().expect("contiguous");
            for idx in 0..ga_s.len() {
                let (s1, _, _) = act.derivs_from_value(u_s[idx]);
                ga_s[idx] = gz_s[idx] * s1;
            }
        }
        if jets {
            let a_d = &trace.a_d[l];
            let a_dd = &trace.a_dd[l];
            let u_s = u.as_slice().expect("contiguous");
            for s in 0..3 {
                let mut gad = Array2::zeros((width, b_cols));
                let mut gadd = Array2::zeros((width, b_cols));
                {
                    let ad_s = a_d[s].as_slice().expect("contiguous");
                    let add_s = a_dd[s].as_slice().expect("contiguous");
                    let gd_s = gz_d[s].as_slice().expect("contiguous");
                    let gdd_s = gz_dd[s].as_slice().expect("contiguous");
                    let gad_s = gad.as_slice_mut().expect("contiguous");
                    let gadd_s = gadd.as_slice_mut().expect("contiguous");
                    let ga_s = ga.as_slice_mut().expect("contiguous");
                    for idx in 0..ga_s.len() {
                        let (s1, s2, s3) = act.derivs_from_value(u_s[idx]);
                        let (adv, addv) = (ad_s[idx], add_s[idx]);
                        let (gd, gdd) = (gd_s[idx], gdd_s[idx]);
                        gadd_s[idx] = gdd * s1;
                        gad_s[idx] = gd * s1 + gdd * 2.0 * s2 * adv;
                        ga_s[idx] += gd * s2 * adv + gdd * (s3 * adv * adv + s2 * addv);
                    }
                }
                ga_d[s] = gad;
                ga_dd[s] = gadd;
            }
        }

        // parameter gradients against the input channels of this layer
        let wants_grad = layer_mask.map_or(true, |m| m[l]);
        let gw = &mut grad.weights[l];
        if !wants_grad {
            // adjoint propagation below still runs; only the parameter
            // products are skipped
        } else if l == 0 {
            general_mat_mul(1.0, &ga, &trace.x.t(), 1.0, gw);
            if jets {
                // input first-derivative channels are one-hot constants:
                // direction s contributes its row sums to weight column s
                for s in 0..3 {
                    for (r, row) in ga_d[s].axis_iter(Axis(0)).enumerate() {
                        gw[(r, s)] += row.sum();
                    }
                }
                // input second-derivative channels are zero
            }
        } else {
            let prev_act = params.layer_activation(l - 1);
            let zp = &trace.z[l - 1];
            general_mat_mul(1.0, &ga, &zp.t(), 1.0, gw);
            if jets {
                let pa_d = &trace.a_d[l - 1];
                let pa_dd = &trace.a_dd[l - 1];
                for s in 0..3 {
                    // recompute the previous layer's post-activation jets
                    let mut zp_d = Array2::zeros(zp.dim());
                    let mut zp_dd = Array2::zeros(zp.dim());
                    ndarray::azip!((
                        zd in &mut zp_d,
                        zdd in &mut zp_dd,
                        &uv in zp,
                        &adv in &pa_d[s],
                        &addv in &pa_dd[s]
                    ) {
                        let (s1, s2, _) = prev_act.derivs_from_value(uv);
                        *zd = s1 * adv;
                        *zdd = s2 * adv * adv + s1 * addv;
                    });
                    general_mat_mul(1.0, &ga_d[s], &zp_d.t(), 1.0, gw);
                    general_mat_mul(1.0, &ga_dd[s], &zp_dd.t(), 1.0, gw);
                }
            }
        }
        if wants_grad {
            let gb = &mut grad.biases[l];
            for (r, row) in ga.axis_iter(Axis(0)).enumerate() {
                gb[r] += row.sum();
            }
        }

        // propagate adjoints to the previous layer's post-activation channels
        if l > 0 {
            let w = &params.weights[l];
            let prev_width = params.layer_sizes[l];
            let mut next_gz = Array2::zeros((prev_width, b_cols));
            general_mat_mul(1.0, &w.t(), &ga, 0.0, &mut next_gz);
            gz = next_gz;
            if jets {
                for s in 0..3 {
                    let mut nd = Array2::zeros((prev_width, b_cols));
                    general_mat_mul(1.0, &w.t(), &ga_d[s], 0.0, &mut nd);
                    gz_d[s] = nd;
                    let mut ndd = Array2::zeros((prev_width, b_cols));
                    general_mat_mul(1.0, &w.t(), &ga_dd[s], 0.0, &mut ndd);
                    gz_dd[s] = ndd;
                }
            }
        }
    }
}

/// Chunk widths for batched evaluation. Fixed (not tuned per machine) so
/// that chunk-ordered reductions are bitwise reproducible everywhere. Jet
/// chunks are narrower: their forward trace carries seven channels per layer
/// and would otherwise fall out of cache.
pub const CHUNK: usize = 1024;
pub const CHUNK_JETS: usize = 256;

/// Raw forward values over scaled inputs (3 x N).
pub fn forward_batch(params: &MlpParams, xs: &Array2<f64>) -> Array1<f64> {
    let n = xs.ncols();
    let mut out = Array1::zeros(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let (o, _) = forward_chunk(params, xs.slice(ndarray::s![.., start..end]), false);
        out.slice_mut(ndarray::s![start..end]).assign(&o.value);
        start = end;
    }
    out
}

/// Raw jets over scaled inputs (3 x N): values plus first/second derivatives
/// per direction, in scaled coordinates.
pub struct JetBatch {
    pub value: Array1<f64>,
    pub d: [Array1<f64>; 3],
    pub dd: [Array1<f64>; 3],
}

pub fn jet_batch(params: &MlpParams, xs: &Array2<f64>) -> JetBatch {
    let n = xs.ncols();
    let mut out = JetBatch {
        value: Array1::zeros(n),
        d: [Array1::zeros(n), Array1::zeros(n), Array1::zeros(n)],
        dd: [Array1::zeros(n), Array1::zeros(n), Array1::zeros(n)],
    };
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_JETS).min(n);
        let (o, _) = forward_chunk(params, xs.slice(ndarray::s![.., start..end]), true);
        out.value.slice_mut(ndarray::s![start..end]).assign(&o.value);
        for s in 0..3 {
            out.d[s].slice_mut(ndarray::s![start..end]).assign(&o.d[s]);
            out.dd[s].slice_mut(ndarray::s![start..end]).assign(&o.dd[s]);
        }
        start = end;
    }
    out
}

// ---------------------------------------------------------------------------
// Single-point convenience wrappers
// ---------------------------------------------------------------------------

fn one_point(scaled: [f64; 3]) -> Array2<f64> {
    Array2::from_shape_vec((3, 1), scaled.to_vec()).expect("3x1 input")
}

/// Raw output at one scaled input point.
pub fn forward(params: &MlpParams, scaled: [f64; 3]) -> f64 {
    let (o, _) = forward_chunk(params, one_point(scaled).view(), false);
    o.value[0]
}

/// Raw jet at one scaled input point (value equals `forward` exactly: both
/// run the same code path).
pub fn jet(params: &MlpParams, scaled: [f64; 3]) -> NetJet {
    let (o, _) = forward_chunk(params, one_point(scaled).view(), true);
    NetJet {
        value: o.value[0],
        d_t: o.d[0][0],
        d_x: o.d[1][0],
        d_y: o.d[2][0],
        d_tt: o.dd[0][0],
        d_xx: o.dd[1][0],
        d_yy: o.dd[2][0],
    }
}

/// Physical-unit prediction at a physical point.
pub fn predict(params: &MlpParams, t: f64, x: f64, y: f64) -> f64 {
    let sc = &params.scaling;
    sc.head_offset + sc.head_scale * forward(params, sc.scale_point(t, x, y))
}

/// Jet converted to physical units: derivatives of the physical head with
/// respect to physical coordinates.
pub fn jet_physical(params: &MlpParams, t: f64, x: f64, y: f64) -> NetJet {
    let sc = &params.scaling;
    let j = jet(params, sc.scale_point(t, x, y));
    let hs = sc.head_scale;
    NetJet {
        value: sc.head_offset + hs * j.value,
        d_t: hs * j.d_t / sc.t_scale,
        d_x: hs * j.d_x / sc.x_scale,
        d_y: hs * j.d_y / sc.y_scale,
        d_tt: hs * j.d_tt / (sc.t_scale * sc.t_scale),
        d_xx: hs * j.d_xx / (sc.x_scale * sc.x_scale),
        d_yy: hs * j.d_yy / (sc.y_scale * sc.y_scale),
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_HEADER: &str = "groundflow-checkpoint v1";

/// Serializes the parameters as a versioned text document: layer sizes,
/// activation tag, scaling constants, then per-layer weights and biases in
/// row-major order at full round-trip precision.
pub fn write_checkpoint(params: &MlpParams) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_FORMAT_HEADER}");
    let sizes: Vec<String> = params.layer_sizes.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "layer_sizes = {}", sizes.join(" "));
    let _ = writeln!(s, "activation = {}", params.activation.tag());
    let sc = &params.scaling;
    let _ = writeln!(s, "t_scale = {}", sc.t_scale);
    let _ = writeln!(s, "x_scale = {}", sc.x_scale);
    let _ = writeln!(s, "y_scale = {}", sc.y_scale);
    let _ = writeln!(s, "head_offset = {}", sc.head_offset);
    let _ = writeln!(s, "head_scale = {}", sc.head_scale);
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let ws: Vec<String> = w.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "weights_{l} = {}", ws.join(" "));
        let bs: Vec<String> = b.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "biases_{l} = {}", bs.join(" "));
    }
    s
}

pub fn parse_checkpoint(text: &str) -> Result<MlpParams> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != CHECKPOINT_FORMAT_HEADER {
        return Err(GfError::Parse {
            context: "checkpoint".into(),
            why: format!("unexpected header '{header}'"),
        });
    }
    let mut kv = std::collections::HashMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(GfError::Parse {
                context: "checkpoint".into(),
                why: format!("expected 'key = value', got '{line}'"),
            });
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<String> {
        kv.get(key).cloned().ok_or_else(|| GfError::Parse {
            context: "checkpoint".into(),
            why: format!("missing key '{key}'"),
        })
    };
    let fval = |key: &str| -> Result<f64> {
        get(key)?.parse::<f64>().map_err(|e| GfError::Parse {
            context: "checkpoint".into(),
            why: format!("{key}: {e}"),
        })
    };
    let layer_sizes: Vec<usize> = get("layer_sizes")?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|e| GfError::Parse {
                context: "checkpoint".into(),
                why: format!("layer_sizes '{t}': {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let activation = Activation::from_tag(&get("activation")?)?;
    let scaling = Scaling {
        t_scale: fval("t_scale")?,
        x_scale: fval("x_scale")?,
        y_scale: fval("y_scale")?,
        head_offset: fval("head_offset")?,
        head_scale: fval("head_scale")?,
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_sizes.len().saturating_sub(1) {
        let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
        let wvals: Vec<f64> = get(&format!("weights_{l}"))?
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| GfError::Parse {
                    context: "checkpoint".into(),
                    why: format!("weights_{l} '{t}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if wvals.len() != rows * cols {
            return Err(GfError::Parse {
                context: "checkpoint".into(),
                why: format!("weights_{l} has {} values, expected {}", wvals.len(), rows * cols),
            });
        }
        weights.push(Array2::from_shape_vec((rows, cols), wvals).expect("weight shape"));
        let bvals: Vec<f64> = get(&format!("biases_{l}"))?
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| GfError::Parse {
                    context: "checkpoint".into(),
                    why: format!("biases_{l} '{t}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if bvals.len() != rows {
            return Err(GfError::Parse {
                context: "checkpoint".into(),
                why: format!("biases_{l} has {} values, expected {rows}", bvals.len()),
            });
        }
        biases.push(Array1::from_vec(bvals));
    }
    let params = MlpParams {
        layer_sizes,
        weights,
        biases,
        activation,
        scaling,
    };
    params.validate()?;
    Ok(params)
}
