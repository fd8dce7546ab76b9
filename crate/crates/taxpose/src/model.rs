//! The cross-pose estimation network.
//!
//! Per-object encoders run on zero-centered clouds, a cross-object
//! attention module mixes the two feature sets, and the resulting
//! correspondence weights, residuals and importance weights feed the
//! weighted Procrustes solve. Features depend only on centered clouds, so
//! the whole pipeline is translation-equivariant by construction.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, RotationMatrix, Vec3};
use crate::mat3::V3;
use crate::procrustes::{solve_weighted_parts, CorrView, SolutionParts};
use crate::scalar::{Real, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

const HIDDEN_WIDTH: usize = 64;
const KNN_NEIGHBORS: usize = 8;

/// Dense per-point embedding matrix, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn from_rows(rows: Vec<Vec<S>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for row in &rows {
            if row.len() != d {
                return Err(Error::LengthMismatch("ragged feature rows".into()));
            }
            for &x in row {
                if !x.is_finite() {
                    return Err(Error::NonFinite("feature matrix"));
                }
                data.push(x);
            }
        }
        Ok(FeatureMatrix { rows: n, cols: d, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> {
        (0..self.rows).map(move |i| self.row(i))
    }
}

/// Row-stochastic attention / correspondence weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<S: Scalar> {
    n_self: usize,
    n_other: usize,
    data: Vec<S>,
}

impl<S: Scalar> AttentionWeights<S> {
    /// Validates non-negativity and row sums within 1e-9.
    pub fn from_rows(rows: Vec<Vec<S>>) -> Result<Self> {
        let n_self = rows.len();
        let n_other = rows.first().map_or(0, |r| r.len());
        let tol = S::of(1e-9);
        let mut data = Vec::with_capacity(n_self * n_other);
        for row in &rows {
            if row.len() != n_other {
                return Err(Error::LengthMismatch("ragged weight rows".into()));
            }
            let mut sum = S::zero();
            for &w in row {
                if !(w >= S::zero()) {
                    return Err(Error::invalid("attention weights", "negative entry"));
                }
                sum = sum + w;
            }
            if (sum - S::one()).abs() > tol {
                return Err(Error::invalid(
                    "attention weights",
                    format!("row sums to {sum}"),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(AttentionWeights {
            n_self,
            n_other,
            data,
        })
    }

    pub fn n_self(&self) -> usize {
        self.n_self
    }

    pub fn n_other(&self) -> usize {
        self.n_other
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.n_other..(i + 1) * self.n_other]
    }
}

/// A dense layer; weights are stored row-major, one row per output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearSerde<S>", into = "LinearSerde<S>")]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct Linear<S: Scalar> {
    weight: Vec<S>,
    bias: Vec<S>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct LinearSerde<S> {
    weight: Vec<Vec<S>>,
    bias: Vec<S>,
}

impl<S: Scalar> From<Linear<S>> for LinearSerde<S> {
    fn from(l: Linear<S>) -> Self {
        LinearSerde {
            weight: (0..l.out_dim)
                .map(|r| l.weight[r * l.in_dim..(r + 1) * l.in_dim].to_vec())
                .collect(),
            bias: l.bias,
        }
    }
}

impl<S: Scalar> TryFrom<LinearSerde<S>> for Linear<S> {
    type Error = Error;
    fn try_from(raw: LinearSerde<S>) -> Result<Self> {
        let out_dim = raw.weight.len();
        let in_dim = raw.weight.first().map_or(0, |r| r.len());
        if out_dim == 0 || in_dim == 0 || raw.bias.len() != out_dim {
            return Err(Error::invalid("linear layer", "empty or mismatched shapes"));
        }
        let mut weight = Vec::with_capacity(out_dim * in_dim);
        for row in &raw.weight {
            if row.len() != in_dim {
                return Err(Error::invalid("linear layer", "ragged weight rows"));
            }
            weight.extend_from_slice(row);
        }
        if weight.iter().chain(&raw.bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("linear layer"));
        }
        Ok(Linear {
            weight,
            bias: raw.bias,
            in_dim,
            out_dim,
        })
    }
}

impl<S: Scalar> Linear<S> {
    fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| S::of(rng.gen_range(-bound..bound)))
            .collect();
        let bias = (0..out_dim)
            .map(|_| S::of(rng.gen_range(-bound..bound)))
            .collect();
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: vec![S::zero(); in_dim * out_dim],
            bias: vec![S::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub(crate) fn push_params(&self, out: &mut Vec<S>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    pub(crate) fn load(&mut self, it: &mut impl Iterator<Item = S>) {
        for w in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *w = it.next().expect("flat parameter vector too short");
        }
    }
}

/// Stack of dense layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct Mlp<S: Scalar> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub(crate) fn push_params(&self, out: &mut Vec<S>) {
        for l in &self.layers {
            l.push_params(out);
        }
    }

    pub(crate) fn load(&mut self, it: &mut impl Iterator<Item = S>) {
        for l in &mut self.layers {
            l.load(it);
        }
    }
}

/// Query/key/value projections of one cross-attention direction, each
/// `d x d` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct CrossAttentionParams<S: Scalar> {
    pub query: Vec<S>,
    pub key: Vec<S>,
    pub value: Vec<S>,
    pub dim: usize,
}

impl<S: Scalar> CrossAttentionParams<S> {
    fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut mk = || -> Vec<S> {
            (0..dim * dim)
                .map(|_| S::of(rng.gen_range(-bound..bound)))
                .collect()
        };
        CrossAttentionParams {
            query: mk(),
            key: mk(),
            value: mk(),
            dim,
        }
    }

    pub(crate) fn push_params(&self, out: &mut Vec<S>) {
        out.extend_from_slice(&self.query);
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&self.value);
    }

    pub(crate) fn load(&mut self, it: &mut impl Iterator<Item = S>) {
        for w in self
            .query
            .iter_mut()
            .chain(self.key.iter_mut())
            .chain(self.value.iter_mut())
        {
            *w = it.next().expect("flat parameter vector too short");
        }
    }
}

/// The cross-object module: a single-head transformer or its MLP ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub enum CrossModule<S: Scalar> {
    Attention {
        a: CrossAttentionParams<S>,
        b: CrossAttentionParams<S>,
    },
    Mlp { a: Mlp<S>, b: Mlp<S> },
}

impl<S: Scalar> CrossModule<S> {
    pub(crate) fn push_params(&self, out: &mut Vec<S>) {
        match self {
            CrossModule::Attention { a, b } => {
                a.push_params(out);
                b.push_params(out);
            }
            CrossModule::Mlp { a, b } => {
                a.push_params(out);
                b.push_params(out);
            }
        }
    }

    pub(crate) fn load(&mut self, it: &mut impl Iterator<Item = S>) {
        match self {
            CrossModule::Attention { a, b } => {
                a.load(it);
                b.load(it);
            }
            CrossModule::Mlp { a, b } => {
                a.load(it);
                b.load(it);
            }
        }
    }
}

/// How correspondence weights are extracted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    /// Scaled query-key softmax from the cross-attention module.
    Attention,
    /// Softmax over raw inner products of cross-object embeddings.
    DotProduct,
    /// MLP in place of the transformer; weights fall back to dot products.
    MlpCross,
}

impl std::str::FromStr for WeightVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(WeightVariant::Attention),
            "dot_product" => Ok(WeightVariant::DotProduct),
            "mlp_cross" => Ok(WeightVariant::MlpCross),
            other => Err(Error::invalid("weight variant", other.to_string())),
        }
    }
}

/// Which object an operation applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectSide {
    A,
    B,
}

/// Model construction options.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub goal_context_dim: usize,
    pub weight_variant: WeightVariant,
    pub residuals_enabled: bool,
    pub weighted_svd_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            goal_context_dim: 0,
            weight_variant: WeightVariant::Attention,
            residuals_enabled: true,
            weighted_svd_enabled: true,
        }
    }
}

/// All learnable parameters plus the variant flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct TaxPoseModel<S: Scalar> {
    pub embed_dim: usize,
    pub goal_context_dim: usize,
    pub weight_variant: WeightVariant,
    pub residuals_enabled: bool,
    pub weighted_svd_enabled: bool,
    pub encoder_a: Mlp<S>,
    pub encoder_b: Mlp<S>,
    pub cross: CrossModule<S>,
    pub residual_head_a: Linear<S>,
    pub residual_head_b: Linear<S>,
    pub weight_head_a: Linear<S>,
    pub weight_head_b: Linear<S>,
}

impl<S: Scalar> TaxPoseModel<S> {
    /// Fresh model: encoder and attention weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, residual and importance heads
    /// zero so initial residuals vanish and initial weights are uniform.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let g = config.goal_context_dim;
        assert!(d >= 1, "embed_dim must be at least 1");
        let enc_dims = [6 + g, HIDDEN_WIDTH, HIDDEN_WIDTH, d];
        let encoder_a = Mlp::init(&enc_dims, rng);
        let encoder_b = Mlp::init(&enc_dims, rng);
        let cross = match config.weight_variant {
            WeightVariant::MlpCross => {
                let dims = [2 * d, HIDDEN_WIDTH, HIDDEN_WIDTH, d];
                CrossModule::Mlp {
                    a: Mlp::init(&dims, rng),
                    b: Mlp::init(&dims, rng),
                }
            }
            _ => CrossModule::Attention {
                a: CrossAttentionParams::init(d, rng),
                b: CrossAttentionParams::init(d, rng),
            },
        };
        TaxPoseModel {
            embed_dim: d,
            goal_context_dim: g,
            weight_variant: config.weight_variant,
            residuals_enabled: config.residuals_enabled,
            weighted_svd_enabled: config.weighted_svd_enabled,
            encoder_a,
            encoder_b,
            cross,
            residual_head_a: Linear::zeros(d, 3),
            residual_head_b: Linear::zeros(d, 3),
            weight_head_a: Linear::zeros(d, 1),
            weight_head_b: Linear::zeros(d, 1),
        }
    }

    /// All parameters in canonical order (encoders, cross module, heads).
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        self.encoder_a.push_params(&mut out);
        self.encoder_b.push_params(&mut out);
        self.cross.push_params(&mut out);
        self.residual_head_a.push_params(&mut out);
        self.residual_head_b.push_params(&mut out);
        self.weight_head_a.push_params(&mut out);
        self.weight_head_b.push_params(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.flatten().len()
    }

    /// Writes a flat parameter vector (in [`Self::flatten`] order) back.
    pub fn load_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        self.encoder_a.load(&mut it);
        self.encoder_b.load(&mut it);
        self.cross.load(&mut it);
        self.residual_head_a.load(&mut it);
        self.residual_head_b.load(&mut it);
        self.weight_head_a.load(&mut it);
        self.weight_head_b.load(&mut it);
        Ok(())
    }

    fn validate_goal(&self, goal: Option<&[S]>) -> Result<()> {
        let got = goal.map_or(0, |g| g.len());
        if got != self.goal_context_dim {
            return Err(Error::GoalContextMismatch {
                expected: self.goal_context_dim,
                got,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Lifted (tape-ready) mirror of the parameters.
// ---------------------------------------------------------------------------

pub(crate) struct LiftedLinear<T> {
    weight: Vec<T>,
    bias: Vec<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Real> LiftedLinear<T> {
    pub(crate) fn from<F: FnMut(T::Repr) -> T>(l: &Linear<T::Repr>, f: &mut F) -> Self {
        LiftedLinear {
            weight: l.weight.iter().map(|&w| f(w)).collect(),
            bias: l.bias.iter().map(|&b| f(b)).collect(),
            in_dim: l.in_dim,
            out_dim: l.out_dim,
        }
    }

    fn push_vars(&self, out: &mut Vec<T>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn row(&self, r: usize) -> &[T] {
        &self.weight[r * self.in_dim..(r + 1) * self.in_dim]
    }

    /// Forward from constant inputs (first layer of an encoder).
    fn forward_const(&self, ctx: T::Ctx, input: &[T::Repr]) -> Vec<T> {
        (0..self.out_dim)
            .map(|r| T::dot_const(ctx, self.row(r), input) + self.bias[r])
            .collect()
    }

    fn forward(&self, ctx: T::Ctx, input: &[T]) -> Vec<T> {
        (0..self.out_dim)
            .map(|r| T::dot(ctx, self.row(r), input) + self.bias[r])
            .collect()
    }
}

pub(crate) struct LiftedMlp<T> {
    layers: Vec<LiftedLinear<T>>,
}

/// Scales a feature row to unit root-mean-square. The encoders apply this
/// as a fixed output stage so attention logits start at a useful scale
/// regardless of depth or width.
pub(crate) fn rms_normalize<T: Real>(ctx: T::Ctx, row: &mut [T]) {
    let sq: Vec<T> = row.iter().map(|x| *x * *x).collect();
    let mean = T::sum(ctx, &sq) * T::lit(ctx, 1.0 / row.len() as f64);
    let inv = T::lit(ctx, 1.0) / (mean + T::lit(ctx, 1e-12)).sqrt();
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

impl<T: Real> LiftedMlp<T> {
    pub(crate) fn from<F: FnMut(T::Repr) -> T>(m: &Mlp<T::Repr>, f: &mut F) -> Self {
        LiftedMlp {
            layers: m.layers.iter().map(|l| LiftedLinear::from(l, f)).collect(),
        }
    }

    fn push_vars(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            l.push_vars(out);
        }
    }

    /// tanh between layers, linear output.
    pub(crate) fn forward_const(&self, ctx: T::Ctx, input: &[T::Repr]) -> Vec<T> {
        let mut x = self.layers[0].forward_const(ctx, input);
        for layer in &self.layers[1..] {
            for v in &mut x {
                *v = v.tanh();
            }
            x = layer.forward(ctx, &x);
        }
        x
    }

    /// Encoder entry point: the MLP with a fixed RMS normalization on the
    /// output row.
    pub(crate) fn encode_row(&self, ctx: T::Ctx, input: &[T::Repr]) -> Vec<T> {
        let mut x = self.forward_const(ctx, input);
        rms_normalize(ctx, &mut x);
        x
    }

    fn forward(&self, ctx: T::Ctx, input: &[T]) -> Vec<T> {
        let mut x = self.layers[0].forward(ctx, input);
        for layer in &self.layers[1..] {
            for v in &mut x {
                *v = v.tanh();
            }
            x = layer.forward(ctx, &x);
        }
        x
    }
}

pub(crate) struct LiftedAttention<T> {
    query: Vec<T>,
    key: Vec<T>,
    value: Vec<T>,
    dim: usize,
}

impl<T: Real> LiftedAttention<T> {
    fn from<F: FnMut(T::Repr) -> T>(p: &CrossAttentionParams<T::Repr>, f: &mut F) -> Self {
        LiftedAttention {
            query: p.query.iter().map(|&w| f(w)).collect(),
            key: p.key.iter().map(|&w| f(w)).collect(),
            value: p.value.iter().map(|&w| f(w)).collect(),
            dim: p.dim,
        }
    }

    fn push_vars(&self, out: &mut Vec<T>) {
        out.extend_from_slice(&self.query);
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&self.value);
    }

    fn project(&self, ctx: T::Ctx, mat: &[T], features: &[Vec<T>]) -> Vec<Vec<T>> {
        let d = self.dim;
        features
            .iter()
            .map(|f| {
                (0..d)
                    .map(|r| T::dot(ctx, &mat[r * d..(r + 1) * d], f))
                    .collect()
            })
            .collect()
    }
}

pub(crate) enum LiftedCross<T> {
    Attention {
        a: LiftedAttention<T>,
        b: LiftedAttention<T>,
    },
    Mlp {
        a: LiftedMlp<T>,
        b: LiftedMlp<T>,
    },
}

impl<T: Real> LiftedCross<T> {
    fn push_vars(&self, out: &mut Vec<T>) {
        match self {
            LiftedCross::Attention { a, b } => {
                a.push_vars(out);
                b.push_vars(out);
            }
            LiftedCross::Mlp { a, b } => {
                a.push_vars(out);
                b.push_vars(out);
            }
        }
    }
}

pub(crate) struct LiftedModel<T> {
    pub embed_dim: usize,
    pub goal_context_dim: usize,
    pub weight_variant: WeightVariant,
    pub residuals_enabled: bool,
    pub weighted_svd_enabled: bool,
    encoder_a: LiftedMlp<T>,
    encoder_b: LiftedMlp<T>,
    cross: LiftedCross<T>,
    residual_head_a: LiftedLinear<T>,
    residual_head_b: LiftedLinear<T>,
    weight_head_a: LiftedLinear<T>,
    weight_head_b: LiftedLinear<T>,
}

impl<T: Real> LiftedModel<T> {
    /// Mirrors the model with `f` applied to every parameter, visiting them
    /// in the same canonical order as [`TaxPoseModel::flatten`].
    pub(crate) fn from_model<F: FnMut(T::Repr) -> T>(
        model: &TaxPoseModel<T::Repr>,
        mut f: F,
    ) -> Self {
        let encoder_a = LiftedMlp::from(&model.encoder_a, &mut f);
        let encoder_b = LiftedMlp::from(&model.encoder_b, &mut f);
        let cross = match &model.cross {
            CrossModule::Attention { a, b } => LiftedCross::Attention {
                a: LiftedAttention::from(a, &mut f),
                b: LiftedAttention::from(b, &mut f),
            },
            CrossModule::Mlp { a, b } => LiftedCross::Mlp {
                a: LiftedMlp::from(a, &mut f),
                b: LiftedMlp::from(b, &mut f),
            },
        };
        LiftedModel {
            embed_dim: model.embed_dim,
            goal_context_dim: model.goal_context_dim,
            weight_variant: model.weight_variant,
            residuals_enabled: model.residuals_enabled,
            weighted_svd_enabled: model.weighted_svd_enabled,
            encoder_a,
            encoder_b,
            cross,
            residual_head_a: LiftedLinear::from(&model.residual_head_a, &mut f),
            residual_head_b: LiftedLinear::from(&model.residual_head_b, &mut f),
            weight_head_a: LiftedLinear::from(&model.weight_head_a, &mut f),
            weight_head_b: LiftedLinear::from(&model.weight_head_b, &mut f),
        }
    }

    /// Parameter variables in [`TaxPoseModel::flatten`] order.
    pub(crate) fn param_vars(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.encoder_a.push_vars(&mut out);
        self.encoder_b.push_vars(&mut out);
        self.cross.push_vars(&mut out);
        self.residual_head_a.push_vars(&mut out);
        self.residual_head_b.push_vars(&mut out);
        self.weight_head_a.push_vars(&mut out);
        self.weight_head_b.push_vars(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

/// Options for debugging the architecture itself.
#[derive(Clone, Copy, Debug, Default)]
#[doc(hidden)]
pub struct ForwardOptions {
    /// Skips zero-centering before the encoders, deliberately breaking
    /// translation invariance. Used as a negative control by the
    /// equivariance audit.
    pub disable_centering: bool,
}

/// Per-point encoder inputs: centered coordinates, k-nearest-neighbor mean
/// offset, optional goal one-hot. All plain values (they carry no gradient).
pub(crate) fn encoder_inputs<S: Scalar>(cloud: &[V3<S>], goal: Option<&[S]>, center: bool) -> Vec<Vec<S>> {
    let n = cloud.len();
    let mut mean = [S::zero(); 3];
    if center {
        let inv_n = S::one() / S::from_usize(n).unwrap();
        for p in cloud {
            for k in 0..3 {
                mean[k] = mean[k] + p[k];
            }
        }
        for k in mean.iter_mut() {
            *k = *k * inv_n;
        }
    }
    let centered: Vec<V3<S>> = cloud
        .iter()
        .map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]])
        .collect();

    let k_n = KNN_NEIGHBORS.min(n.saturating_sub(1));
    let mut inputs = Vec::with_capacity(n);
    let mut dist: Vec<(S, usize)> = Vec::with_capacity(n);
    for (i, pi) in centered.iter().enumerate() {
        let mut knn = [S::zero(); 3];
        if k_n > 0 {
            dist.clear();
            for (j, pj) in centered.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = (pj[0] - pi[0]) * (pj[0] - pi[0])
                    + (pj[1] - pi[1]) * (pj[1] - pi[1])
                    + (pj[2] - pi[2]) * (pj[2] - pi[2]);
                dist.push((d, j));
            }
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let inv_k = S::one() / S::from_usize(k_n).unwrap();
            for &(_, j) in dist.iter().take(k_n) {
                for k in 0..3 {
                    knn[k] = knn[k] + (centered[j][k] - pi[k]);
                }
            }
            for k in knn.iter_mut() {
                *k = *k * inv_k;
            }
        }
        let mut row = Vec::with_capacity(6 + goal.map_or(0, |g| g.len()));
        row.extend_from_slice(pi);
        row.extend_from_slice(&knn);
        if let Some(g) = goal {
            row.extend_from_slice(g);
        }
        inputs.push(row);
    }
    inputs
}

/// Numerically stable row softmax; the max is treated as a constant shift,
/// which leaves both the softmax and its gradient unchanged.
fn softmax_row<T: Real>(ctx: T::Ctx, logits: &[T]) -> Vec<T> {
    let mut max = logits[0].value();
    for l in &logits[1..] {
        if l.value() > max {
            max = l.value();
        }
    }
    let shift = T::lift(ctx, max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - shift).exp()).collect();
    let denom = T::sum(ctx, &exps);
    exps.into_iter().map(|e| e / denom).collect()
}

/// One direction of the cross module: returns `(phi_self, attention_rows)`.
/// `attention_rows` is present only for the transformer path.
#[allow(clippy::type_complexity)]
fn cross_direction<T: Real>(
    ctx: T::Ctx,
    cross: &LiftedCross<T>,
    side: ObjectSide,
    psi_self: &[Vec<T>],
    psi_other: &[Vec<T>],
) -> (Vec<Vec<T>>, Option<Vec<Vec<T>>>) {
    match cross {
        LiftedCross::Attention { a, b } => {
            let params = match side {
                ObjectSide::A => a,
                ObjectSide::B => b,
            };
            let d = params.dim;
            let scale = T::lit(ctx, 1.0 / (d as f64).sqrt());
            let queries = params.project(ctx, &params.query, psi_self);
            let keys = params.project(ctx, &params.key, psi_other);
            let values = params.project(ctx, &params.value, psi_other);
            let v_cols: Vec<Vec<T>> = (0..d)
                .map(|c| values.iter().map(|row| row[c]).collect())
                .collect();
            let mut phi = Vec::with_capacity(psi_self.len());
            let mut rows = Vec::with_capacity(psi_self.len());
            for (i, q) in queries.iter().enumerate() {
                let logits: Vec<T> = keys.iter().map(|k| T::dot(ctx, q, k) * scale).collect();
                let w = softmax_row(ctx, &logits);
                let mixed: Vec<T> = (0..d).map(|c| T::dot(ctx, &w, &v_cols[c])).collect();
                phi.push(
                    psi_self[i]
                        .iter()
                        .zip(&mixed)
                        .map(|(p, m)| *p + *m)
                        .collect(),
                );
                rows.push(w);
            }
            (phi, Some(rows))
        }
        LiftedCross::Mlp { a, b } => {
            let mlp = match side {
                ObjectSide::A => a,
                ObjectSide::B => b,
            };
            let d = psi_other[0].len();
            let inv = T::lit(ctx, 1.0 / psi_other.len() as f64);
            let pooled: Vec<T> = (0..d)
                .map(|c| {
                    let col: Vec<T> = psi_other.iter().map(|row| row[c]).collect();
                    T::sum(ctx, &col) * inv
                })
                .collect();
            let phi = psi_self
                .iter()
                .map(|p| {
                    let mut input = p.clone();
                    input.extend_from_slice(&pooled);
                    let out = mlp.forward(ctx, &input);
                    p.iter().zip(&out).map(|(x, y)| *x + *y).collect()
                })
                .collect();
            (phi, None)
        }
    }
}

fn dot_product_rows<T: Real>(
    ctx: T::Ctx,
    phi_self: &[Vec<T>],
    phi_other: &[Vec<T>],
) -> Vec<Vec<T>> {
    phi_self
        .iter()
        .map(|f| {
            let logits: Vec<T> = phi_other.iter().map(|g| T::dot(ctx, f, g)).collect();
            softmax_row(ctx, &logits)
        })
        .collect()
}

/// All intermediates of one forward pass, in generic scalar form.
pub(crate) struct ForwardParts<T: Real> {
    pub weights_ab: Vec<Vec<T>>,
    pub weights_ba: Vec<Vec<T>>,
    pub virtual_a: Vec<V3<T>>,
    pub virtual_b: Vec<V3<T>>,
    pub residual_a: Vec<V3<T>>,
    pub residual_b: Vec<V3<T>>,
    pub corrected_a: Vec<V3<T>>,
    pub corrected_b: Vec<V3<T>>,
    pub alpha_a: Vec<T>,
    pub alpha_b: Vec<T>,
    pub solution: SolutionParts<T>,
}

pub(crate) fn forward_parts<T: Real>(
    ctx: T::Ctx,
    model: &LiftedModel<T>,
    cloud_a: &[V3<T::Repr>],
    cloud_b: &[V3<T::Repr>],
    goal: Option<&[T::Repr]>,
    opts: &ForwardOptions,
) -> Result<ForwardParts<T>> {
    let center = !opts.disable_centering;
    let inputs_a = encoder_inputs(cloud_a, goal, center);
    let inputs_b = encoder_inputs(cloud_b, goal, center);

    let psi_a: Vec<Vec<T>> = inputs_a
        .iter()
        .map(|row| model.encoder_a.encode_row(ctx, row))
        .collect();
    let psi_b: Vec<Vec<T>> = inputs_b
        .iter()
        .map(|row| model.encoder_b.encode_row(ctx, row))
        .collect();

    let (phi_a, attn_ab) = cross_direction(ctx, &model.cross, ObjectSide::A, &psi_a, &psi_b);
    let (phi_b, attn_ba) = cross_direction(ctx, &model.cross, ObjectSide::B, &psi_b, &psi_a);

    let (weights_ab, weights_ba) = match model.weight_variant {
        WeightVariant::Attention => (
            attn_ab.expect("attention variant provides weights"),
            attn_ba.expect("attention variant provides weights"),
        ),
        WeightVariant::DotProduct | WeightVariant::MlpCross => (
            dot_product_rows(ctx, &phi_a, &phi_b),
            dot_product_rows(ctx, &phi_b, &phi_a),
        ),
    };

    // Virtual points are convex combinations of the raw (uncentered) other
    // cloud, which is what makes the estimate translation-equivariant.
    let columns =
        |cloud: &[V3<T::Repr>], k: usize| -> Vec<T::Repr> { cloud.iter().map(|p| p[k]).collect() };
    let cols_b: [Vec<T::Repr>; 3] = [
        columns(cloud_b, 0),
        columns(cloud_b, 1),
        columns(cloud_b, 2),
    ];
    let cols_a: [Vec<T::Repr>; 3] = [
        columns(cloud_a, 0),
        columns(cloud_a, 1),
        columns(cloud_a, 2),
    ];
    let virtual_a: Vec<V3<T>> = weights_ab
        .iter()
        .map(|w| {
            [
                T::dot_const(ctx, w, &cols_b[0]),
                T::dot_const(ctx, w, &cols_b[1]),
                T::dot_const(ctx, w, &cols_b[2]),
            ]
        })
        .collect();
    let virtual_b: Vec<V3<T>> = weights_ba
        .iter()
        .map(|w| {
            [
                T::dot_const(ctx, w, &cols_a[0]),
                T::dot_const(ctx, w, &cols_a[1]),
                T::dot_const(ctx, w, &cols_a[2]),
            ]
        })
        .collect();

    let zero = T::lit(ctx, 0.0);
    let residual_of = |head: &LiftedLinear<T>, phi: &[Vec<T>]| -> Vec<V3<T>> {
        if model.residuals_enabled {
            phi.iter()
                .map(|f| {
                    let out = head.forward(ctx, f);
                    [out[0], out[1], out[2]]
                })
                .collect()
        } else {
            vec![[zero; 3]; phi.len()]
        }
    };
    let residual_a = residual_of(&model.residual_head_a, &phi_a);
    let residual_b = residual_of(&model.residual_head_b, &phi_b);

    let corrected_a: Vec<V3<T>> = virtual_a
        .iter()
        .zip(&residual_a)
        .map(|(v, r)| crate::mat3::v_add(*v, *r))
        .collect();
    let corrected_b: Vec<V3<T>> = virtual_b
        .iter()
        .zip(&residual_b)
        .map(|(v, r)| crate::mat3::v_add(*v, *r))
        .collect();

    let alpha_of = |head: &LiftedLinear<T>, phi: &[Vec<T>]| -> Vec<T> {
        if model.weighted_svd_enabled {
            let scores: Vec<T> = phi.iter().map(|f| head.forward(ctx, f)[0]).collect();
            softmax_row(ctx, &scores)
        } else {
            // unweighted ablation: exactly 1/N
            vec![T::lit(ctx, 1.0 / phi.len() as f64); phi.len()]
        }
    };
    let alpha_a = alpha_of(&model.weight_head_a, &phi_a);
    let alpha_b = alpha_of(&model.weight_head_b, &phi_b);

    let lift_points = |cloud: &[V3<T::Repr>]| -> Vec<V3<T>> {
        cloud
            .iter()
            .map(|p| [T::lift(ctx, p[0]), T::lift(ctx, p[1]), T::lift(ctx, p[2])])
            .collect()
    };
    let src_a = lift_points(cloud_a);
    let src_b = lift_points(cloud_b);
    let view = CorrView {
        source_a: &src_a,
        target_a: &corrected_a,
        source_b: &src_b,
        target_b: &corrected_b,
        weights_a: &alpha_a,
        weights_b: &alpha_b,
    };
    let solution = solve_weighted_parts(ctx, &view)?;

    Ok(ForwardParts {
        weights_ab,
        weights_ba,
        virtual_a,
        virtual_b,
        residual_a,
        residual_b,
        corrected_a,
        corrected_b,
        alpha_a,
        alpha_b,
        solution,
    })
}

/// The estimated cross-pose plus every intermediate that produced it.
#[derive(Clone, Debug)]
pub struct CrossPoseEstimate<S: Scalar> {
    pub transform: RigidTransform<S>,
    pub virtual_a: PointCloud<S>,
    pub virtual_b: PointCloud<S>,
    pub residual_a: Vec<Vec3<S>>,
    pub residual_b: Vec<Vec3<S>>,
    pub corrected_a: PointCloud<S>,
    pub corrected_b: PointCloud<S>,
    pub weights_a: Vec<S>,
    pub weights_b: Vec<S>,
}

pub(crate) fn cloud_arrays<S: Scalar>(cloud: &PointCloud<S>) -> Vec<V3<S>> {
    cloud.iter().map(|p| p.to_array()).collect()
}

fn arrays_cloud<S: Scalar>(arrays: Vec<V3<S>>) -> PointCloud<S> {
    PointCloud::from_vec_unchecked(arrays.into_iter().map(Vec3::from_array).collect())
}

/// End-to-end forward pass: encode, cross-attend, correspond, correct,
/// weigh, and solve. Propagates [`Error::DegenerateCorrespondences`] from
/// the solver.
pub fn forward<S: Scalar>(
    model: &TaxPoseModel<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
    goal: Option<&[S]>,
) -> Result<CrossPoseEstimate<S>> {
    forward_with_options(model, p_a, p_b, goal, &ForwardOptions::default())
}

#[doc(hidden)]
pub fn forward_with_options<S: Scalar>(
    model: &TaxPoseModel<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
    goal: Option<&[S]>,
    opts: &ForwardOptions,
) -> Result<CrossPoseEstimate<S>> {
    model.validate_goal(goal)?;
    let lifted = LiftedModel::<S>::from_model(model, |w| w);
    let parts = forward_parts::<S>(
        (),
        &lifted,
        &cloud_arrays(p_a),
        &cloud_arrays(p_b),
        goal,
        opts,
    )?;
    let rotation = RotationMatrix::from_matrix_unchecked(parts.solution.rotation);
    Ok(CrossPoseEstimate {
        transform: RigidTransform::new(rotation, Vec3::from_array(parts.solution.translation)),
        virtual_a: arrays_cloud(parts.virtual_a),
        virtual_b: arrays_cloud(parts.virtual_b),
        residual_a: parts.residual_a.into_iter().map(Vec3::from_array).collect(),
        residual_b: parts.residual_b.into_iter().map(Vec3::from_array).collect(),
        corrected_a: arrays_cloud(parts.corrected_a),
        corrected_b: arrays_cloud(parts.corrected_b),
        weights_a: parts.alpha_a,
        weights_b: parts.alpha_b,
    })
}

// ---------------------------------------------------------------------------
// Standalone operations; the forward pass is built from the same pieces.
// ---------------------------------------------------------------------------

/// Pre-attention features of one object: the per-point encoder applied to
/// the centered cloud (plus optional goal one-hot). Translating the cloud
/// leaves the output unchanged.
pub fn encode<S: Scalar>(
    model: &TaxPoseModel<S>,
    side: ObjectSide,
    cloud: &PointCloud<S>,
    goal: Option<&[S]>,
) -> Result<FeatureMatrix<S>> {
    model.validate_goal(goal)?;
    let encoder = match side {
        ObjectSide::A => &model.encoder_a,
        ObjectSide::B => &model.encoder_b,
    };
    let lifted = LiftedMlp::<S>::from(encoder, &mut |w| w);
    let inputs = encoder_inputs(&cloud_arrays(cloud), goal, true);
    let rows: Vec<Vec<S>> = inputs
        .iter()
        .map(|row| lifted.encode_row((), row))
        .collect();
    FeatureMatrix::from_rows(rows)
}

/// Scaled query-key softmax: row `i` is `softmax(keys * q_i / sqrt(d))`.
pub fn attention_weights<S: Scalar>(
    queries: &FeatureMatrix<S>,
    keys: &FeatureMatrix<S>,
) -> Result<AttentionWeights<S>> {
    if queries.cols() != keys.cols() {
        return Err(Error::LengthMismatch(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let scale = S::one() / S::from_usize(queries.cols()).unwrap().sqrt();
    let rows: Vec<Vec<S>> = queries
        .iter_rows()
        .map(|q| {
            let logits: Vec<S> = keys
                .iter_rows()
                .map(|k| <S as Real>::dot((), q, k) * scale)
                .collect();
            softmax_row::<S>((), &logits)
        })
        .collect();
    AttentionWeights::from_rows(rows)
}

/// Softmax over raw embedding inner products (no scaling, no projections).
pub fn dot_product_weights<S: Scalar>(
    phi_self: &FeatureMatrix<S>,
    phi_other: &FeatureMatrix<S>,
) -> Result<AttentionWeights<S>> {
    if phi_self.cols() != phi_other.cols() {
        return Err(Error::LengthMismatch(format!(
            "self dim {} vs other dim {}",
            phi_self.cols(),
            phi_other.cols()
        )));
    }
    let rows: Vec<Vec<S>> = phi_self
        .iter_rows()
        .map(|f| {
            let logits: Vec<S> = phi_other
                .iter_rows()
                .map(|g| <S as Real>::dot((), f, g))
                .collect();
            softmax_row::<S>((), &logits)
        })
        .collect();
    AttentionWeights::from_rows(rows)
}

/// Convex combinations of the opposing cloud under the given weights; every
/// output point lies inside the convex hull of `other_cloud`.
pub fn virtual_points<S: Scalar>(
    w: &AttentionWeights<S>,
    other_cloud: &PointCloud<S>,
) -> Result<PointCloud<S>> {
    if w.n_other() != other_cloud.len() {
        return Err(Error::LengthMismatch(format!(
            "{} weight columns vs {} points",
            w.n_other(),
            other_cloud.len()
        )));
    }
    let points = (0..w.n_self())
        .map(|i| {
            let row = w.row(i);
            let mut acc = Vec3::zero();
            for (wij, p) in row.iter().zip(other_cloud.iter()) {
                acc = acc.add(p.scale(*wij));
            }
            acc
        })
        .collect();
    PointCloud::new(points)
}

/// Per-point residual vectors from a `d -> 3` head; a function of the
/// features only, hence translation-invariant.
pub fn residuals<S: Scalar>(head: &Linear<S>, phi: &FeatureMatrix<S>) -> Result<Vec<Vec3<S>>> {
    if head.in_dim() != phi.cols() || head.out_dim() != 3 {
        return Err(Error::LengthMismatch(format!(
            "residual head {}x{} vs features of dim {}",
            head.out_dim(),
            head.in_dim(),
            phi.cols()
        )));
    }
    let lifted = LiftedLinear::<S>::from(head, &mut |w| w);
    Ok(phi
        .iter_rows()
        .map(|f| {
            let out = lifted.forward((), f);
            Vec3::new(out[0], out[1], out[2])
        })
        .collect())
}

/// Importance weights: softmax over per-point scores from a `d -> 1` head.
/// Strictly positive, sums to 1.
pub fn importance_weights<S: Scalar>(head: &Linear<S>, phi: &FeatureMatrix<S>) -> Result<Vec<S>> {
    if head.in_dim() != phi.cols() || head.out_dim() != 1 {
        return Err(Error::LengthMismatch(format!(
            "weight head {}x{} vs features of dim {}",
            head.out_dim(),
            head.in_dim(),
            phi.cols()
        )));
    }
    let lifted = LiftedLinear::<S>::from(head, &mut |w| w);
    let scores: Vec<S> = phi.iter_rows().map(|f| lifted.forward((), f)[0]).collect();
    Ok(softmax_row::<S>((), &scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// Power-of-two sized cloud on a dyadic grid; centering is then exact.
    fn dyadic_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        let step = (2.0f64).powi(-12);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-4096..4096) as f64 * step,
                        rng.gen_range(-4096..4096) as f64 * step,
                        rng.gen_range(-4096..4096) as f64 * step,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn small_model(rng: &mut ChaCha8Rng, variant: WeightVariant, d: usize) -> TaxPoseModel<f64> {
        TaxPoseModel::init(
            &ModelConfig {
                embed_dim: d,
                weight_variant: variant,
                ..ModelConfig::default()
            },
            rng,
        )
    }

    #[test]
    fn encode_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = small_model(&mut rng, WeightVariant::Attention, 8);

        // exact on the dyadic grid with power-of-two N
        let cloud = dyadic_cloud(&mut rng, 16);
        let t = Vec3::new(12.5, -3.25, 100.0);
        let shifted = RigidTransform::from_translation(t).apply(&cloud);
        let f0 = encode(&model, ObjectSide::A, &cloud, None).unwrap();
        let f1 = encode(&model, ObjectSide::A, &shifted, None).unwrap();
        assert_eq!(f0, f1);

        // within rounding for arbitrary inputs
        let cloud = random_cloud(&mut rng, 13);
        let t = Vec3::new(7.1, 0.33, -2.9);
        let shifted = RigidTransform::from_translation(t).apply(&cloud);
        let f0 = encode(&model, ObjectSide::A, &cloud, None).unwrap();
        let f1 = encode(&model, ObjectSide::A, &shifted, None).unwrap();
        for i in 0..f0.rows() {
            for (a, b) in f0.row(i).iter().zip(f1.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_shape_and_goal_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = TaxPoseModel::init(
            &ModelConfig {
                embed_dim: 8,
                goal_context_dim: 4,
                ..ModelConfig::default()
            },
            &mut rng,
        );
        let cloud = random_cloud(&mut rng, 9);
        let goal0 = [1.0, 0.0, 0.0, 0.0];
        let goal1 = [0.0, 1.0, 0.0, 0.0];
        let f0 = encode(&model, ObjectSide::A, &cloud, Some(&goal0)).unwrap();
        assert_eq!(f0.rows(), 9);
        assert_eq!(f0.cols(), 8);
        let f1 = encode(&model, ObjectSide::A, &cloud, Some(&goal1)).unwrap();
        assert_ne!(f0, f1, "different goals must condition the features");

        match encode(&model, ObjectSide::A, &cloud, Some(&[1.0])) {
            Err(Error::GoalContextMismatch { expected: 4, got: 1 }) => {}
            other => panic!("expected GoalContextMismatch, got {other:?}"),
        }
        match encode(&model, ObjectSide::A, &cloud, None) {
            Err(Error::GoalContextMismatch { expected: 4, got: 0 }) => {}
            other => panic!("expected GoalContextMismatch, got {other:?}"),
        }
    }

    fn naive_softmax(logits: &[f64]) -> Vec<f64> {
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / denom).collect()
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn attention_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        // single key: every row is [1]
        let q = random_features(&mut rng, 5, 4);
        let k = random_features(&mut rng, 1, 4);
        let w = attention_weights(&q, &k).unwrap();
        for i in 0..5 {
            assert_eq!(w.row(i), &[1.0]);
        }

        // identical keys: uniform rows
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = FeatureMatrix::from_rows(vec![row.clone(); 6]).unwrap();
        let w = attention_weights(&q, &k).unwrap();
        for i in 0..5 {
            for &x in w.row(i) {
                assert!((x - 1.0 / 6.0).abs() < 1e-15);
            }
        }

        // brute-force oracle
        let q = random_features(&mut rng, 7, 5);
        let k = random_features(&mut rng, 9, 5);
        let w = attention_weights(&q, &k).unwrap();
        let scale = 1.0 / (5.0f64).sqrt();
        for i in 0..7 {
            let logits: Vec<f64> = (0..9)
                .map(|j| {
                    let mut acc = 0.0;
                    for c in 0..5 {
                        acc += q.row(i)[c] * k.row(j)[c];
                    }
                    acc * scale
                })
                .collect();
            let expect = naive_softmax(&logits);
            for (a, b) in w.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_product_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        // matching orthonormal rows concentrate on the match
        let eye = FeatureMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let w = dot_product_weights(&eye, &eye).unwrap();
        for i in 0..3 {
            let row = w.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, i);
        }

        // all-zero embeddings: uniform
        let z = FeatureMatrix::from_rows(vec![vec![0.0; 3]; 4]).unwrap();
        let w = dot_product_weights(&z, &z).unwrap();
        for i in 0..4 {
            for &x in w.row(i) {
                assert_eq!(x, 0.25);
            }
        }

        // brute-force oracle
        let a = random_features(&mut rng, 6, 4);
        let b = random_features(&mut rng, 8, 4);
        let w = dot_product_weights(&a, &b).unwrap();
        for i in 0..6 {
            let logits: Vec<f64> = (0..8)
                .map(|j| {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        acc += a.row(i)[c] * b.row(j)[c];
                    }
                    acc
                })
                .collect();
            let expect = naive_softmax(&logits);
            for (x, y) in w.row(i).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn virtual_point_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let cloud = random_cloud(&mut rng, 7);

        let uniform =
            AttentionWeights::from_rows(vec![vec![1.0 / 7.0; 7]; 3]).unwrap();
        let v = virtual_points(&uniform, &cloud).unwrap();
        let c = crate::geometry::centroid(&cloud);
        for p in v.iter() {
            assert!(p.sub(c).norm() < 1e-14);
        }

        let mut onehot = vec![vec![0.0; 7]; 2];
        onehot[0][3] = 1.0;
        onehot[1][5] = 1.0;
        let v = virtual_points(&AttentionWeights::from_rows(onehot).unwrap(), &cloud).unwrap();
        assert_eq!(v.points()[0], cloud.points()[3]);
        assert_eq!(v.points()[1], cloud.points()[5]);

        // every output is the recorded convex combination
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let raw: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let w = AttentionWeights::from_rows(rows.clone()).unwrap();
            let v = virtual_points(&w, &cloud).unwrap();
            for (i, p) in v.iter().enumerate() {
                let mut manual = Vec3::zero();
                for (j, q) in cloud.iter().enumerate() {
                    manual = manual.add(q.scale(rows[i][j]));
                }
                assert!(p.sub(manual).norm() < 1e-15);
                assert!(rows[i].iter().all(|&x| x >= 0.0));
                assert!((rows[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residuals_zero_init_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = small_model(&mut rng, WeightVariant::Attention, 8);
        let cloud = dyadic_cloud(&mut rng, 8);
        let phi = encode(&model, ObjectSide::A, &cloud, None).unwrap();
        // zero-initialized head: all residuals vanish, corrected == virtual
        let r = residuals(&model.residual_head_a, &phi).unwrap();
        assert!(r.iter().all(|v| v.norm() == 0.0));

        // translation invariance flows through the features bit-for-bit
        let t = Vec3::new(-8.0, 0.5, 3.75);
        let shifted = RigidTransform::from_translation(t).apply(&cloud);
        let phi_t = encode(&model, ObjectSide::A, &shifted, None).unwrap();
        let mut head = model.residual_head_a.clone();
        let n = head.weight.len();
        for (k, w) in head.weight.iter_mut().enumerate() {
            *w = (k as f64 / n as f64) - 0.3;
        }
        let r0 = residuals(&head, &phi).unwrap();
        let r1 = residuals(&head, &phi_t).unwrap();
        assert_eq!(r0, r1);
    }

    #[test]
    fn residual_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d = 5;
        let feats: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut head: Linear<f64> = Linear::zeros(d, 3);
        for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
            *w = rng.gen_range(-0.5..0.5);
        }

        // scalar loss: sum of squared residual components
        let eval = |head: &Linear<f64>| -> f64 {
            let lifted = LiftedLinear::<f64>::from(head, &mut |w| w);
            feats
                .iter()
                .map(|f| lifted.forward((), f).iter().map(|x| x * x).sum::<f64>())
                .sum()
        };

        let tape = Tape::<f64>::new();
        let mut params = Vec::new();
        let lifted = LiftedLinear::from(&head, &mut |w| {
            let v = tape.leaf(w);
            params.push(v);
            v
        });
        let terms: Vec<_> = feats
            .iter()
            .flat_map(|f| {
                let row: Vec<f64> = f.clone();
                lifted
                    .forward_const(&tape, &row)
                    .into_iter()
                    .map(|x| x * x)
                    .collect::<Vec<_>>()
            })
            .collect();
        let loss = crate::autodiff::Var::sum(&tape, &terms);
        let grads = tape.backward(loss);

        let flat: Vec<f64> = {
            let mut out = Vec::new();
            head.push_params(&mut out);
            out
        };
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            hi[k] += h;
            lo[k] -= h;
            let mut head_hi = head.clone();
            let mut head_lo = head.clone();
            head_hi.load(&mut hi.into_iter());
            head_lo.load(&mut lo.into_iter());
            let fd = (eval(&head_hi) - eval(&head_lo)) / (2.0 * h);
            let an = grads.get(params[k]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {k}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn importance_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        // zero head: constant scores, exactly uniform 1/N
        let phi = random_features(&mut rng, 6, 4);
        let head: Linear<f64> = Linear::zeros(4, 1);
        let w = importance_weights(&head, &phi).unwrap();
        for &x in &w {
            assert_eq!(x, 1.0 / 6.0);
        }

        // single point
        let phi1 = random_features(&mut rng, 1, 4);
        assert_eq!(importance_weights(&head, &phi1).unwrap(), vec![1.0]);

        // brute-force oracle with a nonzero head
        let mut head: Linear<f64> = Linear::zeros(4, 1);
        for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
            *w = rng.gen_range(-1.0..1.0);
        }
        let w = importance_weights(&head, &phi).unwrap();
        let scores: Vec<f64> = phi
            .iter_rows()
            .map(|f| {
                let mut acc = head.bias[0];
                for (c, x) in f.iter().enumerate() {
                    acc += head.weight[c] * x;
                }
                acc
            })
            .collect();
        let expect = naive_softmax(&scores);
        for (a, b) in w.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a > 0.0);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let model = small_model(&mut rng, WeightVariant::Attention, 8);
        let pa = random_cloud(&mut rng, 10);
        let pb = random_cloud(&mut rng, 12);
        let e1 = forward(&model, &pa, &pb, None).unwrap();
        let e2 = forward(&model, &pa, &pb, None).unwrap();
        assert_eq!(e1.transform, e2.transform);
        assert_eq!(e1.corrected_a, e2.corrected_a);
        assert_eq!(e1.weights_b, e2.weights_b);
    }

    #[test]
    fn forward_translational_equivariance_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for variant in [
            WeightVariant::Attention,
            WeightVariant::DotProduct,
            WeightVariant::MlpCross,
        ] {
            let model = small_model(&mut rng, variant, 8);
            let pa = random_cloud(&mut rng, 10);
            let pb = random_cloud(&mut rng, 11);
            let base = forward(&model, &pa, &pb, None).unwrap();
            for _ in 0..5 {
                let ta = Vec3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                );
                let tb = Vec3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                );
                let moved = forward(
                    &model,
                    &RigidTransform::from_translation(ta).apply(&pa),
                    &RigidTransform::from_translation(tb).apply(&pb),
                    None,
                )
                .unwrap();
                assert!(
                    moved
                        .transform
                        .rotation
                        .frobenius_distance(&base.transform.rotation)
                        < 1e-9,
                    "{variant:?}: rotation changed under translation"
                );
                let expected_t = base
                    .transform
                    .translation
                    .add(tb)
                    .sub(base.transform.rotation.mul_vec(ta));
                assert!(
                    moved.transform.translation.sub(expected_t).norm() < 1e-9,
                    "{variant:?}: translation not equivariant"
                );
            }
        }
    }

    #[test]
    fn attention_equals_dot_product_at_dim_one_with_identity_projections() {
        // with identity Q/K at d = 1 the 1/sqrt(d) scaling is 1, so the
        // attention softmax and the raw dot-product softmax see identical
        // logits and produce bit-identical rows
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let phi_self = random_features(&mut rng, 6, 1);
        let phi_other = random_features(&mut rng, 8, 1);
        let w_attn = attention_weights(&phi_self, &phi_other).unwrap();
        let w_dot = dot_product_weights(&phi_self, &phi_other).unwrap();
        assert_eq!(w_attn, w_dot);

        // at d = 4 the relation is the explicit 1/sqrt(d) logit scaling:
        // feeding the dot-product path features shrunk by d^(1/4) on both
        // sides reproduces the attention rows
        let q = random_features(&mut rng, 5, 4);
        let k = random_features(&mut rng, 7, 4);
        let w_attn = attention_weights(&q, &k).unwrap();
        let shrink = |m: &FeatureMatrix<f64>| {
            FeatureMatrix::from_rows(
                (0..m.rows())
                    .map(|i| m.row(i).iter().map(|x| x / 4.0f64.powf(0.25)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let w_dot = dot_product_weights(&shrink(&q), &shrink(&k)).unwrap();
        for i in 0..5 {
            for (a, b) in w_attn.row(i).iter().zip(w_dot.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residuals_disabled_keeps_corrected_equal_to_virtual() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut model = small_model(&mut rng, WeightVariant::Attention, 8);
        model.residuals_enabled = false;
        // give the (unused) head nonzero weights to prove the flag wins
        for w in model.residual_head_a.weight.iter_mut() {
            *w = 0.7;
        }
        let pa = random_cloud(&mut rng, 9);
        let pb = random_cloud(&mut rng, 9);
        let est = forward(&model, &pa, &pb, None).unwrap();
        assert_eq!(est.corrected_a, est.virtual_a);
        assert_eq!(est.corrected_b, est.virtual_b);
        assert!(est.residual_a.iter().all(|r| r.norm() == 0.0));
    }

    #[test]
    fn unweighted_svd_flag_gives_exact_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut model = small_model(&mut rng, WeightVariant::Attention, 8);
        model.weighted_svd_enabled = false;
        for w in model.weight_head_a.weight.iter_mut() {
            *w = 1.3;
        }
        let pa = random_cloud(&mut rng, 10);
        let pb = random_cloud(&mut rng, 5);
        let est = forward(&model, &pa, &pb, None).unwrap();
        assert!(est.weights_a.iter().all(|&w| w == 1.0 / 10.0));
        assert!(est.weights_b.iter().all(|&w| w == 1.0 / 5.0));
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for variant in [WeightVariant::Attention, WeightVariant::MlpCross] {
            let model = small_model(&mut rng, variant, 6);
            let flat = model.flatten();
            assert_eq!(flat.len(), model.param_count());
            let mut other = small_model(&mut rng, variant, 6);
            other.load_flat(&flat).unwrap();
            assert_eq!(model, other);
        }
    }

    #[test]
    fn attention_weight_validation() {
        assert!(AttentionWeights::from_rows(vec![vec![0.5, 0.6]]).is_err());
        assert!(AttentionWeights::from_rows(vec![vec![-0.1, 1.1]]).is_err());
        assert!(AttentionWeights::from_rows(vec![vec![0.25; 4]]).is_ok());
    }
}
