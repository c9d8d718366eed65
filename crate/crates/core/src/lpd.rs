//! Unrolled learned reconstruction schemes.
//!
//! Every learned proximal is a residual block `Id + W ∘ A ∘ W ∘ A ∘ W` of
//! 3×3 convolutions and PReLUs. The identity carries only the persisted
//! state channels (the first `n` input channels); operator results and data
//! enter the offset network alone.
//!
//! Role conventions: primal channel 0 is `f⁽¹⁾` (the point of the adjoint
//! derivative and the returned image), primal channel 1 is `f⁽²⁾` (where the
//! forward operator is evaluated), dual channel 0 is `h⁽¹⁾`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::fbp::{Fbp, FbpError, Filter};
use crate::operator::{
    grid_len, power_method_norm, CallCounts, Counted, ForwardOperator, Linear, Scaled,
};
use crate::phantom::{read_tensor, read_tensor_header, write_tensor, TnsrError};
use crate::projector::{BeerLambert, Geometry, Image, OpMode, ProjectorError, RayTransform, Sinogram};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{derive_seed, xavier_init};
use crate::variational::{
    divergence_into, gradient_into, project_ball_in_place, prox_l2_conjugate_in_place, PdhgParams,
};

/// Initial PReLU coefficient; with `x < 0 ↦ −c·x` this is a leaky slope of 0.01.
pub const PRELU_INIT: f64 = -0.01;
const NORM_ITERATIONS: usize = 50;

#[derive(Debug, Error)]
pub enum LpdError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Fbp(#[from] FbpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tnsr(#[from] TnsrError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 2], got: [usize; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LearnedPrimalDual,
    LearnedPdhg,
    LearnedPrimal,
    ResidualDenoiser,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::LearnedPrimalDual,
        ModelKind::LearnedPdhg,
        ModelKind::LearnedPrimal,
        ModelKind::ResidualDenoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LearnedPrimalDual => "learned-primal-dual",
            ModelKind::LearnedPdhg => "learned-pdhg",
            ModelKind::LearnedPrimal => "learned-primal",
            ModelKind::ResidualDenoiser => "residual-denoiser",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned-primal-dual" | "lpd" => Ok(ModelKind::LearnedPrimalDual),
            "learned-pdhg" => Ok(ModelKind::LearnedPdhg),
            "learned-primal" => Ok(ModelKind::LearnedPrimal),
            "residual-denoiser" | "fbp-residual" => Ok(ModelKind::ResidualDenoiser),
            _ => Err(format!(
                "unknown model {s:?} (expected learned-primal-dual, learned-pdhg, learned-primal or residual-denoiser)"
            )),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Zero,
    PseudoInverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpdConfig {
    pub n_primal: usize,
    pub n_dual: usize,
    /// Unrolled iterations `I`.
    pub iterations: usize,
    /// Width of both hidden layers of every proximal block.
    pub hidden: usize,
    pub op_mode: OpMode,
    pub init_mode: InitMode,
    pub share_weights: bool,
    /// Divide a linear forward operator (and the data) by its norm.
    pub normalize_operator: bool,
}

impl Default for LpdConfig {
    fn default() -> Self {
        Self {
            n_primal: 5,
            n_dual: 5,
            iterations: 10,
            hidden: 32,
            op_mode: OpMode::Linear,
            init_mode: InitMode::Zero,
            share_weights: false,
            normalize_operator: true,
        }
    }
}

impl LpdConfig {
    pub fn validate(&self, kind: ModelKind) -> Result<(), LpdError> {
        let bad = |m: String| Err(LpdError::Config(m));
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        match kind {
            ModelKind::LearnedPdhg => {
                if self.n_primal != 1 || self.n_dual != 1 {
                    return bad(format!(
                        "learned PDHG keeps one primal and one dual channel, got {} and {}",
                        self.n_primal, self.n_dual
                    ));
                }
            }
            _ => {
                if self.n_primal == 0 || self.n_dual == 0 {
                    return bad("channel counts must be positive".into());
                }
            }
        }
        if kind == ModelKind::ResidualDenoiser && self.init_mode != InitMode::PseudoInverse {
            return bad("the residual denoiser starts from the pseudo-inverse".into());
        }
        Ok(())
    }

    /// Channel plan of one primal or dual block: `(inputs, hidden, outputs)`.
    pub fn primal_plan(&self, kind: ModelKind) -> [usize; 3] {
        match kind {
            ModelKind::LearnedPdhg => [1, self.hidden, 1],
            ModelKind::ResidualDenoiser => [self.n_primal, self.hidden, self.n_primal],
            _ => [self.n_primal + 1, self.hidden, self.n_primal],
        }
    }

    pub fn dual_plan(&self, kind: ModelKind) -> Option<[usize; 3]> {
        match kind {
            ModelKind::LearnedPrimalDual => Some([self.n_dual + 2, self.hidden, self.n_dual]),
            ModelKind::LearnedPdhg => Some([2, self.hidden, 1]),
            _ => None,
        }
    }

    fn blocks(&self, kind: ModelKind) -> usize {
        if kind == ModelKind::LearnedPdhg || self.share_weights {
            1
        } else {
            self.iterations
        }
    }
}

fn block_len([cin, hidden, cout]: [usize; 3]) -> usize {
    cin * hidden * 9 + hidden + hidden + hidden * hidden * 9 + hidden + hidden + hidden * cout * 9 + cout
}

/// Parameter count implied by the channel plan.
pub fn parameter_count(kind: ModelKind, config: &LpdConfig) -> usize {
    let per_block = block_len(config.primal_plan(kind)) + config.dual_plan(kind).map_or(0, block_len);
    let scalars = if kind == ModelKind::LearnedPdhg { 3 } else { 0 };
    config.blocks(kind) * per_block + scalars
}

fn block_layout(prefix: &str, [cin, hidden, cout]: [usize; 3], out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{prefix}.conv1.weight"), vec![hidden, cin, 3, 3]));
    out.push((format!("{prefix}.conv1.bias"), vec![hidden]));
    out.push((format!("{prefix}.prelu1"), vec![hidden]));
    out.push((format!("{prefix}.conv2.weight"), vec![hidden, hidden, 3, 3]));
    out.push((format!("{prefix}.conv2.bias"), vec![hidden]));
    out.push((format!("{prefix}.prelu2"), vec![hidden]));
    out.push((format!("{prefix}.conv3.weight"), vec![cout, hidden, 3, 3]));
    out.push((format!("{prefix}.conv3.bias"), vec![cout]));
}

const BLOCK_TENSORS: usize = 8;

/// Ordered `(name, shape)` list of every trainable tensor.
pub fn param_layout(kind: ModelKind, config: &LpdConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for b in 0..config.blocks(kind) {
        if let Some(plan) = config.dual_plan(kind) {
            block_layout(&format!("dual.{b:02}"), plan, &mut out);
        }
        block_layout(&format!("primal.{b:02}"), config.primal_plan(kind), &mut out);
    }
    if kind == ModelKind::LearnedPdhg {
        for name in ["sigma", "tau", "theta"] {
            out.push((name.to_string(), vec![1]));
        }
    }
    out
}

/// Learned parameters of one scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub config: LpdConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Xavier-uniform convolutions, zero biases, PReLU coefficients at
    /// [`PRELU_INIT`]; learned PDHG scalars start at `σ = τ = 0.5`, `θ = 1`.
    pub fn init(kind: ModelKind, config: &LpdConfig, seed: u64) -> Result<Self, LpdError> {
        config.validate(kind)?;
        let layout = param_layout(kind, config);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (k, (name, shape)) in layout.into_iter().enumerate() {
            let t = if name.ends_with(".weight") {
                xavier_init(&shape, derive_seed(seed, k as u64))?
            } else if name.contains(".prelu") {
                Tensor::full(&shape, T::of(PRELU_INIT))?
            } else if name == "theta" {
                Tensor::full(&shape, T::one())?
            } else if name == "sigma" || name == "tau" {
                Tensor::full(&shape, T::of(0.5))?
            } else {
                Tensor::zeros(&shape)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            kind,
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Same layout with every tensor zero.
    pub fn zeros(kind: ModelKind, config: &LpdConfig) -> Result<Self, LpdError> {
        config.validate(kind)?;
        let layout = param_layout(kind, config);
        let tensors = layout
            .iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            kind,
            config: config.clone(),
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.config == other.config
            && self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Forward pass for one sinogram, returning the reconstruction node.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        problem: &Problem<T>,
        g: &Sinogram<T>,
    ) -> Result<Var, LpdError> {
        match self.kind {
            ModelKind::LearnedPrimalDual => lpd_forward(graph, bound, &self.config, problem, g),
            ModelKind::LearnedPdhg => learned_pdhg_forward(graph, bound, &self.config, problem, g),
            ModelKind::LearnedPrimal => learned_primal_forward(graph, bound, &self.config, problem, g),
            ModelKind::ResidualDenoiser => residual_denoiser_forward(graph, bound, &self.config, problem, g),
        }
    }

    pub fn reconstruct(&self, problem: &Problem<T>, g: &Sinogram<T>) -> Result<Image<T>, LpdError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let out = self.forward(&mut graph, &bound, problem, g)?;
        let [h, w] = problem.geometry.image_shape;
        Ok(Image::from_vec(
            [h, w],
            graph.value(out).data().to_vec(),
            problem.geometry.pixel_size,
        ))
    }
}

/// Graph handles of a [`Model`]'s tensors, in layout order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn block(&self, start: usize) -> &[Var] {
        &self.vars[start..start + BLOCK_TENSORS]
    }

    fn has_dual(kind: ModelKind) -> bool {
        matches!(kind, ModelKind::LearnedPrimalDual | ModelKind::LearnedPdhg)
    }

    fn stride(kind: ModelKind) -> usize {
        if Self::has_dual(kind) {
            2 * BLOCK_TENSORS
        } else {
            BLOCK_TENSORS
        }
    }

    fn dual(&self, kind: ModelKind, config: &LpdConfig, iteration: usize) -> &[Var] {
        let b = if config.blocks(kind) == 1 { 0 } else { iteration };
        self.block(b * Self::stride(kind))
    }

    fn primal(&self, kind: ModelKind, config: &LpdConfig, iteration: usize) -> &[Var] {
        let b = if config.blocks(kind) == 1 { 0 } else { iteration };
        let offset = if Self::has_dual(kind) { BLOCK_TENSORS } else { 0 };
        self.block(b * Self::stride(kind) + offset)
    }
}

/// Forward operator, data scaling and pseudo-inverse shared by all schemes.
pub struct Problem<T> {
    pub geometry: Geometry,
    pub op: Arc<dyn ForwardOperator<T>>,
    /// Data are divided by this factor before entering a network.
    pub data_scale: f64,
    pub op_mode: OpMode,
    fbp: Option<Fbp<T>>,
    counts: Option<Arc<CallCounts>>,
}

impl<T: Scalar> Problem<T> {
    pub fn new(geometry: &Geometry, config: &LpdConfig) -> Result<Self, LpdError> {
        Self::build(Arc::new(RayTransform::new(geometry)?), config, false)
    }

    pub fn with_ray(ray: Arc<RayTransform<T>>, config: &LpdConfig) -> Result<Self, LpdError> {
        Self::build(ray, config, false)
    }

    /// Wraps the operator in a call counter, see [`Problem::call_counts`].
    pub fn counted(geometry: &Geometry, config: &LpdConfig) -> Result<Self, LpdError> {
        Self::build(Arc::new(RayTransform::new(geometry)?), config, true)
    }

    fn build(ray: Arc<RayTransform<T>>, config: &LpdConfig, count: bool) -> Result<Self, LpdError> {
        let geometry = ray.geometry().clone();
        let (op, data_scale): (Arc<dyn ForwardOperator<T>>, f64) = match config.op_mode {
            OpMode::Linear if config.normalize_operator => {
                let norm = power_method_norm(ray.as_ref(), NORM_ITERATIONS, 0);
                (
                    Arc::new(Linear(Scaled {
                        inner: ray.clone(),
                        factor: 1.0 / norm,
                    })),
                    norm,
                )
            }
            OpMode::Linear => (Arc::new(Linear(ray.clone())), 1.0),
            OpMode::BeerLambert { mu } => (Arc::new(BeerLambert::new(ray.clone(), mu)?), 1.0),
        };
        let (op, counts): (Arc<dyn ForwardOperator<T>>, _) = if count {
            let c = Counted::new(op);
            let counts = c.counts.clone();
            (Arc::new(c), Some(counts))
        } else {
            (op, None)
        };
        let fbp = match config.init_mode {
            InitMode::PseudoInverse => Some(Fbp::with_ray(&geometry, Some(ray), Filter::Hann, 1.0)?),
            InitMode::Zero => None,
        };
        Ok(Self {
            geometry,
            op,
            data_scale,
            op_mode: config.op_mode,
            fbp,
            counts,
        })
    }

    pub fn call_counts(&self) -> Option<&CallCounts> {
        self.counts.as_deref()
    }

    /// FBP of the (log-converted, for transmission data) measurements.
    pub fn pseudo_inverse(&self, g: &Sinogram<T>) -> Result<Image<T>, LpdError> {
        let fbp = self
            .fbp
            .as_ref()
            .ok_or_else(|| LpdError::Config("pseudo-inverse requested without init-mode pseudo-inverse".into()))?;
        let data = match self.op_mode {
            OpMode::Linear => g.clone(),
            OpMode::BeerLambert { mu } => {
                let tiny = T::min_positive_value();
                Sinogram::new(g.values.mapv(|v| -v.max(tiny).ln() / T::of(mu)))
            }
        };
        Ok(fbp.reconstruct(&data)?)
    }

    fn data_var(&self, graph: &mut Graph<T>, g: &Sinogram<T>) -> Result<Var, LpdError> {
        let expected = self.geometry.sinogram_shape();
        if g.shape() != expected {
            return Err(LpdError::ShapeMismatch {
                expected,
                got: g.shape(),
            });
        }
        let inv = T::of(1.0 / self.data_scale);
        let data: Vec<T> = g.as_slice().iter().map(|&v| v * inv).collect();
        let [m, n] = expected;
        Ok(graph.constant(Tensor::new(vec![1, 1, m, n], data)?))
    }

    fn zeros(&self, graph: &mut Graph<T>, channels: usize, space: [usize; 2]) -> Result<Var, LpdError> {
        Ok(graph.constant(Tensor::zeros(&[1, channels, space[0], space[1]])?))
    }

    fn initial_primal(&self, graph: &mut Graph<T>, g: &Sinogram<T>, channels: usize, init: InitMode) -> Result<Var, LpdError> {
        let space = self.geometry.image_shape;
        match init {
            InitMode::Zero => self.zeros(graph, channels, space),
            InitMode::PseudoInverse => {
                let f = self.pseudo_inverse(g)?;
                let mut data = Vec::with_capacity(channels * grid_len(space));
                for _ in 0..channels {
                    data.extend_from_slice(f.as_slice());
                }
                Ok(graph.constant(Tensor::new(vec![1, channels, space[0], space[1]], data)?))
            }
        }
    }
}

/// `state + W₃ A₂ W₂ A₁ W₁(input)`, where `state` is the first `keep` channels of `input`.
pub fn learned_proximal_apply<T: Scalar>(
    graph: &mut Graph<T>,
    block: &[Var],
    input: Var,
    keep: usize,
) -> Result<Var, LpdError> {
    let x = graph.conv2d(input, block[0], block[1])?;
    let x = graph.prelu(x, block[2])?;
    let x = graph.conv2d(x, block[3], block[4])?;
    let x = graph.prelu(x, block[5])?;
    let offset = graph.conv2d(x, block[6], block[7])?;
    let state = graph.select_channels(input, 0, keep)?;
    Ok(graph.add(state, offset)?)
}

fn f2_channel(n_primal: usize) -> usize {
    if n_primal > 1 {
        1
    } else {
        0
    }
}

/// Learned Primal-Dual: learned dual and primal updates with memory.
pub fn lpd_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    config: &LpdConfig,
    problem: &Problem<T>,
    g: &Sinogram<T>,
) -> Result<Var, LpdError> {
    let kind = ModelKind::LearnedPrimalDual;
    let data = problem.data_var(graph, g)?;
    let mut f = problem.initial_primal(graph, g, config.n_primal, config.init_mode)?;
    let mut h = problem.zeros(graph, config.n_dual, problem.geometry.sinogram_shape())?;
    for i in 0..config.iterations {
        let f2 = graph.select_channels(f, f2_channel(config.n_primal), 1)?;
        let kf = graph.operator(problem.op.clone(), f2)?;
        let dual_in = graph.concat_channels(&[h, kf, data])?;
        h = learned_proximal_apply(graph, bound.dual(kind, config, i), dual_in, config.n_dual)?;

        let f1 = graph.select_channels(f, 0, 1)?;
        let h1 = graph.select_channels(h, 0, 1)?;
        let adj = graph.adjoint_derivative(problem.op.clone(), f1, h1)?;
        let primal_in = graph.concat_channels(&[f, adj])?;
        f = learned_proximal_apply(graph, bound.primal(kind, config, i), primal_in, config.n_primal)?;
    }
    Ok(graph.select_channels(f, 0, 1)?)
}

/// Learned PDHG: hard-coded `h + σK(f̄)` and over-relaxation with learned
/// `σ`, `τ`, `θ` and one shared pair of proximal networks.
pub fn learned_pdhg_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    config: &LpdConfig,
    problem: &Problem<T>,
    g: &Sinogram<T>,
) -> Result<Var, LpdError> {
    let kind = ModelKind::LearnedPdhg;
    let n = bound.vars.len();
    let (sigma, tau, theta) = (bound.vars[n - 3], bound.vars[n - 2], bound.vars[n - 1]);
    let data = problem.data_var(graph, g)?;
    let mut f = problem.initial_primal(graph, g, 1, config.init_mode)?;
    let mut f_bar = f;
    let mut h = problem.zeros(graph, 1, problem.geometry.sinogram_shape())?;
    for i in 0..config.iterations {
        let kf = graph.operator(problem.op.clone(), f_bar)?;
        let step = graph.mul_scalar(sigma, kf)?;
        let moved = graph.add(h, step)?;
        let dual_in = graph.concat_channels(&[moved, data])?;
        h = learned_proximal_apply(graph, bound.dual(kind, config, i), dual_in, 1)?;

        let adj = graph.adjoint_derivative(problem.op.clone(), f, h)?;
        let step = graph.mul_scalar(tau, adj)?;
        let moved = graph.sub(f, step)?;
        let f_next = learned_proximal_apply(graph, bound.primal(kind, config, i), moved, 1)?;

        let delta = graph.sub(f_next, f)?;
        let relax = graph.mul_scalar(theta, delta)?;
        f_bar = graph.add(f_next, relax)?;
        f = f_next;
    }
    Ok(f)
}

/// Learned Primal: the dual update is the fixed residual `A(f⁽²⁾) − g`.
pub fn learned_primal_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    config: &LpdConfig,
    problem: &Problem<T>,
    g: &Sinogram<T>,
) -> Result<Var, LpdError> {
    learned_primal_trace(graph, bound, config, problem, g, |_, _| {})
}

/// [`learned_primal_forward`] with access to each dual state.
pub fn learned_primal_trace<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    config: &LpdConfig,
    problem: &Problem<T>,
    g: &Sinogram<T>,
    mut on_dual: impl FnMut(usize, &Tensor<T>),
) -> Result<Var, LpdError> {
    let kind = ModelKind::LearnedPrimal;
    let data = problem.data_var(graph, g)?;
    let mut f = problem.initial_primal(graph, g, config.n_primal, config.init_mode)?;
    for i in 0..config.iterations {
        let f2 = graph.select_channels(f, f2_channel(config.n_primal), 1)?;
        let kf = graph.operator(problem.op.clone(), f2)?;
        let h = graph.sub(kf, data)?;
        on_dual(i, graph.value(h));

        let f1 = graph.select_channels(f, 0, 1)?;
        let adj = graph.adjoint_derivative(problem.op.clone(), f1, h)?;
        let primal_in = graph.concat_channels(&[f, adj])?;
        f = learned_proximal_apply(graph, bound.primal(kind, config, i), primal_in, config.n_primal)?;
    }
    Ok(graph.select_channels(f, 0, 1)?)
}

/// FBP followed by `I` residual updates that never touch the operator.
pub fn residual_denoiser_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    config: &LpdConfig,
    problem: &Problem<T>,
    g: &Sinogram<T>,
) -> Result<Var, LpdError> {
    let kind = ModelKind::ResidualDenoiser;
    let mut f = problem.initial_primal(graph, g, config.n_primal, InitMode::PseudoInverse)?;
    for i in 0..config.iterations {
        f = learned_proximal_apply(graph, bound.primal(kind, config, i), f, config.n_primal)?;
    }
    Ok(graph.select_channels(f, 0, 1)?)
}

fn check_reduction_arity(config: &LpdConfig) -> Result<(), LpdError> {
    if config.n_primal != 2 || config.n_dual != 1 {
        return Err(LpdError::Config(format!(
            "the analytic reductions need n-primal = 2 and n-dual = 1, got {} and {}",
            config.n_primal, config.n_dual
        )));
    }
    Ok(())
}

/// The Learned Primal-Dual skeleton with analytic proximals that recover
/// classical PDHG for `‖A(f) − g‖² + λ‖∇f‖₁`:
/// `Γ(h, K(f⁽²⁾), g) = prox_{σF*}(h + σK(f⁽²⁾))` and
/// `Λ(f, [∂K(f⁽¹⁾)]*(h)) = [p, (1 + θ)p − θf⁽¹⁾]` with `p = f⁽¹⁾ − τ[∂K(f⁽¹⁾)]*(h)`.
/// `callback` receives `f⁽¹⁾` after each iteration.
pub fn oracle_reduction_pdhg<T: Scalar>(
    config: &LpdConfig,
    op: &dyn ForwardOperator<T>,
    g: &Sinogram<T>,
    params: &PdhgParams,
    mut callback: impl FnMut(usize, &[T]),
) -> Result<Vec<T>, LpdError> {
    check_reduction_arity(config)?;
    let shape = op.domain();
    let (n, m) = (grid_len(shape), grid_len(op.range()));
    if g.shape() != op.range() {
        return Err(LpdError::ShapeMismatch {
            expected: op.range(),
            got: g.shape(),
        });
    }
    let (s, t, th) = (T::of(params.sigma), T::of(params.tau), T::of(params.gamma));
    // Primal state [f⁽¹⁾, f⁽²⁾] and dual state h = (h¹, h²) of the product space.
    let mut f1 = vec![T::zero(); n];
    let mut f2 = vec![T::zero(); n];
    let mut h1 = vec![T::zero(); m];
    let mut h2 = vec![T::zero(); 2 * n];
    let mut k1 = vec![T::zero(); m];
    let mut k2 = vec![T::zero(); 2 * n];
    let mut adj = vec![T::zero(); n];
    let mut div = vec![T::zero(); n];
    for i in 1..=params.iterations {
        // Γ
        op.apply(&f2, &mut k1);
        gradient_into(&f2, shape, &mut k2);
        for (h, k) in h1.iter_mut().zip(&k1) {
            *h += s * *k;
        }
        for (h, k) in h2.iter_mut().zip(&k2) {
            *h += s * *k;
        }
        prox_l2_conjugate_in_place(&mut h1, g.as_slice(), params.sigma);
        project_ball_in_place(&mut h2, params.lambda);
        // Λ, with prox_{τG} = Id.
        op.derivative_adjoint(&f1, &h1, &mut adj);
        divergence_into(&h2, shape, &mut div);
        for k in 0..n {
            let p = f1[k] - t * (adj[k] - div[k]);
            f2[k] = (T::one() + th) * p - th * f1[k];
            f1[k] = p;
        }
        callback(i, &f1);
    }
    Ok(f1)
}

/// The skeleton with `Γ = ∇F_g(K(f⁽²⁾)) = 2(A(f⁽²⁾) − g)` and both primal
/// channels set to `f⁽¹⁾ − α[∂A(f⁽¹⁾)]*(h)`: gradient descent on `‖A(f) − g‖²`.
pub fn oracle_reduction_gradient_descent<T: Scalar>(
    config: &LpdConfig,
    op: &dyn ForwardOperator<T>,
    g: &Sinogram<T>,
    alpha: f64,
    iterations: usize,
    mut callback: impl FnMut(usize, &[T]),
) -> Result<Vec<T>, LpdError> {
    check_reduction_arity(config)?;
    let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
    if g.shape() != op.range() {
        return Err(LpdError::ShapeMismatch {
            expected: op.range(),
            got: g.shape(),
        });
    }
    let a = T::of(alpha);
    let two = T::of(2.0);
    let mut f1 = vec![T::zero(); n];
    let mut f2 = vec![T::zero(); n];
    let mut h = vec![T::zero(); m];
    let mut adj = vec![T::zero(); n];
    for i in 1..=iterations {
        op.apply(&f2, &mut h);
        for (hv, &gv) in h.iter_mut().zip(g.as_slice()) {
            *hv = two * (*hv - gv);
        }
        op.derivative_adjoint(&f1, &h, &mut adj);
        for k in 0..n {
            let p = f1[k] - a * adj[k];
            f1[k] = p;
            f2[k] = p;
        }
        callback(i, &f1);
    }
    Ok(f1)
}

/// Random-number state recorded with a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Word position of the stream, as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: ModelKind,
    pub config: LpdConfig,
    pub dtype: Dtype,
    pub step: usize,
    pub rng: Option<RngState>,
    pub params: Vec<ManifestEntry>,
}

impl<T: Scalar> Model<T> {
    /// Writes `manifest.json` and one TNSR file per tensor into `dir`.
    pub fn save(&self, dir: &Path, step: usize, rng: Option<RngState>) -> Result<Manifest, LpdError> {
        fs::create_dir_all(dir)?;
        let mut params = Vec::with_capacity(self.names.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let file = format!("{name}.tnsr");
            write_tensor(&dir.join(&file), t)?;
            params.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            format: 1,
            kind: self.kind,
            config: self.config.clone(),
            dtype: T::DTYPE,
            step,
            rng,
            params,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| LpdError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(manifest)
    }

    /// Loads a checkpoint, converting stored values to `T`.
    pub fn load(dir: &Path) -> Result<(Self, Manifest), LpdError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| LpdError::Checkpoint(e.to_string()))?;
        manifest.config.validate(manifest.kind)?;
        let layout = param_layout(manifest.kind, &manifest.config);
        if layout.len() != manifest.params.len() {
            return Err(LpdError::Checkpoint(format!(
                "manifest lists {} tensors, the configuration needs {}",
                manifest.params.len(),
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), entry) in layout.iter().zip(&manifest.params) {
            if *name != entry.name || *shape != entry.shape {
                return Err(LpdError::Checkpoint(format!(
                    "expected {name} {shape:?}, manifest has {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let path = dir.join(&entry.file);
            let (dtype, stored) = read_tensor_header(&path)?;
            if stored != *shape {
                return Err(LpdError::Checkpoint(format!("{} holds shape {stored:?}", entry.file)));
            }
            let t: Tensor<T> = match dtype {
                Dtype::F32 => read_tensor::<f32>(&path)?.cast(),
                Dtype::F64 => read_tensor::<f64>(&path)?.cast(),
            };
            tensors.push(t);
        }
        Ok((
            Self {
                kind: manifest.kind,
                config: manifest.config.clone(),
                names: layout.into_iter().map(|(n, _)| n).collect(),
                tensors,
            },
            manifest,
        ))
    }
}
