//! Set aggregation: the recurrent context-aware attention pooler and the
//! three reference poolers it is compared against (average, scalar quality,
//! naive last-state LSTM).
//!
//! The recurrent pooler runs a two-layer bidirectional LSTM over the frame
//! sequence, projects each hidden state to a per-component quality logit
//! matrix, normalizes it with a column-wise softmax, and takes the weighted
//! mean of the input frames. The input embeddings are never re-encoded; only
//! the mixing weights are learned.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{affine_transform, sigmoid, vec_affine, Matrix, Real};

/// One template: an ordered set of N embedding vectors of dimension D.
/// N = 0 encodes failure-to-enroll.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSet<T> {
    pub template_id: String,
    pub subject_id: String,
    pub frames: Matrix<T>,
}

impl<T: Real> FrameEmbeddingSet<T> {
    pub fn new(template_id: impl Into<String>, subject_id: impl Into<String>, frames: Matrix<T>) -> Self {
        FrameEmbeddingSet {
            template_id: template_id.into(),
            subject_id: subject_id.into(),
            frames,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// L2-normalize every frame in place (ingestion convention).
    pub fn normalize_frames(&mut self) {
        for i in 0..self.frames.rows() {
            crate::numerics::l2_normalize(self.frames.row_mut(i));
        }
    }
}

/// Weights and bias of one LSTM gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// input-to-hidden, `input_dim x H`
    pub w_x: Matrix<T>,
    /// hidden-to-hidden, `H x H`
    pub w_h: Matrix<T>,
    /// `H`
    pub b: Vec<T>,
}

/// Parameters of one LSTM direction. Gate order throughout the crate is
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirectionParams<T> {
    pub input: GateParams<T>,
    pub forget: GateParams<T>,
    pub cell: GateParams<T>,
    pub output: GateParams<T>,
}

impl<T: Real> LstmDirectionParams<T> {
    pub fn hidden_size(&self) -> usize {
        self.input.b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input.w_x.rows()
    }

    pub(crate) fn gates(&self) -> [&GateParams<T>; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    pub(crate) fn gates_mut(&mut self) -> [&mut GateParams<T>; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.cell,
            &mut self.output,
        ]
    }
}

/// One bidirectional LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams<T> {
    pub fwd: LstmDirectionParams<T>,
    pub bwd: LstmDirectionParams<T>,
}

/// All learnable parameters of the recurrent attention pooler: two
/// bidirectional LSTM layers plus the affine quality head `2H -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T> {
    pub layers: Vec<LstmLayerParams<T>>,
    /// `2H x D`
    pub head_w: Matrix<T>,
    /// `D`
    pub head_b: Vec<T>,
    pub dim: usize,
    pub hidden: usize,
    pub version: u32,
}

/// Two-layer scalar quality MLP: `D -> hidden -> 1` with ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMlpParams<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub dim: usize,
    pub hidden: usize,
}

/// Column-normalized attention weight matrix (N x D); every column sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub weights: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMethod {
    Rean,
    Avg,
    Quality,
    NaiveLstm,
    ContextFilter,
}

impl AggregationMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationMethod::Rean => "rean",
            AggregationMethod::Avg => "avg",
            AggregationMethod::Quality => "quality",
            AggregationMethod::NaiveLstm => "naive_lstm",
            AggregationMethod::ContextFilter => "context_filter",
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rean" => Ok(AggregationMethod::Rean),
            "avg" => Ok(AggregationMethod::Avg),
            "quality" => Ok(AggregationMethod::Quality),
            "naive_lstm" => Ok(AggregationMethod::NaiveLstm),
            "context_filter" => Ok(AggregationMethod::ContextFilter),
            other => Err(Error::Config(format!("unknown aggregation method '{other}'"))),
        }
    }
}

/// The fused D-vector for one template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRepresentation<T> {
    pub vector: Vec<T>,
    pub template_id: String,
    pub subject_id: String,
    pub method: AggregationMethod,
}

impl<T: Real> TemplateRepresentation<T> {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|v| *v == T::zero())
    }
}

// ---------------------------------------------------------------------------
// parameter construction / flattening
// ---------------------------------------------------------------------------

fn uniform_matrix<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::c(rng.gen_range(-scale..scale)))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn init_direction<T: Real>(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> LstmDirectionParams<T> {
    let sx = 1.0 / (input_dim as f64).sqrt();
    let sh = 1.0 / (hidden as f64).sqrt();
    let mut gate = |forget: bool| GateParams {
        w_x: uniform_matrix(input_dim, hidden, sx, rng),
        w_h: uniform_matrix(hidden, hidden, sh, rng),
        b: vec![if forget { T::one() } else { T::zero() }; hidden],
    };
    LstmDirectionParams {
        input: gate(false),
        forget: gate(true),
        cell: gate(false),
        output: gate(false),
    }
}

fn zero_direction<T: Real>(input_dim: usize, hidden: usize) -> LstmDirectionParams<T> {
    let gate = || GateParams {
        w_x: Matrix::zeros(input_dim, hidden),
        w_h: Matrix::zeros(hidden, hidden),
        b: vec![T::zero(); hidden],
    };
    LstmDirectionParams {
        input: gate(),
        forget: gate(),
        cell: gate(),
        output: gate(),
    }
}

impl<T: Real> AggregatorParams<T> {
    /// Fresh parameters: uniform in +-1/sqrt(fan-in), forget-gate bias 1.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            LstmLayerParams {
                fwd: init_direction(dim, hidden, rng),
                bwd: init_direction(dim, hidden, rng),
            },
            LstmLayerParams {
                fwd: init_direction(2 * hidden, hidden, rng),
                bwd: init_direction(2 * hidden, hidden, rng),
            },
        ];
        let sh = 1.0 / ((2 * hidden) as f64).sqrt();
        AggregatorParams {
            layers,
            head_w: uniform_matrix(2 * hidden, dim, sh, rng),
            head_b: vec![T::zero(); dim],
            dim,
            hidden,
            version: 1,
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AggregatorParams {
            layers: vec![
                LstmLayerParams {
                    fwd: zero_direction(dim, hidden),
                    bwd: zero_direction(dim, hidden),
                },
                LstmLayerParams {
                    fwd: zero_direction(2 * hidden, hidden),
                    bwd: zero_direction(2 * hidden, hidden),
                },
            ],
            head_w: Matrix::zeros(2 * hidden, dim),
            head_b: vec![T::zero(); dim],
            dim,
            hidden,
            version: 1,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden)
    }

    /// Canonical block order used by flattening and by the on-disk format:
    /// layers in order, forward direction then backward, gates in
    /// input/forget/cell/output order, each gate contributing w_x, w_h, b;
    /// the head weight matrix and bias come last.
    pub fn visit(&self, f: &mut impl FnMut(&[T])) {
        for layer in &self.layers {
            for dir in [&layer.fwd, &layer.bwd] {
                for gate in dir.gates() {
                    f(gate.w_x.data());
                    f(gate.w_h.data());
                    f(&gate.b);
                }
            }
        }
        f(self.head_w.data());
        f(&self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [T])) {
        for layer in &mut self.layers {
            for dir in [&mut layer.fwd, &mut layer.bwd] {
                for gate in dir.gates_mut() {
                    f(gate.w_x.data_mut());
                    f(gate.w_h.data_mut());
                    f(&mut gate.b);
                }
            }
        }
        f(self.head_w.data_mut());
        f(&mut self.head_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

impl<T: Real> QualityMlpParams<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s1 = 1.0 / (dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        QualityMlpParams {
            w1: uniform_matrix(dim, hidden, s1, rng),
            b1: vec![T::zero(); hidden],
            w2: uniform_matrix(hidden, 1, s2, rng),
            b2: vec![T::zero(); 1],
            dim,
            hidden,
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        QualityMlpParams {
            w1: Matrix::zeros(dim, hidden),
            b1: vec![T::zero(); hidden],
            w2: Matrix::zeros(hidden, 1),
            b2: vec![T::zero(); 1],
            dim,
            hidden,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden)
    }

    pub fn visit(&self, f: &mut impl FnMut(&[T])) {
        f(self.w1.data());
        f(&self.b1);
        f(self.w2.data());
        f(&self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [T])) {
        f(self.w1.data_mut());
        f(&mut self.b1);
        f(self.w2.data_mut());
        f(&mut self.b2);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

// ---------------------------------------------------------------------------
// LSTM forward
// ---------------------------------------------------------------------------

/// Per-step values cached for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct StepState<T> {
    pub i: Vec<T>,
    pub f: Vec<T>,
    pub g: Vec<T>,
    pub o: Vec<T>,
    pub c: Vec<T>,
    pub tc: Vec<T>,
    pub h: Vec<T>,
}

fn lstm_step<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    dir: &LstmDirectionParams<T>,
) -> Result<StepState<T>> {
    let hsz = dir.hidden_size();
    if x.len() != dir.input_dim() {
        return Err(Error::shape(
            "lstm_cell_forward input",
            (1, x.len()),
            dir.input.w_x.shape(),
        ));
    }
    if h_prev.len() != hsz || c_prev.len() != hsz {
        return Err(Error::shape(
            "lstm_cell_forward state",
            (1, h_prev.len()),
            (1, hsz),
        ));
    }
    let pre = |gate: &GateParams<T>| -> Result<Vec<T>> {
        let mut a = vec_affine(x, &gate.w_x, &gate.b)?;
        for (k, row) in (0..hsz).map(|j| (j, gate.w_h.row(j))) {
            let hv = h_prev[k];
            for (aj, &w) in a.iter_mut().zip(row) {
                *aj += hv * w;
            }
        }
        Ok(a)
    };
    let i: Vec<T> = pre(&dir.input)?.into_iter().map(sigmoid).collect();
    let f: Vec<T> = pre(&dir.forget)?.into_iter().map(sigmoid).collect();
    let g: Vec<T> = pre(&dir.cell)?.into_iter().map(|v| v.tanh()).collect();
    let o: Vec<T> = pre(&dir.output)?.into_iter().map(sigmoid).collect();
    let c: Vec<T> = (0..hsz).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tc: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = (0..hsz).map(|k| o[k] * tc[k]).collect();
    Ok(StepState { i, f, g, o, c, tc, h })
}

/// Standard LSTM cell: gates via sigmoid, tanh candidate,
/// `c_t = f . c_prev + i . g`, `h_t = o . tanh(c_t)`.
pub fn lstm_cell_forward<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    dir: &LstmDirectionParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let s = lstm_step(x, h_prev, c_prev, dir)?;
    Ok((s.h, s.c))
}

/// One direction's pass over a sequence, with everything backprop needs.
#[derive(Debug, Clone)]
pub(crate) struct DirectionCache<T> {
    /// original row indices in processing order
    pub order: Vec<usize>,
    pub steps: Vec<StepState<T>>,
}

pub(crate) fn run_direction<T: Real>(
    input: &Matrix<T>,
    dir: &LstmDirectionParams<T>,
    reverse: bool,
) -> Result<DirectionCache<T>> {
    let n = input.rows();
    let hsz = dir.hidden_size();
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let mut steps = Vec::with_capacity(n);
    let mut h = vec![T::zero(); hsz];
    let mut c = vec![T::zero(); hsz];
    for &t in &order {
        let s = lstm_step(input.row(t), &h, &c, dir)?;
        h = s.h.clone();
        c = s.c.clone();
        steps.push(s);
    }
    Ok(DirectionCache { order, steps })
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub fwd: DirectionCache<T>,
    pub bwd: DirectionCache<T>,
    pub output: Matrix<T>,
}

pub(crate) fn layer_forward<T: Real>(
    input: &Matrix<T>,
    layer: &LstmLayerParams<T>,
) -> Result<LayerCache<T>> {
    let n = input.rows();
    let hsz = layer.fwd.hidden_size();
    let fwd = run_direction(input, &layer.fwd, false)?;
    let bwd = run_direction(input, &layer.bwd, true)?;
    let mut output = Matrix::zeros(n, 2 * hsz);
    for (s, &t) in fwd.order.iter().enumerate() {
        output.row_mut(t)[..hsz].copy_from_slice(&fwd.steps[s].h);
    }
    for (s, &t) in bwd.order.iter().enumerate() {
        output.row_mut(t)[hsz..].copy_from_slice(&bwd.steps[s].h);
    }
    Ok(LayerCache { fwd, bwd, output })
}

pub(crate) fn bilstm_forward_cached<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
) -> Result<Vec<LayerCache<T>>> {
    if frames.rows() == 0 {
        return Err(Error::EmptyTemplate("<anonymous>".into()));
    }
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut input = frames.clone();
    for layer in &params.layers {
        let cache = layer_forward(&input, layer)?;
        input = cache.output.clone();
        caches.push(cache);
    }
    Ok(caches)
}

/// Run both bidirectional layers; returns the N x 2H hidden-state matrix of
/// the final layer. Initial states are zero in both directions.
pub fn bilstm_forward<T: Real>(
    frames: &Matrix<T>,
    params: &AggregatorParams<T>,
) -> Result<Matrix<T>> {
    let caches = bilstm_forward_cached(frames, params)?;
    Ok(caches.into_iter().last().unwrap().output)
}

/// Per-row affine projection of the hidden states to D quality logits.
/// No activation: the logits feed the column softmax directly.
pub fn quality_head<T: Real>(
    hidden: &Matrix<T>,
    params: &AggregatorParams<T>,
) -> Result<Matrix<T>> {
    affine_transform(hidden, &params.head_w, &params.head_b)
}

/// Column-wise softmax with per-column max subtraction.
pub fn normalize_attention<T: Real>(q: &Matrix<T>) -> AttentionWeights<T> {
    let (n, d) = q.shape();
    let mut w = Matrix::zeros(n, d);
    for j in 0..d {
        let mut mx = T::neg_infinity();
        for i in 0..n {
            if q[(i, j)] > mx {
                mx = q[(i, j)];
            }
        }
        let mut denom = T::zero();
        for i in 0..n {
            let e = (q[(i, j)] - mx).exp();
            w[(i, j)] = e;
            denom += e;
        }
        for i in 0..n {
            w[(i, j)] /= denom;
        }
    }
    AttentionWeights { weights: w }
}

/// `r_j = sum_i frames[i,j] * w[i,j]`.
pub fn aggregate_weighted<T: Real>(
    frames: &Matrix<T>,
    attention: &AttentionWeights<T>,
) -> Result<Vec<T>> {
    if frames.shape() != attention.weights.shape() {
        return Err(Error::shape(
            "aggregate_weighted",
            frames.shape(),
            attention.weights.shape(),
        ));
    }
    let (n, d) = frames.shape();
    let mut r = vec![T::zero(); d];
    for i in 0..n {
        let f = frames.row(i);
        let w = attention.weights.row(i);
        for j in 0..d {
            r[j] += f[j] * w[j];
        }
    }
    Ok(r)
}

fn zero_representation<T: Real>(
    set: &FrameEmbeddingSet<T>,
    dim: usize,
    method: AggregationMethod,
) -> TemplateRepresentation<T> {
    TemplateRepresentation {
        vector: vec![T::zero(); dim],
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method,
    }
}

/// Full recurrent attention pipeline. Empty templates map to the zero vector
/// (failure-to-enroll convention).
pub fn rean_aggregate<T: Real>(
    set: &FrameEmbeddingSet<T>,
    params: &AggregatorParams<T>,
) -> Result<TemplateRepresentation<T>> {
    if set.is_empty() {
        return Ok(zero_representation(set, params.dim, AggregationMethod::Rean));
    }
    if set.dim() != params.dim {
        return Err(Error::shape(
            "rean_aggregate",
            set.frames.shape(),
            (params.dim, params.hidden),
        ));
    }
    let hidden = bilstm_forward(&set.frames, params)?;
    let q = quality_head(&hidden, params)?;
    let attention = normalize_attention(&q);
    let vector = aggregate_weighted(&set.frames, &attention)?;
    Ok(TemplateRepresentation {
        vector,
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method: AggregationMethod::Rean,
    })
}

/// Arithmetic mean over frames; zero vector for empty templates.
pub fn avg_pool<T: Real>(set: &FrameEmbeddingSet<T>) -> TemplateRepresentation<T> {
    let (n, d) = set.frames.shape();
    if n == 0 {
        return zero_representation(set, d, AggregationMethod::Avg);
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut v = vec![T::zero(); d];
    for i in 0..n {
        for (vj, &fj) in v.iter_mut().zip(set.frames.row(i)) {
            *vj += fj;
        }
    }
    for vj in &mut v {
        *vj *= inv;
    }
    TemplateRepresentation {
        vector: v,
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method: AggregationMethod::Avg,
    }
}

/// One scalar quality logit per frame: `relu(f W1 + b1) W2 + b2`.
pub fn quality_logits<T: Real>(frames: &Matrix<T>, mlp: &QualityMlpParams<T>) -> Result<Vec<T>> {
    if frames.cols() != mlp.dim {
        return Err(Error::shape("quality_logits", frames.shape(), mlp.w1.shape()));
    }
    let mut out = Vec::with_capacity(frames.rows());
    for i in 0..frames.rows() {
        let mut h = vec_affine(frames.row(i), &mlp.w1, &mlp.b1)?;
        for v in &mut h {
            *v = v.max(T::zero());
        }
        let s = vec_affine(&h, &mlp.w2, &mlp.b2)?;
        out.push(s[0]);
    }
    Ok(out)
}

pub(crate) fn softmax_inplace<T: Real>(logits: &mut [T]) {
    let mx = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut denom = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - mx).exp();
        denom += *v;
    }
    for v in logits.iter_mut() {
        *v /= denom;
    }
}

/// Scalar-quality pooling: softmax over per-frame logits, weighted sum of
/// frames. Zero vector for empty templates.
pub fn quality_pool<T: Real>(
    set: &FrameEmbeddingSet<T>,
    mlp: &QualityMlpParams<T>,
) -> Result<TemplateRepresentation<T>> {
    let (n, d) = set.frames.shape();
    if n == 0 {
        return Ok(zero_representation(set, mlp.dim, AggregationMethod::Quality));
    }
    let mut w = quality_logits(&set.frames, mlp)?;
    softmax_inplace(&mut w);
    let mut v = vec![T::zero(); d];
    for i in 0..n {
        let wi = w[i];
        for (vj, &fj) in v.iter_mut().zip(set.frames.row(i)) {
            *vj += wi * fj;
        }
    }
    Ok(TemplateRepresentation {
        vector: v,
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method: AggregationMethod::Quality,
    })
}

/// Last-state pooling: the same two-layer bidirectional LSTM, but the
/// representation is the affine projection of the final time-step hidden
/// state (forward-last concatenated with backward-last).
pub fn naive_lstm_pool<T: Real>(
    set: &FrameEmbeddingSet<T>,
    params: &AggregatorParams<T>,
) -> Result<TemplateRepresentation<T>> {
    let n = set.frame_count();
    if n == 0 {
        return Ok(zero_representation(set, params.dim, AggregationMethod::NaiveLstm));
    }
    let hidden = bilstm_forward(&set.frames, params)?;
    let hsz = params.hidden;
    let mut last = Vec::with_capacity(2 * hsz);
    last.extend_from_slice(&hidden.row(n - 1)[..hsz]);
    last.extend_from_slice(&hidden.row(0)[hsz..]);
    let vector = vec_affine(&last, &params.head_w, &params.head_b)?;
    Ok(TemplateRepresentation {
        vector,
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method: AggregationMethod::NaiveLstm,
    })
}
