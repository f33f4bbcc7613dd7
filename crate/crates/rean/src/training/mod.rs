//! Template-batch sampling, hard-triplet loss, analytic backpropagation and
//! the Adam training loop.

mod backward;

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::aggregator::{
    AggregationMethod, AggregatorParams, FrameEmbeddingSet, QualityMlpParams,
    TemplateRepresentation,
};
use crate::error::{Error, Result};
use crate::numerics::{
    check_gradients, relative_error, GradientCheckReport, Matrix, Real,
};

/// Hard-triplet hinge configuration. Distances are squared Euclidean.
#[derive(Debug, Clone, Copy)]
pub struct TripletLossConfig<T> {
    pub margin: T,
}

impl<T: Real> Default for TripletLossConfig<T> {
    fn default() -> Self {
        TripletLossConfig { margin: T::c(3.0) }
    }
}

/// Mini-batch shape: `subjects_per_batch * templates_per_subject` templates,
/// each fixed to exactly `frames_per_template` frames.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub subjects_per_batch: usize,
    pub templates_per_subject: usize,
    pub frames_per_template: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_batch < 1 || self.templates_per_subject < 2 || self.frames_per_template < 1 {
            return Err(Error::Config(
                "batch spec requires subjects >= 1, templates per subject >= 2, frames >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Fix a template to exactly `target` frames: truncate from the front, or
/// repeat cyclically in order when short.
fn fix_frame_count<T: Real>(set: &FrameEmbeddingSet<T>, target: usize) -> FrameEmbeddingSet<T> {
    let (n, d) = set.frames.shape();
    debug_assert!(n >= 1);
    let mut frames = Matrix::zeros(target, d);
    for t in 0..target {
        frames.row_mut(t).copy_from_slice(set.frames.row(t % n));
    }
    FrameEmbeddingSet::new(set.template_id.clone(), set.subject_id.clone(), frames)
}

/// Deterministically sample a training batch: distinct subjects, distinct
/// templates per subject, frames fixed to the requested length.
pub fn sample_batch<T: Real>(
    dataset: &[FrameEmbeddingSet<T>],
    spec: &BatchSpec,
    rng: &mut impl Rng,
) -> Result<Vec<FrameEmbeddingSet<T>>> {
    spec.validate()?;
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, set) in dataset.iter().enumerate() {
        if set.frame_count() >= 1 {
            by_subject.entry(&set.subject_id).or_default().push(idx);
        }
    }
    let eligible: Vec<&Vec<usize>> = by_subject
        .values()
        .filter(|v| v.len() >= spec.templates_per_subject)
        .collect();
    if eligible.len() < spec.subjects_per_batch {
        return Err(Error::Insufficient(format!(
            "need {} subjects with >= {} templates, found {}",
            spec.subjects_per_batch,
            spec.templates_per_subject,
            eligible.len()
        )));
    }
    let subject_picks = index_sample(rng, eligible.len(), spec.subjects_per_batch);
    let mut batch = Vec::with_capacity(spec.subjects_per_batch * spec.templates_per_subject);
    for si in subject_picks.iter() {
        let templates = eligible[si];
        let template_picks = index_sample(rng, templates.len(), spec.templates_per_subject);
        for ti in template_picks.iter() {
            batch.push(fix_frame_count(&dataset[templates[ti]], spec.frames_per_template));
        }
    }
    Ok(batch)
}

/// All-triplet hard mining: enumerate every (anchor, positive, negative),
/// average the strictly positive hinge terms. Returns the loss, the hard
/// triplet count M, and dLoss/dRepresentation per template.
pub fn triplet_loss<T: Real>(
    reps: &[TemplateRepresentation<T>],
    cfg: &TripletLossConfig<T>,
) -> Result<(T, usize, Vec<Vec<T>>)> {
    let n = reps.len();
    let mut subjects: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reps {
        *subjects.entry(&r.subject_id).or_default() += 1;
    }
    if subjects.len() < 2 || !subjects.values().any(|&c| c >= 2) {
        return Err(Error::Insufficient(
            "triplet loss needs >= 2 subjects and one subject with >= 2 templates".into(),
        ));
    }
    let d = reps[0].vector.len();

    let sq_dist = |a: &[T], b: &[T]| -> T {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum()
    };

    let mut hard: Vec<(usize, usize, usize)> = Vec::new();
    let mut total = T::zero();
    for a in 0..n {
        for p in 0..n {
            if p == a || reps[p].subject_id != reps[a].subject_id {
                continue;
            }
            let d_ap = sq_dist(&reps[a].vector, &reps[p].vector);
            for neg in 0..n {
                if reps[neg].subject_id == reps[a].subject_id {
                    continue;
                }
                let term = d_ap - sq_dist(&reps[a].vector, &reps[neg].vector) + cfg.margin;
                if term > T::zero() {
                    total += term;
                    hard.push((a, p, neg));
                }
            }
        }
    }

    let mut grads = vec![vec![T::zero(); d]; n];
    let m = hard.len();
    if m == 0 {
        return Ok((T::zero(), 0, grads));
    }
    let scale = T::c(2.0) / T::from_usize(m).unwrap();
    for (a, p, neg) in hard {
        for j in 0..d {
            let ap = reps[a].vector[j] - reps[p].vector[j];
            let an = reps[a].vector[j] - reps[neg].vector[j];
            grads[a][j] += scale * (ap - an);
            grads[p][j] -= scale * ap;
            grads[neg][j] += scale * an;
        }
    }
    Ok((total / T::from_usize(m).unwrap(), m, grads))
}

/// Bias-corrected Adam accumulators over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(num_params: usize, lr: T) -> Self {
        AdamState {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            lr,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            epsilon: T::c(1e-8),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            (1, params.len()),
            (1, grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (one - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (one - state.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// A trainable pooler together with its parameters.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Rean(AggregatorParams<T>),
    QualityPool(QualityMlpParams<T>),
    NaiveLstm(AggregatorParams<T>),
}

impl<T: Real> Model<T> {
    pub fn method(&self) -> AggregationMethod {
        match self {
            Model::Rean(_) => AggregationMethod::Rean,
            Model::QualityPool(_) => AggregationMethod::Quality,
            Model::NaiveLstm(_) => AggregationMethod::NaiveLstm,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Rean(p) | Model::NaiveLstm(p) => p.dim,
            Model::QualityPool(p) => p.dim,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Model::Rean(p) | Model::NaiveLstm(p) => p.num_params(),
            Model::QualityPool(p) => p.num_params(),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        match self {
            Model::Rean(p) | Model::NaiveLstm(p) => p.to_flat(),
            Model::QualityPool(p) => p.to_flat(),
        }
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) {
        match self {
            Model::Rean(p) | Model::NaiveLstm(p) => p.assign_from_flat(flat),
            Model::QualityPool(p) => p.assign_from_flat(flat),
        }
    }

    /// Aggregate one template with this model's pooler.
    pub fn aggregate(&self, set: &FrameEmbeddingSet<T>) -> Result<TemplateRepresentation<T>> {
        match self {
            Model::Rean(p) => crate::aggregator::rean_aggregate(set, p),
            Model::QualityPool(p) => crate::aggregator::quality_pool(set, p),
            Model::NaiveLstm(p) => crate::aggregator::naive_lstm_pool(set, p),
        }
    }
}

/// Forward + triplet loss + full analytic backward over a batch.
/// Gradients come back flattened in the model's canonical parameter order;
/// accumulation runs in template index order for determinism.
pub fn batch_backward<T: Real>(
    model: &Model<T>,
    batch: &[FrameEmbeddingSet<T>],
    cfg: &TripletLossConfig<T>,
) -> Result<(T, usize, Vec<T>)> {
    let (loss, m, flat) = match model {
        Model::Rean(params) => {
            let mut fwds = Vec::with_capacity(batch.len());
            let mut reps = Vec::with_capacity(batch.len());
            for set in batch {
                let fwd = backward::rean_forward_cached(&set.frames, params)?;
                reps.push(TemplateRepresentation {
                    vector: fwd.rep.clone(),
                    template_id: set.template_id.clone(),
                    subject_id: set.subject_id.clone(),
                    method: AggregationMethod::Rean,
                });
                fwds.push(fwd);
            }
            let (loss, m, d_reps) = triplet_loss(&reps, cfg)?;
            let mut grads = params.zeros_like();
            for ((set, fwd), d_rep) in batch.iter().zip(&fwds).zip(&d_reps) {
                backward::rean_backward_template(&set.frames, params, fwd, d_rep, &mut grads);
            }
            (loss, m, grads.to_flat())
        }
        Model::NaiveLstm(params) => {
            let mut fwds = Vec::with_capacity(batch.len());
            let mut reps = Vec::with_capacity(batch.len());
            for set in batch {
                let fwd = backward::naive_forward_cached(&set.frames, params)?;
                reps.push(TemplateRepresentation {
                    vector: fwd.rep.clone(),
                    template_id: set.template_id.clone(),
                    subject_id: set.subject_id.clone(),
                    method: AggregationMethod::NaiveLstm,
                });
                fwds.push(fwd);
            }
            let (loss, m, d_reps) = triplet_loss(&reps, cfg)?;
            let mut grads = params.zeros_like();
            for ((set, fwd), d_rep) in batch.iter().zip(&fwds).zip(&d_reps) {
                backward::naive_backward_template(&set.frames, params, fwd, d_rep, &mut grads);
            }
            (loss, m, grads.to_flat())
        }
        Model::QualityPool(mlp) => {
            let mut fwds = Vec::with_capacity(batch.len());
            let mut reps = Vec::with_capacity(batch.len());
            for set in batch {
                let fwd = backward::quality_forward_cached(&set.frames, mlp)?;
                reps.push(TemplateRepresentation {
                    vector: fwd.rep.clone(),
                    template_id: set.template_id.clone(),
                    subject_id: set.subject_id.clone(),
                    method: AggregationMethod::Quality,
                });
                fwds.push(fwd);
            }
            let (loss, m, d_reps) = triplet_loss(&reps, cfg)?;
            let mut grads = mlp.zeros_like();
            for ((set, fwd), d_rep) in batch.iter().zip(&fwds).zip(&d_reps) {
                backward::quality_backward_template(&set.frames, mlp, fwd, d_rep, &mut grads);
            }
            (loss, m, grads.to_flat())
        }
    };
    if let Some(bad) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{} gradient", model.method()),
            coordinate: bad,
        });
    }
    Ok((loss, m, flat))
}

/// Analytic gradients of the recurrent attention pooler + triplet loss over
/// a batch, structured per parameter block.
pub fn backward<T: Real>(
    batch: &[FrameEmbeddingSet<T>],
    params: &AggregatorParams<T>,
    cfg: &TripletLossConfig<T>,
) -> Result<(T, usize, AggregatorParams<T>)> {
    let model = Model::Rean(params.clone());
    let (loss, m, flat) = batch_backward(&model, batch, cfg)?;
    let mut grads = params.zeros_like();
    grads.assign_from_flat(&flat);
    Ok((loss, m, grads))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Batches per epoch; default is dataset size divided by batch size.
    pub batches_per_epoch: Option<usize>,
    /// Coordinates sampled for the pre-training gradient check.
    pub gradcheck_coords: usize,
    pub gradcheck_tolerance: f64,
    pub clip_norm: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 20,
            lr: 1e-3,
            seed: 0,
            batches_per_epoch: None,
            gradcheck_coords: 64,
            gradcheck_tolerance: 1e-3,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_hard: Vec<usize>,
    pub val_loss: Vec<f64>,
    pub gradcheck: Option<GradientCheckReport>,
}

fn validation_loss<T: Real>(
    model: &Model<T>,
    val: &[FrameEmbeddingSet<T>],
    cfg: &TripletLossConfig<T>,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut reps = Vec::with_capacity(val.len());
    for set in val {
        if set.is_empty() {
            continue;
        }
        reps.push(model.aggregate(set)?);
    }
    match triplet_loss(&reps, cfg) {
        Ok((loss, _, _)) => Ok(Some(loss.to_f64().unwrap())),
        Err(Error::Insufficient(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Sampled-coordinate finite-difference check of the analytic batch gradient.
fn gradcheck_on_batch<T: Real>(
    model: &Model<T>,
    batch: &[FrameEmbeddingSet<T>],
    cfg: &TripletLossConfig<T>,
    coords: usize,
    rng: &mut impl Rng,
) -> Result<GradientCheckReport> {
    let (_, _, analytic) = batch_backward(model, batch, cfg)?;
    let n = analytic.len();
    let picked: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        let mut p: Vec<usize> = index_sample(rng, n, coords).into_vec();
        p.sort_unstable();
        p
    };
    let eps = T::c(1e-4);
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut max_err = 0.0f64;
    let mut worst = 0usize;
    for &k in &picked {
        let mut theta = base.clone();
        theta[k] = base[k] + eps;
        probe.assign_from_flat(&theta);
        let (lp, _, _) = loss_only(&probe, batch, cfg)?;
        theta[k] = base[k] - eps;
        probe.assign_from_flat(&theta);
        let (lm, _, _) = loss_only(&probe, batch, cfg)?;
        let numeric = (lp - lm).to_f64().unwrap() / (2.0 * eps.to_f64().unwrap());
        let err = relative_error(analytic[k].to_f64().unwrap(), numeric);
        if err > max_err {
            max_err = err;
            worst = k;
        }
    }
    Ok(GradientCheckReport {
        max_relative_error: max_err,
        worst_parameter_index: worst,
        eps: 1e-4,
    })
}

/// Batch loss without gradients (used by the finite-difference probes).
pub fn loss_only<T: Real>(
    model: &Model<T>,
    batch: &[FrameEmbeddingSet<T>],
    cfg: &TripletLossConfig<T>,
) -> Result<(T, usize, ())> {
    let mut reps = Vec::with_capacity(batch.len());
    for set in batch {
        reps.push(model.aggregate(set)?);
    }
    let (loss, m, _) = triplet_loss(&reps, cfg)?;
    Ok((loss, m, ()))
}

/// Train a pooler with Adam on hard-triplet batches. Deterministic given the
/// seed; runs a finite-difference gradient check before the first step and
/// aborts if the analytic gradient is off.
pub fn fit<T: Real>(
    train: &[FrameEmbeddingSet<T>],
    val: &[FrameEmbeddingSet<T>],
    model: &mut Model<T>,
    spec: &BatchSpec,
    cfg: &TripletLossConfig<T>,
    opts: &FitOptions,
) -> Result<TrainReport> {
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_hard: Vec::new(),
        val_loss: Vec::new(),
        gradcheck: None,
    };
    if opts.epochs == 0 {
        return Ok(report);
    }
    spec.validate()?;
    let batch_templates = spec.subjects_per_batch * spec.templates_per_subject;
    let batches_per_epoch = opts
        .batches_per_epoch
        .unwrap_or_else(|| (train.len() / batch_templates).max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ spec.seed);

    // gradient check on a probe batch before touching the parameters
    {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x9e3779b97f4a7c15));
        let probe_spec = BatchSpec {
            subjects_per_batch: spec.subjects_per_batch.min(2),
            templates_per_subject: spec.templates_per_subject.min(2).max(2),
            frames_per_template: spec.frames_per_template.min(4),
            seed: spec.seed,
        };
        let probe = sample_batch(train, &probe_spec, &mut probe_rng)?;
        let check = gradcheck_on_batch(model, &probe, cfg, opts.gradcheck_coords, &mut probe_rng)?;
        if check.max_relative_error > opts.gradcheck_tolerance {
            return Err(Error::GradientCheck {
                max_relative_error: check.max_relative_error,
                worst_parameter_index: check.worst_parameter_index,
                tolerance: opts.gradcheck_tolerance,
            });
        }
        report.gradcheck = Some(check);
    }

    let mut adam = AdamState::new(model.num_params(), T::c(opts.lr));
    for _epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0f64;
        let mut epoch_hard = 0usize;
        for _b in 0..batches_per_epoch {
            let batch = sample_batch(train, spec, &mut rng)?;
            let (loss, m, mut grads) = batch_backward(model, &batch, cfg)?;
            epoch_loss += loss.to_f64().unwrap();
            epoch_hard += m;
            // global-norm clipping
            let norm = grads
                .iter()
                .map(|&g| (g * g).to_f64().unwrap())
                .sum::<f64>()
                .sqrt();
            if norm > opts.clip_norm {
                let s = T::c(opts.clip_norm / norm);
                for g in &mut grads {
                    *g *= s;
                }
            }
            let mut flat = model.to_flat();
            adam_step(&mut flat, &grads, &mut adam)?;
            model.assign_from_flat(&flat);
        }
        report.epoch_loss.push(epoch_loss / batches_per_epoch as f64);
        report.epoch_hard.push(epoch_hard);
        if let Some(v) = validation_loss(model, val, cfg)? {
            report.val_loss.push(v);
        }
    }
    Ok(report)
}

/// Full-coordinate gradient check of a model on a batch (used by the CLI and
/// the acceptance suite).
pub fn full_gradient_check<T: Real>(
    model: &Model<T>,
    batch: &[FrameEmbeddingSet<T>],
    cfg: &TripletLossConfig<T>,
) -> Result<GradientCheckReport> {
    let (_, _, analytic) = batch_backward(model, batch, cfg)?;
    let base = model.to_flat();
    let mut probe = model.clone();
    let eps = T::c(1e-4);
    let numeric = crate::numerics::finite_difference_gradient(
        |theta: &[T]| {
            probe.assign_from_flat(theta);
            let (loss, _, _) = loss_only(&probe, batch, cfg)?;
            Ok(loss)
        },
        &base,
        eps,
    )?;
    Ok(check_gradients(&analytic, &numeric, 1e-4))
}
