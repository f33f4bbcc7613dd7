//! Recognition protocols: closed-set rank-k identification, open-set
//! TPIR@FPIR, k-fold verification, and context-filtered aggregation.
//!
//! All scoring is cosine similarity on L2-normalized representations; the
//! zero vector (failure-to-enroll) scores -1 against everything.

use std::collections::BTreeSet;

use crate::aggregator::{
    quality_logits, softmax_inplace, AggregationMethod, FrameEmbeddingSet, QualityMlpParams,
    TemplateRepresentation,
};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Real};

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Cosine similarity of L2-normalized representations. Zero vectors score -1
/// (worst possible) so failure-to-enroll templates never win rank-1.
pub fn similarity_score<T: Real>(
    a: &TemplateRepresentation<T>,
    b: &TemplateRepresentation<T>,
) -> Result<T> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::shape(
            "similarity_score",
            (1, a.vector.len()),
            (1, b.vector.len()),
        ));
    }
    let na = l2_norm(&a.vector);
    let nb = l2_norm(&b.vector);
    if na == T::zero() || nb == T::zero() {
        return Ok(-T::one());
    }
    let dot: T = a.vector.iter().zip(&b.vector).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Gallery indices sorted by descending score, ties broken by ascending
/// insertion index (stable sort over a pre-ordered index list).
fn rank_gallery<T: Real>(
    probe: &TemplateRepresentation<T>,
    gallery: &[TemplateRepresentation<T>],
) -> Result<(Vec<usize>, Vec<T>)> {
    let scores: Vec<T> = gallery
        .iter()
        .map(|g| similarity_score(probe, g))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    Ok((order, scores))
}

// ---------------------------------------------------------------------------
// closed-set identification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IdentificationResult {
    pub ks: Vec<usize>,
    /// rank-k identification rate per configured k, same order as `ks`
    pub rates: Vec<f64>,
    /// per probe, gallery indices in ranked order
    pub ranked: Vec<Vec<usize>>,
}

/// Closed-set rank-k identification. Every probe subject must be enrolled in
/// the gallery; a rank-k hit means the correct subject appears among the top
/// k ranked gallery entries.
pub fn closed_set_identification<T: Real>(
    probes: &[TemplateRepresentation<T>],
    gallery: &[TemplateRepresentation<T>],
    ks: &[usize],
) -> Result<IdentificationResult> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol("empty probe or gallery set".into()));
    }
    let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    let mut hits = vec![0usize; ks.len()];
    let mut ranked = Vec::with_capacity(probes.len());
    for p in probes {
        if !enrolled.contains(p.subject_id.as_str()) {
            return Err(Error::Protocol(format!(
                "probe subject '{}' not enrolled in gallery (open-set case)",
                p.subject_id
            )));
        }
        let (order, _) = rank_gallery(p, gallery)?;
        for (ki, &k) in ks.iter().enumerate() {
            if order
                .iter()
                .take(k)
                .any(|&g| gallery[g].subject_id == p.subject_id)
            {
                hits[ki] += 1;
            }
        }
        ranked.push(order);
    }
    let n = probes.len() as f64;
    Ok(IdentificationResult {
        ks: ks.to_vec(),
        rates: hits.iter().map(|&h| h as f64 / n).collect(),
        ranked,
    })
}

// ---------------------------------------------------------------------------
// open-set identification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OpenSetPoint {
    pub fpir_target: f64,
    pub tpir: f64,
    /// score threshold realizing the point; +inf when no threshold keeps the
    /// false-alarm fraction within target
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct OpenSetResult {
    pub points: Vec<OpenSetPoint>,
    pub mated_probes: usize,
    pub non_mated_probes: usize,
}

/// Open-set identification. Probes whose subject is absent from the gallery
/// are non-mated; their top-1 scores are the false-alarm candidates. For each
/// FPIR target the threshold is the conservative quantile: the smallest
/// observed top-1 score (over all probes) whose acceptance keeps the
/// false-alarm fraction <= target, +inf if even the largest observed score
/// exceeds it. TPIR is the fraction of mated probes ranked correctly at
/// rank-1 with top-1 score >= threshold.
pub fn open_set_identification<T: Real>(
    probes: &[TemplateRepresentation<T>],
    gallery: &[TemplateRepresentation<T>],
    fpir_points: &[f64],
) -> Result<OpenSetResult> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    let mut mated = Vec::new(); // (top-1 correct, top-1 score)
    let mut non_mated_scores = Vec::new();
    for p in probes {
        let (order, scores) = rank_gallery(p, gallery)?;
        let top = order[0];
        let s = scores[top].to_f64().unwrap();
        if enrolled.contains(p.subject_id.as_str()) {
            mated.push((gallery[top].subject_id == p.subject_id, s));
        } else {
            non_mated_scores.push(s);
        }
    }
    if non_mated_scores.is_empty() {
        return Err(Error::Protocol(
            "no non-mated probes: FPIR is undefined".into(),
        ));
    }
    let nn = non_mated_scores.len() as f64;
    let mut candidates = non_mated_scores.clone();
    candidates.extend(mated.iter().map(|&(_, s)| s));
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut points = Vec::with_capacity(fpir_points.len());
    for &target in fpir_points {
        let mut threshold = f64::INFINITY;
        for &tau in &candidates {
            let fa = non_mated_scores.iter().filter(|&&s| s >= tau).count() as f64 / nn;
            if fa <= target {
                threshold = tau;
                break;
            }
        }
        let tpir = if mated.is_empty() {
            0.0
        } else {
            mated
                .iter()
                .filter(|&&(correct, s)| correct && s >= threshold)
                .count() as f64
                / mated.len() as f64
        };
        points.push(OpenSetPoint {
            fpir_target: target,
            tpir,
            threshold,
        });
    }
    Ok(OpenSetResult {
        points,
        mated_probes: mated.len(),
        non_mated_probes: non_mated_scores.len(),
    })
}

// ---------------------------------------------------------------------------
// k-fold verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub same: bool,
}

#[derive(Debug, Clone)]
pub struct VerificationResult {
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn accuracy(pairs: &[&ScoredPair], tau: f64) -> f64 {
    let good = pairs
        .iter()
        .filter(|p| (p.score >= tau) == p.same)
        .count();
    good as f64 / pairs.len() as f64
}

/// Accuracy-maximizing threshold over `pairs`: sweep midpoints of consecutive
/// distinct sorted scores plus sentinels below/above the range. Ties pick the
/// smallest threshold.
fn best_threshold(pairs: &[&ScoredPair]) -> f64 {
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mut candidates = vec![scores[0] - 1.0];
    candidates.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(scores[scores.len() - 1] + 1.0);

    let mut best = candidates[0];
    let mut best_acc = accuracy(pairs, best);
    for &c in &candidates[1..] {
        let a = accuracy(pairs, c);
        if a > best_acc {
            best_acc = a;
            best = c;
        }
    }
    best
}

/// 10-fold (configurable) verification. Pairs are split into `folds`
/// contiguous chunks of near-equal size; per fold, the threshold is chosen on
/// the other folds only and applied to the held-out fold.
pub fn verification_kfold(pairs: &[ScoredPair], folds: usize) -> Result<VerificationResult> {
    if folds < 2 || pairs.len() < folds {
        return Err(Error::Protocol(format!(
            "need at least {folds} pairs for {folds}-fold verification, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let base = n / folds;
    let extra = n % folds;
    let mut bounds = Vec::with_capacity(folds + 1);
    let mut pos = 0;
    bounds.push(0);
    for f in 0..folds {
        pos += base + usize::from(f < extra);
        bounds.push(pos);
    }
    for f in 0..folds {
        let fold = &pairs[bounds[f]..bounds[f + 1]];
        let same = fold.iter().filter(|p| p.same).count();
        if same == 0 || same == fold.len() {
            return Err(Error::Protocol(format!(
                "fold {f} contains a single class; cannot score verification"
            )));
        }
    }

    let mut fold_accuracy = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<&ScoredPair> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < bounds[f] || *i >= bounds[f + 1])
            .map(|(_, p)| p)
            .collect();
        let tau = best_threshold(&train);
        let held: Vec<&ScoredPair> = pairs[bounds[f]..bounds[f + 1]].iter().collect();
        fold_accuracy.push(accuracy(&held, tau));
        thresholds.push(tau);
    }
    let mean = fold_accuracy.iter().sum::<f64>() / folds as f64;
    let var = fold_accuracy
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / folds as f64;
    Ok(VerificationResult {
        fold_accuracy,
        thresholds,
        mean,
        std: var.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// context-filtered aggregation
// ---------------------------------------------------------------------------

/// Exact 1-D 2-means over `scores`: the optimum is an interval split of the
/// sorted values, so the best cut is found directly by minimizing the
/// within-cluster sum of squares over all N-1 cuts (ties take the first cut).
/// Lloyd iteration from extreme initial centroids can stall in a worse local
/// optimum, so the split is computed in closed form instead. Returns
/// per-score membership in the higher cluster.
fn two_means_high_group<T: Real>(scores: &[T]) -> Vec<bool> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    // prefix sums of values and squares in sorted order
    let mut ps = vec![T::zero(); n + 1];
    let mut ps2 = vec![T::zero(); n + 1];
    for (k, &i) in idx.iter().enumerate() {
        ps[k + 1] = ps[k] + scores[i];
        ps2[k + 1] = ps2[k] + scores[i] * scores[i];
    }
    let sse = |a: usize, b: usize| -> T {
        // within-cluster sum of squares over sorted positions [a, b)
        let cnt = T::from_usize(b - a).unwrap();
        let sum = ps[b] - ps[a];
        (ps2[b] - ps2[a]) - sum * sum / cnt
    };
    let mut best_cut = 1;
    let mut best = T::infinity();
    for cut in 1..n {
        let cost = sse(0, cut) + sse(cut, n);
        if cost < best {
            best = cost;
            best_cut = cut;
        }
    }
    let mut high = vec![false; n];
    for &i in &idx[best_cut..] {
        high[i] = true;
    }
    high
}

/// Quality pooling restricted to the higher-quality frame group: frames are
/// split into two groups by 2-means on their scalar quality scores and only
/// the higher group is aggregated (softmax weights over that group). When all
/// scores are equal the clustering is degenerate and the full quality pool is
/// returned instead.
pub fn context_filtered_aggregate<T: Real>(
    set: &FrameEmbeddingSet<T>,
    mlp: &QualityMlpParams<T>,
) -> Result<TemplateRepresentation<T>> {
    let (n, d) = set.frames.shape();
    if n == 0 {
        return Err(Error::EmptyTemplate(set.template_id.clone()));
    }
    let logits = quality_logits(&set.frames, mlp)?;
    let all_equal = logits.iter().all(|&s| s == logits[0]);
    if all_equal {
        let mut rep = crate::aggregator::quality_pool(set, mlp)?;
        rep.method = AggregationMethod::ContextFilter;
        return Ok(rep);
    }
    let high = two_means_high_group(&logits);
    let mut kept_logits: Vec<T> = Vec::new();
    let mut kept_rows: Vec<usize> = Vec::new();
    for i in 0..n {
        if high[i] {
            kept_logits.push(logits[i]);
            kept_rows.push(i);
        }
    }
    softmax_inplace(&mut kept_logits);
    let mut v = vec![T::zero(); d];
    for (&i, &w) in kept_rows.iter().zip(&kept_logits) {
        for (vj, &fj) in v.iter_mut().zip(set.frames.row(i)) {
            *vj += w * fj;
        }
    }
    Ok(TemplateRepresentation {
        vector: v,
        template_id: set.template_id.clone(),
        subject_id: set.subject_id.clone(),
        method: AggregationMethod::ContextFilter,
    })
}

/// Line-oriented rendering shared by the CLI: `metric<TAB>operating_point<TAB>value`.
pub fn render_identification(res: &IdentificationResult) -> String {
    let mut out = String::new();
    for (k, r) in res.ks.iter().zip(&res.rates) {
        out.push_str(&format!("rank_ir\t{k}\t{r:.6}\n"));
    }
    out
}

pub fn render_open_set(res: &OpenSetResult) -> String {
    let mut out = String::new();
    for p in &res.points {
        out.push_str(&format!("tpir\t{}\t{:.6}\n", p.fpir_target, p.tpir));
    }
    out
}

pub fn render_verification(res: &VerificationResult) -> String {
    let mut out = String::new();
    for (i, a) in res.fold_accuracy.iter().enumerate() {
        out.push_str(&format!("fold_accuracy\t{i}\t{a:.6}\n"));
    }
    out.push_str(&format!("accuracy_mean\t-\t{:.6}\n", res.mean));
    out.push_str(&format!("accuracy_std\t-\t{:.6}\n", res.std));
    out
}
