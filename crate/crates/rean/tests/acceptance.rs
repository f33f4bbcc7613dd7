//! Acceptance suite. Each test prints one PASS/FAIL line per criterion
//! (visible with `cargo test --test acceptance -- --nocapture`) and asserts
//! the pinned tolerance.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rean::aggregator::{
    aggregate_weighted, avg_pool, normalize_attention, quality_pool, rean_aggregate,
    AggregationMethod, AggregatorParams, FrameEmbeddingSet, QualityMlpParams,
    TemplateRepresentation,
};
use rean::data::{
    decode_template, encode_template, generate_synthetic, plan_splits, Split, SplitPlan,
    SyntheticDatasetSpec,
};
use rean::error::Error;
use rean::eval::{
    closed_set_identification, context_filtered_aggregate, open_set_identification,
    similarity_score,
};
use rean::numerics::Matrix;
use rean::training::{
    fit, full_gradient_check, triplet_loss, BatchSpec, FitOptions, Model, TripletLossConfig,
};

fn check(criterion: &str, pass: bool, detail: &str) {
    println!("{} {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

fn random_matrix(rng: &mut StdRng, n: usize, d: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_template(rng: &mut StdRng, subject: &str, template: &str, n: usize, d: usize) -> FrameEmbeddingSet<f64> {
    FrameEmbeddingSet::new(template, subject, random_matrix(rng, n, d, -1.0, 1.0))
}

// ---------------------------------------------------------------------------
// criterion 1: gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(17);
    let model = Model::Rean(AggregatorParams::init(8, 4, &mut rng));
    let mut batch = Vec::new();
    for s in 0..2 {
        for t in 0..2 {
            batch.push(random_template(&mut rng, &format!("s{s}"), &format!("s{s}t{t}"), 4, 8));
        }
    }
    let report = full_gradient_check(&model, &batch, &TripletLossConfig::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "gradient-fidelity",
        report.max_relative_error < 1e-4 && elapsed < 30.0,
        &format!(
            "max relative error {:.3e} (tolerance 1e-4), {:.1}s (< 30s)",
            report.max_relative_error, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: attention normalization
// ---------------------------------------------------------------------------

#[test]
fn attention_normalization() {
    let mut rng = StdRng::seed_from_u64(23);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut all_positive = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let d = rng.gen_range(1..7);
        let q = random_matrix(&mut rng, n, d, -6.0, 6.0);
        let w = normalize_attention(&q).weights;
        for j in 0..d {
            let sum: f64 = (0..n).map(|i| w[(i, j)]).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
        all_positive &= w.data().iter().all(|&v| v > 0.0);

        // shift one entire column by a constant
        let j = rng.gen_range(0..d);
        let c = rng.gen_range(-5.0..5.0);
        let mut q2 = q.clone();
        for i in 0..n {
            q2[(i, j)] += c;
        }
        let w2 = normalize_attention(&q2).weights;
        for i in 0..n {
            for k in 0..d {
                worst_shift = worst_shift.max((w[(i, k)] - w2[(i, k)]).abs());
            }
        }
    }
    check(
        "attention-normalization",
        worst_sum < 1e-6 && all_positive && worst_shift < 1e-9,
        &format!(
            "1000 matrices: worst column-sum deviation {worst_sum:.2e} (< 1e-6), all entries positive: {all_positive}, worst shift-invariance deviation {worst_shift:.2e} (< 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: collapse equivalence
// ---------------------------------------------------------------------------

#[test]
fn collapse_equivalence() {
    let mut rng = StdRng::seed_from_u64(29);
    let mut init_rng = StdRng::seed_from_u64(30);
    let mut worst_rean = 0.0f64;
    let mut worst_quality = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(1..10);
        let d = rng.gen_range(2..8);
        let set = random_template(&mut rng, "s", &format!("t{i}"), n, d);

        // random LSTM, zeroed quality head: weights collapse to uniform
        let mut params = AggregatorParams::init(d, 3, &mut init_rng);
        params.head_w = Matrix::zeros(params.head_w.rows(), params.head_w.cols());
        params.head_b = vec![0.0; d];
        let rean = rean_aggregate(&set, &params).unwrap();
        let avg = avg_pool(&set);
        for (a, b) in rean.vector.iter().zip(&avg.vector) {
            worst_rean = worst_rean.max((a - b).abs());
        }

        // zero quality MLP: every scalar logit is equal
        let mlp = QualityMlpParams::zeros(d, 4);
        let q = quality_pool(&set, &mlp).unwrap();
        for (a, b) in q.vector.iter().zip(&avg.vector) {
            worst_quality = worst_quality.max((a - b).abs());
        }
    }
    check(
        "collapse-equivalence",
        worst_rean < 1e-9 && worst_quality < 1e-9,
        &format!(
            "100 templates: |rean - avg| <= {worst_rean:.2e}, |quality - avg| <= {worst_quality:.2e} (both < 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: oracle equivalence
// ---------------------------------------------------------------------------

fn rep(subject: &str, template: &str, v: Vec<f64>) -> TemplateRepresentation<f64> {
    TemplateRepresentation {
        vector: v,
        template_id: template.to_string(),
        subject_id: subject.to_string(),
        method: AggregationMethod::Avg,
    }
}

#[test]
fn oracle_equivalence() {
    let mut rng = StdRng::seed_from_u64(41);
    let mut worst = 0.0f64;

    // aggregate_weighted vs scalar double loop
    for _ in 0..50 {
        let n = rng.gen_range(1..7);
        let d = rng.gen_range(1..7);
        let frames = random_matrix(&mut rng, n, d, -1.0, 1.0);
        let q = random_matrix(&mut rng, n, d, -3.0, 3.0);
        let w = normalize_attention(&q);
        let got = aggregate_weighted(&frames, &w).unwrap();
        for j in 0..d {
            let mut want = 0.0;
            for i in 0..n {
                want += frames[(i, j)] * w.weights[(i, j)];
            }
            worst = worst.max((got[j] - want).abs());
        }
    }

    // triplet_loss vs exhaustive enumeration
    for _ in 0..50 {
        let mut reps = Vec::new();
        for s in 0..rng.gen_range(2..7) {
            for t in 0..2 {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                reps.push(rep(&format!("s{s}"), &format!("s{s}t{t}"), v));
            }
        }
        let margin = rng.gen_range(0.1..2.0);
        let (loss, m, _) = triplet_loss(&reps, &TripletLossConfig { margin }).unwrap();
        let mut terms = Vec::new();
        for a in 0..reps.len() {
            for p in 0..reps.len() {
                for q in 0..reps.len() {
                    if a == p
                        || reps[a].subject_id != reps[p].subject_id
                        || reps[q].subject_id == reps[a].subject_id
                    {
                        continue;
                    }
                    let d2 = |x: &[f64], y: &[f64]| -> f64 {
                        x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum()
                    };
                    let term = d2(&reps[a].vector, &reps[p].vector)
                        - d2(&reps[a].vector, &reps[q].vector)
                        + margin;
                    if term > 0.0 {
                        terms.push(term);
                    }
                }
            }
        }
        assert_eq!(m, terms.len());
        let want = if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        };
        worst = worst.max((loss - want).abs());
    }

    // closed-set identification vs rank enumeration
    let mut id_exact = true;
    for _ in 0..30 {
        let subjects = rng.gen_range(2..7);
        let gallery: Vec<_> = (0..subjects)
            .map(|s| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rep(&format!("s{s}"), &format!("g{s}"), v)
            })
            .collect();
        let probes: Vec<_> = (0..2 * subjects)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rep(&format!("s{}", i % subjects), &format!("p{i}"), v)
            })
            .collect();
        let ks: Vec<usize> = (1..=subjects).collect();
        let res = closed_set_identification(&probes, &gallery, &ks).unwrap();
        for (ki, &k) in ks.iter().enumerate() {
            let mut hits = 0;
            for p in &probes {
                let scores: Vec<f64> = gallery
                    .iter()
                    .map(|g| similarity_score(p, g).unwrap())
                    .collect();
                // rank of the mated entry: entries strictly ahead under the
                // (score desc, insertion index asc) order
                let gi = gallery
                    .iter()
                    .position(|g| g.subject_id == p.subject_id)
                    .unwrap();
                let ahead = (0..gallery.len())
                    .filter(|&j| {
                        j != gi && (scores[j] > scores[gi] || (scores[j] == scores[gi] && j < gi))
                    })
                    .count();
                if ahead < k {
                    hits += 1;
                }
            }
            id_exact &= res.rates[ki] == hits as f64 / probes.len() as f64;
        }
    }

    // open-set identification vs threshold sweep
    let mut open_exact = true;
    for _ in 0..30 {
        let subjects = rng.gen_range(2..6);
        let gallery: Vec<_> = (0..subjects)
            .map(|s| {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rep(&format!("s{s}"), &format!("g{s}"), v)
            })
            .collect();
        let mut probes = Vec::new();
        for i in 0..8 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            probes.push(rep(&format!("s{}", i % subjects), &format!("m{i}"), v));
        }
        for i in 0..8 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            probes.push(rep(&format!("imp{i}"), &format!("n{i}"), v));
        }
        let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
        let mut mated = Vec::new();
        let mut nm = Vec::new();
        for p in &probes {
            let scores: Vec<f64> = gallery
                .iter()
                .map(|g| similarity_score(p, g).unwrap())
                .collect();
            let mut best = 0;
            for j in 1..gallery.len() {
                if scores[j] > scores[best] {
                    best = j;
                }
            }
            if enrolled.contains(p.subject_id.as_str()) {
                mated.push((gallery[best].subject_id == p.subject_id, scores[best]));
            } else {
                nm.push(scores[best]);
            }
        }
        for target in [0.0, 0.125, 0.25, 0.5, 1.0] {
            let res = open_set_identification(&probes, &gallery, &[target]).unwrap();
            // sweep every observed top-1 score ascending, smallest admissible wins
            let mut taus: Vec<f64> = nm.iter().copied().chain(mated.iter().map(|&(_, s)| s)).collect();
            taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
            taus.dedup();
            taus.push(f64::INFINITY);
            let tau = *taus
                .iter()
                .find(|&&t| nm.iter().filter(|&&s| s >= t).count() as f64 / nm.len() as f64 <= target)
                .unwrap();
            let tpir = mated.iter().filter(|&&(c, s)| c && s >= tau).count() as f64
                / mated.len() as f64;
            open_exact &= res.points[0].threshold == tau && res.points[0].tpir == tpir;
        }
    }

    // context_filtered_aggregate vs exhaustive interval-split search
    let mut ctx_worst = 0.0f64;
    for i in 0..50 {
        let n = rng.gen_range(2..9);
        let d = 4;
        let set = random_template(&mut rng, "s", &format!("c{i}"), n, d);
        let mut init = StdRng::seed_from_u64(1000 + i);
        let mlp = QualityMlpParams::init(d, 3, &mut init);
        let got = context_filtered_aggregate(&set, &mlp).unwrap();

        let logits = rean::aggregator::quality_logits(&set.frames, &mlp).unwrap();
        // exhaustive search over interval splits of the sorted scores
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap());
        let sse = |part: &[usize]| -> f64 {
            if part.is_empty() {
                return 0.0;
            }
            let mean = part.iter().map(|&k| logits[k]).sum::<f64>() / part.len() as f64;
            part.iter().map(|&k| (logits[k] - mean).powi(2)).sum()
        };
        let mut best_cut = 1;
        let mut best = f64::INFINITY;
        for cut in 1..n {
            let cost = sse(&idx[..cut]) + sse(&idx[cut..]);
            if cost < best {
                best = cost;
                best_cut = cut;
            }
        }
        let kept: Vec<usize> = idx[best_cut..].to_vec();
        let mx = kept.iter().map(|&k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = kept.iter().map(|&k| (logits[k] - mx).exp()).sum();
        let mut want = vec![0.0; d];
        for &k in &kept {
            let w = (logits[k] - mx).exp() / denom;
            for j in 0..d {
                want[j] += w * set.frames[(k, j)];
            }
        }
        for j in 0..d {
            ctx_worst = ctx_worst.max((got.vector[j] - want[j]).abs());
        }
    }

    check(
        "oracle-equivalence",
        worst < 1e-12 && id_exact && open_exact && ctx_worst < 1e-12,
        &format!(
            "aggregate_weighted/triplet_loss worst dev {worst:.2e} (< 1e-12), closed-set exact: {id_exact}, open-set exact: {open_exact}, context-filter worst dev {ctx_worst:.2e} (< 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// shared synthetic benchmark (criteria 5, 6, 8)
// ---------------------------------------------------------------------------

struct BenchmarkRun {
    rank1_rean: f64,
    rank1_quality: f64,
    rank1_naive: f64,
    rank_curve: Vec<f64>,
    tpir_curve: Vec<f64>,
    rean_first_loss: f64,
    rean_last_loss: f64,
    rean_trace_a: Vec<u64>,
    rean_trace_b: Vec<u64>,
    train_seconds: f64,
}

/// Round-trip a template through the on-disk f32 format, as the CLI pipeline
/// would, and L2-normalize on ingestion.
fn through_storage(set: &FrameEmbeddingSet<f64>) -> FrameEmbeddingSet<f64> {
    let mut back: FrameEmbeddingSet<f64> = decode_template(&encode_template(set)).unwrap();
    back.normalize_frames();
    back
}

fn train_one(
    method: &str,
    train: &[FrameEmbeddingSet<f64>],
    val: &[FrameEmbeddingSet<f64>],
) -> (Model<f64>, Vec<f64>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut model = match method {
        "rean" => Model::Rean(AggregatorParams::init(32, 16, &mut rng)),
        "quality" => Model::QualityPool(QualityMlpParams::init(32, 16, &mut rng)),
        _ => Model::NaiveLstm(AggregatorParams::init(32, 16, &mut rng)),
    };
    let spec = BatchSpec {
        subjects_per_batch: 16,
        templates_per_subject: 3,
        frames_per_template: 16,
        seed: 1,
    };
    let opts = FitOptions {
        epochs: 25,
        lr: 1e-3,
        seed: 1,
        batches_per_epoch: Some(8),
        ..FitOptions::default()
    };
    let report = fit(train, val, &mut model, &spec, &TripletLossConfig::default(), &opts).unwrap();
    (model, report.epoch_loss)
}

fn rank1(
    model: &Model<f64>,
    probes: &[FrameEmbeddingSet<f64>],
    gallery: &[TemplateRepresentation<f64>],
    enrolled: &BTreeSet<String>,
) -> f64 {
    let mated: Vec<TemplateRepresentation<f64>> = probes
        .iter()
        .filter(|p| enrolled.contains(&p.subject_id))
        .map(|p| model.aggregate(p).unwrap())
        .collect();
    closed_set_identification(&mated, gallery, &[1]).unwrap().rates[0]
}

fn benchmark() -> &'static BenchmarkRun {
    static RUN: OnceLock<BenchmarkRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let spec = SyntheticDatasetSpec {
            num_subjects: 50,
            templates_per_subject: 4,
            frames_per_template: 16,
            dim: 32,
            clean_sigma: 0.05,
            corrupt_sigma: 1.0,
            redundancy_ratio: 0.75,
            duplicate_jitter: 1e-3,
            seed: 42,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let plan = SplitPlan {
            train_subjects: 40,
            val_templates_per_subject: 1,
            gallery_subjects: 8,
        };
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut gallery_sets = Vec::new();
        let mut probes = Vec::new();
        for (set, split) in plan_splits(&ds, &plan).unwrap() {
            let set = through_storage(&set);
            match split {
                Split::Train => train.push(set),
                Split::Val => val.push(set),
                Split::Gallery => gallery_sets.push(set),
                Split::Probe => probes.push(set),
            }
        }
        let gallery: Vec<TemplateRepresentation<f64>> =
            gallery_sets.iter().map(avg_pool).collect();
        let enrolled: BTreeSet<String> =
            gallery.iter().map(|g| g.subject_id.clone()).collect();

        let start = Instant::now();
        let (rean_model, trace_a) = train_one("rean", &train, &val);
        let (quality_model, _) = train_one("quality", &train, &val);
        let (naive_model, _) = train_one("naive_lstm", &train, &val);
        let train_seconds = start.elapsed().as_secs_f64();
        let (_, trace_b) = train_one("rean", &train, &val);

        let rank1_rean = rank1(&rean_model, &probes, &gallery, &enrolled);
        let rank1_quality = rank1(&quality_model, &probes, &gallery, &enrolled);
        let rank1_naive = rank1(&naive_model, &probes, &gallery, &enrolled);

        let mated: Vec<TemplateRepresentation<f64>> = probes
            .iter()
            .filter(|p| enrolled.contains(&p.subject_id))
            .map(|p| rean_model.aggregate(p).unwrap())
            .collect();
        let all: Vec<TemplateRepresentation<f64>> = probes
            .iter()
            .map(|p| rean_model.aggregate(p).unwrap())
            .collect();
        let ks: Vec<usize> = (1..=8).collect();
        let rank_curve = closed_set_identification(&mated, &gallery, &ks)
            .unwrap()
            .rates;
        let fpir = [0.125, 0.25, 0.5, 1.0];
        let tpir_curve = open_set_identification(&all, &gallery, &fpir)
            .unwrap()
            .points
            .iter()
            .map(|p| p.tpir)
            .collect();

        BenchmarkRun {
            rank1_rean,
            rank1_quality,
            rank1_naive,
            rank_curve,
            tpir_curve,
            rean_first_loss: trace_a[0],
            rean_last_loss: *trace_a.last().unwrap(),
            rean_trace_a: trace_a.iter().map(|v| v.to_bits()).collect(),
            rean_trace_b: trace_b.iter().map(|v| v.to_bits()).collect(),
            train_seconds,
        }
    })
}

// ---------------------------------------------------------------------------
// criterion 5: redundancy benchmark
// ---------------------------------------------------------------------------

#[test]
fn redundancy_benchmark() {
    let run = benchmark();
    let gap = run.rank1_rean - run.rank1_quality;
    let pass = gap >= 0.05
        && run.rank1_rean > run.rank1_naive
        && run.rank1_quality > run.rank1_naive
        && run.train_seconds < 3.0 * 600.0;
    check(
        "redundancy-benchmark",
        pass,
        &format!(
            "rank-1 rean {:.4} vs quality {:.4} (gap {:.1}pp >= 5pp) vs naive_lstm {:.4}; 3 trainings in {:.1}s",
            run.rank1_rean,
            run.rank1_quality,
            gap * 100.0,
            run.rank1_naive,
            run.train_seconds
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: training sanity
// ---------------------------------------------------------------------------

#[test]
fn training_sanity() {
    let run = benchmark();
    let ratio = run.rean_last_loss / run.rean_first_loss;
    let pass = ratio < 0.5 && run.rean_trace_a == run.rean_trace_b;
    check(
        "training-sanity",
        pass,
        &format!(
            "final/first epoch loss {:.4}/{:.4} = {:.1}% (< 50%), repeated-seed trace bit-identical: {}",
            run.rean_last_loss,
            run.rean_first_loss,
            ratio * 100.0,
            run.rean_trace_a == run.rean_trace_b
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: serialization
// ---------------------------------------------------------------------------

#[test]
fn serialization() {
    let mut rng = StdRng::seed_from_u64(53);
    let mut exact = true;
    for i in 0..1000 {
        let n = if i % 50 == 0 { 0 } else { rng.gen_range(1..6) };
        let d = rng.gen_range(1..8);
        // draw f32-representable values so the round-trip must be bit-exact
        let data: Vec<f64> = (0..n * d)
            .map(|_| rng.gen_range(-2.0f32..2.0) as f64)
            .collect();
        let set = FrameEmbeddingSet::new(
            format!("t{i}"),
            format!("s{}", i % 7),
            Matrix::from_vec(n, d, data).unwrap(),
        );
        let bytes = encode_template(&set);
        let back: FrameEmbeddingSet<f64> = decode_template(&bytes).unwrap();
        exact &= encode_template(&back) == bytes && back == set;
    }

    let sample = FrameEmbeddingSet::new("t", "s", random_matrix(&mut rng, 2, 3, -1.0, 1.0));
    let mut bad = encode_template(&sample);
    bad[0] = b'X';
    let magic_err = matches!(decode_template::<f64>(&bad), Err(Error::BadMagic { .. }));
    let good = encode_template(&sample);
    let trunc_err = matches!(
        decode_template::<f64>(&good[..good.len() - 2]),
        Err(Error::Truncated { .. })
    );
    check(
        "serialization",
        exact && magic_err && trunc_err,
        &format!(
            "1000 templates (incl. N=0) bit-exact: {exact}, bad magic kind: {magic_err}, truncation kind: {trunc_err}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: protocol monotonicity
// ---------------------------------------------------------------------------

#[test]
fn protocol_monotonicity() {
    let run = benchmark();
    let rank_mono = run.rank_curve.windows(2).all(|w| w[1] >= w[0]);
    let tpir_mono = run.tpir_curve.windows(2).all(|w| w[1] >= w[0]);
    check(
        "protocol-monotonicity",
        rank_mono && tpir_mono,
        &format!(
            "rank-k IR curve {:?} non-decreasing: {rank_mono}; TPIR curve {:?} non-decreasing: {tpir_mono}",
            run.rank_curve, run.tpir_curve
        ),
    );
}
