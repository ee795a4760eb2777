//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines print in
//! order; criteria 5, 6 and 9 share one trained model pair.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use dfcon::consistency::{cross_loss, intra_loss, CrossBatch, CrossLossMode, IntraBatch};
use dfcon::corpus::Corpus;
use dfcon::gradcheck::{run_gradient_checks, GradCheckConfig};
use dfcon::linalg::Mat;
use dfcon::metrics::{average_precision, roc_auc, Label, LabeledScores};
use dfcon::model::{ConsistencyModel, ModelKind};
use dfcon::motion::{run_probe, synth_landmarks, LandmarkSynthConfig, ProbeConfig};
use dfcon::scorer::{cross_score, intra_score, percentile_linear, score_stream, ScoreReport, ScoringConfig};
use dfcon::streams::{load_stream, save_stream, Modality, WindowSeries};
use dfcon::synthgen::{corrupt_av_desync, corrupt_identity_drift, gen_corpus_in, gen_eval_set, write_synth_output, Corruption, SynthConfig, SynthWorld};
use dfcon::trainer::{train_model, TrainConfig, TrainRun};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Models trained once on the default synthetic corpus.
struct Trained {
    world: SynthWorld,
    intra: TrainRun,
    cross: TrainRun,
    train_time: Duration,
}

fn train_default() -> Trained {
    let t0 = Instant::now();
    let world = SynthWorld::new(&SynthConfig::default()).expect("synth world");
    let corpus = gen_corpus_in(&world).expect("corpus");
    let cfg = TrainConfig::default();
    let intra = train_model(&corpus, &cfg, ModelKind::Intra).expect("intra training");
    let cross = train_model(&corpus, &cfg, ModelKind::Cross).expect("cross training");
    Trained {
        world,
        intra,
        cross,
        train_time: t0.elapsed(),
    }
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let sizes = [(3, 3, 6, 5, 4), (4, 4, 8, 8, 6), (8, 4, 16, 12, 5)];
    for (k, &(identities, samples, dim, d_in, frames)) in sizes.iter().enumerate() {
        let cfg = GradCheckConfig {
            seeds: 10,
            first_seed: 100 * k as u64,
            identities,
            samples,
            dim,
            d_in,
            frames,
            ..GradCheckConfig::default()
        };
        let report = run_gradient_checks(&cfg).expect("gradient check");
        worst = worst.max(report.max_rel_error());
        failed.extend(report.groups.iter().filter(|g| !g.passed).map(|g| format!("{}/{}", g.check, g.group)));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < 30.0,
        format!(
            "intra, cross (both modes), aggregator over 3 sizes x 10 seeds: max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 30s){}",
            if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
        ),
    )
}

fn loss_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = common::rng(2);
    let mut cases = 0;
    for ni in 1..=4 {
        for nt in 1..=4 {
            for d in [2, 8] {
                let tau = rng.random_range(0.05..1.0);
                let mu = common::unit_vectors(&mut rng, ni * nt, d);
                let fast = intra_loss(&IntraBatch::new(ni, nt, d, mu.clone()).unwrap(), tau).unwrap();
                worst = worst.max((fast - common::naive_intra_loss(&mu, ni, nt, d, tau)).abs());
                let g = common::unit_vectors(&mut rng, ni * nt, d);
                let a = common::unit_vectors(&mut rng, ni * nt, d);
                let batch = CrossBatch::new(ni, nt, d, g.clone(), a.clone()).unwrap();
                for (mode, shared) in [(CrossLossMode::Symmetric, false), (CrossLossMode::SharedDenominator, true)] {
                    let fast = cross_loss(&batch, tau, mode).unwrap();
                    worst = worst.max((fast - common::naive_cross_loss(&g, &a, ni, nt, d, tau, shared)).abs());
                }
                cases += 1;
            }
        }
    }
    outcome(worst < 1e-9, format!("{cases} (I,T,d) cases, both losses and modes: max |diff| {worst:.2e} (< 1e-9)"))
}

fn closed_forms() -> Outcome {
    let mut rng = common::rng(3);
    let mut notes = Vec::new();
    let mut ok = true;

    let mu = common::unit_vectors(&mut rng, 5, 8);
    let l = intra_loss(&IntraBatch::new(1, 5, 8, mu).unwrap(), 0.07).unwrap();
    ok &= l == 0.0;
    notes.push(format!("I=1 intra {l}"));

    let mut worst = 0.0f64;
    for ni in [2, 4, 8] {
        let v = common::unit_vectors(&mut rng, 1, 8);
        let mu: Vec<f64> = (0..ni * 3).flat_map(|_| v.clone()).collect();
        let l = intra_loss(&IntraBatch::new(ni, 3, 8, mu).unwrap(), 0.07).unwrap();
        worst = worst.max((l - (ni as f64).ln()).abs());
    }
    ok &= worst < 1e-9;
    notes.push(format!("uniform intra vs ln I err {worst:.1e}"));

    let g = common::unit_vectors(&mut rng, 4, 8);
    let a = common::unit_vectors(&mut rng, 4, 8);
    let b = CrossBatch::new(4, 1, 8, g, a).unwrap();
    let t1 = cross_loss(&b, 0.07, CrossLossMode::Symmetric).unwrap().max(cross_loss(&b, 0.07, CrossLossMode::SharedDenominator).unwrap());
    ok &= t1 == 0.0;
    notes.push(format!("T=1 cross {t1}"));

    let e = vec![1.0, 0.0, 0.0, 1.0];
    let l = cross_loss(&CrossBatch::new(1, 2, 2, e.clone(), e).unwrap(), 1.0, CrossLossMode::Symmetric).unwrap();
    let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    ok &= (l - expected).abs() < 1e-9;
    notes.push(format!("I=1,T=2 aligned cross {l:.9} vs {expected:.9}"));
    outcome(ok, notes.join("; "))
}

fn metric_oracles() -> Outcome {
    let mut rng = common::rng(4);
    let (mut auc_err, mut ap_err) = (0.0f64, 0.0f64);
    let mut ties = 0;
    for k in 0..100 {
        let n = rng.random_range(2..=100);
        // coarse grid on half the instances forces ties
        let grid = k % 2 == 0;
        let mut scores: Vec<f64> = (0..n)
            .map(|_| if grid { rng.random_range(0..5) as f64 / 4.0 } else { rng.random() })
            .collect();
        let mut fake: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        fake[0] = true;
        fake[1] = false;
        if grid {
            scores[1] = scores[0];
            ties += 1;
        }
        let labels = fake.iter().map(|&f| if f { Label::Fake } else { Label::Real }).collect();
        let data = LabeledScores::new(scores.clone(), labels).unwrap();
        let real_s: Vec<f64> = scores.iter().zip(&fake).filter(|(_, &f)| !f).map(|(s, _)| *s).collect();
        let fake_s: Vec<f64> = scores.iter().zip(&fake).filter(|(_, &f)| f).map(|(s, _)| *s).collect();
        auc_err = auc_err.max((roc_auc(&data).unwrap() - common::brute_auc(&real_s, &fake_s)).abs());
        ap_err = ap_err.max((average_precision(&data).unwrap() - common::brute_ap(&scores, &fake)).abs());
    }
    outcome(
        auc_err < 1e-12 && ap_err < 1e-12,
        format!("100 instances ({ties} with ties): AUC err {auc_err:.1e}, AP err {ap_err:.1e} (< 1e-12)"),
    )
}

fn auc_of(real: &[f64], fake: &[f64]) -> f64 {
    roc_auc(&LabeledScores::from_groups(real, fake).unwrap()).unwrap()
}

fn separation(t: &Trained) -> Outcome {
    let t0 = Instant::now();
    let cfg = ScoringConfig::default();
    let items = gen_eval_set(&t.world).expect("eval set");
    let mut real = Vec::new();
    let mut drift = Vec::new();
    let mut desync = Vec::new();
    for item in &items {
        let r = score_stream(&item.stream.triple, &t.intra.model, &t.cross.model, &cfg).expect("score");
        match item.corruption {
            Corruption::Real => real.push(r),
            Corruption::Drift => drift.push(r),
            Corruption::Desync => desync.push(r),
        }
    }
    let col = |v: &[ScoreReport], f: fn(&ScoreReport) -> f64| v.iter().map(f).collect::<Vec<f64>>();
    let intra = auc_of(&col(&real, |r| r.score_intra), &col(&drift, |r| r.score_intra));
    let cross = auc_of(&col(&real, |r| r.score_cross), &col(&desync, |r| r.score_cross));
    let mut fakes = col(&drift, |r| r.score_combined);
    fakes.extend(col(&desync, |r| r.score_combined));
    let combined = auc_of(&col(&real, |r| r.score_combined), &fakes);
    let total = t.train_time + t0.elapsed();
    let steps = TrainConfig::default().total_steps;
    outcome(
        intra >= 0.95 && cross >= 0.95 && combined >= 0.95 && total.as_secs_f64() < 600.0,
        format!(
            "{steps} steps; {} real vs {} drift / {} desync: AUC intra {intra:.4}, cross {cross:.4}, combined {combined:.4} (>= 0.95); {:.1}s (< 600s)",
            real.len(),
            drift.len(),
            desync.len(),
            total.as_secs_f64()
        ),
    )
}

fn monotonicity(t: &Trained) -> Outcome {
    let cfg = ScoringConfig::default();
    let world = &t.world;
    let span = world.config().drift_span;
    let reals: Vec<_> = (0..100).map(|k| world.stream(world.eval_recipe(k)).unwrap()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut intra_means = Vec::new();
    for m in [0.0, 0.3, 0.6, 1.0] {
        let s: Vec<f64> = reals
            .iter()
            .map(|r| {
                let fake = corrupt_identity_drift(world, r, m, span).unwrap();
                score_stream(&fake.triple, &t.intra.model, &t.cross.model, &cfg).unwrap().score_intra
            })
            .collect();
        intra_means.push(mean(&s));
    }
    let mut cross_means = Vec::new();
    for k in [0, 1, 2, 4] {
        let s: Vec<f64> = reals
            .iter()
            .map(|r| {
                let fake = corrupt_av_desync(world, r, k).unwrap();
                score_stream(&fake.triple, &t.intra.model, &t.cross.model, &cfg).unwrap().score_cross
            })
            .collect();
        cross_means.push(mean(&s));
    }
    let strictly_down = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" > ");
    outcome(
        strictly_down(&intra_means) && strictly_down(&cross_means),
        format!(
            "100 streams: intra over m=0,.3,.6,1: {}; cross over offset=0,1,2,4: {}",
            fmt(&intra_means),
            fmt(&cross_means)
        ),
    )
}

fn series(rows: &[Vec<f64>], modality: Modality) -> WindowSeries {
    let spans = (0..rows.len()).map(|w| (5 * w, 5 * w + 5)).collect();
    WindowSeries::new(Mat::from_rows(rows), spans, modality, 25.0).unwrap()
}

fn scoring_exactness(t: &Trained) -> Outcome {
    let cfg = ScoringConfig::default();
    let mut ok = true;
    let mut notes = Vec::new();

    let p = percentile_linear(&[0.0, 0.25, 0.5, 0.75, 1.0], 20.0).unwrap();
    ok &= (p - 0.2).abs() < 1e-15;
    notes.push(format!("p20{{0,.25,.5,.75,1}}={p}"));

    let same = series(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]], Modality::Identity);
    let (s, arg) = intra_score(&same, &cfg).unwrap();
    ok &= (s - 1.0).abs() < 1e-15 && (arg.sim - 1.0).abs() < 1e-15;

    let two = series(&[vec![1.0, 0.0], vec![0.6, 0.8]], Modality::Identity);
    for n in [5.0, 20.0, 100.0] {
        let c = ScoringConfig { percentile_n: n, ..cfg.clone() };
        ok &= (intra_score(&two, &c).unwrap().0 - 0.6).abs() < 1e-15;
    }

    let e = series(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], Modality::Visual);
    let (s, _) = cross_score(&e, &series(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], Modality::Audio)).unwrap();
    ok &= (s - 1.0).abs() < 1e-15;
    let (s, _) = cross_score(&e, &series(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]], Modality::Audio)).unwrap();
    ok &= s == 0.0;
    let vis = series(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], Modality::Visual);
    let aud = series(&[vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()], vec![0.0, 1.0]], Modality::Audio);
    let (s, arg) = cross_score(&vis, &aud).unwrap();
    ok &= (s - 0.5).abs() < 1e-15 && arg.span == (10, 15);
    notes.push(format!("diag{{1,.5,0}}={s} argmin {:?}", arg.span));

    let mut additive = 0;
    for k in 0..20 {
        let s = t.world.stream(t.world.eval_recipe(k)).unwrap();
        let r = score_stream(&s.triple, &t.intra.model, &t.cross.model, &cfg).unwrap();
        if (r.score_intra + r.score_cross).to_bits() == r.score_combined.to_bits() {
            additive += 1;
        }
    }
    ok &= additive == 20;
    notes.push(format!("additivity bit-exact on {additive}/20 streams"));
    outcome(ok, notes.join("; "))
}

fn motion_probe() -> Outcome {
    let seqs = synth_landmarks(&LandmarkSynthConfig::default()).unwrap();
    let cfg = ProbeConfig::default();
    let real = run_probe(&seqs, &cfg, false).unwrap();
    let shuffled = run_probe(&seqs, &cfg, true).unwrap();
    let p = shuffled.random_baseline;
    let sigma = (p * (1.0 - p) / shuffled.num_validation as f64).sqrt();
    let dev = (shuffled.accuracy - p).abs();
    outcome(
        real.accuracy >= 0.25 && dev <= 3.0 * sigma,
        format!(
            "{} identities: accuracy {:.3} ({:.1}x chance, need >= 0.25); shuffled {:.3}, |dev| {dev:.3} <= 3 sigma {:.3}",
            real.num_classes,
            real.accuracy,
            real.improvement_factor,
            shuffled.accuracy,
            3.0 * sigma
        ),
    )
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().display().to_string();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism(t: &Trained) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let tmp = tempfile::tempdir().unwrap();

    // retrain both models with the same seed
    let corpus = gen_corpus_in(&t.world).unwrap();
    let cfg = TrainConfig::default();
    let intra2 = train_model(&corpus, &cfg, ModelKind::Intra).unwrap();
    let cross2 = train_model(&corpus, &cfg, ModelKind::Cross).unwrap();
    let same_ckpt = intra2.model.to_bytes() == t.intra.model.to_bytes() && cross2.model.to_bytes() == t.cross.model.to_bytes();
    ok &= same_ckpt;
    notes.push(format!("retrained checkpoints identical: {same_ckpt}"));

    let path = tmp.path().join("cross.ckpt");
    t.cross.model.save(&path).unwrap();
    let loaded = ConsistencyModel::load(&path).unwrap();
    let ck_rt = loaded == t.cross.model && loaded.to_bytes() == fs::read(&path).unwrap();
    ok &= ck_rt;
    notes.push(format!("checkpoint round trip: {ck_rt}"));

    let stream = t.world.stream(t.world.eval_recipe(3)).unwrap().triple;
    let a = score_stream(&stream, &t.intra.model, &t.cross.model, &ScoringConfig::default()).unwrap();
    let b = score_stream(&stream, &intra2.model, &loaded, &ScoringConfig::default()).unwrap();
    let same_scores = a.score_combined.to_bits() == b.score_combined.to_bits() && a == b;
    ok &= same_scores;
    notes.push(format!("scores identical: {same_scores}"));

    let dir = tmp.path().join("stream");
    let p = save_stream(&stream.visual, &dir).unwrap();
    let back = load_stream(&p).unwrap();
    let st_rt = back == stream.visual
        && back.frames.iter().zip(&stream.visual.frames).all(|(x, y)| x.to_bits() == y.to_bits());
    ok &= st_rt;
    notes.push(format!("stream round trip: {st_rt}"));

    let small = SynthConfig {
        num_identities: 4,
        sources_per_identity: 2,
        frames_per_source: 100,
        eval_streams: 3,
        ..SynthConfig::default()
    };
    write_synth_output(&small, tmp.path().join("s1")).unwrap();
    write_synth_output(&small, tmp.path().join("s2")).unwrap();
    let trees = tree_bytes(&tmp.path().join("s1")) == tree_bytes(&tmp.path().join("s2"));
    let corpora = Corpus::load_dir(tmp.path().join("s1/train")).unwrap() == gen_corpus_in(&SynthWorld::new(&small).unwrap()).unwrap();
    ok &= trees && corpora;
    notes.push(format!("synthetic trees identical: {trees}; reloaded corpus equal: {corpora}"));
    outcome(ok, notes.join("; "))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "loss oracle equivalence", loss_oracle());
    report(3, "closed-form loss values", closed_forms());
    report(4, "metric oracles", metric_oracles());
    let trained = train_default();
    report(5, "end-to-end synthetic separation", separation(&trained));
    report(6, "monotonicity", monotonicity(&trained));
    report(7, "scoring exactness", scoring_exactness(&trained));
    report(8, "motion probe", motion_probe());
    report(9, "determinism and formats", determinism(&trained));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
