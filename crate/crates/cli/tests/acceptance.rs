//! Acceptance gate for the whole workspace. Eight criteria, one test each,
//! covering: analytic gradients (1), temporal-graph invariants (2), metric
//! reference equivalence (3), loss closed-form spot checks (4), the
//! alternating-schedule trend (5), the propagation-network variant trend (6),
//! bytewise CLI determinism (7), and file-format robustness (8).
//!
//! Each test prints a `criterion N ...: PASS` line (visible with
//! `--nocapture`); the harness result line per test is the machine-readable
//! verdict. The two training-trend criteria serialize on a mutex so their
//! wall-clock budgets are measured without mutual contention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use tempfile::TempDir;
use tsseg_core::data::{
    load_dataset, read_features, read_labels, synth_dataset, write_features, write_labels,
    SynthConfig, TimestampAnnotation,
};
use tsseg_core::gcn::{
    gcn_backward, gcn_forward, gcn_init, load_gcn_checkpoint, save_gcn_checkpoint, GcnVariant,
};
use tsseg_core::graph::{build_graph, EdgeMode};
use tsseg_core::losses::{class_loss, conf_loss, graph_loss, seg_loss, smooth_loss, LossWeights};
use tsseg_core::metrics::{accuracy, edit_score, f1_at};
use tsseg_core::numerics::{finite_diff_grad, grad_rel_error, log_row_softmax, Matrix, Real};
use tsseg_core::segmenter::{
    load_tcn_checkpoint, save_tcn_checkpoint, tcn_backward, tcn_forward, tcn_init, TcnConfig,
};
use tsseg_core::trainer::{run, Phase, RunRecord, ScheduleConfig};
use tsseg_core::Error;

const GRAD_TOL: Real = 1e-4;
const FD_H: Real = 1e-5;
/// Instances whose hinge/truncation/ReLU arguments land closer to a kink than
/// this are skipped: finite differences straddle the kink there and disagree
/// with the (one-sided) analytic derivative by construction.
const KINK_MARGIN: Real = 1e-3;

static HEAVY: Mutex<()> = Mutex::new(());

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: Real) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("dimensions match the data length")
}

fn relu_margin_ok(pre: &Matrix) -> bool {
    pre.data().iter().all(|x| x.abs() >= KINK_MARGIN)
}

fn smooth_margin_ok(log_probs: &Matrix, tau: Real) -> bool {
    let (t_len, c_len) = log_probs.shape();
    for t in 1..t_len {
        for c in 0..c_len {
            let d = (log_probs.get(t, c) - log_probs.get(t - 1, c)).abs();
            if (d - tau).abs() < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

/// Conservative hinge screen: every adjacent-frame difference in every
/// annotated class column must clear the margin, a superset of the
/// transitions the confidence term actually penalises.
fn conf_margin_ok(log_probs: &Matrix, timestamps: &TimestampAnnotation) -> bool {
    let t_len = log_probs.rows();
    for &(_, class) in timestamps.entries() {
        for t in 1..t_len {
            if (log_probs.get(t, class) - log_probs.get(t - 1, class)).abs() < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

#[track_caller]
fn assert_grad_close(analytic: &Matrix, numeric: &Matrix, what: &str) {
    let rel = grad_rel_error(analytic, numeric);
    assert!(rel <= GRAD_TOL, "{what}: gradient relative error {rel:.3e} exceeds {GRAD_TOL:.0e}");
}

/// Random labels with `Some` on roughly half the frames, at least one.
fn sparse_labels(rng: &mut ChaCha8Rng, t_len: usize, c_len: usize) -> Vec<Option<usize>> {
    let mut labels: Vec<Option<usize>> = (0..t_len)
        .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..c_len)))
        .collect();
    let anchor = rng.random_range(0..t_len);
    labels[anchor] = Some(rng.random_range(0..c_len));
    labels
}

/// Screens seeds until `needed` kink-free instances pass `check`.
fn run_instances(needed: usize, seed_budget: u64, mut check: impl FnMut(u64) -> bool) -> usize {
    let mut done = 0;
    for seed in 0..seed_budget {
        if check(seed) {
            done += 1;
            if done == needed {
                return done;
            }
        }
    }
    panic!("only {done}/{needed} kink-free instances within {seed_budget} seeds");
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients match central finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let needed = 10;
    let weights = LossWeights::default();

    // class_loss: smooth everywhere, no screening needed.
    run_instances(needed, 64, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, c) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let logits = random_matrix(&mut rng, t, c, 1.2);
        let labels = sparse_labels(&mut rng, t, c);
        let (_, analytic) = class_loss(&log_row_softmax(&logits), &labels).unwrap();
        let fd = finite_diff_grad(
            |z| class_loss(&log_row_softmax(z), &labels).unwrap().0,
            &logits,
            FD_H,
        );
        assert_grad_close(&analytic, &fd, "class_loss");
        true
    });

    // smooth_loss: screen the truncation kink.
    run_instances(needed, 128, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (t, c) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let logits = random_matrix(&mut rng, t, c, 1.2);
        let lp = log_row_softmax(&logits);
        // A small tau makes the truncation branch reachable at this scale.
        let tau = 0.8;
        if !smooth_margin_ok(&lp, tau) {
            return false;
        }
        let (_, analytic) = smooth_loss(&lp, tau).unwrap();
        let fd =
            finite_diff_grad(|z| smooth_loss(&log_row_softmax(z), tau).unwrap().0, &logits, FD_H);
        assert_grad_close(&analytic, &fd, "smooth_loss");
        true
    });

    // conf_loss: screen the hinge kink.
    run_instances(needed, 256, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (t, c) = (rng.random_range(4..=8), rng.random_range(2..=4));
        let logits = random_matrix(&mut rng, t, c, 1.2);
        let lp = log_row_softmax(&logits);
        let mid = t / 2;
        let ts = TimestampAnnotation::new(vec![
            (0, rng.random_range(0..c)),
            (mid, rng.random_range(0..c)),
            (t - 1, rng.random_range(0..c)),
        ])
        .unwrap();
        if !conf_margin_ok(&lp, &ts) {
            return false;
        }
        let (_, analytic) = conf_loss(&lp, &ts).unwrap();
        let fd =
            finite_diff_grad(|z| conf_loss(&log_row_softmax(z), &ts).unwrap().0, &logits, FD_H);
        assert_grad_close(&analytic, &fd, "conf_loss");
        true
    });

    // seg_loss: two stages, per-stage gradients, all terms active.
    run_instances(needed, 256, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (t, c) = (rng.random_range(4..=8), rng.random_range(2..=4));
        let stage_logits = [random_matrix(&mut rng, t, c, 1.2), random_matrix(&mut rng, t, c, 1.2)];
        let lps: Vec<Matrix> = stage_logits.iter().map(log_row_softmax).collect();
        let labels = sparse_labels(&mut rng, t, c);
        let ts =
            TimestampAnnotation::new(vec![(0, rng.random_range(0..c)), (t - 1, rng.random_range(0..c))])
                .unwrap();
        if !lps.iter().all(|lp| smooth_margin_ok(lp, weights.tau) && conf_margin_ok(lp, &ts)) {
            return false;
        }
        let (_, grads) = seg_loss(&lps, &labels, &ts, &weights, true).unwrap();
        for s in 0..2 {
            let fd = finite_diff_grad(
                |z| {
                    let mut probe: Vec<Matrix> = lps.clone();
                    probe[s] = log_row_softmax(z);
                    seg_loss(&probe, &labels, &ts, &weights, true).unwrap().0
                },
                &stage_logits[s],
                FD_H,
            );
            assert_grad_close(&grads[s], &fd, "seg_loss");
        }
        true
    });

    // graph_loss: class + smoothing composite.
    run_instances(needed, 128, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (t, c) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let logits = random_matrix(&mut rng, t, c, 1.2);
        let lp = log_row_softmax(&logits);
        if !smooth_margin_ok(&lp, weights.tau) {
            return false;
        }
        let labels = sparse_labels(&mut rng, t, c);
        let (_, analytic) = graph_loss(&lp, &labels, &weights).unwrap();
        let fd = finite_diff_grad(
            |z| graph_loss(&log_row_softmax(z), &labels, &weights).unwrap().0,
            &logits,
            FD_H,
        );
        assert_grad_close(&analytic, &fd, "graph_loss");
        true
    });

    // gcn_backward: both weight matrices through propagation, ReLU and loss.
    run_instances(needed, 256, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (t, d_in, hidden, c) = (6, 3, 4, 3);
        let features = random_matrix(&mut rng, t, d_in, 1.5);
        let graph = build_graph(&features, 3, EdgeMode::Weighted).unwrap();
        let params = gcn_init(d_in, hidden, c, GcnVariant::Gcn, seed, 0.1, 0.0).unwrap();
        let trace = gcn_forward(&params, &graph, &features).unwrap();
        if !relu_margin_ok(&trace.h1_pre) || !smooth_margin_ok(&log_row_softmax(&trace.logits), weights.tau)
        {
            return false;
        }
        let labels = sparse_labels(&mut rng, t, c);
        let (grads, _) = gcn_backward(&params, &graph, &features, &trace, &labels, &weights).unwrap();
        for (which, analytic) in [("w1", &grads.w1), ("w2", &grads.w2)] {
            let base = if which == "w1" { &params.w1.value } else { &params.w2.value };
            let fd = finite_diff_grad(
                |m| {
                    let mut p = params.clone();
                    if which == "w1" {
                        p.w1.value = m.clone();
                    } else {
                        p.w2.value = m.clone();
                    }
                    let tr = gcn_forward(&p, &graph, &features).unwrap();
                    graph_loss(&log_row_softmax(&tr.logits), &labels, &weights).unwrap().0
                },
                base,
                FD_H,
            );
            assert_grad_close(analytic, &fd, "gcn_backward");
        }
        true
    });

    // tcn_backward: every parameter matrix of single- and two-stage models.
    run_instances(needed, 256, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let config = if seed % 2 == 0 {
            TcnConfig { num_stages: 1, layers_per_stage: 2, num_feature_maps: 4, input_dim: 3, num_classes: 3 }
        } else {
            TcnConfig { num_stages: 2, layers_per_stage: 1, num_feature_maps: 4, input_dim: 3, num_classes: 3 }
        };
        let t = 6;
        let features = random_matrix(&mut rng, t, config.input_dim, 1.5);
        let params = tcn_init(config, seed, 0.1).unwrap();
        let trace = tcn_forward(&params, &features).unwrap();
        let ts = TimestampAnnotation::new(vec![
            (0, rng.random_range(0..config.num_classes)),
            (t - 1, rng.random_range(0..config.num_classes)),
        ])
        .unwrap();
        let clean = trace.stages.iter().all(|s| {
            s.conv_pre.iter().all(relu_margin_ok) && {
                let lp = log_row_softmax(&s.logits);
                smooth_margin_ok(&lp, weights.tau) && conf_margin_ok(&lp, &ts)
            }
        });
        if !clean {
            return false;
        }
        let labels = sparse_labels(&mut rng, t, config.num_classes);
        let (grads, _) = tcn_backward(&params, &trace, &labels, &ts, &weights, true).unwrap();
        assert_eq!(grads.0.len(), params.params().len());
        for k in 0..grads.0.len() {
            let base = params.params()[k].value.clone();
            let fd = finite_diff_grad(
                |m| {
                    let mut p = params.clone();
                    p.params_mut()[k].value = m.clone();
                    let tr = tcn_forward(&p, &features).unwrap();
                    seg_loss(&tr.stage_log_probs(), &labels, &ts, &weights, true).unwrap().0
                },
                &base,
                FD_H,
            );
            assert_grad_close(&grads.0[k], &fd, "tcn_backward");
        }
        true
    });

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "gradient suite took {elapsed:.1?}, budget 60 s");
    println!(
        "criterion 1 (gradient suite: 7 functions x {needed} instances, rel err <= {GRAD_TOL:.0e}, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: temporal-graph invariants
// ---------------------------------------------------------------------------

/// Cosine similarity clamped to [0, 1], written out independently of the
/// library's version.
fn ref_cosine(x: &[Real], y: &[Real]) -> Real {
    let dot: Real = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: Real = x.iter().map(|a| a * a).sum::<Real>().sqrt();
    let ny: Real = y.iter().map(|a| a * a).sum::<Real>().sqrt();
    if nx < 1e-12 || ny < 1e-12 {
        return 0.0;
    }
    (dot / (nx * ny)).clamp(0.0, 1.0)
}

#[test]
fn criterion_2_graph_invariants() {
    let start = Instant::now();
    let windows = [3usize, 7, 17, 31];
    let modes = [EdgeMode::Binary, EdgeMode::Weighted];
    let sets = 50;
    let mut checked = 0;

    for set in 0..sets {
        let mut rng = ChaCha8Rng::seed_from_u64(set);
        let t = rng.random_range(2..=40);
        let d = rng.random_range(2..=6);
        let features = random_matrix(&mut rng, t, d, 2.0);
        for &window in &windows {
            let half = (window - 1) / 2;
            for &mode in &modes {
                let graph = build_graph(&features, window, mode).unwrap();
                let n = graph.norm_adj();
                assert_eq!(n.shape(), (t, t));

                // Self-loop adjacency and degrees, rebuilt from scratch.
                let mut adj = Matrix::zeros(t, t);
                for i in 0..t {
                    for j in 0..t {
                        let w = if i == j {
                            1.0
                        } else if i.abs_diff(j) <= half {
                            match mode {
                                EdgeMode::Binary => 1.0,
                                EdgeMode::Weighted => ref_cosine(features.row(i), features.row(j)),
                            }
                        } else {
                            0.0
                        };
                        adj.set(i, j, w);
                    }
                }
                let degree: Vec<Real> = (0..t).map(|i| adj.row(i).iter().sum()).collect();

                for i in 0..t {
                    for j in 0..t {
                        let v = n.get(i, j);
                        assert!(
                            (v - n.get(j, i)).abs() <= 1e-9,
                            "asymmetry at ({i},{j}): {v} vs {}",
                            n.get(j, i)
                        );
                        assert!(
                            (-1e-12..=1.0 + 1e-12).contains(&v),
                            "entry ({i},{j}) = {v} outside [0,1]"
                        );
                        if i.abs_diff(j) > half {
                            assert_eq!(v, 0.0, "band violation at ({i},{j}), window {window}");
                        }
                        let rebuilt = v * (degree[i] * degree[j]).sqrt();
                        assert!(
                            (rebuilt - adj.get(i, j)).abs() <= 1e-9,
                            "normalisation does not invert at ({i},{j}): {rebuilt} vs {}",
                            adj.get(i, j)
                        );
                    }
                }
                checked += 1;
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "graph invariants took {elapsed:.1?}, budget 10 s");
    println!("criterion 2 (graph invariants: {checked} graphs, {elapsed:.1?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: metric reference equivalence
// ---------------------------------------------------------------------------

fn ref_accuracy(pred: &[usize], gt: &[usize]) -> Real {
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    100.0 * hits as Real / gt.len() as Real
}

/// `(class, start, end)` runs of equal labels, end inclusive.
fn ref_segments(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((class, _, end)) if *class == l && *end + 1 == t => *end = t,
            _ => out.push((l, t, t)),
        }
    }
    out
}

fn ref_edit(pred: &[usize], gt: &[usize]) -> Real {
    let p: Vec<usize> = ref_segments(pred).iter().map(|s| s.0).collect();
    let g: Vec<usize> = ref_segments(gt).iter().map(|s| s.0).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    // Textbook dynamic-programming Levenshtein distance.
    let mut dist = vec![vec![0usize; g.len() + 1]; p.len() + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=g.len() {
        dist[0][j] = j;
    }
    for i in 1..=p.len() {
        for j in 1..=g.len() {
            let sub = dist[i - 1][j - 1] + usize::from(p[i - 1] != g[j - 1]);
            dist[i][j] = sub.min(dist[i - 1][j] + 1).min(dist[i][j - 1] + 1);
        }
    }
    (100.0 * (1.0 - dist[p.len()][g.len()] as Real / denom as Real)).max(0.0)
}

fn ref_f1(pred: &[usize], gt: &[usize], threshold: Real) -> Real {
    let p = ref_segments(pred);
    let g = ref_segments(gt);
    let mut matched = vec![false; g.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(pc, ps, pe) in &p {
        // Highest-IoU unmatched same-class ground-truth segment; first wins ties.
        let mut best: Option<(usize, Real)> = None;
        for (gi, &(gc, gs, ge)) in g.iter().enumerate() {
            if matched[gi] || gc != pc {
                continue;
            }
            let inter_lo = ps.max(gs);
            let inter_hi = pe.min(ge);
            let inter = if inter_lo > inter_hi { 0 } else { inter_hi - inter_lo + 1 };
            let union = (pe - ps + 1) + (ge - gs + 1) - inter;
            let iou = inter as Real / union as Real;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= threshold => {
                matched[gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_count = matched.iter().filter(|&&m| !m).count();
    let denom = 2 * tp + fp + fn_count;
    if denom == 0 {
        0.0
    } else {
        200.0 * tp as Real / denom as Real
    }
}

#[test]
fn criterion_3_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let thresholds = [0.1, 0.25, 0.5];
    let mut perfect_seen = 0;

    for _ in 0..1000 {
        let t = rng.random_range(1..=30);
        let c = rng.random_range(1..=4);
        let gt: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = match rng.random_range(0..10) {
            // Perfect predictions must score 100 on all five metrics.
            0..3 => gt.clone(),
            // Near-copies exercise boundary cases of matching and edit.
            3..5 => {
                let mut p = gt.clone();
                for _ in 0..rng.random_range(1..=3) {
                    let at = rng.random_range(0..t);
                    p[at] = rng.random_range(0..c);
                }
                p
            }
            _ => (0..t).map(|_| rng.random_range(0..c)).collect(),
        };

        let acc = accuracy(&pred, &gt).unwrap();
        let edit = edit_score(&pred, &gt).unwrap();
        assert!((acc - ref_accuracy(&pred, &gt)).abs() <= 1e-9, "accuracy mismatch");
        assert!((edit - ref_edit(&pred, &gt)).abs() <= 1e-9, "edit mismatch");
        let mut f1s = [0.0; 3];
        for (k, &thr) in thresholds.iter().enumerate() {
            f1s[k] = f1_at(&pred, &gt, thr).unwrap();
            assert!(
                (f1s[k] - ref_f1(&pred, &gt, thr)).abs() <= 1e-9,
                "f1@{thr} mismatch on pred={pred:?} gt={gt:?}"
            );
        }
        if pred == gt {
            perfect_seen += 1;
            assert_eq!(acc, 100.0);
            assert_eq!(edit, 100.0);
            assert_eq!(f1s, [100.0; 3]);
        }
    }
    assert!(perfect_seen > 100, "perfect-prediction cases under-sampled: {perfect_seen}");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "metric oracle took {elapsed:.1?}, budget 30 s");
    println!(
        "criterion 3 (metric oracles: 1000 instances, {perfect_seen} perfect, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: loss closed-form spot checks
// ---------------------------------------------------------------------------

fn logp_from_probs(rows: &[&[Real]]) -> Matrix {
    Matrix::from_rows(rows).unwrap().map(|p| p.ln())
}

#[test]
fn criterion_4_loss_spot_checks() {
    // Classification: mean negative log-likelihood of the labeled frames.
    let lp = logp_from_probs(&[&[0.9, 0.1], &[0.2, 0.8]]);
    let (v, _) = class_loss(&lp, &[Some(0), Some(1)]).unwrap();
    let exact: Real = -(((0.9 as Real).ln() + (0.8 as Real).ln()) / 2.0);
    assert!((v - exact).abs() <= 1e-12, "class_loss {v} vs exact {exact}");
    assert!((v - 0.1643).abs() <= 1e-3, "class_loss {v} vs 0.1643");

    // Smoothing: mean squared adjacent log-prob difference (untruncated here).
    let lp = logp_from_probs(&[&[0.5, 0.5], &[0.9, 0.1]]);
    let (v, _) = smooth_loss(&lp, 4.0).unwrap();
    let d0: Real = ((0.9 as Real) / 0.5).ln();
    let d1: Real = ((0.1 as Real) / 0.5).ln();
    let exact = (d0 * d0 + d1 * d1) / 4.0;
    assert!((v - exact).abs() <= 1e-12, "smooth_loss {v} vs exact {exact}");
    assert!((v - 0.7339).abs() <= 1e-3, "smooth_loss {v} vs 0.7339");

    // Confidence: uniform rows except one flipped to break monotonic decay at
    // exactly one transition; the loss is that single hinge over
    // T' = 2 * (last - first) = 6.
    let u = 1.0 / 3.0;
    let lp = logp_from_probs(&[
        &[u, u, u],
        &[u, u, u],
        &[u, u, u],
        &[0.4, u, 1.0 - 0.4 - u],
    ]);
    let ts = TimestampAnnotation::new(vec![(0, 0), (3, 1)]).unwrap();
    let (v, _) = conf_loss(&lp, &ts).unwrap();
    let single_hinge: Real = ((0.4 as Real) / u).ln();
    assert!((v - single_hinge / 6.0).abs() <= 1e-3, "conf_loss {v} vs {}", single_hinge / 6.0);
    // Cross-check against a brute-force transcription of the decay rule:
    // rising toward each timestamp from the previous one, falling after it
    // until the next, hinged and averaged over 2 * (t_last - t_first).
    let brute = {
        let entries = ts.entries();
        let mut total: Real = 0.0;
        for (i, &(t_i, a_i)) in entries.iter().enumerate() {
            let prev = if i == 0 { t_i } else { entries[i - 1].0 };
            let next = if i + 1 == entries.len() { t_i } else { entries[i + 1].0 };
            for t in (prev + 1)..=t_i {
                total += (lp.get(t - 1, a_i) - lp.get(t, a_i)).max(0.0);
            }
            for t in (t_i + 1)..=next {
                total += (lp.get(t, a_i) - lp.get(t - 1, a_i)).max(0.0);
            }
        }
        total / (2.0 * (ts.last_frame() - ts.first_frame()) as Real)
    };
    assert!((v - brute).abs() <= 1e-12, "conf_loss {v} vs brute force {brute}");

    // Segmenter composite: stage-mean of class + alpha*smooth + beta*conf.
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = [random_matrix(&mut rng, 5, 3, 1.0), random_matrix(&mut rng, 5, 3, 1.0)];
    let lps: Vec<Matrix> = logits.iter().map(log_row_softmax).collect();
    let labels = vec![Some(0), None, Some(2), None, Some(1)];
    let ts = TimestampAnnotation::new(vec![(0, 0), (2, 2), (4, 1)]).unwrap();
    let (v, _) = seg_loss(&lps, &labels, &ts, &weights, true).unwrap();
    let mut expected: Real = 0.0;
    for lp in &lps {
        expected += class_loss(lp, &labels).unwrap().0
            + weights.alpha * smooth_loss(lp, weights.tau).unwrap().0
            + weights.beta * conf_loss(lp, &ts).unwrap().0;
    }
    expected /= lps.len() as Real;
    assert!((v - expected).abs() <= 1e-9, "seg_loss {v} vs composite {expected}");

    println!("criterion 4 (loss closed-form spot checks): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: alternating-schedule trend
// ---------------------------------------------------------------------------

fn synth_preset(dir: &Path, blur: usize, seed: u64) -> PathBuf {
    let cfg = SynthConfig {
        num_videos: 20,
        num_classes: 5,
        feature_dim: 64,
        segment_len_range: (20, 60),
        segments_per_video: (3, 6),
        noise_sigma: 0.4,
        boundary_blur: blur,
        seed,
    };
    synth_dataset(&cfg, dir).unwrap().manifest_path
}

fn schedule(init: usize, refine: usize, variant: GcnVariant, seed: u64) -> ScheduleConfig {
    ScheduleConfig {
        init_epochs: init,
        refine_iters: refine,
        gcn_variant: variant,
        seed,
        ..ScheduleConfig::synthetic_preset()
    }
}

/// Trains on the manifest and returns (final accuracy, last generated-label
/// accuracy if any refinement ran).
fn train_once(manifest: &Path, config: &ScheduleConfig) -> (Real, Option<Real>) {
    let dataset = load_dataset(manifest).unwrap();
    let mut record = RunRecord::new(config).unwrap();
    run(config, &dataset, &mut record).unwrap();
    let acc = record.final_metrics.expect("synthetic data carries ground truth").accuracy;
    let label_acc = record
        .epochs
        .iter()
        .filter(|e| e.phase == Phase::Labels)
        .next_back()
        .and_then(|e| e.label_accuracy);
    (acc, label_acc)
}

#[test]
fn criterion_5_schedule_trend() {
    let _serial = HEAVY.lock().unwrap();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let seeds = [0u64, 1, 2];
    let mut means = [0.0; 3];
    let variants = [(30usize, 20usize), (50, 0), (0, 50)];

    for &seed in &seeds {
        let manifest = synth_preset(&dir.path().join(format!("d{seed}")), 3, seed);
        for (k, &(init, refine)) in variants.iter().enumerate() {
            let (acc, _) = train_once(&manifest, &schedule(init, refine, GcnVariant::Gcn, seed));
            means[k] += acc / seeds.len() as Real;
        }
    }

    let [alternating, init_only, refine_only] = means;
    assert!(
        alternating > init_only,
        "alternating (30,20) = {alternating:.2} must beat init-only (50,0) = {init_only:.2}"
    );
    assert!(
        alternating > refine_only,
        "alternating (30,20) = {alternating:.2} must beat no-init (0,50) = {refine_only:.2}"
    );
    assert!(alternating >= 90.0, "alternating accuracy {alternating:.2} below 90");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(900), "schedule trend took {elapsed:.1?}, budget 15 min");
    println!(
        "criterion 5 (schedule trend over 3 seeds: (30,20) {alternating:.2} > (50,0) {init_only:.2}, > (0,50) {refine_only:.2}, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: propagation-variant trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_propagation_variant_trend() {
    let _serial = HEAVY.lock().unwrap();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut mean_gcn: Real = 0.0;
    let mut mean_mlp: Real = 0.0;

    for &seed in &seeds {
        let manifest = synth_preset(&dir.path().join(format!("d{seed}")), 5, seed);
        for variant in [GcnVariant::Gcn, GcnVariant::Mlp] {
            let (_, label_acc) = train_once(&manifest, &schedule(30, 20, variant, seed));
            let label_acc = label_acc.expect("refinement ran, labels were generated");
            match variant {
                GcnVariant::Gcn => mean_gcn += label_acc / seeds.len() as Real,
                GcnVariant::Mlp => mean_mlp += label_acc / seeds.len() as Real,
            }
        }
    }

    assert!(
        mean_gcn > mean_mlp,
        "graph propagation ({mean_gcn:.2}) must generate better labels than the MLP ({mean_mlp:.2})"
    );

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "variant trend took {elapsed:.1?}, budget 10 min");
    println!(
        "criterion 6 (label-generation trend over 5 seeds: gcn {mean_gcn:.2} > mlp {mean_mlp:.2}, {elapsed:.1?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: bytewise CLI determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_cli_determinism() {
    let dir = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_tsseg");
    let data = dir.path().join("data");
    let status = std::process::Command::new(bin)
        .args(["synth", "--out", data.to_str().unwrap(), "--videos", "6", "--dim", "16"])
        .args(["--min-len", "15", "--max-len", "30", "--seed", "9"])
        .status()
        .unwrap();
    assert!(status.success());

    for run_dir in ["a", "b"] {
        let out = std::process::Command::new(bin)
            .args(["--no-timestamps", "train"])
            .args(["--manifest", data.join("manifest.json").to_str().unwrap()])
            .args(["--out", dir.path().join(run_dir).to_str().unwrap()])
            .args(["--synthetic-preset", "--init-epochs", "6", "--refine-iters", "2"])
            .args(["--gcn-epochs-per-iter", "15", "--seg-epochs-per-iter", "2"])
            .args(["--batch-size", "4", "--num-stages", "2", "--layers-per-stage", "4"])
            .args(["--feature-maps", "16", "--gcn-hidden", "8", "--window", "9"])
            .args(["--seed", "5"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    for file in ["segmenter.ckpt", "gcn.ckpt", "run_record.txt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    println!("criterion 7 (bytewise determinism of repeated training runs): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8: format round-trips and corruption robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_format_robustness() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // Round-trips: write -> read -> write must reproduce the bytes.
    let features = random_matrix(&mut rng, 9, 4, 3.0);
    let f1 = dir.path().join("x1.tsaf");
    let f2 = dir.path().join("x2.tsaf");
    write_features(&features, &f1).unwrap();
    write_features(&read_features(&f1).unwrap(), &f2).unwrap();
    let feature_bytes = std::fs::read(&f1).unwrap();
    assert_eq!(feature_bytes, std::fs::read(&f2).unwrap(), "feature round-trip");

    let labels: Vec<usize> = (0..40).map(|_| rng.random_range(0..5)).collect();
    let l1 = dir.path().join("l1.txt");
    let l2 = dir.path().join("l2.txt");
    write_labels(&labels, &l1).unwrap();
    write_labels(&read_labels(&l1).unwrap(), &l2).unwrap();
    assert_eq!(std::fs::read(&l1).unwrap(), std::fs::read(&l2).unwrap(), "label round-trip");

    let gcn = gcn_init(6, 4, 3, GcnVariant::Gcn, 1, 0.1, 0.01).unwrap();
    let g1 = dir.path().join("g1.ckpt");
    let g2 = dir.path().join("g2.ckpt");
    save_gcn_checkpoint(&gcn, &g1).unwrap();
    save_gcn_checkpoint(&load_gcn_checkpoint(&g1, 0.1, 0.01).unwrap(), &g2).unwrap();
    let gcn_bytes = std::fs::read(&g1).unwrap();
    assert_eq!(gcn_bytes, std::fs::read(&g2).unwrap(), "propagation checkpoint round-trip");

    let config = TcnConfig {
        num_stages: 2,
        layers_per_stage: 2,
        num_feature_maps: 4,
        input_dim: 5,
        num_classes: 3,
    };
    let tcn = tcn_init(config, 2, 0.1).unwrap();
    let t1 = dir.path().join("t1.ckpt");
    let t2 = dir.path().join("t2.ckpt");
    save_tcn_checkpoint(&tcn, &t1).unwrap();
    save_tcn_checkpoint(&load_tcn_checkpoint(&t1, 0.1).unwrap(), &t2).unwrap();
    let tcn_bytes = std::fs::read(&t1).unwrap();
    assert_eq!(tcn_bytes, std::fs::read(&t2).unwrap(), "segmenter checkpoint round-trip");

    // Corruption fuzz: truncations and header bit-flips must yield format
    // errors; bit flips anywhere must never panic or abort.
    let scratch = dir.path().join("fuzz.bin");
    type Parse = Box<dyn Fn(&Path) -> Option<Error>>;
    let parsers: [(&str, Vec<u8>, Parse); 3] = [
        ("features", feature_bytes, Box::new(|p| read_features(p).err())),
        ("gcn checkpoint", gcn_bytes, Box::new(|p| load_gcn_checkpoint(p, 0.0, 0.0).err())),
        ("tcn checkpoint", tcn_bytes, Box::new(|p| load_tcn_checkpoint(p, 0.0).err())),
    ];

    let mut cases = 0usize;
    for (name, good, parse) in &parsers {
        for _ in 0..140 {
            let cut = rng.random_range(0..good.len());
            std::fs::write(&scratch, &good[..cut]).unwrap();
            let err = parse(&scratch);
            assert!(
                matches!(err, Some(Error::Format { .. })),
                "{name}: truncation to {cut} bytes must be a format error, got {err:?}"
            );
            cases += 1;
        }
        for _ in 0..60 {
            let mut bad = good.clone();
            let bit = rng.random_range(0..64);
            bad[bit / 8] ^= 1u8 << (bit % 8);
            std::fs::write(&scratch, &bad).unwrap();
            let err = parse(&scratch);
            assert!(
                matches!(err, Some(Error::Format { .. })),
                "{name}: corrupt magic/version must be a format error, got {err:?}"
            );
            cases += 1;
        }
        for _ in 0..140 {
            let mut bad = good.clone();
            let bit = rng.random_range(0..bad.len() * 8);
            bad[bit / 8] ^= 1u8 << (bit % 8);
            std::fs::write(&scratch, &bad).unwrap();
            // Any outcome but a crash is acceptable for payload corruption.
            let _ = parse(&scratch);
            cases += 1;
        }
    }
    assert!(cases >= 1000, "only {cases} corruption cases exercised");

    println!("criterion 8 (format round-trips, {cases} corruption cases): PASS");
}
