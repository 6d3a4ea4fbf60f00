// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Each test prints one PASS/FAIL line to stderr, then
//! asserts its criterion and its runtime cap.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use neuronscope::clustering::{assign_sentences, hdbscan, MockEmbedder, Pca};
use neuronscope::pipeline::{load_run, run_pipeline, summarize, Backends, NeuronReport, RunConfig};
use neuronscope::scoring::pearson;
use neuronscope::store::{encode_dump, parse_dump, ActivationDump, DumpError, DumpHeader, DumpRecord};

fn criterion(name: &str, cap: Option<Duration>, check: impl FnOnce() -> Result<String, String>) {
    let t = Instant::now();
    let result = check();
    let elapsed = t.elapsed();
    let in_time = cap.is_none_or(|c| elapsed < c);
    let ok = result.is_ok() && in_time;
    let detail = match &result {
        Ok(d) | Err(d) => d.clone(),
    };
    let cap_text = cap.map(|c| format!(" / cap {}s", c.as_secs())).unwrap_or_default();
    let line = format!(
        "{} {name}: {detail} [{:.2}s{cap_text}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    // Written straight to the handle so the harness does not capture it.
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(result.is_ok(), "{line}");
    assert!(in_time, "{line}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Pearson r from raw sums, independent of the two-pass library version.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn scoring_math() {
    criterion("scoring math", Some(Duration::from_secs(5)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for case in 0..1000 {
            let n = rng.random_range(3..200);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = pearson(&x, &y).map_err(|e| e.to_string())?;
            let diff = (r.r - pearson_oracle(&x, &y)).abs();
            worst = worst.max(diff);
            ensure(diff < 1e-9, || format!("case {case}: |dr| = {diff:e}"))?;
            let back = pearson(&y, &x).map_err(|e| e.to_string())?;
            ensure(back.r == r.r, || format!("case {case}: asymmetric {} vs {}", r.r, back.r))?;

            let a = rng.random_range(0.1..4.0);
            let b = rng.random_range(-3.0..3.0);
            let up: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let down: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
            let r_up = pearson(&x, &up).unwrap().r;
            let r_down = pearson(&x, &down).unwrap().r;
            ensure((r_up - 1.0).abs() < 1e-12 && (r_down + 1.0).abs() < 1e-12, || {
                format!("case {case}: linear gave {r_up}, {r_down}")
            })?;

            let flat = vec![rng.random_range(-1.0..1.0); n];
            let d = pearson(&x, &flat).unwrap();
            ensure(d.degenerate && d.r == 0.0, || format!("case {case}: constant input not flagged"))?;
        }
        Ok(format!("1000 random pairs, max |dr| vs oracle {worst:.1e}"))
    });
}

fn blobs(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for c in 0..3 {
        for _ in 0..10 {
            let mut p = vec![0.0; 3];
            p[c] = 1.0;
            p.iter_mut().for_each(|v| *v += noise.sample(rng));
            points.push(p);
            truth.push(c);
        }
    }
    (points, truth)
}

/// Fraction of point pairs on which two labelings agree about co-membership;
/// noise points are singletons.
fn pair_agreement(a: &[i32], b: &[i64]) -> f64 {
    let same = |l: &[i64], i: usize, j: usize| l[i] >= 0 && l[i] == l[j];
    let a: Vec<i64> = a.iter().map(|&v| v as i64).collect();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            if same(&a, i, j) == same(b, i, j) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

#[test]
fn hdbscan_recovers_planted_blobs() {
    criterion("hdbscan blobs", Some(Duration::from_secs(10)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (points, truth) = blobs(&mut rng);
        let truth: Vec<i64> = truth.iter().map(|&t| t as i64).collect();
        let labels = hdbscan(&points, 2).map_err(|e| e.to_string())?;
        let k = labels.iter().filter(|&&l| l >= 0).max().map_or(0, |m| m + 1);
        let noise = labels.iter().filter(|&&l| l < 0).count();
        let agreement = pair_agreement(&labels, &truth);

        let base: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
        let mut invariant = true;
        for _ in 0..20 {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.shuffle(&mut rng);
            let permuted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
            let got = hdbscan(&permuted, 2).map_err(|e| e.to_string())?;
            let mut restored = vec![0i32; points.len()];
            for (pos, &i) in order.iter().enumerate() {
                restored[i] = got[pos];
            }
            invariant &= pair_agreement(&restored, &base) == 1.0
                && restored.iter().zip(&base).all(|(&r, &b)| (r < 0) == (b < 0));
        }
        let detail = format!(
            "{k} clusters ({noise} noise), pairwise agreement {agreement:.3}, 20 shuffles {}",
            if invariant { "invariant" } else { "NOT invariant" }
        );
        ensure(k == 3 && agreement >= 0.95 && invariant, || detail.clone())?;
        Ok(detail)
    });
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn covariance(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| points.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect()
}

#[test]
fn pca_matches_independent_eigensolver() {
    criterion("pca", Some(Duration::from_secs(5)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = Normal::new(0.0, 1.0).unwrap();

        // Random 50x8 data: eigenvalues and loadings against the oracle.
        let data: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| unit.sample(&mut rng)).collect()).collect();
        let pca = Pca::fit(&data, 8).map_err(|e| e.to_string())?;
        let (vals, vecs) = jacobi_eigen(covariance(&data));
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        ensure(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]), || "eigenvalues not descending".into())?;
        let mut worst = 0.0f64;
        for (rank, &k) in order.iter().enumerate() {
            worst = worst.max((pca.eigenvalues[rank] - vals[k]).abs());
            let dot: f64 = (0..8).map(|j| pca.components[rank][j] * vecs[j][k]).sum();
            worst = worst.max((dot.abs() - 1.0).abs());
        }
        ensure(worst <= 1e-9, || format!("eigen mismatch {worst:e}"))?;

        // Points on a 3-dimensional affine subspace reconstruct exactly.
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| unit.sample(&mut rng)).collect()).collect();
        let offset: Vec<f64> = (0..8).map(|_| unit.sample(&mut rng)).collect();
        let flat: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| unit.sample(&mut rng)).collect();
                (0..8).map(|j| offset[j] + (0..3).map(|k| z[k] * basis[k][j]).sum::<f64>()).collect()
            })
            .collect();
        let sub = Pca::fit(&flat, 3).map_err(|e| e.to_string())?;
        let recon = flat
            .iter()
            .map(|p| {
                let back = sub.reconstruct(&sub.project(p));
                back.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        ensure(recon <= 1e-9, || format!("reconstruction error {recon:e}"))?;
        Ok(format!("max eigen deviation {worst:.1e}, subspace reconstruction error {recon:.1e}"))
    });
}

fn run_suite(dir: &Path, spurious: usize, refine: bool) -> Vec<NeuronReport> {
    let cfg = common::mock_setup(dir, &common::suite(11), spurious);
    let cfg = RunConfig { refine, ..cfg };
    let backends = Backends::from_config(&cfg).unwrap();
    let out = run_pipeline(&cfg, &dir.join("run"), &backends, false).unwrap();
    assert!(out.manifest.failed.is_empty() && out.manifest.skipped.is_empty());
    load_run(&out.run_dir).unwrap().1
}

#[test]
fn end_to_end_synthetic() {
    criterion("end-to-end synthetic", Some(Duration::from_secs(60)), || {
        let dir = tempfile::tempdir().unwrap();
        let reports = run_suite(dir.path(), 0, true);
        ensure(reports.len() == 10, || format!("{} reports", reports.len()))?;
        let hits = reports.iter().filter(|r| r.number == common::planted_k(r.neuron.index)).count();
        ensure(hits >= 9, || format!("Number matched planted K for {hits}/10"))?;
        let mut min_final = f64::INFINITY;
        let mut last_iter = 0;
        for r in &reports {
            for t in &r.trajectories {
                min_final = min_final.min(t.final_explanation.score);
                let best = t.best_so_far();
                ensure(best.windows(2).all(|w| w[1] >= w[0]), || {
                    format!("{} cluster {} best-so-far decreases", r.neuron, t.cluster_id)
                })?;
                ensure(best.last() == Some(&t.final_explanation.score), || {
                    format!("{} cluster {} final is not the best", r.neuron, t.cluster_id)
                })?;
                last_iter = last_iter.max(t.history.iter().map(|h| h.iteration).max().unwrap_or(0));
            }
        }
        ensure(min_final >= 0.90, || format!("lowest final score {min_final:.3}"))?;
        ensure(last_iter <= 5, || format!("a trajectory ran to iteration {last_iter}"))?;
        Ok(format!(
            "Number == K for {hits}/10, min final score {min_final:.3}, last iteration {last_iter}"
        ))
    });
}

#[test]
fn refinement_ablation() {
    criterion("refinement ablation", Some(Duration::from_secs(60)), || {
        let mean = |rs: &[NeuronReport]| rs.iter().map(|r| r.mean_final_score).sum::<f64>() / rs.len() as f64;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = mean(&run_suite(a.path(), 2, true));
        let base = mean(&run_suite(b.path(), 2, false));
        let delta = full - base;
        ensure(delta >= 0.05, || format!("full {full:.3} vs baseline {base:.3}"))?;
        Ok(format!("full {full:.3} vs no-refinement {base:.3}, delta {delta:.3}"))
    });
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn identical_runs_are_byte_identical() {
    criterion("determinism", None, || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::mock_setup(dir.path(), &common::suite(11), 2);
        let backends = Backends::from_config(&cfg).unwrap();
        let mut trees = Vec::new();
        for name in ["first", "second"] {
            let out = run_pipeline(&cfg, &dir.path().join(name), &backends, false).unwrap();
            summarize(&out.run_dir).unwrap();
            let mut t = tree(&out.run_dir);
            // Wall-clock timings are kept apart from the reproducible artifacts.
            t.remove("timings.json").expect("timings written");
            trees.push(t);
        }
        let files = trees[0].len();
        ensure(trees[0] == trees[1], || {
            let differ: Vec<&String> = trees[0].keys().filter(|k| trees[0].get(*k) != trees[1].get(*k)).collect();
            format!("files differ: {differ:?}")
        })?;
        Ok(format!("{files} files byte-identical across two runs"))
    });
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &["a", "ß", "é", "\"", "\\", "\t", "{", "}", "z", "9", " ", "日本", "\u{1F600}", "-"];
    (0..rng.random_range(1..6)).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_dump(rng: &mut ChaCha8Rng) -> ActivationDump {
    let layers: Vec<u32> = (0..rng.random_range(1..4)).map(|i| i * 7 + rng.random_range(0..5)).collect();
    let mut dump = ActivationDump::new(DumpHeader::new(random_word(rng), layers.clone(), "whitespace"));
    for s in 0..rng.random_range(0..12) {
        let tokens: Vec<String> = (0..rng.random_range(1..10)).map(|_| random_word(rng)).collect();
        for &layer in &layers {
            let acts = (0..rng.random_range(0..5))
                .map(|_| {
                    let v = tokens
                        .iter()
                        .map(|_| match rng.random_range(0..4) {
                            0 => 0.0,
                            1 => rng.random_range(-1e-300..1e-300),
                            _ => rng.random_range(-50.0..50.0),
                        })
                        .collect();
                    (rng.random_range(0..4096), v)
                })
                .collect();
            dump.records.push(DumpRecord {
                segment_id: format!("seg-{s}"),
                text: tokens.join(" "),
                tokens: tokens.clone(),
                layer,
                acts,
            });
        }
    }
    dump
}

#[test]
fn dump_round_trip_and_line_errors() {
    criterion("dump format", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..100 {
            let dump = random_dump(&mut rng);
            let mut bytes = Vec::new();
            encode_dump(&dump, &mut bytes).map_err(|e| format!("case {case}: {e}"))?;
            let back = parse_dump(bytes.as_slice()).map_err(|e| format!("case {case}: {e}"))?;
            ensure(back == dump, || format!("case {case}: round trip changed the dump"))?;
            let mut again = Vec::new();
            encode_dump(&back, &mut again).unwrap();
            ensure(again == bytes, || format!("case {case}: re-encoding changed bytes"))?;

            let lines: Vec<&str> = std::str::from_utf8(&bytes).unwrap().lines().collect();
            if lines.len() > 1 {
                let bad = rng.random_range(1..lines.len());
                let mut corrupt = lines.clone();
                corrupt[bad] = "{\"segment_id\": ";
                let text = corrupt.join("\n");
                match parse_dump(text.as_bytes()) {
                    Err(DumpError::Format { line, .. }) => {
                        ensure(line == bad + 1, || format!("case {case}: error on line {line}, corrupted {}", bad + 1))?
                    }
                    other => return Err(format!("case {case}: corrupt line {} gave {other:?}", bad + 1)),
                }
            }
        }
        Ok("100 randomized dumps round-trip; corrupt lines reported by number".into())
    });
}

#[test]
fn purity_assignment() {
    criterion("purity analysis", None, || {
        let refs: Vec<String> = vec![
            "This neuron activates on names of European capital cities.".into(),
            "This neuron responds to closing brackets in source code.".into(),
            "This neuron fires on past-tense verbs describing motion.".into(),
        ];
        let composite = refs.join(" ");
        let got = assign_sentences(&composite, &refs, &MockEmbedder::default()).map_err(|e| e.to_string())?;
        ensure(got.len() == 3, || format!("{} sentences", got.len()))?;
        for (i, a) in got.iter().enumerate() {
            ensure(a.reference_index == i, || format!("sentence {i} went to reference {}", a.reference_index))?;
            ensure((a.cosine - 1.0).abs() <= 1e-6, || format!("sentence {i} cosine {}", a.cosine))?;
        }
        Ok("3 sentences matched their references at cosine 1".into())
    });
}
