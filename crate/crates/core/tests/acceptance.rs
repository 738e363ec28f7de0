//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{auc_pairs, best_q, connected, exact_mi, q_oracle, v_shadow};
use treeleak::attack::{build_adjacency, build_adjacency_chunked, louvain_with_restarts, AdjacencyGraph, AttackParams, AttackMethod, AttackerView, BuildParams};
use treeleak::dataset::{gen_synthetic, make_partition, PartitionSpec};
use treeleak::eval::{auc, auc_binary, mean_std, v_measure};
use treeleak::experiment::{audit_dir, run_experiment, run_grid, ExperimentConfig, ReportRow, RunOptions};
use treeleak::he::{he_keygen, HeBackend};
use treeleak::idlmid::{decrypt_purity, mi_upper_bound, secure_node_purity, CandidateSpaces, EncryptedLabels, NodeClassCounts};
use treeleak::ldp::{keep_probability, randomized_response, rr_with_prior};
use treeleak::protocol::{train_federated, Defense, ProtocolConfig};
use treeleak::tree::{argmax, ModelKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).expect("config loads")
}

fn mean_of(rows: &[ReportRow], pick: impl Fn(&ReportRow) -> bool, value: impl Fn(&ReportRow) -> f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| pick(r)).map(value).collect();
    mean_std(&v).0
}

fn method_mean(rows: &[ReportRow], m: AttackMethod) -> f64 {
    mean_of(rows, |r| r.method == m, |r| r.v_measure)
}

fn grid_rows(cfg: &ExperimentConfig) -> Vec<ReportRow> {
    run_grid(cfg, None)
        .expect("grid runs")
        .into_iter()
        .flat_map(|o| o.rows)
        .collect()
}

fn criterion_1() -> Outcome {
    let cfg = load("table2_rf.json");
    let t = Instant::now();
    let rows = grid_rows(&cfg);
    let elapsed = t.elapsed();
    let id = method_mean(&rows, AttackMethod::Id2graph);
    let cl = method_mean(&rows, AttackMethod::Cl);
    let unicl = method_mean(&rows, AttackMethod::UniCl);
    let pass = id > unicl && unicl >= cl && (id - 0.751).abs() <= 0.15 && (cl - 0.554).abs() <= 0.15 && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!("breast cancer RF: id2graph {id:.3}, uni+cl {unicl:.3}, cl {cl:.3}; {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let rows = grid_rows(&load("table2_xgb.json"));
    let id = method_mean(&rows, AttackMethod::Id2graph);
    let cl = method_mean(&rows, AttackMethod::Cl);
    outcome(
        (id - 0.736).abs() <= 0.15 && id > cl,
        format!("breast cancer XGBoost, eta 0.6: id2graph {id:.3}, cl {cl:.3}"),
    )
}

fn criterion_3() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut worst: f64 = f64::INFINITY;
    for _ in 0..10_000 {
        let classes = r.random_range(2..=6);
        let totals: Vec<usize> = (0..classes).map(|_| r.random_range(0..=40)).collect();
        let mut node: Vec<usize> = totals.iter().map(|&t| r.random_range(0..=t)).collect();
        if node.iter().sum::<usize>() == 0 {
            let k = r.random_range(0..classes);
            if totals[k] == 0 {
                continue;
            }
            node[k] = 1;
        }
        let c = NodeClassCounts::new(totals, node).expect("valid counts");
        let slack = mi_upper_bound(&c).expect("nonempty node") - exact_mi(&c);
        worst = worst.min(slack);
        if slack < -1e-12 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations, smallest slack {worst:.3e}"))
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["idlmid_synthetic.json", "idlmid_rf.json"] {
        let cfg = load(name);
        let dir = tempfile::tempdir().expect("tempdir");
        let report = run_experiment(
            &cfg,
            &RunOptions {
                out_dir: dir.path().to_path_buf(),
                dump_transcripts: Some("transcripts".into()),
                emit_plotdata: false,
                threads: None,
            },
        )
        .expect("run");
        let audits = audit_dir(&dir.path().join("transcripts"), None).expect("audit");
        let failures = audits.iter().filter(|a| !a.report.passed()).count();
        let spaces: usize = audits.iter().map(|a| a.report.spaces_checked).sum();
        let v: Vec<f64> = [0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|&xi| {
                mean_of(
                    &report.rows,
                    |r| r.method == AttackMethod::Id2graph && r.param == Some(xi),
                    |r| r.v_measure,
                )
            })
            .collect();
        let monotone = v.windows(2).all(|w| w[0] <= w[1] + 1e-12);
        pass &= failures == 0 && monotone;
        notes.push(format!(
            "{}: {} transcripts, {spaces} spaces, {failures} violations, V by xi {:.3}/{:.3}/{:.3}/{:.3}",
            cfg.name,
            audits.len(),
            v[0],
            v[1],
            v[2],
            v[3]
        ));
    }
    outcome(pass, notes.join("; "))
}

fn criterion_5() -> Outcome {
    let rows = grid_rows(&load("tradeoff_rf.json"));
    let stat = |defense: &str, f: &dyn Fn(&ReportRow) -> f64| {
        mean_of(&rows, |r| r.defense == defense && r.method == AttackMethod::Id2graph, f)
    };
    let (auc_id, v_id) = (stat("id_lmid", &|r| r.test_auc), stat("id_lmid", &|r| r.v_measure));
    let (auc_lp, v_lp) = (stat("lp_mst", &|r| r.test_auc), stat("lp_mst", &|r| r.v_measure));
    outcome(
        auc_id >= auc_lp && v_id <= v_lp,
        format!("id-lmid xi=2: auc {auc_id:.3}, V {v_id:.3}; lp-2st eps=2: auc {auc_lp:.3}, V {v_lp:.3}"),
    )
}

fn accuracy(model: &treeleak::tree::TreeModel, x: &treeleak::matrix::Matrix, y: &[usize]) -> f64 {
    let p = model.predict_matrix(x).expect("predict");
    p.iter().zip(y).filter(|(s, &t)| argmax(s) == t).count() as f64 / y.len() as f64
}

fn criterion_6() -> Outcome {
    // (a) the passive view does not depend on grafting.
    let data = gen_synthetic(300, 8, 2, 0.8, 11).expect("data");
    let views = make_partition(&data, &PartitionSpec::RandomHalf { seed: 11 }).expect("views");
    let mut cfg = ProtocolConfig::new(ModelKind::RandomForest);
    cfg.seed = 11;
    cfg.defense = Defense::LpMst { epsilon: 1.0, stages: 2 };
    let plain = train_federated(&cfg, &views, &data).expect("lp-2st");
    cfg.defense = Defense::GraftingLdp { epsilon: 1.0, stages: 2 };
    let grafted = train_federated(&cfg, &views, &data).expect("grafting");
    let same_noise = plain.training_labels == grafted.training_labels;
    let identical = same_noise
        && plain.transcripts.len() == grafted.transcripts.len()
        && plain
            .transcripts
            .iter()
            .zip(&grafted.transcripts)
            .all(|(a, b)| a.to_json().expect("json") == b.to_json().expect("json"));

    // (b) repair never lowers clean training accuracy.
    let mut worse = 0;
    let mut gain = Vec::new();
    for seed in 0..20 {
        let data = gen_synthetic(300, 8, 2, 0.8, 100 + seed).expect("data");
        let views = make_partition(&data, &PartitionSpec::RandomHalf { seed }).expect("views");
        let mut cfg = ProtocolConfig::new(ModelKind::RandomForest);
        cfg.seed = seed;
        cfg.defense = Defense::GraftingLdp { epsilon: 1.0, stages: 2 };
        let out = train_federated(&cfg, &views, &data).expect("grafting");
        let before = accuracy(out.unrepaired.as_ref().expect("unrepaired model"), &data.features, &data.labels);
        let after = accuracy(&out.model, &data.features, &data.labels);
        gain.push(after - before);
        if after < before {
            worse += 1;
        }
    }

    // (c) grafting improves LP-2ST test AUC on breast cancer.
    let rows = grid_rows(&load("grafting_rf.json"));
    let auc_of = |d: &str| mean_of(&rows, |r| r.defense == d && r.method == AttackMethod::Id2graph, |r| r.test_auc);
    let (a_graft, a_lp) = (auc_of("grafting_ldp"), auc_of("lp_mst"));
    outcome(
        identical && worse == 0 && a_graft >= a_lp,
        format!(
            "(a) transcripts identical: {identical}; (b) {worse}/20 seeds worse, mean gain {:.3}; (c) auc grafted {a_graft:.3} vs lp-2st {a_lp:.3}",
            mean_std(&gain).0
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rows = Vec::new();
    for name in ["comm_breast_cancer.json", "comm_wine.json", "comm_digits.json"] {
        rows.extend(grid_rows(&load(name)));
    }
    let rate = |d: &str, p: f64| {
        mean_of(
            &rows,
            |r| r.defense == d && r.param == Some(p) && r.method == AttackMethod::Cl,
            |r| r.comm_rate.expect("rate"),
        )
    };
    let lp = mean_of(
        &rows,
        |r| r.defense == "lp_mst" && r.method == AttackMethod::Cl,
        |r| r.comm_rate.expect("rate"),
    );
    let (r05, r20) = (rate("id_lmid", 0.5), rate("id_lmid", 2.0));
    outcome(
        r05 < r20 && r20 < lp,
        format!("id-lmid xi=0.5 {r05:.3} < xi=2.0 {r20:.3} < lp-mst {lp:.3}"),
    )
}

fn criterion_8() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut graphs = 0;
    let mut below = 0;
    let mut decreasing = 0;
    let mut worst_ratio: f64 = f64::INFINITY;
    while graphs < 200 {
        let n = r.random_range(2..=8);
        let density = r.random_range(0.2..0.9);
        let mut edges = Vec::new();
        for a in 0..n as u32 {
            for b in a + 1..n as u32 {
                if r.random_bool(density) {
                    edges.push((a, b, r.random_range(1..=5) as f64 * if r.random_bool(0.3) { 0.5 } else { 1.0 }));
                }
            }
        }
        if !connected(n, &edges) {
            continue;
        }
        graphs += 1;
        let mut w = vec![vec![0.0; n]; n];
        for &(a, b, x) in &edges {
            w[a as usize][b as usize] = x;
            w[b as usize][a as usize] = x;
        }
        let g = AdjacencyGraph::from_edges(
            n,
            edges,
            BuildParams {
                eta: 1.0,
                chunked: false,
                chunk_size: 0,
                inter_chunk_weight: 0.0,
            },
        );
        let p = AttackParams::default();
        let res = louvain_with_restarts(&g, p.louvain_max_iter, p.louvain_tol, p.louvain_restarts);
        let opt = best_q(n, &w);
        let got = q_oracle(n, &w, &res.communities);
        if opt > 0.0 {
            worst_ratio = worst_ratio.min(got / opt);
        }
        if got < 0.999 * opt - 1e-12 {
            below += 1;
        }
        if res.phase_modularity.windows(2).any(|p| p[1] < p[0] - 1e-12) {
            decreasing += 1;
        }
    }
    outcome(
        below == 0 && decreasing == 0,
        format!("{graphs} graphs: {below} below 0.999 x optimum (worst ratio {worst_ratio:.4}), {decreasing} with a decreasing phase"),
    )
}

fn criterion_9() -> Outcome {
    let mut mismatched = 0;
    let mut edges = 0;
    for seed in 0..100u64 {
        let data = gen_synthetic(60 + (seed as usize % 5) * 10, 6, 2 + seed as usize % 3, 0.7, seed).expect("data");
        let views = make_partition(&data, &PartitionSpec::RandomHalf { seed }).expect("views");
        let mut cfg = ProtocolConfig::new(if seed % 2 == 0 { ModelKind::RandomForest } else { ModelKind::XgBoost });
        cfg.seed = seed;
        cfg.max_depth = 4;
        let out = train_federated(&cfg, &views, &data).expect("train");
        let view = AttackerView::from_transcript(&out.transcripts[0]);
        let largest = view.leaves().map(|(_, s)| s.len()).max().unwrap_or(0);
        let eta = if seed % 2 == 0 { 1.0 } else { 0.6 };
        let exact = build_adjacency(&view, eta).expect("exact");
        let chunked = build_adjacency_chunked(&view, eta, (largest + 1).max(2), 100.0).expect("chunked");
        edges += exact.edges.len();
        if exact.edges != chunked.edges {
            mismatched += 1;
        }
    }
    outcome(mismatched == 0, format!("100 transcripts, {edges} edges, {mismatched} mismatched"))
}

fn criterion_10() -> Outcome {
    let eps = 1.0;
    let mut notes = Vec::new();
    let mut pass = true;
    for c in [2usize, 10] {
        let labels: Vec<usize> = (0..100_000).map(|i| i % c).collect();
        let noisy = randomized_response(&labels, eps, c, 10 + c as u64).expect("rr");
        let kept = labels.iter().zip(&noisy.labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        let expected = eps.exp() / (eps.exp() + c as f64 - 1.0);
        pass &= (kept - expected).abs() <= 0.02 && (keep_probability(eps, c) - expected).abs() < 1e-15;

        // RR's output law for true label 0 versus sampled RRWithPrior under a uniform prior.
        let rr_law: Vec<f64> = (0..c)
            .map(|k| if k == 0 { expected } else { (1.0 - expected) / (c as f64 - 1.0) })
            .collect();
        let prior = vec![1.0 / c as f64; c];
        let mut rng = ChaCha8Rng::seed_from_u64(20 + c as u64);
        let mut hist = vec![0usize; c];
        for _ in 0..100_000 {
            hist[rr_with_prior(0, &prior, eps, &mut rng).expect("sample")] += 1;
        }
        let tv: f64 = hist
            .iter()
            .zip(&rr_law)
            .map(|(&h, &p)| (h as f64 / 100_000.0 - p).abs())
            .sum::<f64>()
            / 2.0;
        pass &= tv <= 0.01;
        notes.push(format!("|C|={c}: keep {kept:.4} vs {expected:.4}, TV {tv:.4}"));
    }
    outcome(pass, notes.join("; "))
}

fn criterion_11() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let kp = he_keygen(HeBackend::Paillier, 512, &mut r).expect("keygen");
    let pk = &kp.public;
    let mut failures = 0;
    for i in 0..1000 {
        let a = r.next_u64() >> 1;
        let b = r.next_u64() >> 1;
        let ok = if i % 2 == 0 {
            let c = pk.add(&pk.encrypt(a, &mut r), &pk.encrypt(b, &mut r)).expect("add");
            kp.decrypt(&c).expect("decrypt") == num_bigint::BigUint::from(a) + b
        } else {
            let k = r.next_u32() as u64;
            let c = pk.scalar_mul(&pk.encrypt(a, &mut r), k).expect("mul");
            kp.decrypt(&c).expect("decrypt") == num_bigint::BigUint::from(a) * k
        };
        failures += usize::from(!ok);
    }

    // Shared fixture: identical purity vectors from both backends.
    let labels = [0usize, 1, 2, 0, 0, 1, 2, 2, 1, 0];
    let totals = [4usize, 3, 3];
    let left: Vec<u32> = vec![0, 2, 3, 7];
    let right: Vec<u32> = vec![1, 4, 5, 6, 8, 9];
    let mut purities = Vec::new();
    for backend in [HeBackend::Mock, HeBackend::Paillier] {
        let kp = he_keygen(backend, 512, &mut r).expect("keygen");
        let enc = EncryptedLabels::encrypt(&kp.public, &labels, 3, &mut r);
        let msgs = secure_node_purity(
            &kp.public,
            &enc,
            &[CandidateSpaces {
                left: &left,
                right: &right,
            }],
            true,
        )
        .expect("purity");
        purities.push(decrypt_purity(&kp, &msgs[0], &totals).expect("decrypt"));
    }

    // Same training run under both backends: identical counts and transcripts.
    let data = gen_synthetic(120, 6, 3, 0.6, 5).expect("data");
    let views = make_partition(&data, &PartitionSpec::RandomHalf { seed: 5 }).expect("views");
    let mut runs = Vec::new();
    for backend in [HeBackend::Mock, HeBackend::Paillier] {
        let mut cfg = ProtocolConfig::new(ModelKind::RandomForest);
        cfg.tree_count = 2;
        cfg.max_depth = 3;
        cfg.defense = Defense::IdLmid {
            xi: 0.5,
            he_backend: backend,
            key_bits: 512,
        };
        runs.push(train_federated(&cfg, &views, &data).expect("train"));
    }
    let same_comm = runs[0].comm == runs[1].comm;
    let same_model = runs[0].model.to_json().expect("json") == runs[1].model.to_json().expect("json");
    outcome(
        failures == 0 && purities[0] == purities[1] && same_comm && same_model,
        format!(
            "{failures}/1000 identity failures; purity equal: {}; CommStats equal: {same_comm} ({} ciphertexts); models equal: {same_model}",
            purities[0] == purities[1],
            runs[0].comm.total()
        ),
    )
}

fn criterion_12() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..200);
        let (a, b) = (r.random_range(1..6), r.random_range(1..8));
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..a)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..b)).collect();
        worst = worst.max((v_measure(&truth, &pred).expect("v") - v_shadow(&truth, &pred)).abs());
    }
    let mut auc_mismatch = 0;
    let mut instances = 0;
    while instances < 1000 {
        let classes = if instances % 2 == 0 { 2 } else { 3 };
        let truth: Vec<usize> = (0..20).map(|_| r.random_range(0..classes)).collect();
        if (0..classes).any(|c| !truth.contains(&c)) {
            continue;
        }
        instances += 1;
        let scores: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..classes).map(|_| r.random_range(0..6) as f64 / 5.0).collect())
            .collect();
        let oracle = if classes == 2 {
            auc_pairs(&truth.iter().map(|&y| y == 1).collect::<Vec<_>>(), &scores.iter().map(|s| s[1]).collect::<Vec<_>>())
        } else {
            (0..classes)
                .map(|c| auc_pairs(&truth.iter().map(|&y| y == c).collect::<Vec<_>>(), &scores.iter().map(|s| s[c]).collect::<Vec<_>>()))
                .sum::<f64>()
                / classes as f64
        };
        let got = auc(&truth, &scores, classes).expect("auc");
        if got != oracle {
            auc_mismatch += 1;
        }
        if classes == 2 {
            let pos: Vec<bool> = truth.iter().map(|&y| y == 1).collect();
            let s: Vec<f64> = scores.iter().map(|s| s[1]).collect();
            if auc_binary(&pos, &s).expect("auc") != oracle {
                auc_mismatch += 1;
            }
        }
    }
    outcome(
        worst <= 1e-10 && auc_mismatch == 0,
        format!("v-measure max deviation {worst:.2e}; auc mismatches {auc_mismatch}/1000"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("breast cancer RF leakage ordering", criterion_1),
        ("breast cancer XGBoost leakage", criterion_2),
        ("MI bound soundness", criterion_3),
        ("ID-LMID audit and monotonicity", criterion_4),
        ("ID-LMID versus LP-2ST trade-off", criterion_5),
        ("grafting transcript and utility", criterion_6),
        ("ciphertext rate ordering", criterion_7),
        ("Louvain versus exhaustive optimum", criterion_8),
        ("chunked adjacency equivalence", criterion_9),
        ("label noise mechanism statistics", criterion_10),
        ("Paillier identities and backend parity", criterion_11),
        ("metric oracles", criterion_12),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id == *f || name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "{} {id:<12} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
